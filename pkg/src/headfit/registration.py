"""Mesh benchmarking: rigid alignment, scan-to-mesh distances, statistics,
and the ground-truth cleanup pipeline (blendshape refit + displacement
transfer).

Distances are exact closest-point-on-triangle queries; the accelerated
spatial index in the compiled kernel is contractually identical to the
exhaustive scan. All lengths are millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ContractError
from .model import HeadParams, ModelAsset, TriMesh

CURVE_SAMPLES = 100


@dataclass
class RigidTransform:
    """x -> scale * rotation @ x + translation (scale only in similarity mode)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float | None = None

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).ravel()
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ContractError("RigidTransform needs a 3x3 rotation and 3-vector")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-9:
            raise ContractError("rotation must have determinant +1 (tol 1e-9)")
        if self.scale is not None and self.scale <= 0.0:
            raise ContractError("similarity scale must be > 0")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        s = 1.0 if self.scale is None else self.scale
        return s * (np.asarray(points, dtype=np.float64) @ self.rotation.T) + self.translation


@dataclass
class EvalReport:
    """Per-scan distances with summary statistics and a cumulative curve."""

    distances: np.ndarray
    median_mm: float
    mean_mm: float
    std_mm: float
    curve_thresholds: np.ndarray
    curve_fractions: np.ndarray
    protocol: str
    alignment: str
    mean_square_mm2: float | None = None
    metadata: dict = field(default_factory=dict)

    def validate(self) -> None:
        med, mean, std, _, _ = _stats(self.distances)
        if (
            abs(med - self.median_mm) > 1e-12
            or abs(mean - self.mean_mm) > 1e-12
            or abs(std - self.std_mm) > 1e-12
        ):
            raise ContractError("EvalReport statistics do not match its distances")
        if self.distances.min() < 0.0:
            raise ContractError("distances must be nonnegative")


# ---------------------------------------------------------------------------
# alignment


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = False) -> RigidTransform:
    """Least-squares rigid (or similarity) alignment of src onto dst.

    Closed-form solution over the cross-covariance SVD; requires at least
    3 non-degenerate points (covariance rank >= 2).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ContractError("umeyama requires matching N x 3 point sets")
    if len(src) < 3:
        raise ContractError("umeyama requires at least 3 points")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, s, vt = np.linalg.svd(cov)
    if np.sum(s > 1e-12 * max(s[0], 1e-300)) < 2:
        raise ContractError("degenerate configuration: covariance rank < 2")
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    flip = np.diag([1.0, 1.0, d])
    rotation = u @ flip @ vt
    if with_scale:
        var_s = float(np.sum(xs * xs)) / len(src)
        scale = float(np.trace(np.diag(s) @ flip)) / var_s
        if scale <= 0.0:
            raise ContractError("degenerate configuration: nonpositive scale")
    else:
        scale = None
    s_eff = 1.0 if scale is None else scale
    translation = mu_d - s_eff * (rotation @ mu_s)
    return RigidTransform(rotation, translation, scale)


def _log_rotation(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix."""
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(c))
    if angle < 1e-9:
        return vee
    return (angle / np.sin(angle)) * vee


def _closest_to(transform: RigidTransform, scan: np.ndarray, pred: TriMesh):
    s_eff = 1.0 if transform.scale is None else transform.scale
    back = (scan - transform.translation) @ transform.rotation / s_eff
    d, closest, face_ids = _kernels.surface_closest(
        np.ascontiguousarray(back), pred.vertices, pred.faces
    )
    # d is measured in the pred frame; the objective lives in the scan frame
    return float(np.sum((s_eff * d) ** 2)), closest, face_ids


def icp_refine(
    pred: TriMesh,
    scan_points: np.ndarray,
    init: RigidTransform | None = None,
    iters: int = 30,
    with_scale: bool = False,
) -> RigidTransform:
    """Refine an alignment of `pred` onto `scan_points` by exact-closest-point
    ICP: alternate point-to-triangle correspondence with umeyama_align.

    Plain alternation contracts very slowly on near-symmetric heads
    (tangential sliding), so the fixed-point sequence is Anderson-
    accelerated on its twist parameterization; an accelerated transform is
    accepted only when its true objective beats the plain step, keeping
    the objective non-increasing per iteration.
    """
    from .model import rodrigues

    scan_points = np.asarray(scan_points, dtype=np.float64)
    if scan_points.size == 0:
        raise ContractError("icp requires a non-empty scan")
    transform = init or RigidTransform.identity()
    if iters == 0:
        return transform

    def to_vec(t: RigidTransform) -> np.ndarray:
        parts = [_log_rotation(t.rotation), t.translation]
        if with_scale:
            parts.append([np.log(t.scale if t.scale else 1.0)])
        return np.concatenate(parts)

    def from_vec(v: np.ndarray) -> RigidTransform:
        scale = float(np.exp(v[6])) if with_scale else None
        return RigidTransform(rodrigues(v[:3]), v[3:6].copy(), scale)

    fn = np.cross(
        pred.vertices[pred.faces[:, 1]] - pred.vertices[pred.faces[:, 0]],
        pred.vertices[pred.faces[:, 2]] - pred.vertices[pred.faces[:, 0]],
    )
    fn_len = np.linalg.norm(fn, axis=1, keepdims=True)
    face_normals = np.divide(fn, fn_len, out=np.zeros_like(fn), where=fn_len > 0)

    def g_step(t: RigidTransform):
        """One correspondence + alignment sweep; returns the new transform,
        an upper bound on its objective, and the correspondence data."""
        _, closest, face_ids = _closest_to(t, scan_points, pred)
        new = umeyama_align(closest, scan_points, with_scale=with_scale)
        s_new = 1.0 if new.scale is None else new.scale
        bound = float(
            np.sum((s_new * (closest @ new.rotation.T) + new.translation - scan_points) ** 2)
        )
        return new, bound, closest, face_ids

    def point_to_plane(t: RigidTransform, closest: np.ndarray, face_ids: np.ndarray):
        """Linearized normal-distance step from the current correspondences;
        converges fast where point-to-point slides tangentially."""
        s_eff = 1.0 if t.scale is None else t.scale
        p = s_eff * (closest @ t.rotation.T) + t.translation
        n = face_normals[face_ids] @ t.rotation.T
        r = np.einsum("ij,ij->i", scan_points - p, n)
        A = np.concatenate([np.cross(p, n), n], axis=1)
        twist, *_ = np.linalg.lstsq(A, r, rcond=None)
        if not np.all(np.isfinite(twist)):
            return None
        dR = rodrigues(twist[:3])
        return RigidTransform(dR @ t.rotation, dR @ t.translation + twist[3:], t.scale)

    memory = 4
    hist_g: list[np.ndarray] = []
    hist_f: list[np.ndarray] = []
    x = to_vec(transform)
    for _ in range(iters):
        current = from_vec(x)
        plain, bound, closest, face_ids = g_step(current)
        g_vec = to_vec(plain)
        f = g_vec - x
        hist_g.append(g_vec)
        hist_f.append(f)
        if len(hist_g) > memory + 1:
            hist_g.pop(0)
            hist_f.pop(0)
        x_next, best_obj = g_vec, bound
        pp = point_to_plane(current, closest, face_ids)
        if pp is not None:
            obj_pp, _, _ = _closest_to(pp, scan_points, pred)
            if obj_pp < best_obj:
                x_next, best_obj = to_vec(pp), obj_pp
        if len(hist_f) >= 2:
            dF = np.stack([hist_f[i + 1] - hist_f[i] for i in range(len(hist_f) - 1)], axis=1)
            dG = np.stack([hist_g[i + 1] - hist_g[i] for i in range(len(hist_g) - 1)], axis=1)
            theta, *_ = np.linalg.lstsq(dF, f, rcond=None)
            candidate = g_vec - dG @ theta
            if np.all(np.isfinite(candidate)):
                obj_acc, _, _ = _closest_to(from_vec(candidate), scan_points, pred)
                if obj_acc < best_obj:
                    x_next, best_obj = candidate, obj_acc
        x = x_next
    return from_vec(x)


# ---------------------------------------------------------------------------
# distances and statistics


def point_to_surface(scan_points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Exact Euclidean distance from each point to the mesh surface."""
    scan_points = np.asarray(scan_points, dtype=np.float64)
    if scan_points.size == 0 or len(mesh.faces) == 0:
        raise ContractError("point_to_surface requires non-empty inputs")
    dists, _, _ = _kernels.surface_closest(
        np.ascontiguousarray(scan_points), mesh.vertices, mesh.faces
    )
    return dists


def point_to_surface_exhaustive(scan_points: np.ndarray, mesh: TriMesh) -> np.ndarray:
    """Reference implementation scanning every triangle."""
    scan_points = np.asarray(scan_points, dtype=np.float64)
    if scan_points.size == 0 or len(mesh.faces) == 0:
        raise ContractError("point_to_surface requires non-empty inputs")
    dists, _, _ = _kernels.surface_closest_brute(
        np.ascontiguousarray(scan_points), mesh.vertices, mesh.faces
    )
    return dists


def _stats(distances: np.ndarray):
    d = np.asarray(distances, dtype=np.float64).ravel()
    if d.size == 0:
        raise ContractError("error statistics require a non-empty distance list")
    median = float(np.median(d))  # midpoint convention for even N
    mean = float(np.mean(d))
    std = float(np.sqrt(np.mean((d - mean) ** 2)))  # population convention
    top = float(d.max())
    thresholds = np.linspace(0.0, top, CURVE_SAMPLES)
    fractions = np.array([float(np.mean(d <= t)) for t in thresholds])
    return median, mean, std, thresholds, fractions


def error_stats(distances: np.ndarray) -> tuple[float, float, float, np.ndarray, np.ndarray]:
    """(median, mean, population std) plus the cumulative-error curve."""
    return _stats(distances)


def evaluate_to_mesh(
    scan_points: np.ndarray,
    pred: TriMesh,
    alignment: str = "none",
    protocol: str = "now-style",
    metadata: dict | None = None,
) -> EvalReport:
    """Scan-to-mesh distances wrapped into an EvalReport."""
    dists = point_to_surface(scan_points, pred)
    median, mean, std, thr, frac = _stats(dists)
    report = EvalReport(
        distances=dists,
        median_mm=median,
        mean_mm=mean,
        std_mm=std,
        curve_thresholds=thr,
        curve_fractions=frac,
        protocol=protocol,
        alignment=alignment,
        metadata=metadata or {},
    )
    report.validate()
    return report


def region_error(
    pred: TriMesh,
    gt: TriMesh,
    region: np.ndarray,
    align: bool = True,
) -> EvalReport:
    """Per-vertex distances over a vertex-index region after rigid alignment.

    Meshes must share topology; the report carries the region's mean
    square error alongside the usual statistics.
    """
    if pred.vertices.shape != gt.vertices.shape or not np.array_equal(pred.faces, gt.faces):
        raise ContractError("region error requires meshes of identical topology")
    region = np.asarray(region, dtype=np.int64).ravel()
    if region.size == 0:
        raise ContractError("region is empty")
    if region.min() < 0 or region.max() >= len(pred.vertices):
        raise ContractError("region references out-of-range vertices")
    verts = pred.vertices
    if align:
        transform = umeyama_align(pred.vertices, gt.vertices, with_scale=False)
        verts = transform.apply(pred.vertices)
    diffs = verts[region] - gt.vertices[region]
    dists = np.linalg.norm(diffs, axis=1)
    median, mean, std, thr, frac = _stats(dists)
    report = EvalReport(
        distances=dists,
        median_mm=median,
        mean_mm=mean,
        std_mm=std,
        curve_thresholds=thr,
        curve_fractions=frac,
        protocol="fullhead-region",
        alignment="umeyama" if align else "none",
        mean_square_mm2=float(np.mean(dists**2)),
    )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# ground-truth cleanup: refit and displacement transfer


def refit_model_to_mesh(
    target: TriMesh,
    model: ModelAsset,
    ridge: float = 0.0,
    align: bool = True,
) -> HeadParams:
    """Recover pose-free (beta, psi) for a mesh in model topology.

    The target is rigidly pre-aligned to the template (Umeyama over all
    vertices), then ridge-regularized linear least squares solves for the
    blendshape coefficients; larger `ridge` means a looser, smoother fit.
    """
    if target.vertices.shape != model.template_vertices.shape or not np.array_equal(
        target.faces, model.faces
    ):
        raise ContractError("refit requires a mesh in the model's topology")
    if ridge < 0.0:
        raise ContractError("ridge weight must be >= 0")
    verts = target.vertices
    if align:
        transform = umeyama_align(target.vertices, model.template_vertices, with_scale=False)
        verts = transform.apply(target.vertices)
    residual = (verts - model.template_vertices).reshape(-1)
    basis = np.concatenate([model.shape_matrix(), model.expression_matrix()], axis=1)
    n = basis.shape[1]
    gram = basis.T @ basis + ridge * np.eye(n)
    rhs = basis.T @ residual
    try:
        coeffs = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise ContractError(
            "singular normal equations: the basis is rank-deficient, use ridge > 0"
        ) from exc
    if not np.all(np.isfinite(coeffs)):
        raise ContractError(
            "singular normal equations: the basis is rank-deficient, use ridge > 0"
        )
    n_beta = model.dims[0]
    params = HeadParams.zeros(model.dims)
    params.beta = coeffs[:n_beta]
    params.psi = coeffs[n_beta:]
    return params


def displacement_transfer(
    refit_neutral: TriMesh,
    manual_neutral: TriMesh,
    refit_expr: TriMesh,
) -> TriMesh:
    """Carry a manual per-vertex edit from the neutral fit onto another fit.

    The edit field d = manual_neutral - refit_neutral is expressed in the
    neutral frame and mapped through the rigid alignment between the
    neutral and expression fits before being added.
    """
    shapes = {refit_neutral.vertices.shape, manual_neutral.vertices.shape, refit_expr.vertices.shape}
    if len(shapes) != 1 or not (
        np.array_equal(refit_neutral.faces, manual_neutral.faces)
        and np.array_equal(refit_neutral.faces, refit_expr.faces)
    ):
        raise ContractError("displacement transfer requires identical topologies")
    transform = umeyama_align(refit_neutral.vertices, refit_expr.vertices, with_scale=False)
    displacement = manual_neutral.vertices - refit_neutral.vertices
    moved = refit_expr.vertices + displacement @ transform.rotation.T
    return TriMesh(moved, refit_expr.faces.copy())
