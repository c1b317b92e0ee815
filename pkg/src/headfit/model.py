"""Linear morphable head model: parameter decoding and synthetic assets.

The geometry decoder follows the usual blendshape-plus-skinning recipe:

    rest  = template + shape_basis @ beta + expression_basis @ psi
    posed = blend of two rigid joint transforms (global root, jaw chain)

Pose uses 6 axis-angle values (3 global + 3 jaw); the jaw transform is
chained after the global one and both rotate about their rest joint
positions. Appearance is per-vertex albedo: mean + basis @ alpha, clamped
to [0, 1].

Every decode has a hand-written reverse-mode companion (`GeometryTape`)
so the renderer and the fitter can pull exact gradients without an
autodiff framework.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError

PARAM_GROUPS = ("beta", "psi", "theta", "alpha", "cam", "light")
DEFAULT_DIMS = (100, 50, 50)  # (n_beta, n_psi, n_alpha)
N_LANDMARKS = 71
N_FACE_LANDMARKS = 68  # indices 0..67; 68..70 sit on top of the scalp

# Per-unit-coefficient magnitude of the orthonormalized shape/expression
# columns, in mm over the whole (3V)-vector.
BASIS_SCALE = 40.0
ALBEDO_BASIS_SCALE = 0.05


# ---------------------------------------------------------------------------
# domain types


@dataclass
class TriMesh:
    """Triangle mesh in millimeters. `colors`, when present, is V x 3 in [0,1]."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ContractError("TriMesh.vertices must be V x 3")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ContractError("TriMesh.faces must be F x 3")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ContractError("TriMesh.faces contains an out-of-range vertex index")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.vertices.shape:
                raise ContractError("TriMesh.colors must match vertices (V x 3)")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def copy(self) -> "TriMesh":
        return TriMesh(
            self.vertices.copy(),
            self.faces.copy(),
            None if self.colors is None else self.colors.copy(),
        )


@dataclass
class ModelAsset:
    """Morphable head model data. All tensors are float64, indices int64.

    Bases are stored V x 3 x n. `landmark_faces` / `landmark_bary` hold the
    71-entry surface embedding table; `regions` maps names to sorted vertex
    index arrays and must contain "face" and "upper_head".
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    shape_basis: np.ndarray
    expression_basis: np.ndarray
    albedo_mean: np.ndarray
    albedo_basis: np.ndarray
    joints: np.ndarray
    skinning_weights: np.ndarray
    landmark_faces: np.ndarray
    landmark_bary: np.ndarray
    regions: dict[str, np.ndarray]
    pose_corrective_basis: np.ndarray | None = None  # reserved, unused by decode

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def dims(self) -> tuple[int, int, int]:
        return (
            self.shape_basis.shape[2],
            self.expression_basis.shape[2],
            self.albedo_basis.shape[2],
        )

    def shape_matrix(self) -> np.ndarray:
        """Shape basis as a (3V, n_beta) matrix (row = vertex*3 + axis)."""
        return self.shape_basis.reshape(-1, self.shape_basis.shape[2])

    def expression_matrix(self) -> np.ndarray:
        return self.expression_basis.reshape(-1, self.expression_basis.shape[2])

    def albedo_matrix(self) -> np.ndarray:
        return self.albedo_basis.reshape(-1, self.albedo_basis.shape[2])

    def landmark_vertex_ids(self) -> np.ndarray:
        """Vertex indices (71 x 3) of the landmark-carrying faces."""
        return self.faces[self.landmark_faces]


@dataclass
class HeadParams:
    """Per-image parameter vector: shape, expression, pose, albedo, camera, light.

    theta = 3 global + 3 jaw axis-angle values (radians); cam = (s, tx, ty)
    with s > 0 in normalized image units; light = 27 spherical-harmonic
    coefficients laid out channel-major (r0..r8, g0..g8, b0..b8).
    """

    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    cam: np.ndarray
    light: np.ndarray

    def __post_init__(self) -> None:
        for name in PARAM_GROUPS:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64).ravel()
            setattr(self, name, arr)
        if self.theta.shape != (6,):
            raise ContractError("HeadParams.theta must have 6 entries")
        if self.cam.shape != (3,):
            raise ContractError("HeadParams.cam must have 3 entries")
        if self.light.shape != (27,):
            raise ContractError("HeadParams.light must have 27 entries")
        for name in PARAM_GROUPS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ContractError(f"HeadParams.{name} must be finite")
        if self.cam[0] <= 0.0:
            raise ContractError("HeadParams.cam scale must be > 0")

    @classmethod
    def zeros(cls, dims: tuple[int, int, int] = DEFAULT_DIMS, cam_scale: float = 1.0) -> "HeadParams":
        n_beta, n_psi, n_alpha = dims
        return cls(
            beta=np.zeros(n_beta),
            psi=np.zeros(n_psi),
            theta=np.zeros(6),
            alpha=np.zeros(n_alpha),
            cam=np.array([cam_scale, 0.0, 0.0]),
            light=np.zeros(27),
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return (len(self.beta), len(self.psi), len(self.alpha))

    def copy(self) -> "HeadParams":
        return HeadParams(*(getattr(self, g).copy() for g in PARAM_GROUPS))

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, g) for g in PARAM_GROUPS])

    @classmethod
    def from_flat(cls, vec: np.ndarray, dims: tuple[int, int, int]) -> "HeadParams":
        n_beta, n_psi, n_alpha = dims
        sizes = (n_beta, n_psi, 6, n_alpha, 3, 27)
        if vec.shape != (sum(sizes),):
            raise ContractError("flat parameter vector has the wrong length")
        parts = np.split(np.asarray(vec, dtype=np.float64), np.cumsum(sizes)[:-1])
        return cls(*parts)


@dataclass
class ParamGrads:
    """Gradient accumulator with the same group layout as HeadParams."""

    beta: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    alpha: np.ndarray
    cam: np.ndarray
    light: np.ndarray

    @classmethod
    def zeros(cls, dims: tuple[int, int, int]) -> "ParamGrads":
        n_beta, n_psi, n_alpha = dims
        return cls(
            np.zeros(n_beta), np.zeros(n_psi), np.zeros(6),
            np.zeros(n_alpha), np.zeros(3), np.zeros(27),
        )

    def add(self, other: "ParamGrads", scale: float = 1.0) -> "ParamGrads":
        for g in PARAM_GROUPS:
            getattr(self, g).__iadd__(scale * getattr(other, g))
        return self

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, g) for g in PARAM_GROUPS])


def check_dims(params: HeadParams, model: ModelAsset) -> None:
    if params.dims != model.dims:
        raise ContractError(
            f"parameter dims {params.dims} do not match model dims {model.dims}"
        )


# ---------------------------------------------------------------------------
# rotations


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrix from an axis-angle vector (Rodrigues formula)."""
    v = np.asarray(axis_angle, dtype=np.float64)
    angle = float(np.linalg.norm(v))
    K = np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])
    if angle < 1e-12:
        return np.eye(3) + K  # first-order expansion; exact at 0
    a, b = np.sin(angle) / angle, (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + a * K + b * (K @ K)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rodrigues_with_partials(axis_angle: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrix and its three partial derivatives dR/d(axis_angle_i).

    Uses the compact exponential-coordinate derivative
    dR/dv_i = (v_i [v]x + [v x (I - R) e_i]x) / |v|^2 * R, with the
    limit [e_i]x at the identity.
    """
    v = np.asarray(axis_angle, dtype=np.float64)
    R = rodrigues(v)
    sq = float(v @ v)
    partials = np.empty((3, 3, 3))
    eye = np.eye(3)
    if sq < 1e-16:
        for i in range(3):
            partials[i] = _skew(eye[i])
        return R, partials
    Vx = _skew(v)
    ImR = np.eye(3) - R
    for i in range(3):
        w = np.cross(v, ImR[:, i])
        partials[i] = (v[i] * Vx + _skew(w)) @ R / sq
    return R, partials


# ---------------------------------------------------------------------------
# decoding


@dataclass
class GeometryTape:
    """Intermediates of decode_geometry needed for the reverse pass."""

    model: ModelAsset
    rest: np.ndarray       # V x 3 after blendshapes
    mid: np.ndarray        # V x 3 after the jaw transform
    R_glob: np.ndarray
    R_jaw: np.ndarray
    dR_glob: np.ndarray    # 3 x 3 x 3 partials
    dR_jaw: np.ndarray
    posed: np.ndarray


def _decode_rest(params: HeadParams, model: ModelAsset) -> np.ndarray:
    offsets = model.shape_matrix() @ params.beta + model.expression_matrix() @ params.psi
    return model.template_vertices + offsets.reshape(-1, 3)


def decode_geometry_fwd(params: HeadParams, model: ModelAsset) -> tuple[TriMesh, GeometryTape]:
    """Decode and keep the tape for gradient propagation."""
    check_dims(params, model)
    rest = _decode_rest(params, model)
    R_glob, dR_glob = rodrigues_with_partials(params.theta[:3])
    R_jaw, dR_jaw = rodrigues_with_partials(params.theta[3:])
    j_root, j_jaw = model.joints[0], model.joints[1]
    w = model.skinning_weights[:, 1:2]  # jaw weight column
    # deltas via (R - I) so identity rotations reproduce the input exactly
    mid = rest + w * ((rest - j_jaw) @ (R_jaw - np.eye(3)).T)
    posed = mid + (mid - j_root) @ (R_glob - np.eye(3)).T
    tape = GeometryTape(model, rest, mid, R_glob, R_jaw, dR_glob, dR_jaw, posed)
    return TriMesh(posed, model.faces), tape


def decode_geometry(params: HeadParams, model: ModelAsset) -> TriMesh:
    """Posed head mesh for the given parameters (pure function of inputs)."""
    mesh, _ = decode_geometry_fwd(params, model)
    return mesh


def geometry_backward(tape: GeometryTape, d_posed: np.ndarray, grads: ParamGrads) -> None:
    """Accumulate d(loss)/d(beta, psi, theta) given d(loss)/d(posed vertices)."""
    model = tape.model
    j_root, j_jaw = model.joints[0], model.joints[1]
    w = model.skinning_weights[:, 1:2]

    # global rotation: posed = R_g (mid - j0) + j0
    centered = tape.mid - j_root
    for i in range(3):
        grads.theta[i] += float(np.sum(d_posed * (centered @ tape.dR_glob[i].T)))
    d_mid = d_posed @ tape.R_glob

    # jaw blend: mid = rest + w * (R_j (rest - j1) + j1 - rest)
    rest_centered = tape.rest - j_jaw
    d_jaw_moved = d_mid * w
    for i in range(3):
        grads.theta[3 + i] += float(np.sum(d_jaw_moved * (rest_centered @ tape.dR_jaw[i].T)))
    d_rest = d_mid * (1.0 - w) + d_jaw_moved @ tape.R_jaw

    flat = d_rest.reshape(-1)
    grads.beta += model.shape_matrix().T @ flat
    grads.psi += model.expression_matrix().T @ flat


def embed_landmarks(mesh: TriMesh, landmark_faces: np.ndarray, landmark_bary: np.ndarray) -> np.ndarray:
    """Surface points (K x 3) from a (face index, barycentric) table."""
    landmark_faces = np.asarray(landmark_faces, dtype=np.int64)
    if landmark_faces.size and (landmark_faces.min() < 0 or landmark_faces.max() >= len(mesh.faces)):
        raise ContractError("landmark table references a face index outside the mesh")
    tri = mesh.vertices[mesh.faces[landmark_faces]]  # K x 3 x 3
    return np.einsum("kij,ki->kj", tri, np.asarray(landmark_bary, dtype=np.float64))


def landmark_backward(
    model: ModelAsset, d_landmarks: np.ndarray, d_posed: np.ndarray
) -> None:
    """Scatter d(loss)/d(landmark points) into d(loss)/d(posed vertices)."""
    vids = model.landmark_vertex_ids()  # 71 x 3
    contrib = model.landmark_bary[:, :, None] * d_landmarks[:, None, :]  # 71 x 3 x 3
    np.add.at(d_posed, vids.reshape(-1), contrib.reshape(-1, 3))


def decode_albedo(alpha: np.ndarray, model: ModelAsset) -> np.ndarray:
    """Per-vertex reflectance: mean + basis @ alpha, clamped to [0, 1]."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if alpha.shape[0] != model.dims[2]:
        raise ContractError(
            f"alpha has {alpha.shape[0]} entries, model expects {model.dims[2]}"
        )
    raw = model.albedo_mean + (model.albedo_matrix() @ alpha).reshape(-1, 3)
    return np.clip(raw, 0.0, 1.0)


def decode_albedo_fwd(alpha: np.ndarray, model: ModelAsset) -> tuple[np.ndarray, np.ndarray]:
    """Clamped albedo plus the active-gradient mask (1 where unclamped)."""
    alpha = np.asarray(alpha, dtype=np.float64).ravel()
    if alpha.shape[0] != model.dims[2]:
        raise ContractError(
            f"alpha has {alpha.shape[0]} entries, model expects {model.dims[2]}"
        )
    raw = model.albedo_mean + (model.albedo_matrix() @ alpha).reshape(-1, 3)
    # boundary included so zero-initialized params still receive gradient
    mask = ((raw >= 0.0) & (raw <= 1.0)).astype(np.float64)
    return np.clip(raw, 0.0, 1.0), mask


def albedo_backward(model: ModelAsset, mask: np.ndarray, d_albedo: np.ndarray, grads: ParamGrads) -> None:
    grads.alpha += model.albedo_matrix().T @ (d_albedo * mask).reshape(-1)


# ---------------------------------------------------------------------------
# synthetic assets


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere (12 -> 42 -> 162 -> 642 -> ... vertices)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = midpoint.get(key)
            if idx is None:
                p = verts[a] + verts[b]
                verts.append(p / np.linalg.norm(p))
                idx = len(verts) - 1
                midpoint[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def _vertex_adjacency(n_vertices: int, faces: np.ndarray) -> list[np.ndarray]:
    neighbors: list[set[int]] = [set() for _ in range(n_vertices)]
    for a, b, c in faces:
        neighbors[a].update((b, c))
        neighbors[b].update((a, c))
        neighbors[c].update((a, b))
    return [np.array(sorted(s), dtype=np.int64) for s in neighbors]


def _smooth_fields(raw: np.ndarray, neighbors: list[np.ndarray], rounds: int) -> np.ndarray:
    """Graph-Laplacian smoothing of per-vertex fields (V x 3 x n)."""
    out = raw.copy()
    for _ in range(rounds):
        acc = np.empty_like(out)
        for v, nbr in enumerate(neighbors):
            acc[v] = out[nbr].mean(axis=0)
        out = 0.5 * out + 0.5 * acc
    return out


def _rigid_motion_fields(vertices: np.ndarray) -> np.ndarray:
    """Orthonormal basis (3V x 6) of infinitesimal rigid motions."""
    V = len(vertices)
    centered = vertices - vertices.mean(axis=0)
    fields = np.zeros((3 * V, 6))
    for k in range(3):
        t = np.zeros((V, 3))
        t[:, k] = 1.0
        fields[:, k] = t.reshape(-1)
        e = np.zeros(3)
        e[k] = 1.0
        fields[:, 3 + k] = np.cross(np.broadcast_to(e, (V, 3)), centered).reshape(-1)
    q, _ = np.linalg.qr(fields)
    return q


def _ray_face_hit(direction: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> tuple[int, np.ndarray]:
    """First face hit by a ray from the origin (star-shaped meshes only)."""
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(direction, e2)
    det = np.einsum("fi,fi->f", e1, pvec)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tvec = -tri[:, 0]
        u = np.einsum("fi,fi->f", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = np.dot(qvec, direction) * inv
        t = np.einsum("fi,fi->f", e2, qvec) * inv
    eps = 1e-12
    ok = (np.abs(det) > eps) & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > 0)
    if not ok.any():
        raise ContractError("landmark ray missed the template mesh")
    candidates = np.where(ok)[0]
    f = candidates[np.argmin(t[candidates])]
    bary = np.array([1.0 - u[f] - v[f], u[f], v[f]])
    bary = np.clip(bary, 0.0, None)
    return int(f), bary / bary.sum()


def _landmark_directions() -> np.ndarray:
    """71 unit directions: a sunflower patch on the face plus 3 scalp points."""
    dirs = np.empty((N_LANDMARKS, 3))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for k in range(N_FACE_LANDMARKS):
        t = (k + 0.5) / N_FACE_LANDMARKS
        r = np.sqrt(t)
        az = np.deg2rad(52.0) * r * np.cos(k * golden)
        el = np.deg2rad(38.0) * r * np.sin(k * golden) - np.deg2rad(12.0)
        dirs[k] = (np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el))
    for j, az_deg in enumerate((90.0, 210.0, 330.0)):
        az = np.deg2rad(az_deg)
        tilt = np.deg2rad(14.0)
        dirs[N_FACE_LANDMARKS + j] = (
            np.sin(tilt) * np.cos(az),
            np.cos(tilt),
            np.sin(tilt) * np.sin(az),
        )
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def synth_model(
    seed: int,
    v_target: int = 642,
    dims: tuple[int, int, int] = DEFAULT_DIMS,
) -> ModelAsset:
    """Deterministic synthetic head model for tests and demos.

    Subdivided icosphere shaped into a ~180 mm tall head with a nose bump,
    smooth full-rank random bases orthogonalized against rigid motions,
    jaw skinning weights that ramp up over the lower third, 71 landmarks
    (3 on the scalp) and "face"/"upper_head" regions.
    """
    if v_target < 100:
        raise ContractError("synth_model requires v_target >= 100")
    n_beta, n_psi, n_alpha = dims
    sub, n_verts = 0, 12
    while n_verts < v_target:
        sub += 1
        n_verts = 10 * 4**sub + 2
    unit, faces = icosphere(sub)

    # head shaping: ellipsoid radii (x, y, z) = (70, 90, 80) mm, nose bump on +z
    template = unit * np.array([70.0, 90.0, 80.0])
    nose_dir = np.array([0.0, -0.2, 1.0])
    nose_dir /= np.linalg.norm(nose_dir)
    ang = np.arccos(np.clip(unit @ nose_dir, -1.0, 1.0))
    template += (12.0 * np.exp(-((ang / 0.28) ** 2)))[:, None] * unit

    # outward face orientation (star-shaped, so centroid rays decide)
    centroids = template[faces].mean(axis=1)
    normals = np.cross(
        template[faces[:, 1]] - template[faces[:, 0]],
        template[faces[:, 2]] - template[faces[:, 0]],
    )
    flip = np.einsum("fi,fi->f", normals, centroids) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, ::-1]

    areas = 0.5 * np.linalg.norm(np.cross(
        template[faces[:, 1]] - template[faces[:, 0]],
        template[faces[:, 2]] - template[faces[:, 0]],
    ), axis=1)
    if (areas <= 1e-12).any():
        raise ContractError("synthetic template produced a degenerate face")

    rng = np.random.default_rng(seed)
    neighbors = _vertex_adjacency(len(template), faces)

    # geometry bases: smoothed noise, momentum-free, jointly orthonormal
    raw = rng.standard_normal((len(template), 3, n_beta + n_psi))
    smooth = _smooth_fields(raw, neighbors, rounds=10).reshape(-1, n_beta + n_psi)
    rigid = _rigid_motion_fields(template)
    smooth -= rigid @ (rigid.T @ smooth)
    q, _ = np.linalg.qr(smooth)
    geom = BASIS_SCALE * q
    shape_basis = geom[:, :n_beta].reshape(len(template), 3, n_beta)
    expression_basis = geom[:, n_beta:].reshape(len(template), 3, n_psi)

    # appearance: skin-toned mean with smooth variation, smooth basis
    tone = np.array([0.72, 0.57, 0.47])
    mean_noise = _smooth_fields(rng.standard_normal((len(template), 3, 1)), neighbors, 6)[:, :, 0]
    albedo_mean = np.clip(tone + 0.04 * mean_noise, 0.1, 0.9)
    alb_raw = rng.standard_normal((len(template), 3, n_alpha))
    alb = _smooth_fields(alb_raw, neighbors, rounds=8)
    alb_flat = alb.reshape(-1, n_alpha)
    col_rms = np.sqrt((alb_flat**2).mean(axis=0))
    albedo_basis = (alb_flat * (ALBEDO_BASIS_SCALE / col_rms)).reshape(len(template), 3, n_alpha)

    # joints and skinning: root at the origin, jaw low in the head
    joints = np.array([[0.0, 0.0, 0.0], [0.0, -40.0, 30.0]])
    y_norm = template[:, 1] / 90.0
    jaw_w = 0.85 * _smoothstep((-0.15 - y_norm) / 0.55)
    skinning = np.stack([1.0 - jaw_w, jaw_w], axis=1)

    lmk_faces = np.empty(N_LANDMARKS, dtype=np.int64)
    lmk_bary = np.empty((N_LANDMARKS, 3))
    for k, d in enumerate(_landmark_directions()):
        lmk_faces[k], lmk_bary[k] = _ray_face_hit(d, template, faces)

    face_axis = np.array([0.0, -0.15, 1.0])
    face_axis /= np.linalg.norm(face_axis)
    regions = {
        "face": np.where(unit @ face_axis > np.cos(np.deg2rad(55.0)))[0].astype(np.int64),
        "upper_head": np.where(unit[:, 1] > np.cos(np.deg2rad(40.0)))[0].astype(np.int64),
    }

    asset = ModelAsset(
        template_vertices=template,
        faces=faces,
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        albedo_mean=albedo_mean,
        albedo_basis=albedo_basis,
        joints=joints,
        skinning_weights=skinning,
        landmark_faces=lmk_faces,
        landmark_bary=lmk_bary,
        regions=regions,
    )
    validate_asset(asset)
    return asset


def validate_asset(asset: ModelAsset) -> None:
    """Raise ContractError on any violated ModelAsset invariant."""
    V = asset.n_vertices
    if asset.faces.min() < 0 or asset.faces.max() >= V:
        raise ContractError("asset faces reference out-of-range vertices")
    if asset.template_vertices.shape != (V, 3):
        raise ContractError("template_vertices must be V x 3")
    for name in ("shape_basis", "expression_basis", "albedo_basis"):
        b = getattr(asset, name)
        if b.shape[:2] != (V, 3):
            raise ContractError(f"{name} must be V x 3 x n")
    if asset.albedo_mean.shape != (V, 3):
        raise ContractError("albedo_mean must be V x 3")
    if asset.albedo_mean.min() < 0.0 or asset.albedo_mean.max() > 1.0:
        raise ContractError("albedo_mean must lie in [0, 1]")
    if asset.joints.shape[1] != 3 or len(asset.joints) != 2:
        raise ContractError("asset must carry exactly 2 joints (root, jaw)")
    if asset.skinning_weights.shape != (V, 2):
        raise ContractError("skinning_weights must be V x J")
    if np.abs(asset.skinning_weights.sum(axis=1) - 1.0).max() > 1e-9:
        raise ContractError("skinning weight rows must sum to 1 (tol 1e-9)")
    if asset.skinning_weights.min() < 0.0:
        raise ContractError("skinning weights must be nonnegative")
    if asset.landmark_faces.shape != (N_LANDMARKS,) or asset.landmark_bary.shape != (N_LANDMARKS, 3):
        raise ContractError("landmark table must have 71 (face, barycentric) entries")
    if asset.landmark_faces.min() < 0 or asset.landmark_faces.max() >= len(asset.faces):
        raise ContractError("landmark table references out-of-range faces")
    if asset.landmark_bary.min() < -1e-12:
        raise ContractError("barycentric coordinates must be nonnegative")
    if np.abs(asset.landmark_bary.sum(axis=1) - 1.0).max() > 1e-9:
        raise ContractError("barycentric coordinates must sum to 1 (tol 1e-9)")
    for name in ("face", "upper_head"):
        if name not in asset.regions:
            raise ContractError(f'asset regions must include "{name}"')
    for name, idx in asset.regions.items():
        if len(idx) == 0:
            raise ContractError(f'region "{name}" is empty')
        if idx.min() < 0 or idx.max() >= V:
            raise ContractError(f'region "{name}" references out-of-range vertices')
