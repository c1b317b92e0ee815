"""Weak-perspective camera, spherical-harmonic shading, soft rasterization.

Conventions (shared with the kernels):
  - normalized image coordinates in [-1, 1], y up; pixel (i, j) has its
    center at x = -1 + (2j+1)/W, y = 1 - (2i+1)/H (row 0 on top);
  - the camera looks along -z, so vertices with larger z are closer;
    the depth map stores -z in mm (+inf for background);
  - projection is p = s * (X, Y) + (tx, ty), independent of Z;
  - the SH basis is the unnormalized 9-term set
    (1, ny, nz, nx, nx*ny, ny*nz, 3nz^2-1, nx*nz, nx^2-ny^2) and the 27
    light coefficients are laid out channel-major (r0..r8, g0..g8, b0..b8).

`render_head` runs the whole decode-project-shade-rasterize pipeline and
keeps a tape so `render_backward` can push pixel/landmark gradients back
onto every HeadParams entry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ContractError
from .model import (
    HeadParams,
    ModelAsset,
    ParamGrads,
    TriMesh,
    GeometryTape,
    albedo_backward,
    decode_albedo_fwd,
    decode_geometry_fwd,
    embed_landmarks,
    geometry_backward,
    landmark_backward,
)

# Candidate windows extend pad_sigmas * sigma beyond each projected
# triangle. The default truncates the sigmoid tail at sigmoid(-26) ~ 5e-12,
# below the finite-difference tolerance of the gradient suite; fitting may
# narrow the band for speed (the tail is ~3e-4 at 8 sigmas).
DEFAULT_PAD_SIGMAS = 26.0


# ---------------------------------------------------------------------------
# raster data types


@dataclass
class ImagePlane:
    """H x W x 3 image with values in [0, 1]."""

    rgb: np.ndarray

    def __post_init__(self) -> None:
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ContractError("ImagePlane.rgb must be H x W x 3")
        if not np.all(np.isfinite(self.rgb)):
            raise ContractError("ImagePlane values must be finite")
        if self.rgb.min() < 0.0 or self.rgb.max() > 1.0:
            raise ContractError("ImagePlane values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class SoftMask:
    """H x W mask with values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ContractError("SoftMask.values must be H x W")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("SoftMask values must be finite")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ContractError("SoftMask values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class RenderOut:
    color: ImagePlane
    silhouette: SoftMask
    depth: np.ndarray
    landmarks2d: np.ndarray | None = None


# ---------------------------------------------------------------------------
# camera


def project(points: np.ndarray, cam: np.ndarray) -> np.ndarray:
    """Weak-perspective projection p = s * (X, Y) + (tx, ty)."""
    points = np.asarray(points, dtype=np.float64)
    cam = np.asarray(cam, dtype=np.float64).ravel()
    if not np.all(np.isfinite(points)):
        raise ContractError("project requires finite input points")
    if cam[0] <= 0.0:
        raise ContractError("camera scale must be > 0")
    return cam[0] * points[:, :2] + cam[1:3]


# ---------------------------------------------------------------------------
# normals


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Unit vertex normals by area-weighted face-normal accumulation."""
    raw = _raw_normals(mesh.vertices, mesh.faces)
    norms = np.linalg.norm(raw, axis=1)
    if (norms == 0.0).any():
        bad = int(np.nonzero(norms == 0.0)[0][0])
        raise ContractError(f"vertex {bad} has a degenerate (zero) normal")
    return raw / norms[:, None]


def _raw_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a = vertices[faces[:, 0]]
    cross = np.cross(vertices[faces[:, 1]] - a, vertices[faces[:, 2]] - a)
    raw = np.zeros_like(vertices)
    np.add.at(raw, faces[:, 0], cross)
    np.add.at(raw, faces[:, 1], cross)
    np.add.at(raw, faces[:, 2], cross)
    return raw


def _normals_backward(
    vertices: np.ndarray, faces: np.ndarray, raw: np.ndarray, unit: np.ndarray, d_unit: np.ndarray
) -> np.ndarray:
    """d(loss)/d(vertices) from d(loss)/d(unit normals)."""
    norms = np.linalg.norm(raw, axis=1)[:, None]
    d_raw = (d_unit - unit * np.sum(unit * d_unit, axis=1, keepdims=True)) / norms
    # raw accumulates one cross product per incident face
    d_cross = d_raw[faces[:, 0]] + d_raw[faces[:, 1]] + d_raw[faces[:, 2]]
    a = vertices[faces[:, 0]]
    u = vertices[faces[:, 1]] - a
    w = vertices[faces[:, 2]] - a
    du = np.cross(w, d_cross)
    dw = np.cross(d_cross, u)
    d_verts = np.zeros_like(vertices)
    np.add.at(d_verts, faces[:, 0], -du - dw)
    np.add.at(d_verts, faces[:, 1], du)
    np.add.at(d_verts, faces[:, 2], dw)
    return d_verts


# ---------------------------------------------------------------------------
# spherical-harmonic shading


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """9-term SH basis evaluated at unit normals; returns V x 9."""
    nx, ny, nz = normals[:, 0], normals[:, 1], normals[:, 2]
    return np.stack(
        [
            np.ones_like(nx),
            ny,
            nz,
            nx,
            nx * ny,
            ny * nz,
            3.0 * nz * nz - 1.0,
            nx * nz,
            nx * nx - ny * ny,
        ],
        axis=1,
    )


def _sh_basis_grad(normals: np.ndarray) -> np.ndarray:
    """dH_k/dn as a V x 9 x 3 tensor."""
    V = len(normals)
    nx, ny, nz = normals[:, 0], normals[:, 1], normals[:, 2]
    g = np.zeros((V, 9, 3))
    g[:, 1, 1] = 1.0
    g[:, 2, 2] = 1.0
    g[:, 3, 0] = 1.0
    g[:, 4, 0] = ny
    g[:, 4, 1] = nx
    g[:, 5, 1] = nz
    g[:, 5, 2] = ny
    g[:, 6, 2] = 6.0 * nz
    g[:, 7, 0] = nz
    g[:, 7, 2] = nx
    g[:, 8, 0] = 2.0 * nx
    g[:, 8, 1] = -2.0 * ny
    return g


def shade_sh(albedo: np.ndarray, normals: np.ndarray, light: np.ndarray) -> np.ndarray:
    """Per-vertex radiance albedo * SH(light, normal), clamped to [0, 1]."""
    radiance, _ = shade_sh_fwd(albedo, normals, light)
    return radiance


def shade_sh_fwd(
    albedo: np.ndarray, normals: np.ndarray, light: np.ndarray
) -> tuple[np.ndarray, dict]:
    albedo = np.asarray(albedo, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    light = np.asarray(light, dtype=np.float64).ravel()
    if light.shape != (27,):
        raise ContractError("light must have 27 entries (9 SH coefficients x RGB)")
    lens = np.linalg.norm(normals, axis=1)
    if np.abs(lens - 1.0).max() > 1e-6:
        raise ContractError("shade_sh requires unit normals (tol 1e-6)")
    H = sh_basis(normals)  # V x 9
    L = light.reshape(3, 9)
    irradiance = H @ L.T  # V x 3
    raw = albedo * irradiance
    # boundary included so zero-initialized lights still receive gradient
    mask = ((raw >= 0.0) & (raw <= 1.0)).astype(np.float64)
    tape = {"H": H, "L": L, "albedo": albedo, "normals": normals,
            "irradiance": irradiance, "mask": mask}
    return np.clip(raw, 0.0, 1.0), tape


def shade_backward(
    tape: dict, d_radiance: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_albedo, d_light(27), d_normals)."""
    dr = d_radiance * tape["mask"]
    d_albedo = dr * tape["irradiance"]
    d_irr = dr * tape["albedo"]  # V x 3
    d_L = d_irr.T @ tape["H"]  # 3 x 9
    dH = d_irr @ tape["L"]  # V x 9
    d_normals = np.einsum("vk,vki->vi", dH, _sh_basis_grad(tape["normals"]))
    return d_albedo, d_L.reshape(-1), d_normals


# ---------------------------------------------------------------------------
# rasterization


def rasterize_soft(
    mesh: TriMesh,
    cam: np.ndarray,
    shaded_colors: np.ndarray | None,
    size: tuple[int, int] | int,
    sigma: float,
    landmarks3d: np.ndarray | None = None,
    pad_sigmas: float = DEFAULT_PAD_SIGMAS,
) -> RenderOut:
    """Differentiable render of a mesh under a weak-perspective camera.

    `size` is (height, width) or a single square dimension; `sigma` is the
    silhouette softness in normalized image units.
    """
    height, width = (size, size) if isinstance(size, int) else size
    if height < 8 or width < 8:
        raise ContractError("render size must be at least 8 x 8")
    if sigma <= 0.0:
        raise ContractError("rasterizer sigma must be > 0")
    if len(mesh.faces) == 0:
        return RenderOut(
            color=ImagePlane(np.zeros((height, width, 3))),
            silhouette=SoftMask(np.zeros((height, width))),
            depth=np.full((height, width), np.inf),
        )
    xy = project(mesh.vertices, cam)
    z = np.ascontiguousarray(mesh.vertices[:, 2])
    sil, color, depth, _, _ = _kernels.raster_forward(
        np.ascontiguousarray(xy), z, mesh.faces, shaded_colors,
        height, width, float(sigma), float(pad_sigmas) * float(sigma),
    )
    lmk2d = None if landmarks3d is None else project(landmarks3d, cam)
    return RenderOut(ImagePlane(color), SoftMask(sil), depth, lmk2d)


# ---------------------------------------------------------------------------
# full differentiable pipeline


@dataclass
class RenderTape:
    model: ModelAsset
    params: HeadParams
    geom: GeometryTape
    posed: np.ndarray
    xy: np.ndarray
    lmk3d: np.ndarray | None
    with_color: bool
    raw_normals: np.ndarray | None
    unit_normals: np.ndarray | None
    albedo_mask: np.ndarray | None
    shade_tape: dict | None
    radiance: np.ndarray | None
    height: int
    width: int
    sigma: float
    pad_sigmas: float
    sil: np.ndarray
    winner: np.ndarray
    bary: np.ndarray


def render_head(
    params: HeadParams,
    model: ModelAsset,
    size: tuple[int, int] | int,
    sigma: float,
    with_color: bool = True,
    with_landmarks: bool = True,
    pad_sigmas: float = DEFAULT_PAD_SIGMAS,
) -> tuple[RenderOut, RenderTape]:
    """Decode, shade and rasterize a head; returns the image and its tape."""
    height, width = (size, size) if isinstance(size, int) else size
    if height < 8 or width < 8:
        raise ContractError("render size must be at least 8 x 8")
    if sigma <= 0.0:
        raise ContractError("rasterizer sigma must be > 0")
    mesh, geom_tape = decode_geometry_fwd(params, model)
    posed = mesh.vertices
    xy = np.ascontiguousarray(project(posed, params.cam))
    z = np.ascontiguousarray(posed[:, 2])

    raw = unit = albedo_mask = shade_tape = radiance = None
    if with_color:
        raw = _raw_normals(posed, model.faces)
        norms = np.linalg.norm(raw, axis=1)
        if (norms == 0.0).any():
            raise ContractError("posed mesh has a vertex with a degenerate normal")
        unit = raw / norms[:, None]
        albedo, albedo_mask = decode_albedo_fwd(params.alpha, model)
        radiance, shade_tape = shade_sh_fwd(albedo, unit, params.light)

    sil, color, depth, winner, bary = _kernels.raster_forward(
        xy, z, model.faces, radiance, height, width,
        float(sigma), float(pad_sigmas) * float(sigma),
    )

    lmk3d = lmk2d = None
    if with_landmarks:
        lmk3d = embed_landmarks(mesh, model.landmark_faces, model.landmark_bary)
        lmk2d = project(lmk3d, params.cam)

    out = RenderOut(ImagePlane(color), SoftMask(sil), depth, lmk2d)
    tape = RenderTape(
        model=model, params=params, geom=geom_tape, posed=posed, xy=xy,
        lmk3d=lmk3d, with_color=with_color, raw_normals=raw,
        unit_normals=unit, albedo_mask=albedo_mask, shade_tape=shade_tape,
        radiance=radiance, height=height, width=width, sigma=float(sigma),
        pad_sigmas=float(pad_sigmas), sil=sil, winner=winner, bary=bary,
    )
    return out, tape


def render_backward(
    tape: RenderTape,
    d_color: np.ndarray | None = None,
    d_sil: np.ndarray | None = None,
    d_landmarks2d: np.ndarray | None = None,
    grads: ParamGrads | None = None,
) -> ParamGrads:
    """Push gradients w.r.t. pixels/landmarks back to every parameter."""
    model = tape.model
    if grads is None:
        grads = ParamGrads.zeros(model.dims)
    s = tape.params.cam[0]
    d_posed = np.zeros_like(tape.posed)

    if d_color is not None or d_sil is not None:
        z = np.ascontiguousarray(tape.posed[:, 2])
        d_xy, d_radiance = _kernels.raster_backward(
            tape.xy, z, model.faces, tape.radiance,
            tape.height, tape.width, tape.sigma, tape.pad_sigmas * tape.sigma,
            tape.sil, tape.winner, tape.bary, d_sil, d_color,
        )
        d_posed[:, :2] += s * d_xy
        grads.cam[0] += float(np.sum(d_xy * tape.posed[:, :2]))
        grads.cam[1] += float(np.sum(d_xy[:, 0]))
        grads.cam[2] += float(np.sum(d_xy[:, 1]))
        if tape.with_color and d_color is not None:
            d_albedo, d_light, d_normals = shade_backward(tape.shade_tape, d_radiance)
            grads.light += d_light
            albedo_backward(model, tape.albedo_mask, d_albedo, grads)
            d_posed += _normals_backward(
                tape.posed, model.faces, tape.raw_normals, tape.unit_normals, d_normals
            )

    if d_landmarks2d is not None:
        if tape.lmk3d is None:
            raise ContractError("render was taken without landmarks")
        d_lmk3d = np.zeros((len(tape.lmk3d), 3))
        d_lmk3d[:, :2] = s * d_landmarks2d
        grads.cam[0] += float(np.sum(d_landmarks2d * tape.lmk3d[:, :2]))
        grads.cam[1] += float(np.sum(d_landmarks2d[:, 0]))
        grads.cam[2] += float(np.sum(d_landmarks2d[:, 1]))
        landmark_backward(model, d_lmk3d, d_posed)

    geometry_backward(tape.geom, d_posed, grads)
    return grads
