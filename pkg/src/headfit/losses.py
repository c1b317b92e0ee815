"""Every loss term of the fitting objective and the inpainting objective.

All losses are plain scalar functions of numpy arrays; the ``*_grad``
variants additionally return analytic gradients w.r.t. the continuous
inputs (subgradient 0 at L1 kinks). Reductions run in row-major order so
single-threaded results are reproducible bit for bit.

The dice loss uses the squared-sum denominator

    dice(A, B) = 1 - (2 * sum(A*B) + eps) / (sum(A^2) + sum(B^2) + eps)

which is symmetric, lies in [0, 1), and is exactly 0 for A == B even for
soft masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .model import PARAM_GROUPS, HeadParams, ParamGrads
from .render import ImagePlane, SoftMask

N_LANDMARKS = 71


# ---------------------------------------------------------------------------
# domain types


@dataclass
class Landmarks2D:
    """71 image-plane landmarks in normalized [-1, 1] coordinates."""

    points: np.ndarray
    weights: np.ndarray | None = None
    visible: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.shape != (N_LANDMARKS, 2):
            raise ContractError("Landmarks2D.points must be 71 x 2")
        if self.weights is None:
            self.weights = np.ones(N_LANDMARKS)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64).ravel()
        if self.weights.shape != (N_LANDMARKS,):
            raise ContractError("Landmarks2D.weights must have 71 entries")
        if not np.all(np.isfinite(self.weights)) or self.weights.min() < 0.0:
            raise ContractError("landmark weights must be finite and >= 0")
        if self.visible is None:
            self.visible = np.ones(N_LANDMARKS, dtype=bool)
        self.visible = np.ascontiguousarray(self.visible, dtype=bool).ravel()
        if self.visible.shape != (N_LANDMARKS,):
            raise ContractError("Landmarks2D.visible must have 71 entries")


@dataclass
class EmbeddingVector:
    vector: np.ndarray
    provider_id: str = ""

    def __post_init__(self) -> None:
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float64).ravel()


@dataclass
class LossWeights:
    """Term weights of the full objective plus the inpainting terms.

    The paper never states its term weights; these defaults are reported
    in run metadata, never asserted as the paper's values. `dice_eps`
    None means 1e-6 per pixel of the render, resolved at fit time.
    """

    landmark: float = 1.0
    photometric: float = 1.0
    identity: float = 0.2
    scale: float = 0.0
    dice: float = 1.0
    encoder: float = 0.0
    regularization: float = 1e-4
    shape_consistency: float = 1.0
    hole: float = 1.0
    valid: float = 1.0
    adversarial: float = 1.0
    perceptual: float = 1.0
    edge: float = 1.0
    dice_eps: float | None = None
    reduction: str = "mean"

    def __post_init__(self) -> None:
        for name in (
            "landmark", "photometric", "identity", "scale", "dice", "encoder",
            "regularization", "shape_consistency", "hole", "valid",
            "adversarial", "perceptual", "edge",
        ):
            v = float(getattr(self, name))
            if not np.isfinite(v) or v < 0.0:
                raise ContractError(f"loss weight {name} must be finite and >= 0")
        if self.dice_eps is not None and self.dice_eps <= 0.0:
            raise ContractError("dice epsilon must be > 0")
        if self.reduction not in ("sum", "mean"):
            raise ContractError('reduction must be "sum" or "mean"')


def _as_array(x) -> np.ndarray:
    if isinstance(x, ImagePlane):
        return x.rgb
    if isinstance(x, SoftMask):
        return x.values
    if isinstance(x, EmbeddingVector):
        return x.vector
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# fitting losses


def landmark_loss(gt: Landmarks2D, proj: np.ndarray) -> float:
    loss, _ = landmark_loss_grad(gt, proj)
    return loss


def landmark_loss_grad(gt: Landmarks2D, proj: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted Manhattan distance over visible landmarks and d/d proj."""
    proj = np.asarray(proj, dtype=np.float64)
    if proj.shape != (N_LANDMARKS, 2):
        raise ContractError("projected landmarks must be 71 x 2")
    vis = gt.visible & (gt.weights > 0.0)
    if not vis.any():
        raise ContractError("landmark loss is undefined: no visible landmarks")
    diff = proj - gt.points
    loss = float(np.sum(gt.weights[vis, None] * np.abs(diff[vis])))
    d_proj = np.zeros_like(proj)
    d_proj[vis] = gt.weights[vis, None] * np.sign(diff[vis])
    return loss, d_proj


def photometric_loss(image, render, mask, reduction: str = "mean") -> float:
    loss, _ = photometric_loss_grad(image, render, mask, reduction)
    return loss


def photometric_loss_grad(
    image, render, mask, reduction: str = "mean"
) -> tuple[float, np.ndarray]:
    """Masked L1 between images; gradient is w.r.t. the render."""
    I = _as_array(image)
    R = _as_array(render)
    M = _as_array(mask)
    if I.shape != R.shape:
        raise ContractError("photometric loss requires equal image shapes")
    if M.shape != I.shape[:2]:
        raise ContractError("photometric mask must match the image plane")
    if reduction not in ("sum", "mean"):
        raise ContractError('reduction must be "sum" or "mean"')
    w = 1.0 if reduction == "sum" else 1.0 / (I.shape[0] * I.shape[1])
    diff = I - R
    loss = float(np.sum(M[:, :, None] * np.abs(diff)) * w)
    d_render = -w * M[:, :, None] * np.sign(diff)
    return loss, d_render


def identity_loss(a, b) -> float:
    loss, _, _ = identity_loss_grad(a, b)
    return loss


def identity_loss_grad(a, b) -> tuple[float, np.ndarray, np.ndarray]:
    """1 - cosine(a, b) plus gradients w.r.t. both embeddings."""
    va, vb = _as_array(a).ravel(), _as_array(b).ravel()
    if va.shape != vb.shape:
        raise ContractError("identity loss requires embeddings of equal dimension")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ContractError("identity loss is undefined for zero-norm embeddings")
    cos = float(va @ vb / (na * nb))
    d_a = -(vb / (na * nb) - cos * va / (na * na))
    d_b = -(va / (na * nb) - cos * vb / (nb * nb))
    return 1.0 - cos, d_a, d_b


def dice_loss(mask_a, mask_b, epsilon: float) -> float:
    loss, _, _ = dice_loss_grad(mask_a, mask_b, epsilon)
    return loss


def dice_loss_grad(mask_a, mask_b, epsilon: float) -> tuple[float, np.ndarray, np.ndarray]:
    A, B = _as_array(mask_a), _as_array(mask_b)
    if A.shape != B.shape:
        raise ContractError("dice loss requires masks of equal shape")
    if epsilon <= 0.0:
        raise ContractError("dice epsilon must be > 0")
    num = 2.0 * float(np.sum(A * B)) + epsilon
    den = float(np.sum(A * A)) + float(np.sum(B * B)) + epsilon
    loss = 1.0 - num / den
    d_a = -(2.0 * B * den - num * 2.0 * A) / (den * den)
    d_b = -(2.0 * A * den - num * 2.0 * B) / (den * den)
    return loss, d_a, d_b


def encoder_loss(p_in: HeadParams, p_out: HeadParams) -> float:
    loss, _ = encoder_loss_grad(p_in, p_out)
    return loss


def encoder_loss_grad(p_in: HeadParams, p_out: HeadParams) -> tuple[float, ParamGrads]:
    """Sum over the six parameter groups of squared L2 differences."""
    if p_in.dims != p_out.dims:
        raise ContractError("encoder loss requires parameter sets of equal dims")
    grads = ParamGrads.zeros(p_in.dims)
    loss = 0.0
    for g in PARAM_GROUPS:
        diff = getattr(p_in, g) - getattr(p_out, g)
        loss += float(diff @ diff)
        getattr(grads, g)[:] = 2.0 * diff
    return loss, grads


def regularization(params: HeadParams) -> float:
    loss, _ = regularization_grad(params)
    return loss


def regularization_grad(params: HeadParams) -> tuple[float, ParamGrads]:
    """Squared norms of shape, expression and albedo coefficients."""
    grads = ParamGrads.zeros(params.dims)
    loss = 0.0
    for g in ("beta", "psi", "alpha"):
        v = getattr(params, g)
        loss += float(v @ v)
        getattr(grads, g)[:] = 2.0 * v
    return loss, grads


# ---------------------------------------------------------------------------
# inpainting objective terms


def hole_valid_losses(coarse, refine, target, mask) -> tuple[float, float]:
    """L1 over hole pixels (mask=1) and valid pixels of both stages."""
    Ic, Ir, Ig, M = _as_array(coarse), _as_array(refine), _as_array(target), _as_array(mask)
    if not (Ic.shape == Ir.shape == Ig.shape):
        raise ContractError("hole/valid losses require equal image shapes")
    if M.shape != Ig.shape[:2]:
        raise ContractError("hole mask must match the image plane")
    M3 = M[:, :, None]
    hole = float(np.sum(M3 * np.abs(Ir - Ig))) + float(np.sum(M3 * np.abs(Ic - Ig)))
    valid = float(np.sum((1.0 - M3) * np.abs(Ir - Ig))) + float(
        np.sum((1.0 - M3) * np.abs(Ic - Ig))
    )
    return hole, valid


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T.copy()


def _conv3_replicate(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    p = np.pad(channel, 1, mode="edge")
    out = np.zeros_like(channel)
    for u in range(3):
        for v in range(3):
            out += kernel[u, v] * p[u : u + channel.shape[0], v : v + channel.shape[1]]
    return out


def _conv3_replicate_adjoint(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    dp = np.zeros((grad.shape[0] + 2, grad.shape[1] + 2))
    for u in range(3):
        for v in range(3):
            dp[u : u + grad.shape[0], v : v + grad.shape[1]] += kernel[u, v] * grad
    # fold the replicate padding back onto the borders
    dp[1] += dp[0]
    dp[-2] += dp[-1]
    dp[:, 1] += dp[:, 0]
    dp[:, -2] += dp[:, -1]
    return dp[1:-1, 1:-1]


def sobel_magnitude(image) -> np.ndarray:
    """Per-channel Sobel gradient magnitude with replicate-padded borders."""
    I = _as_array(image)
    if I.shape[0] < 3 or I.shape[1] < 3:
        raise ContractError("edge loss requires images at least 3 x 3")
    out = np.empty_like(I)
    for c in range(I.shape[2]):
        gx = _conv3_replicate(I[:, :, c], _SOBEL_X)
        gy = _conv3_replicate(I[:, :, c], _SOBEL_Y)
        out[:, :, c] = np.sqrt(gx * gx + gy * gy)
    return out


def edge_loss(image_a, image_b, reduction: str = "sum") -> float:
    loss, _, _ = edge_loss_grad(image_a, image_b, reduction)
    return loss


def edge_loss_grad(image_a, image_b, reduction: str = "sum"):
    """L1 between Sobel magnitudes, with gradients w.r.t. both images."""
    A, B = _as_array(image_a), _as_array(image_b)
    if A.shape != B.shape:
        raise ContractError("edge loss requires equal image shapes")
    if A.shape[0] < 3 or A.shape[1] < 3:
        raise ContractError("edge loss requires images at least 3 x 3")
    w = 1.0 if reduction == "sum" else 1.0 / (A.shape[0] * A.shape[1])
    d_a = np.zeros_like(A)
    d_b = np.zeros_like(B)
    loss = 0.0
    for c in range(A.shape[2]):
        gxa = _conv3_replicate(A[:, :, c], _SOBEL_X)
        gya = _conv3_replicate(A[:, :, c], _SOBEL_Y)
        gxb = _conv3_replicate(B[:, :, c], _SOBEL_X)
        gyb = _conv3_replicate(B[:, :, c], _SOBEL_Y)
        ea = np.sqrt(gxa * gxa + gya * gya)
        eb = np.sqrt(gxb * gxb + gyb * gyb)
        loss += float(np.sum(np.abs(ea - eb)))
        sign = np.sign(ea - eb) * w
        with np.errstate(invalid="ignore", divide="ignore"):
            ua = np.where(ea > 0.0, sign / ea, 0.0)
            ub = np.where(eb > 0.0, -sign / eb, 0.0)
        d_a[:, :, c] = _conv3_replicate_adjoint(ua * gxa, _SOBEL_X) + _conv3_replicate_adjoint(
            ua * gya, _SOBEL_Y
        )
        d_b[:, :, c] = _conv3_replicate_adjoint(ub * gxb, _SOBEL_X) + _conv3_replicate_adjoint(
            ub * gyb, _SOBEL_Y
        )
    return loss * w, d_a, d_b


def perceptual_loss(features_a: list[np.ndarray], features_b: list[np.ndarray]) -> float:
    loss, _, _ = perceptual_loss_grad(features_a, features_b)
    return loss


def perceptual_loss_grad(features_a, features_b):
    """Per-layer mean L1 over feature maps, summed over layers."""
    if len(features_a) != len(features_b):
        raise ContractError("perceptual loss requires matching layer lists")
    loss = 0.0
    d_a, d_b = [], []
    for fa, fb in zip(features_a, features_b):
        fa, fb = np.asarray(fa, dtype=np.float64), np.asarray(fb, dtype=np.float64)
        if fa.shape != fb.shape:
            raise ContractError("perceptual loss requires matching layer shapes")
        n = fa.size
        diff = fa - fb
        loss += float(np.sum(np.abs(diff))) / n
        d_a.append(np.sign(diff) / n)
        d_b.append(-np.sign(diff) / n)
    return loss, d_a, d_b


def adversarial_value(d_real, d_fake) -> float:
    """mean log D(real) + mean log(1 - D(fake)), scores clamped at 1e-7."""
    r = np.asarray(d_real, dtype=np.float64).ravel()
    f = np.asarray(d_fake, dtype=np.float64).ravel()
    if r.size == 0 or f.size == 0:
        raise ContractError("adversarial value requires non-empty score lists")
    r = np.clip(r, 1e-7, 1.0 - 1e-7)
    f = np.clip(f, 1e-7, 1.0 - 1e-7)
    return float(np.mean(np.log(r)) + np.mean(np.log(1.0 - f)))


def composite_valid(refine, target, mask) -> ImagePlane:
    """Refined output with valid pixels replaced by the target's."""
    Ir, Ig, M = _as_array(refine), _as_array(target), _as_array(mask)
    if Ir.shape != Ig.shape:
        raise ContractError("composite requires equal image shapes")
    if M.shape != Ig.shape[:2]:
        raise ContractError("composite mask must match the image plane")
    M3 = M[:, :, None]
    return ImagePlane(M3 * Ir + (1.0 - M3) * Ig)


# ---------------------------------------------------------------------------
# pluggable embedding / feature providers

# The reference providers are deterministic linear maps so the identity
# and perceptual losses run (and differentiate) without trained networks.


class MeanPatchEmbedder:
    """Embeds an image as the flattened 8x8 box-average, L2-friendly."""

    provider_id = "mean-patch-8x8"
    grid = 8

    def embed(self, rgb: np.ndarray) -> EmbeddingVector:
        rgb = _as_array(rgb)
        vec = self._pool(rgb).reshape(-1)
        return EmbeddingVector(vec, self.provider_id)

    def _pool(self, rgb: np.ndarray) -> np.ndarray:
        h, w = rgb.shape[:2]
        ys = np.linspace(0, h, self.grid + 1).astype(int)
        xs = np.linspace(0, w, self.grid + 1).astype(int)
        out = np.empty((self.grid, self.grid, 3))
        for i in range(self.grid):
            for j in range(self.grid):
                out[i, j] = rgb[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean(axis=(0, 1))
        return out

    def backward(self, rgb_shape: tuple[int, int, int], d_vec: np.ndarray) -> np.ndarray:
        h, w = rgb_shape[:2]
        ys = np.linspace(0, h, self.grid + 1).astype(int)
        xs = np.linspace(0, w, self.grid + 1).astype(int)
        d_rgb = np.zeros((h, w, 3))
        dv = d_vec.reshape(self.grid, self.grid, 3)
        for i in range(self.grid):
            for j in range(self.grid):
                cell = (ys[i + 1] - ys[i]) * (xs[j + 1] - xs[j])
                d_rgb[ys[i] : ys[i + 1], xs[j] : xs[j + 1]] += dv[i, j] / cell
        return d_rgb


class BoxPyramidFeatures:
    """Feature provider: a pyramid of box-downsampled copies of the image."""

    provider_id = "box-pyramid"
    grids = (16, 8, 4)

    def extract(self, rgb: np.ndarray) -> list[np.ndarray]:
        rgb = _as_array(rgb)
        return [self._pool(rgb, g) for g in self.grids]

    @staticmethod
    def _pool(rgb: np.ndarray, grid: int) -> np.ndarray:
        h, w = rgb.shape[:2]
        ys = np.linspace(0, h, grid + 1).astype(int)
        xs = np.linspace(0, w, grid + 1).astype(int)
        out = np.empty((grid, grid, 3))
        for i in range(grid):
            for j in range(grid):
                out[i, j] = rgb[ys[i] : ys[i + 1], xs[j] : xs[j + 1]].mean(axis=(0, 1))
        return out

    def backward(self, rgb_shape: tuple[int, int, int], d_layers: list[np.ndarray]) -> np.ndarray:
        h, w = rgb_shape[:2]
        d_rgb = np.zeros((h, w, 3))
        for grid, dl in zip(self.grids, d_layers):
            ys = np.linspace(0, h, grid + 1).astype(int)
            xs = np.linspace(0, w, grid + 1).astype(int)
            for i in range(grid):
                for j in range(grid):
                    cell = (ys[i + 1] - ys[i]) * (xs[j + 1] - xs[j])
                    d_rgb[ys[i] : ys[i + 1], xs[j] : xs[j + 1]] += dl[i, j] / cell
        return d_rgb
