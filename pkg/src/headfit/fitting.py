"""Analysis-by-synthesis fitting of head parameters to observations.

A learned encoder is replaced by per-observation parameter vectors that
are optimized jointly with adaptive-moment descent (bias-corrected, with
an optional halve-on-increase safeguard). The multi-crop / multi-pose
consistency scheme works on an ObservationGrid:

  - the scale module shuffles shape vectors between grid cells and
    re-renders, so shape must explain every crop and pose;
  - the dice module compares the rendered silhouette against the skin
    mask of the hair-removed image, keeping a second parameter set per
    observation (with swapped shape vectors) when that mask differs from
    the plain skin mask.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, NumericalError
from .losses import (
    Landmarks2D,
    LossWeights,
    MeanPatchEmbedder,
    dice_loss,
    dice_loss_grad,
    identity_loss_grad,
    landmark_loss_grad,
    photometric_loss_grad,
)
from .model import (
    HeadParams,
    ModelAsset,
    PARAM_GROUPS,
    ParamGrads,
    TriMesh,
    decode_geometry,
    embed_landmarks,
)
from .render import ImagePlane, RenderOut, SoftMask, render_head

FIT_PAD_SIGMAS = 8.0  # rasterizer band while fitting; tail error ~3e-4
N_FACE_LANDMARKS = 68


# ---------------------------------------------------------------------------
# observations


@dataclass
class Observation:
    """One input view: image, masks, landmarks, and its grid position."""

    image: ImagePlane
    skin_mask: SoftMask
    landmarks: Landmarks2D
    bald_skin_mask: SoftMask | None = None
    pose_index: int = 1
    crop_level: int = 1
    subject: str = "s0"
    crop_box: tuple[float, float, float] | None = None  # (cx, cy, half) in source coords

    def __post_init__(self) -> None:
        if self.skin_mask.values.shape != self.image.rgb.shape[:2]:
            raise ContractError("skin mask must match the image size")
        if self.bald_skin_mask is not None and (
            self.bald_skin_mask.values.shape != self.image.rgb.shape[:2]
        ):
            raise ContractError("bald skin mask must match the image size")
        if self.pose_index < 1 or self.crop_level < 1:
            raise ContractError("pose_index and crop_level are 1-based")

    @property
    def bald_or_skin(self) -> SoftMask:
        return self.bald_skin_mask if self.bald_skin_mask is not None else self.skin_mask

    @property
    def has_distinct_bald(self) -> bool:
        return self.bald_skin_mask is not None and not np.array_equal(
            self.bald_skin_mask.values, self.skin_mask.values
        )


@dataclass
class ObservationGrid:
    """N_i poses x N_s crop levels of one subject."""

    observations: list[Observation]
    n_poses: int = 0
    n_levels: int = 0
    shared_shape: bool = False

    def __post_init__(self) -> None:
        if not self.observations:
            raise ContractError("observation grid is empty")
        if self.n_poses == 0:
            self.n_poses = max(o.pose_index for o in self.observations)
        if self.n_levels == 0:
            self.n_levels = max(o.crop_level for o in self.observations)
        self.cells: dict[tuple[int, int], Observation] = {}
        for obs in self.observations:
            key = (obs.pose_index, obs.crop_level)
            if obs.pose_index > self.n_poses or obs.crop_level > self.n_levels:
                raise ContractError("observation index outside the declared grid")
            if key in self.cells:
                raise ContractError(f"duplicate grid cell {key}")
            self.cells[key] = obs

    def is_complete(self) -> bool:
        return len(self.cells) == self.n_poses * self.n_levels

    def keys(self) -> list[tuple[int, int]]:
        return sorted(self.cells.keys())


# ---------------------------------------------------------------------------
# configuration and report


@dataclass
class FitConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    iterations: int = 400
    learning_rate: float = 0.05
    lr_decay: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    sigma: float = 0.015
    pad_sigmas: float = FIT_PAD_SIGMAS
    resolution: int = 128
    seed: int = 0
    shuffle_strategy: str = "derangement"  # "derangement" | "fixed" | "identity"
    safeguard: bool = True
    max_halvings: int = 20
    optimize_groups: tuple[str, ...] = PARAM_GROUPS
    grad_tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.iterations < 0:
            raise ContractError("iteration budget must be >= 0")
        if self.learning_rate <= 0.0 or not (0.0 < self.lr_decay <= 1.0):
            raise ContractError("learning rate must be > 0 and decay in (0, 1]")
        if self.sigma <= 0.0:
            raise ContractError("rasterizer sigma must be > 0")
        if self.shuffle_strategy not in ("derangement", "fixed", "identity"):
            raise ContractError("unknown shuffle strategy")
        bad = set(self.optimize_groups) - set(PARAM_GROUPS)
        if bad:
            raise ContractError(f"unknown parameter groups: {sorted(bad)}")


@dataclass
class FitReport:
    params: dict[str, HeadParams]
    twin_params: dict[str, HeadParams]
    shared_beta: np.ndarray | None
    trajectory: list[dict]
    wall_clock_sec: float
    converged: bool
    config: dict
    initial_total: float
    final_total: float


def cell_name(key: tuple[int, int]) -> str:
    return f"{key[0]}-{key[1]}"


# ---------------------------------------------------------------------------
# crops


def _square_box(points: np.ndarray, factor: float) -> tuple[float, float, float]:
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    cx, cy = (lo + hi) / 2.0
    half = float(max(hi[0] - lo[0], hi[1] - lo[1]) / 2.0) * factor
    return float(cx), float(cy), half


def _bilinear_sample(channelized: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Clamped bilinear sampling; replicates edges outside the frame."""
    h, w = channelized.shape[:2]
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(int)
    c0 = np.floor(c).astype(int)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[..., None] if channelized.ndim == 3 else (r - r0)
    fc = (c - c0)[..., None] if channelized.ndim == 3 else (c - c0)
    top = channelized[r0, c0] * (1 - fc) + channelized[r0, c1] * fc
    bot = channelized[r1, c0] * (1 - fc) + channelized[r1, c1] * fc
    return top * (1 - fr) + bot * fr


def _crop_plane(arr: np.ndarray, box: tuple[float, float, float], out_size: int) -> np.ndarray:
    cx, cy, half = box
    h, w = arr.shape[:2]
    xs = cx + half * (-1.0 + (2.0 * np.arange(out_size) + 1.0) / out_size)
    ys = cy + half * (1.0 - (2.0 * np.arange(out_size) + 1.0) / out_size)
    cols = (xs + 1.0) * 0.5 * w - 0.5
    rows = (1.0 - ys) * 0.5 * h - 0.5
    return _bilinear_sample(arr, rows[:, None] * np.ones_like(cols)[None, :],
                            np.ones_like(rows)[:, None] * cols[None, :])


def generate_crops(
    image: ImagePlane,
    landmarks: Landmarks2D,
    n_levels: int,
    skin_mask: SoftMask | None = None,
    bald_mask: SoftMask | None = None,
    out_size: int | None = None,
    pose_index: int = 1,
    subject: str = "s0",
) -> list[Observation]:
    """Nested square crops from full head (level 1) to a tight face box.

    Level 1 is the bounding box of all visible landmarks expanded by 1.8;
    level n_levels the 68-point face box expanded by 1.1 (the scalp is cut
    off); intermediate boxes interpolate linearly. Landmark coordinates
    are re-normalized to each crop and landmarks that leave the frame are
    flagged invisible. Crops that exceed the source image are padded by
    edge replication.
    """
    if n_levels < 1:
        raise ContractError("n_levels must be >= 1")
    vis = landmarks.visible
    if not vis.any():
        raise ContractError("crops require visible landmarks")
    face_vis = vis.copy()
    face_vis[N_FACE_LANDMARKS:] = False
    if not face_vis.any():
        raise ContractError("crops require visible face landmarks")

    box1 = _square_box(landmarks.points[vis], 1.8)
    boxn = _square_box(landmarks.points[face_vis], 1.1)

    crops = []
    for level in range(1, n_levels + 1):
        t = 0.0 if n_levels == 1 else (level - 1) / (n_levels - 1)
        box = tuple((1.0 - t) * np.asarray(box1) + t * np.asarray(boxn))
        cx, cy, half = box
        if half <= 0.0:
            raise ContractError("degenerate landmark bounding box")
        size = out_size or max(8, int(round(half * image.width)))
        rgb = np.clip(_crop_plane(image.rgb, box, size), 0.0, 1.0)
        smask = (
            np.clip(_crop_plane(skin_mask.values, box, size), 0.0, 1.0)
            if skin_mask is not None
            else np.ones((size, size))
        )
        bmask = (
            np.clip(_crop_plane(bald_mask.values, box, size), 0.0, 1.0)
            if bald_mask is not None
            else None
        )
        pts = (landmarks.points - np.array([cx, cy])) / half
        inside = (np.abs(pts[:, 0]) <= 1.0) & (np.abs(pts[:, 1]) <= 1.0)
        crops.append(
            Observation(
                image=ImagePlane(rgb),
                skin_mask=SoftMask(smask),
                bald_skin_mask=None if bmask is None else SoftMask(bmask),
                landmarks=Landmarks2D(pts, landmarks.weights.copy(), vis & inside),
                pose_index=pose_index,
                crop_level=level,
                subject=subject,
                crop_box=(cx, cy, half),
            )
        )
    return crops


def crop_to_source(points: np.ndarray, crop_box: tuple[float, float, float]) -> np.ndarray:
    """Map crop-normalized points back to the source frame."""
    cx, cy, half = crop_box
    return np.asarray(points) * half + np.array([cx, cy])


# ---------------------------------------------------------------------------
# consistency terms (public operations)


def dice_consistency_terms(
    obs: Observation,
    render: RenderOut,
    params_i: HeadParams,
    params_ib: HeadParams,
    epsilon: float,
) -> tuple[float, float]:
    """Dice of the bald-image skin mask vs the rendered silhouette, plus
    the squared distance between the two branches' shape vectors."""
    if obs.bald_skin_mask is None:
        raise ContractError("dice consistency requires a bald skin mask")
    dice = dice_loss(obs.bald_skin_mask, render.silhouette, epsilon)
    diff = params_i.beta - params_ib.beta
    return dice, float(diff @ diff)


def draw_shuffle(
    keys: list[tuple[int, int]], rng: np.random.Generator, strategy: str = "derangement"
) -> dict[tuple[int, int], tuple[int, int]]:
    """Permutation of grid cells; a seeded derangement when one exists."""
    if strategy == "identity" or len(keys) == 1:
        return {k: k for k in keys}
    if strategy not in ("derangement", "fixed"):
        raise ContractError("unknown shuffle strategy")
    idx = np.arange(len(keys))
    while True:
        perm = rng.permutation(len(keys))
        if not np.any(perm == idx):
            break
    return {keys[i]: keys[perm[i]] for i in range(len(keys))}


def _check_shuffle(keys: list[tuple[int, int]], shuffle: dict) -> None:
    if sorted(shuffle.keys()) != keys or sorted(shuffle.values()) != keys:
        raise ContractError("shuffle must be a permutation of the grid cells")


def scale_consistency_loss(
    grid: ObservationGrid,
    params: dict[tuple[int, int], HeadParams],
    shuffle: dict[tuple[int, int], tuple[int, int]],
    model: ModelAsset,
    weights: LossWeights | None = None,
    sigma: float = 0.015,
    provider: MeanPatchEmbedder | None = None,
) -> float:
    """Sum over cells of the base loss rendered with shuffled shape vectors.

    Every cell (i, k) is rendered with its own expression, pose, albedo,
    camera and light but the shape vector of cell shuffle(i, k), then
    compared against its own observation with the landmark, photometric
    and identity terms.
    """
    if not grid.is_complete():
        raise ContractError("scale consistency requires a complete grid")
    keys = grid.keys()
    _check_shuffle(keys, shuffle)
    weights = weights or LossWeights()
    provider = provider or MeanPatchEmbedder()
    total = 0.0
    for key in keys:
        obs = grid.cells[key]
        own = params[key]
        src = params[shuffle[key]]
        combo = HeadParams(
            beta=src.beta, psi=own.psi, theta=own.theta,
            alpha=own.alpha, cam=own.cam, light=own.light,
        )
        with_color = weights.photometric > 0.0 or weights.identity > 0.0
        out, _ = render_head(
            combo, model, (obs.image.height, obs.image.width), sigma,
            with_color=with_color, pad_sigmas=FIT_PAD_SIGMAS,
        )
        lmk, _ = landmark_loss_grad(obs.landmarks, out.landmarks2d)
        total += weights.landmark * lmk
        if with_color:
            if weights.photometric > 0.0:
                pho, _ = photometric_loss_grad(
                    obs.image, out.color, obs.skin_mask, weights.reduction
                )
                total += weights.photometric * pho
            if weights.identity > 0.0:
                ident, _, _ = identity_loss_grad(
                    provider.embed(obs.image.rgb), provider.embed(out.color.rgb)
                )
                total += weights.identity * ident
    return total


# ---------------------------------------------------------------------------
# the fitting problem


def default_init(
    obs: Observation, model: ModelAsset, dims: tuple[int, int, int]
) -> HeadParams:
    """Zero parameters with a camera scale that roughly matches the
    observed face box, so silhouette overlap is nonzero from the start."""
    params = HeadParams.zeros(dims)
    template = TriMesh(model.template_vertices, model.faces)
    lmk = embed_landmarks(template, model.landmark_faces, model.landmark_bary)
    face = lmk[:N_FACE_LANDMARKS]
    model_w = float(face[:, 0].max() - face[:, 0].min())
    vis = obs.landmarks.visible.copy()
    vis[N_FACE_LANDMARKS:] = False
    pts = obs.landmarks.points[vis] if vis.any() else obs.landmarks.points
    obs_w = float(pts[:, 0].max() - pts[:, 0].min())
    scale = 1.5 * obs_w / model_w if (model_w > 0 and obs_w > 0) else 1.0 / max(model_w, 1.0)
    params.cam[0] = max(scale, 1e-6)
    return params


class _Layout:
    """Flat-vector layout: optional shared beta, then per cell (and twin)
    the remaining groups (plus beta when not shared)."""

    def __init__(self, dims: tuple[int, int, int], keys, twins, shared_beta: bool):
        n_beta, n_psi, n_alpha = dims
        self.dims = dims
        self.shared_beta = shared_beta
        self.group_sizes = {
            "beta": n_beta, "psi": n_psi, "theta": 6,
            "alpha": n_alpha, "cam": 3, "light": 27,
        }
        self.slices: dict = {}
        off = 0
        if shared_beta:
            self.slices[("beta",)] = slice(off, off + n_beta)
            off += n_beta
        for key in keys:
            for branch in ("main",) + (("twin",) if key in twins else ()):
                for g in PARAM_GROUPS:
                    if g == "beta" and shared_beta:
                        continue
                    self.slices[(branch, key, g)] = slice(off, off + self.group_sizes[g])
                    off += self.group_sizes[g]
        self.size = off

    def group_slice(self, branch: str, key, group: str) -> slice:
        if group == "beta" and self.shared_beta:
            return self.slices[("beta",)]
        return self.slices[(branch, key, group)]

    def params(self, x: np.ndarray, branch: str, key) -> HeadParams:
        return HeadParams(
            *(x[self.group_slice(branch, key, g)].copy() for g in PARAM_GROUPS)
        )

    def write(self, x: np.ndarray, branch: str, key, params: HeadParams) -> None:
        for g in PARAM_GROUPS:
            x[self.group_slice(branch, key, g)] = getattr(params, g)

    def add_grads(self, g_vec, key, grads: ParamGrads, beta_branch: str, branch: str) -> None:
        """Accumulate render gradients; beta may belong to another owner."""
        for g in PARAM_GROUPS:
            target = self.group_slice(beta_branch if g == "beta" else branch, key, g)
            g_vec[target] += getattr(grads, g)

    def cam_scale_indices(self) -> list[int]:
        return [
            self.slices[k].start for k in self.slices if len(k) == 3 and k[2] == "cam"
        ]


class _Problem:
    """Objective, gradients and bookkeeping for one grid fit."""

    def __init__(self, grid, model, config, provider=None):
        self.grid = grid
        self.model = model
        self.cfg = config
        self.w = config.weights
        self.provider = provider or MeanPatchEmbedder()
        self.keys = grid.keys()
        if self.w.scale > 0.0 and not grid.is_complete():
            raise ContractError("scale consistency requires a complete grid")
        self.with_color = self.w.photometric > 0.0 or self.w.identity > 0.0
        dice_active = self.w.dice > 0.0
        self.twins = set()
        if dice_active and not grid.shared_shape:
            for key in self.keys:
                if grid.cells[key].has_distinct_bald:
                    self.twins.add(key)
        for key in self.keys:
            if dice_active and grid.cells[key].bald_or_skin is None:
                raise ContractError("dice term requires a bald (or skin) mask")
        self.layout = _Layout(model.dims, self.keys, self.twins, grid.shared_shape)
        self.obs_embeddings = {
            key: self.provider.embed(grid.cells[key].image.rgb) for key in self.keys
        } if self.w.identity > 0.0 else {}
        self.opt_mask = self._optimize_mask()

    # -- initialization ---------------------------------------------------

    def initial_vector(self, init: HeadParams | None) -> np.ndarray:
        x = np.zeros(self.layout.size)
        for key in self.keys:
            params = (
                init.copy() if init is not None
                else default_init(self.grid.cells[key], self.model, self.model.dims)
            )
            self.layout.write(x, "main", key, params)
            if key in self.twins:
                self.layout.write(x, "twin", key, params)
        return x

    def _optimize_mask(self) -> np.ndarray:
        mask = np.zeros(self.layout.size)
        enabled = set(self.cfg.optimize_groups)
        for sl_key, sl in self.layout.slices.items():
            group = "beta" if len(sl_key) == 1 else sl_key[2]
            if group in enabled:
                mask[sl.start : sl.stop] = 1.0
        return mask

    def clamp(self, x: np.ndarray) -> np.ndarray:
        for idx in self.layout.cam_scale_indices():
            if x[idx] < 1e-6:
                x[idx] = 1e-6
        return x

    # -- evaluation -------------------------------------------------------

    def _dice_eps(self, obs: Observation) -> float:
        if self.w.dice_eps is not None:
            return self.w.dice_eps
        return 1e-6 * obs.image.height * obs.image.width

    def _render(self, obs, params, need_grad):
        out, tape = render_head(
            params, self.model, (obs.image.height, obs.image.width),
            self.cfg.sigma, with_color=self.with_color,
            pad_sigmas=self.cfg.pad_sigmas,
        )
        return out, (tape if need_grad else None)

    def _branch_terms(self, key, obs, params, *, use_dice, need_grad):
        """Landmark/photometric/identity/dice terms of one render.

        Returns (terms, upstream) where upstream is None or a tuple
        (tape, d_color, d_sil, d_lmk) ready for render_backward.
        """
        out, tape = self._render(obs, params, need_grad)
        terms = {}
        d_color = d_sil = d_lmk = None
        lmk, g_lmk = landmark_loss_grad(obs.landmarks, out.landmarks2d)
        terms["landmark"] = lmk
        if need_grad:
            d_lmk = self.w.landmark * g_lmk
        if self.with_color:
            if self.w.photometric > 0.0:
                pho, g_pho = photometric_loss_grad(
                    obs.image, out.color, obs.skin_mask, self.w.reduction
                )
                terms["photometric"] = pho
                if need_grad:
                    d_color = self.w.photometric * g_pho
            if self.w.identity > 0.0:
                emb_r = self.provider.embed(out.color.rgb)
                if np.linalg.norm(emb_r.vector) == 0.0:
                    # all-black render: cosine undefined; photometric must
                    # pull the image off zero before identity can act
                    terms["identity"] = 1.0
                else:
                    ident, _, g_emb = identity_loss_grad(self.obs_embeddings[key], emb_r)
                    terms["identity"] = ident
                    if need_grad:
                        gc = self.w.identity * self.provider.backward(
                            out.color.rgb.shape, g_emb
                        )
                        d_color = gc if d_color is None else d_color + gc
        if use_dice and self.w.dice > 0.0:
            dice, _, g_sil = dice_loss_grad(
                obs.bald_or_skin, out.silhouette, self._dice_eps(obs)
            )
            terms["dice"] = dice
            if need_grad:
                d_sil = self.w.dice * g_sil
        upstream = (tape, d_color, d_sil, d_lmk) if need_grad else None
        return terms, upstream

    def evaluate(self, x, shuffle, need_grad, iteration=0):
        """Total weighted loss, per-term sums and (optionally) gradient."""
        from .render import render_backward

        terms_sum: dict[str, float] = {}
        g_vec = np.zeros_like(x) if need_grad else None

        def add_terms(terms):
            for name, val in terms.items():
                terms_sum[name] = terms_sum.get(name, 0.0) + val

        def backprop(upstream, key, beta_branch, branch):
            tape, d_color, d_sil, d_lmk = upstream
            if d_color is None and d_sil is None and d_lmk is None:
                return
            grads = render_backward(tape, d_color=d_color, d_sil=d_sil, d_landmarks2d=d_lmk)
            self.layout.add_grads(g_vec, key, grads, beta_branch, branch)

        for key in self.keys:
            obs = self.grid.cells[key]
            main = self.layout.params(x, "main", key)
            if key in self.twins:
                twin = self.layout.params(x, "twin", key)
                # image branch rendered with the twin's shape (swapped)
                combo_main = HeadParams(twin.beta, main.psi, main.theta,
                                        main.alpha, main.cam, main.light)
                terms, upstream = self._branch_terms(
                    key, obs, combo_main, use_dice=False, need_grad=need_grad
                )
                add_terms(terms)
                if need_grad:
                    backprop(upstream, key, "twin", "main")
                # bald branch rendered with the main shape, scored by dice
                combo_twin = HeadParams(main.beta, twin.psi, twin.theta,
                                        twin.alpha, twin.cam, twin.light)
                terms_b, upstream_b = self._branch_terms(
                    key, obs, combo_twin, use_dice=True, need_grad=need_grad
                )
                add_terms(terms_b)
                if need_grad:
                    backprop(upstream_b, key, "main", "twin")
                diff = main.beta - twin.beta
                terms_sum["shape_consistency"] = (
                    terms_sum.get("shape_consistency", 0.0) + float(diff @ diff)
                )
                if need_grad and self.w.shape_consistency > 0.0:
                    g = 2.0 * self.w.shape_consistency * diff
                    g_vec[self.layout.group_slice("main", key, "beta")] += g
                    g_vec[self.layout.group_slice("twin", key, "beta")] -= g
            else:
                terms, upstream = self._branch_terms(
                    key, obs, main, use_dice=True, need_grad=need_grad
                )
                add_terms(terms)
                if need_grad:
                    backprop(upstream, key, "main", "main")

            # regularization: psi/alpha per cell; beta once per distinct vector
            reg = float(main.psi @ main.psi) + float(main.alpha @ main.alpha)
            if need_grad and self.w.regularization > 0.0:
                g_vec[self.layout.group_slice("main", key, "psi")] += (
                    2.0 * self.w.regularization * main.psi
                )
                g_vec[self.layout.group_slice("main", key, "alpha")] += (
                    2.0 * self.w.regularization * main.alpha
                )
            if not self.grid.shared_shape or key == self.keys[0]:
                reg += float(main.beta @ main.beta)
                if need_grad and self.w.regularization > 0.0:
                    g_vec[self.layout.group_slice("main", key, "beta")] += (
                        2.0 * self.w.regularization * main.beta
                    )
            terms_sum["regularization"] = terms_sum.get("regularization", 0.0) + reg

        if self.w.scale > 0.0:
            scale_val = self._scale_term(x, shuffle, need_grad, g_vec)
            terms_sum["scale"] = scale_val

        total = 0.0
        weight_of = {
            "landmark": self.w.landmark, "photometric": self.w.photometric,
            "identity": self.w.identity, "dice": self.w.dice,
            "regularization": self.w.regularization, "scale": self.w.scale,
            "shape_consistency": self.w.shape_consistency,
        }
        for name, val in terms_sum.items():
            if not np.isfinite(val):
                raise NumericalError(
                    f"non-finite value in loss term '{name}' at iteration {iteration}"
                )
            total += weight_of[name] * val
        if need_grad:
            g_vec *= self.opt_mask
        return total, terms_sum, g_vec

    def _scale_term(self, x, shuffle, need_grad, g_vec) -> float:
        from .render import render_backward

        _check_shuffle(self.keys, shuffle)
        total = 0.0
        for key in self.keys:
            obs = self.grid.cells[key]
            src = shuffle[key]
            own = self.layout.params(x, "main", key)
            beta_slice_src = self.layout.group_slice("main", src, "beta")
            beta_slice_own = self.layout.group_slice("main", key, "beta")
            combo = HeadParams(x[beta_slice_src].copy(), own.psi, own.theta,
                               own.alpha, own.cam, own.light)
            terms, upstream = self._branch_terms(
                key, obs, combo, use_dice=False, need_grad=need_grad
            )
            # weighted inner combination (landmark + photometric + identity)
            inner = (
                self.w.landmark * terms.get("landmark", 0.0)
                + self.w.photometric * terms.get("photometric", 0.0)
                + self.w.identity * terms.get("identity", 0.0)
            )
            total += inner
            if need_grad:
                tape, d_color, d_sil, d_lmk = upstream
                if not (d_color is None and d_sil is None and d_lmk is None):
                    grads = render_backward(
                        tape, d_color=d_color, d_sil=d_sil, d_landmarks2d=d_lmk
                    )
                    for g in PARAM_GROUPS:
                        target = beta_slice_src if g == "beta" else self.layout.group_slice(
                            "main", key, g
                        )
                        g_vec[target] += self.w.scale * getattr(grads, g)
        return total


def fit(
    grid: ObservationGrid,
    model: ModelAsset,
    config: FitConfig | None = None,
    init: HeadParams | None = None,
    provider=None,
) -> FitReport:
    """Recover HeadParams for every grid cell by safeguarded Adam descent."""
    config = config or FitConfig()
    problem = _Problem(grid, model, config, provider)
    rng = np.random.default_rng(config.seed)
    x = problem.clamp(problem.initial_vector(init))

    fixed_shuffle = draw_shuffle(problem.keys, rng, "identity")
    if config.weights.scale > 0.0 and config.shuffle_strategy == "fixed":
        fixed_shuffle = draw_shuffle(problem.keys, rng, "derangement")

    def shuffle_for_iteration():
        if config.weights.scale <= 0.0 or config.shuffle_strategy in ("fixed", "identity"):
            return fixed_shuffle
        return draw_shuffle(problem.keys, rng, "derangement")

    started = time.perf_counter()
    trajectory: list[dict] = []
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2 = config.adam_beta1, config.adam_beta2
    g_last = np.zeros_like(x)

    shuffle = shuffle_for_iteration()
    total, terms, g = problem.evaluate(x, shuffle, need_grad=config.iterations > 0)
    initial_total = total
    trajectory.append({"iteration": 0, "total": total, "terms": dict(terms)})
    if g is not None:
        g_last = g

    lr = config.learning_rate
    for it in range(1, config.iterations + 1):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1**it)
        vhat = v / (1.0 - b2**it)
        direction = mhat / (np.sqrt(vhat) + config.adam_eps)
        step = lr
        accepted = False
        for _ in range(config.max_halvings + 1):
            x_try = problem.clamp(x - step * direction)
            total_try, terms_try, _ = problem.evaluate(
                x_try, shuffle, need_grad=False, iteration=it
            )
            if not config.safeguard or total_try <= total:
                accepted = True
                break
            step *= 0.5
        if accepted:
            x = x_try
            total, terms = total_try, terms_try
        trajectory.append({"iteration": it, "total": total, "terms": dict(terms)})
        lr *= config.lr_decay
        if it < config.iterations:
            shuffle = shuffle_for_iteration()
            _, _, g = problem.evaluate(x, shuffle, need_grad=True, iteration=it)
            g_last = g

    wall = time.perf_counter() - started
    params = {cell_name(k): problem.layout.params(x, "main", k) for k in problem.keys}
    twins = {cell_name(k): problem.layout.params(x, "twin", k) for k in problem.twins}
    shared = (
        x[problem.layout.slices[("beta",)]].copy() if grid.shared_shape else None
    )
    converged = bool(np.max(np.abs(g_last)) <= config.grad_tol) if config.iterations else False
    cfg_echo = asdict(config)
    cfg_echo["provider_id"] = getattr(problem.provider, "provider_id", "custom")
    return FitReport(
        params=params,
        twin_params=twins,
        shared_beta=shared,
        trajectory=trajectory,
        wall_clock_sec=wall,
        converged=converged,
        config=cfg_echo,
        initial_total=initial_total,
        final_total=total,
    )
