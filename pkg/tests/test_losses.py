import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headfit.errors import ContractError
from headfit.losses import (
    BoxPyramidFeatures,
    EmbeddingVector,
    Landmarks2D,
    LossWeights,
    MeanPatchEmbedder,
    adversarial_value,
    composite_valid,
    dice_loss,
    dice_loss_grad,
    edge_loss,
    edge_loss_grad,
    encoder_loss,
    encoder_loss_grad,
    hole_valid_losses,
    identity_loss,
    identity_loss_grad,
    landmark_loss,
    landmark_loss_grad,
    perceptual_loss,
    perceptual_loss_grad,
    photometric_loss,
    photometric_loss_grad,
    regularization,
    regularization_grad,
    sobel_magnitude,
)
from headfit.model import HeadParams

DIMS = (5, 4, 3)


def _lmk(points, weights=None, visible=None):
    pts = np.zeros((71, 2))
    pts[: len(points)] = points
    w = np.ones(71)
    vis = np.zeros(71, dtype=bool)
    vis[: len(points)] = True
    if weights is not None:
        w[: len(weights)] = weights
    if visible is not None:
        vis[: len(visible)] = visible
    return Landmarks2D(pts, w, vis)


# --- landmark ---------------------------------------------------------------


def test_landmark_zero_at_identity():
    gt = _lmk([[0.1, 0.2], [-0.3, 0.4]])
    assert landmark_loss(gt, gt.points.copy()) == 0.0


def test_landmark_l1_by_definition():
    gt = _lmk([[0.0, 0.0]])
    proj = gt.points.copy()
    proj[0] = [3.0, 4.0]
    assert landmark_loss(gt, proj) == 7.0


def test_landmark_weighted_hand_case():
    gt = _lmk([[0.0, 0.0], [0.0, 0.0]], weights=[1.0, 0.5])
    proj = gt.points.copy()
    proj[0] = [1.0, 1.0]
    proj[1] = [2.0, 0.0]
    assert landmark_loss(gt, proj) == 1.0 * 2.0 + 0.5 * 2.0


def test_landmark_invisible_excluded_and_all_invisible_errors():
    gt = _lmk([[0.0, 0.0], [1.0, 1.0]], visible=[True, False])
    proj = gt.points.copy()
    proj[1] = [99.0, 99.0]
    assert landmark_loss(gt, proj) == 0.0
    gt_none = Landmarks2D(np.zeros((71, 2)), np.ones(71), np.zeros(71, dtype=bool))
    with pytest.raises(ContractError):
        landmark_loss(gt_none, np.zeros((71, 2)))


# --- photometric ------------------------------------------------------------


def test_photometric_identity_and_zero_mask():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (5, 4, 3))
    mask = rng.uniform(0, 1, (5, 4))
    assert photometric_loss(img, img.copy(), mask) == 0.0
    other = rng.uniform(0, 1, (5, 4, 3))
    assert photometric_loss(img, other, np.zeros((5, 4))) == 0.0


def test_photometric_hand_case_sum_mode():
    image = np.ones((1, 1, 3))
    render = np.full((1, 1, 3), 0.25)
    mask = np.full((1, 1), 0.5)
    assert photometric_loss(image, render, mask, reduction="sum") == pytest.approx(1.125)
    assert photometric_loss(image, render, mask, reduction="mean") == pytest.approx(1.125)


def test_photometric_shape_mismatch():
    with pytest.raises(ContractError):
        photometric_loss(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)), np.zeros((2, 2)))


# --- identity ---------------------------------------------------------------


def test_identity_boundary_values():
    a = np.array([1.0, 0.0])
    assert identity_loss(a, a) == pytest.approx(0.0, abs=1e-15)
    assert identity_loss(a, np.array([0.0, 1.0])) == pytest.approx(1.0)
    assert identity_loss(a, -a) == pytest.approx(2.0)
    with pytest.raises(ContractError):
        identity_loss(a, np.zeros(2))


# --- dice -------------------------------------------------------------------


def test_dice_identity_any_soft_mask():
    rng = np.random.default_rng(1)
    m = rng.uniform(0, 1, (9, 7))
    assert dice_loss(m, m.copy(), 1e-6) == 0.0


def test_dice_empty_masks():
    z = np.zeros((4, 4))
    assert dice_loss(z, z, 1.0) == 0.0


def test_dice_disjoint_hand_value():
    a = np.array([[1.0, 1.0, 0.0, 0.0]])
    b = np.array([[0.0, 0.0, 1.0, 1.0]])
    eps = 1e-6
    assert dice_loss(a, b, eps) == pytest.approx(1.0 - eps / (4.0 + eps), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_symmetry_and_range(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (6, 5))
    b = rng.uniform(0, 1, (6, 5))
    eps = 10.0 ** rng.uniform(-9, 0)
    d_ab = dice_loss(a, b, eps)
    d_ba = dice_loss(b, a, eps)
    assert d_ab == d_ba
    assert 0.0 <= d_ab < 1.0


def test_dice_disjoint_union_with_copies_invariant():
    rng = np.random.default_rng(2)
    a = (rng.uniform(0, 1, (4, 4)) > 0.5).astype(float)
    b = (rng.uniform(0, 1, (4, 4)) > 0.5).astype(float)
    eps = 1e-9
    base = dice_loss(a, b, eps)
    doubled = dice_loss(np.concatenate([a, a]), np.concatenate([b, b]), 2 * eps)
    assert doubled == pytest.approx(base, abs=1e-12)


# --- encoder / regularization -----------------------------------------------


def test_encoder_loss_cases():
    p = HeadParams.zeros(DIMS)
    q = HeadParams.zeros(DIMS)
    assert encoder_loss(p, q) == 0.0
    q.beta[0] = 2.0
    assert encoder_loss(p, q) == 4.0
    q = HeadParams.zeros(DIMS)
    q.beta[:2] = [1.0, 2.0]
    q.psi[0] = 3.0
    assert encoder_loss(p, q) == 14.0
    with pytest.raises(ContractError):
        encoder_loss(p, HeadParams.zeros((2, 2, 2)))


def test_regularization_cases():
    p = HeadParams.zeros(DIMS)
    assert regularization(p) == 0.0
    p.beta[:2] = [3.0, 4.0]
    assert regularization(p) == 25.0
    p.theta[:] = 9.0
    p.cam[:] = [5.0, 1.0, 1.0]
    p.light[:] = 2.0
    assert regularization(p) == 25.0  # pose/camera/light unpenalized
    neg = HeadParams(-p.beta, -p.psi, p.theta, -p.alpha, p.cam, p.light)
    assert regularization(neg) == regularization(p)


# --- inpainting terms -------------------------------------------------------


def test_hole_valid_boundary_masks():
    rng = np.random.default_rng(3)
    coarse = rng.uniform(0, 1, (4, 4, 3))
    refine = rng.uniform(0, 1, (4, 4, 3))
    gt = rng.uniform(0, 1, (4, 4, 3))
    hole, valid = hole_valid_losses(coarse, refine, gt, np.ones((4, 4)))
    assert valid == 0.0 and hole > 0.0
    hole, valid = hole_valid_losses(coarse, refine, gt, np.zeros((4, 4)))
    assert hole == 0.0 and valid > 0.0


def test_hole_valid_hand_case():
    gt = np.full((1, 1, 3), 0.5)
    coarse = gt + 0.2
    refine = gt + 0.1
    hole, valid = hole_valid_losses(coarse, refine, gt, np.ones((1, 1)))
    assert hole == pytest.approx(0.9, abs=1e-12)
    assert valid == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_hole_plus_valid_equals_unmasked_two_stage_l1(seed):
    rng = np.random.default_rng(seed)
    shape = (5, 6, 3)
    coarse = rng.uniform(0, 1, shape)
    refine = rng.uniform(0, 1, shape)
    gt = rng.uniform(0, 1, shape)
    mask = rng.uniform(0, 1, shape[:2])
    hole, valid = hole_valid_losses(coarse, refine, gt, mask)
    unmasked = float(np.sum(np.abs(refine - gt)) + np.sum(np.abs(coarse - gt)))
    assert hole + valid == pytest.approx(unmasked, rel=1e-12)


def test_edge_loss_zero_cases_and_oracle():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (6, 6, 3))
    assert edge_loss(img, img.copy()) == 0.0
    # Sobel annihilates constants
    assert edge_loss(np.full((5, 5, 3), 0.3), np.full((5, 5, 3), 0.9)) == 0.0

    # independent direct-convolution oracle on a half-black/half-white image
    half = np.zeros((4, 4, 3))
    half[:, 2:] = 1.0
    black = np.zeros((4, 4, 3))
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    ky = kx.T
    expected = 0.0
    for c in range(3):
        chan = half[:, :, c]
        pad = np.pad(chan, 1, mode="edge")
        for i in range(4):
            for j in range(4):
                win = pad[i : i + 3, j : j + 3]
                gx = float(np.sum(win * kx))
                gy = float(np.sum(win * ky))
                expected += np.hypot(gx, gy)
    assert edge_loss(half, black) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ContractError):
        edge_loss(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)))


def test_perceptual_loss_cases():
    rng = np.random.default_rng(5)
    layers = [rng.uniform(0, 1, (3, 4, 4)), rng.uniform(0, 1, (3, 2, 2))]
    assert perceptual_loss(layers, [l.copy() for l in layers]) == 0.0
    a = [np.zeros(4)]
    b = [np.full(4, 0.5)]
    assert perceptual_loss(a, b) == pytest.approx(0.5)
    extra = rng.uniform(0, 1, (2, 2))
    assert perceptual_loss(a + [extra], b + [extra.copy()]) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        perceptual_loss(a, [])


def test_adversarial_values():
    assert adversarial_value([0.5], [0.5]) == pytest.approx(2.0 * np.log(0.5), abs=1e-12)
    assert adversarial_value([1.0 - 1e-7], [1e-7]) == pytest.approx(0.0, abs=1e-6)
    rng = np.random.default_rng(6)
    r = rng.uniform(0.1, 0.9, 10)
    f = rng.uniform(0.1, 0.9, 10)
    perm = rng.permutation(10)
    assert adversarial_value(r, f) == adversarial_value(r[perm], f[perm])
    with pytest.raises(ContractError):
        adversarial_value([], [0.5])


def test_composite_valid_cases():
    rng = np.random.default_rng(7)
    refine = rng.uniform(0, 1, (3, 3, 3))
    gt = rng.uniform(0, 1, (3, 3, 3))
    assert np.array_equal(composite_valid(refine, gt, np.ones((3, 3))).rgb, refine)
    assert np.array_equal(composite_valid(refine, gt, np.zeros((3, 3))).rgb, gt)
    one = composite_valid(np.ones((1, 1, 3)), np.zeros((1, 1, 3)), np.full((1, 1), 0.5))
    np.testing.assert_allclose(one.rgb, 0.5)


# --- gradient checks --------------------------------------------------------


def _fd_check(value_fn, grad, x, step=1e-4, tol=1e-3, atol=1e-7, samples=20, seed=0):
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(x.size, min(samples, x.size), replace=False)
    for k in flat_idx:
        e = np.zeros(x.size)
        e[k] = step
        fd = (value_fn(x + e.reshape(x.shape)) - value_fn(x - e.reshape(x.shape))) / (2 * step)
        an = grad.reshape(-1)[k]
        assert abs(fd - an) <= tol * max(abs(fd), abs(an)) + atol, (k, fd, an)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)

    # landmark (away from kinks: offsets are O(1))
    gt = _lmk(rng.uniform(-0.5, 0.5, (71, 2)))
    proj = gt.points + rng.uniform(0.05, 0.3, (71, 2)) * rng.choice([-1, 1], (71, 2))
    _, d_proj = landmark_loss_grad(gt, proj)
    _fd_check(lambda p: landmark_loss(gt, p), d_proj, proj, seed=seed)

    # photometric w.r.t. the render
    img = rng.uniform(0, 1, (6, 5, 3))
    render = np.clip(img + rng.uniform(0.05, 0.2, img.shape) * rng.choice([-1, 1], img.shape), 0, 1)
    mask = rng.uniform(0.2, 1.0, (6, 5))
    _, d_r = photometric_loss_grad(img, render, mask, "mean")
    _fd_check(lambda r: photometric_loss(img, r, mask, "mean"), d_r, render, seed=seed)

    # identity w.r.t. both embeddings
    a = rng.standard_normal(16)
    b = rng.standard_normal(16)
    _, d_a, d_b = identity_loss_grad(a, b)
    _fd_check(lambda v: identity_loss(v, b), d_a, a, seed=seed)
    _fd_check(lambda v: identity_loss(a, v), d_b, b, seed=seed)

    # dice w.r.t. both masks
    ma = rng.uniform(0.05, 0.95, (7, 6))
    mb = rng.uniform(0.05, 0.95, (7, 6))
    _, d_ma, d_mb = dice_loss_grad(ma, mb, 1e-3)
    _fd_check(lambda m: dice_loss(m, mb, 1e-3), d_ma, ma, seed=seed)
    _fd_check(lambda m: dice_loss(ma, m, 1e-3), d_mb, mb, seed=seed)

    # encoder / regularization on flattened parameter vectors
    p = HeadParams.from_flat(rng.standard_normal(5 + 4 + 6 + 3 + 3 + 27) * 0.5 + 1.0, DIMS)
    q = HeadParams.from_flat(rng.standard_normal(p.flatten().size) * 0.5 + 1.0, DIMS)
    _, genc = encoder_loss_grad(p, q)
    _fd_check(
        lambda v: encoder_loss(HeadParams.from_flat(v, DIMS), q),
        genc.flatten(), p.flatten(), seed=seed,
    )
    _, greg = regularization_grad(p)
    _fd_check(
        lambda v: regularization(HeadParams.from_flat(v, DIMS)),
        greg.flatten(), p.flatten(), seed=seed,
    )

    # edge loss on images with non-degenerate gradients
    ia = rng.uniform(0, 1, (6, 6, 3))
    ib = rng.uniform(0, 1, (6, 6, 3))
    _, d_ia, d_ib = edge_loss_grad(ia, ib)
    _fd_check(lambda v: edge_loss(v, ib), d_ia, ia, seed=seed, samples=12)
    _fd_check(lambda v: edge_loss(ia, v), d_ib, ib, seed=seed, samples=12)

    # perceptual
    fa = rng.uniform(0, 1, (2, 3, 3))
    fb = rng.uniform(0, 1, (2, 3, 3))
    _, d_fa, _ = perceptual_loss_grad([fa], [fb])
    _fd_check(lambda v: perceptual_loss([v], [fb]), d_fa[0], fa, seed=seed, samples=10)


def test_providers_are_linear_with_exact_adjoints():
    rng = np.random.default_rng(8)
    img = rng.uniform(0, 1, (32, 32, 3))
    emb = MeanPatchEmbedder()
    v1 = emb.embed(img).vector
    v2 = emb.embed(2.0 * img).vector
    np.testing.assert_allclose(v2, 2.0 * v1, atol=1e-12)
    # adjoint identity <A x, y> == <x, A^T y>
    y = rng.standard_normal(v1.size)
    x2 = rng.uniform(0, 1, img.shape)
    lhs = float(emb.embed(x2).vector @ y)
    rhs = float(np.sum(x2 * emb.backward(img.shape, y)))
    assert lhs == pytest.approx(rhs, rel=1e-12)

    feats = BoxPyramidFeatures()
    layers = feats.extract(img)
    d_layers = [rng.standard_normal(l.shape) for l in layers]
    lhs = sum(float(np.sum(a * b)) for a, b in zip(feats.extract(x2), d_layers))
    rhs = float(np.sum(x2 * feats.backward(img.shape, d_layers)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_sobel_magnitude_shape_guard():
    with pytest.raises(ContractError):
        sobel_magnitude(np.zeros((2, 5, 3)))


def test_loss_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(landmark=-1.0)
    with pytest.raises(ContractError):
        LossWeights(dice_eps=0.0)
    with pytest.raises(ContractError):
        LossWeights(reduction="median")
