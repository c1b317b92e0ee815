import numpy as np
import pytest

from headfit.errors import ContractError
from headfit.model import (
    HeadParams,
    ModelAsset,
    ParamGrads,
    TriMesh,
    decode_albedo,
    decode_geometry,
    decode_geometry_fwd,
    embed_landmarks,
    geometry_backward,
    rodrigues,
    synth_model,
    validate_asset,
)

from conftest import SMALL_DIMS, random_params


def test_zero_params_decode_template_exactly(asset):
    mesh = decode_geometry(HeadParams.zeros(asset.dims), asset)
    assert np.array_equal(mesh.vertices, asset.template_vertices)


def test_single_beta_column(asset):
    params = HeadParams.zeros(asset.dims)
    params.beta[0] = 1.0
    mesh = decode_geometry(params, asset)
    expected = asset.template_vertices + asset.shape_basis[:, :, 0]
    np.testing.assert_allclose(mesh.vertices, expected, atol=1e-12)


def test_global_rotation_matches_hand_built_matrix(asset):
    params = HeadParams.zeros(asset.dims)
    params.theta[2] = np.pi / 2.0
    mesh = decode_geometry(params, asset)
    c, s = np.cos(np.pi / 2.0), np.sin(np.pi / 2.0)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    root = asset.joints[0]
    oracle = (asset.template_vertices - root) @ rz.T + root
    np.testing.assert_allclose(mesh.vertices, oracle, atol=1e-9)


def test_additivity_of_blendshapes(asset):
    rng = np.random.default_rng(0)
    b1 = rng.standard_normal(asset.dims[0])
    b2 = rng.standard_normal(asset.dims[0])
    p = HeadParams.zeros(asset.dims)
    base = asset.template_vertices

    def offsets(b):
        p.beta = b.copy()
        return decode_geometry(p, asset).vertices - base

    lhs = offsets(b1 + b2)
    rhs = offsets(b1) + offsets(b2)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-12)


def test_identity_rotations_reproduce_rest_shape(asset):
    rng = np.random.default_rng(1)
    params = HeadParams.zeros(asset.dims)
    params.beta = rng.standard_normal(asset.dims[0]) * 0.5
    params.psi = rng.standard_normal(asset.dims[1]) * 0.5
    rest = decode_geometry(params, asset).vertices
    params.theta = np.zeros(6)
    assert np.array_equal(decode_geometry(params, asset).vertices, rest)


def test_dimension_mismatch_raises(asset):
    with pytest.raises(ContractError):
        decode_geometry(HeadParams.zeros((3, 3, 3)), asset)
    with pytest.raises(ContractError):
        decode_albedo(np.zeros(7), asset)


# --- landmarks --------------------------------------------------------------


def test_landmark_corner_and_centroid(asset):
    mesh = decode_geometry(HeadParams.zeros(asset.dims), asset)
    faces = np.array([0, 1], dtype=np.int64)
    bary = np.array([[1.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]])
    pts = embed_landmarks(mesh, faces, bary)
    assert np.array_equal(pts[0], mesh.vertices[mesh.faces[0, 0]])
    np.testing.assert_allclose(pts[1], mesh.vertices[mesh.faces[1]].mean(axis=0), atol=1e-12)


def test_landmark_displacement_under_shape_blend(asset):
    params = HeadParams.zeros(asset.dims)
    params.beta[0] = 1.0
    mesh = decode_geometry(params, asset)
    pts = embed_landmarks(mesh, asset.landmark_faces, asset.landmark_bary)
    # oracle: blend the basis rows with the same barycentric weights
    vids = asset.faces[asset.landmark_faces]
    base = np.einsum("kij,ki->kj", asset.template_vertices[vids], asset.landmark_bary)
    delta = np.einsum("kij,ki->kj", asset.shape_basis[:, :, 0][vids], asset.landmark_bary)
    np.testing.assert_allclose(pts, base + delta, atol=1e-9)


def test_landmark_linearity(asset):
    rng = np.random.default_rng(3)
    va = rng.standard_normal(asset.template_vertices.shape)
    vb = rng.standard_normal(asset.template_vertices.shape)
    t = 0.3

    def lmk(v):
        return embed_landmarks(TriMesh(v, asset.faces), asset.landmark_faces, asset.landmark_bary)

    blended = lmk((1 - t) * va + t * vb)
    np.testing.assert_allclose(blended, (1 - t) * lmk(va) + t * lmk(vb), atol=1e-9)


def test_landmark_bad_face_index(asset):
    mesh = decode_geometry(HeadParams.zeros(asset.dims), asset)
    with pytest.raises(ContractError):
        embed_landmarks(mesh, np.array([len(asset.faces)]), np.array([[1.0, 0.0, 0.0]]))


# --- albedo -----------------------------------------------------------------


def _hand_asset():
    """Tiny hand-built asset for albedo arithmetic."""
    verts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [0.0, 0, 1]])
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]], dtype=np.int64)
    V = 4
    basis = np.zeros((V, 3, 2))
    basis[0, :, 0] = 0.1  # +0.1 per channel at vertex 0
    basis[:, :, 1] = 1.2  # column that saturates the clamp
    return ModelAsset(
        template_vertices=verts,
        faces=faces,
        shape_basis=np.zeros((V, 3, 1)),
        expression_basis=np.zeros((V, 3, 1)),
        albedo_mean=np.full((V, 3), 0.5),
        albedo_basis=basis,
        joints=np.array([[0.0, 0, 0], [0.0, 0, 0.5]]),
        skinning_weights=np.tile([1.0, 0.0], (V, 1)),
        landmark_faces=np.zeros(71, dtype=np.int64),
        landmark_bary=np.tile([1.0, 0.0, 0.0], (71, 1)),
        regions={"face": np.array([0, 1]), "upper_head": np.array([2, 3])},
    )


def test_albedo_mean_and_offset_and_clamp():
    tiny = _hand_asset()
    assert np.array_equal(decode_albedo(np.zeros(2), tiny), tiny.albedo_mean)
    shifted = decode_albedo(np.array([1.0, 0.0]), tiny)
    np.testing.assert_allclose(shifted[0], 0.6)
    np.testing.assert_allclose(shifted[1:], 0.5)
    clamped = decode_albedo(np.array([0.0, 1.0]), tiny)  # 0.5 + 1.2 -> 1.0
    assert clamped.max() == 1.0


# --- synthetic assets -------------------------------------------------------


def test_synth_deterministic():
    a = synth_model(7, 162, dims=(4, 3, 2))
    b = synth_model(7, 162, dims=(4, 3, 2))
    for name in (
        "template_vertices", "faces", "shape_basis", "expression_basis",
        "albedo_mean", "albedo_basis", "joints", "skinning_weights",
        "landmark_faces", "landmark_bary",
    ):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_synth_invariants_and_shape(asset):
    validate_asset(asset)
    assert asset.n_vertices == 642
    height = asset.template_vertices[:, 1].max() - asset.template_vertices[:, 1].min()
    assert 150.0 <= height <= 210.0
    # no degenerate faces
    t = asset.template_vertices
    areas = 0.5 * np.linalg.norm(
        np.cross(t[asset.faces[:, 1]] - t[asset.faces[:, 0]],
                 t[asset.faces[:, 2]] - t[asset.faces[:, 0]]), axis=1)
    assert areas.min() > 1e-12


def test_synth_scalp_landmarks_and_regions(asset):
    mesh = decode_geometry(HeadParams.zeros(asset.dims), asset)
    lmk = embed_landmarks(mesh, asset.landmark_faces, asset.landmark_bary)
    top = asset.template_vertices[:, 1].max()
    assert (lmk[68:, 1] > 0.9 * top).all(), "3 landmarks must sit on top of the scalp"
    assert len(asset.regions["face"]) > 0 and len(asset.regions["upper_head"]) > 0


def test_synth_jaw_weights_ramp(asset):
    y = asset.template_vertices[:, 1]
    jaw = asset.skinning_weights[:, 1]
    assert jaw[y > 0].max() == 0.0
    assert jaw[y < y.min() + 10.0].min() > 0.5


def test_synth_rejects_tiny_target():
    with pytest.raises(ContractError):
        synth_model(0, 50)


def test_synth_zero_decode(asset):
    mesh = decode_geometry(HeadParams.zeros(asset.dims), asset)
    assert np.array_equal(mesh.vertices, asset.template_vertices)


# --- gradients --------------------------------------------------------------


def test_posed_vertex_jacobian_matches_finite_differences(asset):
    """Spec invariant: posed-vertex Jacobian vs central differences at
    100 seeded random probe vertices, rel err <= 1e-3, step 1e-4."""
    rng = np.random.default_rng(11)
    probes = rng.integers(0, asset.n_vertices, 100)
    for config_seed in (0, 1):
        params = random_params(asset, config_seed)
        _, tape = decode_geometry_fwd(params, asset)
        weights = np.zeros((asset.n_vertices, 3))
        weights[probes] = rng.standard_normal((len(probes), 3))
        grads = ParamGrads.zeros(asset.dims)
        geometry_backward(tape, weights, grads)
        analytic = np.concatenate([grads.beta, grads.psi, grads.theta])
        flat = params.flatten()
        n_geom = asset.dims[0] + asset.dims[1] + 6

        def probe(vec):
            q = HeadParams.from_flat(vec, asset.dims)
            return float(np.sum(decode_geometry(q, asset).vertices * weights))

        for k in range(n_geom):
            e = np.zeros_like(flat)
            e[k] = 1e-4
            fd = (probe(flat + e) - probe(flat - e)) / 2e-4
            err = abs(fd - analytic[k]) / max(abs(fd), abs(analytic[k]), 1e-7)
            assert err <= 1e-3, f"config {config_seed} entry {k}: rel err {err}"


def test_rodrigues_small_angle_stability():
    v = np.array([1e-13, -2e-13, 5e-14])
    R = rodrigues(v)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(rodrigues(np.zeros(3)), np.eye(3), atol=0)


def test_head_params_validation():
    with pytest.raises(ContractError):
        HeadParams.zeros(SMALL_DIMS, cam_scale=-1.0)
    p = HeadParams.zeros(SMALL_DIMS)
    flat = p.flatten()
    q = HeadParams.from_flat(flat, SMALL_DIMS)
    assert np.array_equal(q.flatten(), flat)
