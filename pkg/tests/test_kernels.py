"""Backend equivalence: the compiled kernels must match the numpy
fallback to floating-point rounding, and the grid-accelerated closest
point must match the exhaustive scan exactly within a backend."""

import numpy as np
import pytest

import headfit._kernels as kernels
from headfit._kernels import pure
from headfit.model import HeadParams, decode_geometry
from headfit.render import DEFAULT_PAD_SIGMAS, project

from conftest import random_params

_core = pytest.importorskip("headfit._kernels._core")


def _scene(asset, seed, with_light=True):
    params = random_params(asset, seed, with_light=with_light)
    mesh = decode_geometry(params, asset)
    xy = np.ascontiguousarray(project(mesh.vertices, params.cam))
    z = np.ascontiguousarray(mesh.vertices[:, 2])
    rng = np.random.default_rng(seed + 100)
    colors = rng.uniform(0.05, 0.95, (asset.n_vertices, 3))
    return xy, z, colors


@pytest.mark.parametrize("seed,size,sigma", [(0, 24, 0.02), (1, 33, 0.008), (2, 48, 0.015)])
def test_forward_equivalence(asset, seed, size, sigma):
    xy, z, colors = _scene(asset, seed)
    pad = DEFAULT_PAD_SIGMAS * sigma
    out_c = _core.raster_forward(xy, z, asset.faces, colors, size, size, sigma, pad)
    out_p = pure.raster_forward(xy, z, asset.faces, colors, size, size, sigma, pad)
    np.testing.assert_allclose(out_c[0], out_p[0], rtol=0, atol=1e-12)  # silhouette
    np.testing.assert_allclose(out_c[1], out_p[1], rtol=0, atol=1e-12)  # color
    assert np.array_equal(out_c[3], out_p[3])  # winner faces
    finite = np.isfinite(out_c[2])
    assert np.array_equal(finite, np.isfinite(out_p[2]))
    np.testing.assert_allclose(out_c[2][finite], out_p[2][finite], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out_c[4], out_p[4], rtol=0, atol=1e-12)  # barycentrics


@pytest.mark.parametrize("seed,size,sigma", [(3, 24, 0.02), (4, 40, 0.01)])
def test_backward_equivalence(asset, seed, size, sigma):
    xy, z, colors = _scene(asset, seed)
    pad = DEFAULT_PAD_SIGMAS * sigma
    fwd = _core.raster_forward(xy, z, asset.faces, colors, size, size, sigma, pad)
    rng = np.random.default_rng(seed)
    d_sil = rng.standard_normal((size, size))
    d_col = rng.standard_normal((size, size, 3))
    args = (xy, z, asset.faces, colors, size, size, sigma, pad, fwd[0], fwd[3], fwd[4])
    g_c = _core.raster_backward(*args, d_sil, d_col)
    g_p = pure.raster_backward(*args, d_sil, d_col)
    np.testing.assert_allclose(g_c[0], g_p[0], rtol=0, atol=1e-9)
    np.testing.assert_allclose(g_c[1], g_p[1], rtol=0, atol=1e-9)


def test_backward_handles_missing_streams(asset):
    xy, z, colors = _scene(asset, 5)
    size, sigma = 24, 0.02
    pad = DEFAULT_PAD_SIGMAS * sigma
    fwd = _core.raster_forward(xy, z, asset.faces, colors, size, size, sigma, pad)
    args = (xy, z, asset.faces, colors, size, size, sigma, pad, fwd[0], fwd[3], fwd[4])
    d_sil = np.ones((size, size))
    g_sil_only = _core.raster_backward(*args, d_sil, None)
    assert np.any(g_sil_only[0]) and not np.any(g_sil_only[1])
    g_none = _core.raster_backward(*args, None, None)
    assert not np.any(g_none[0]) and not np.any(g_none[1])


def test_grid_closest_matches_exhaustive_exactly(asset):
    mesh = decode_geometry(HeadParams.zeros(asset.dims), asset)
    rng = np.random.default_rng(6)
    pts = np.ascontiguousarray(
        np.concatenate([
            rng.standard_normal((400, 3)) * 100.0,
            mesh.vertices[rng.integers(0, asset.n_vertices, 100)] + rng.standard_normal((100, 3)),
        ])
    )
    d_grid, c_grid, _ = _core.surface_closest(pts, mesh.vertices, asset.faces)
    d_brute, c_brute, _ = _core.surface_closest_brute(pts, mesh.vertices, asset.faces)
    assert np.array_equal(d_grid, d_brute)
    np.testing.assert_allclose(c_grid, c_brute, rtol=0, atol=1e-9)


def test_pure_closest_matches_compiled(asset):
    mesh = decode_geometry(HeadParams.zeros(asset.dims), asset)
    rng = np.random.default_rng(7)
    pts = np.ascontiguousarray(rng.standard_normal((200, 3)) * 90.0)
    d_p, c_p, _ = pure.surface_closest(pts, mesh.vertices, asset.faces)
    d_c, c_c, _ = _core.surface_closest(pts, mesh.vertices, asset.faces)
    np.testing.assert_allclose(d_p, d_c, rtol=0, atol=1e-12)
    np.testing.assert_allclose(c_p, c_c, rtol=0, atol=1e-9)


def test_closest_point_independent_oracle(asset):
    """Closest-point distances vs an independently formulated oracle:
    perpendicular foot if its barycentrics are nonnegative, else the best
    of the three edge segments."""
    mesh = decode_geometry(HeadParams.zeros(asset.dims), asset)
    rng = np.random.default_rng(8)
    pts = rng.standard_normal((60, 3)) * 90.0
    tri = mesh.vertices[asset.faces]

    def seg_dist(p, a, b):
        ab = b - a
        t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
        return np.linalg.norm(p - (a + t * ab))

    expected = np.empty(len(pts))
    for i, p in enumerate(pts):
        best = np.inf
        for a, b, c in tri:
            n = np.cross(b - a, c - a)
            nn = np.dot(n, n)
            if nn > 0:
                q = p - n * (np.dot(p - a, n) / nn)
                area = np.linalg.norm(n)
                la = np.dot(np.cross(b - q, c - q), n) / (area * area) * area
                lb = np.dot(np.cross(c - q, a - q), n) / (area * area) * area
                lc = np.dot(np.cross(a - q, b - q), n) / (area * area) * area
                if la >= -1e-12 and lb >= -1e-12 and lc >= -1e-12:
                    best = min(best, np.linalg.norm(p - q))
                    continue
            best = min(best, seg_dist(p, a, b), seg_dist(p, b, c), seg_dist(p, c, a))
        expected[i] = best
    got, _, _ = kernels.surface_closest(np.ascontiguousarray(pts), mesh.vertices, asset.faces)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_backend_reports_itself():
    assert kernels.BACKEND in ("cython", "python")
