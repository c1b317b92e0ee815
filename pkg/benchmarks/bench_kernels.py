"""Benchmark the compiled kernels against the pure numpy fallback.

Runs the soft-rasterizer forward/backward pass and closest-point queries
on a synthetic head at a few sizes, checks that both backends agree, and
prints a timing table.

    python3 benchmarks/bench_kernels.py [--repeats 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from headfit._kernels import pure
from headfit.model import HeadParams, decode_geometry, synth_model
from headfit.render import DEFAULT_PAD_SIGMAS, project

try:
    from headfit._kernels import _core
except ImportError:
    _core = None


def _timeit(fn, repeats: int) -> float:
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _core is None:
        print("compiled kernel not available; showing the fallback only")

    asset = synth_model(1, 642, dims=(12, 6, 4))
    rng = np.random.default_rng(0)
    params = HeadParams.zeros(asset.dims)
    params.beta = rng.standard_normal(12) * 0.5
    params.cam = np.array([0.0095, 0.0, 0.0])
    mesh = decode_geometry(params, asset)
    xy = np.ascontiguousarray(project(mesh.vertices, params.cam))
    z = np.ascontiguousarray(mesh.vertices[:, 2])
    colors = rng.uniform(0.1, 0.9, (asset.n_vertices, 3))
    queries = np.ascontiguousarray(rng.standard_normal((1000, 3)) * 80.0)

    print(f"head: V={asset.n_vertices} F={len(asset.faces)}   repeats={args.repeats}")
    header = f"{'kernel':<42}{'python':>12}{'cython':>12}{'speedup':>10}"
    print(header)
    print("-" * len(header))

    for size, sigma in ((64, 0.015), (128, 0.015), (256, 0.01)):
        pad = DEFAULT_PAD_SIGMAS * sigma
        fwd_args = (xy, z, asset.faces, colors, size, size, sigma, pad)
        out_py = pure.raster_forward(*fwd_args)
        t_py = _timeit(lambda: pure.raster_forward(*fwd_args), args.repeats)
        row = f"raster_forward {size}x{size} (sigma={sigma})"
        if _core is not None:
            out_cy = _core.raster_forward(*fwd_args)
            assert np.allclose(out_py[0], out_cy[0], atol=1e-12), "silhouette mismatch"
            assert np.allclose(out_py[1], out_cy[1], atol=1e-12), "color mismatch"
            t_cy = _timeit(lambda: _core.raster_forward(*fwd_args), args.repeats)
            print(f"{row:<42}{t_py * 1e3:>10.1f}ms{t_cy * 1e3:>10.1f}ms{t_py / t_cy:>9.1f}x")
        else:
            print(f"{row:<42}{t_py * 1e3:>10.1f}ms{'-':>12}{'-':>10}")

        d_sil = rng.uniform(0.1, 1.0, (size, size))
        d_col = rng.uniform(0.1, 1.0, (size, size, 3))
        bwd_args = (*fwd_args, out_py[0], out_py[3], out_py[4], d_sil, d_col)
        g_py = pure.raster_backward(*bwd_args)
        t_py = _timeit(lambda: pure.raster_backward(*bwd_args), args.repeats)
        row = f"raster_backward {size}x{size}"
        if _core is not None:
            g_cy = _core.raster_backward(*bwd_args)
            assert np.allclose(g_py[0], g_cy[0], atol=1e-9), "d_xy mismatch"
            assert np.allclose(g_py[1], g_cy[1], atol=1e-9), "d_colors mismatch"
            t_cy = _timeit(lambda: _core.raster_backward(*bwd_args), args.repeats)
            print(f"{row:<42}{t_py * 1e3:>10.1f}ms{t_cy * 1e3:>10.1f}ms{t_py / t_cy:>9.1f}x")
        else:
            print(f"{row:<42}{t_py * 1e3:>10.1f}ms{'-':>12}{'-':>10}")

    p2s_args = (queries, mesh.vertices, asset.faces)
    d_py = pure.surface_closest(*p2s_args)
    t_py = _timeit(lambda: pure.surface_closest(*p2s_args), args.repeats)
    row = "surface_closest 1000 queries"
    if _core is not None:
        d_cy = _core.surface_closest(*p2s_args)
        # grid-vs-exhaustive is bitwise within one backend; across backends
        # vectorized numpy and scalar C differ by rounding only
        assert np.allclose(d_py[0], d_cy[0], rtol=0, atol=1e-12), "distance mismatch"
        t_cy = _timeit(lambda: _core.surface_closest(*p2s_args), args.repeats)
        print(f"{row:<42}{t_py * 1e3:>10.1f}ms{t_cy * 1e3:>10.1f}ms{t_py / t_cy:>9.1f}x")
    else:
        print(f"{row:<42}{t_py * 1e3:>10.1f}ms{'-':>12}{'-':>10}")


if __name__ == "__main__":
    main()
