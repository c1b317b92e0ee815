import numpy as np
import pytest

from headfit.model import HeadParams, synth_model

SMALL_DIMS = (12, 6, 4)


@pytest.fixture(scope="session")
def asset():
    """Small deterministic head shared by the whole suite."""
    return synth_model(1, 642, dims=SMALL_DIMS)


@pytest.fixture(scope="session")
def asset_fulldims():
    return synth_model(2, 642)


def random_params(asset, seed, pose_scale=0.25, with_light=True):
    rng = np.random.default_rng(seed)
    n_beta, n_psi, n_alpha = asset.dims
    light = np.zeros(27)
    if with_light:
        light = light.reshape(3, 9)
        light[:, 0] = rng.uniform(0.55, 0.8, 3)
        light[:, 1:] = rng.uniform(-0.08, 0.08, (3, 8))
        light = light.reshape(-1)
    return HeadParams(
        beta=rng.standard_normal(n_beta) * 0.4,
        psi=rng.standard_normal(n_psi) * 0.4,
        theta=rng.standard_normal(6) * pose_scale,
        alpha=rng.standard_normal(n_alpha) * 0.4,
        cam=np.array([rng.uniform(0.008, 0.011), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)]),
        light=light,
    )


def rel_err(a, b, floor=1e-7):
    return abs(a - b) / max(abs(a), abs(b), floor)
