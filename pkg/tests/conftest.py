import numpy as np
import pytest

from gsvv.gaussian_model import GaussianFrame, sh_coeff_count


def random_frame(n, seed=0, sh_degree=3, frame_index=0):
    rng = np.random.default_rng(seed)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianFrame(
        frame_index=frame_index,
        positions=rng.uniform(-2, 2, size=(n, 3)),
        scales=rng.uniform(-4, -1, size=(n, 3)),
        rotations=quats,
        opacities=rng.uniform(-2, 4, size=n),
        sh=rng.normal(0, 0.3, size=(n, sh_coeff_count(sh_degree))),
        sh_degree=sh_degree,
    )


@pytest.fixture
def frame_1k():
    return random_frame(1000, seed=42)
