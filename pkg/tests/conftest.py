import numpy as np
import pytest

from radfield.field import FieldConfig, init_params
from radfield.geometry import CameraIntrinsics
from radfield.scenes import RingSpec, make_dataset, tri_sphere_scene

# Small architecture used across unit tests: fast, full code coverage
TINY_FIELD = FieldConfig(
    l_pos=2, l_dir=1, hidden_width=12, hidden_layers=2, skip_layer=1,
    color_hidden=6, pos_scale=0.25,
)


@pytest.fixture(scope="session")
def tiny_params():
    return init_params(TINY_FIELD, seed=0)


@pytest.fixture(scope="session")
def micro_dataset():
    """8x8, 2 train + 1 test views: enough to exercise every training path."""
    intr = CameraIntrinsics(width=8, height=8, focal=9.0)
    return make_dataset(
        tri_sphere_scene(), RingSpec(), n_views=3, intr=intr, t_near=1.0,
        t_far=9.0, seed=3, depth_sigma=0.05, n_dense=512,
    )


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
