import numpy as np
import pytest

from mvf.network import MvfConfig
from mvf.pointcloud import SyntheticSceneSpec, generate_scene
from mvf.voxelizer import bev_grid, perspective_grid, toy_cloud as _toy_cloud, toy_grid as _toy_grid


@pytest.fixture
def toy_cloud():
    return _toy_cloud()


@pytest.fixture
def toy_grid():
    return _toy_grid()


@pytest.fixture(scope="session")
def desk_scene():
    return generate_scene(SyntheticSceneSpec(object_count=8, rng_seed=1))


def tiny_config(**overrides) -> MvfConfig:
    """A network small enough for finite-difference checks."""
    kw = dict(
        point_embed_dim=6,
        view_feature_dim=4,
        fused_output_dim=4,
        bev_grid=bev_grid(half_extent=4.0, cell=1.0, z_range=(-3.0, 3.0)),
        persp_grid=perspective_grid(phi_cells=8, theta_cells=4),
        tower_depth=2,
        backbone_channels=(3, 4),
        backbone_strides=(1, 2),
    )
    kw.update(overrides)
    return MvfConfig(**kw)


def random_cloud(n: int, half: float, seed: int):
    from mvf.pointcloud import PointCloud

    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-half, half, size=(n, 3))
    xyz[:, 2] = rng.uniform(-2.0, 2.0, size=n)
    return PointCloud(np.column_stack([xyz, rng.uniform(0, 1, size=n)]), f"rand{seed}")


def small_detector_config():
    """A 32x32 BEV detector that trains in well under a second per step."""
    from mvf.detector import DetectorConfig

    mvf = MvfConfig(
        point_embed_dim=16,
        view_feature_dim=8,
        fused_output_dim=8,
        bev_grid=bev_grid(half_extent=12.8, cell=0.8, z_range=(-3.0, 3.0)),
        persp_grid=perspective_grid(phi_cells=32, theta_cells=8),
        backbone_channels=(8, 16),
    )
    return DetectorConfig(mvf=mvf)


def small_scene(seed: int = 0):
    return generate_scene(SyntheticSceneSpec(object_count=3, background_points=300, points_per_object=(60, 100),
                                             extent=12.8, min_range=2.0, rng_seed=seed))
