import pytest

from fod_forge.config import PipelineConfig
from fod_forge.xray.geometry import ConeBeamGeometry


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run the full-size acceptance tests",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_geometry() -> ConeBeamGeometry:
    """12 angles on a 24 x 24 detector; covers a 16^3 grid of 0.2 cm voxels"""
    return ConeBeamGeometry.uniform(12, detector_rows=24, detector_cols=24, pixel_size=0.25)


@pytest.fixture
def tiny_config(tmp_path) -> PipelineConfig:
    """Whole pipeline in seconds: 4 objects at 16^3, 16 angles"""
    return PipelineConfig.model_validate(
        {
            "master_seed": 3,
            "threads": 1,
            "output_dir": str(tmp_path / "run"),
            "phantom": {
                "count": 4,
                "volume_dim": 16,
                "cube_dim": 10,
                "ellipsoid_radius_min": 1.0,
                "ellipsoid_radius_max": 2.0,
                "voxel_size_cm": 0.2,
            },
            "geometry": {"detector_rows": 24, "detector_cols": 24, "pixel_size": 0.25, "n_angles": 16},
            "spectrum": {"bin_width": 5.0},
            "sirt": {"iterations": 10},
            "segmentation": {"sweep_factors": [0.9, 1.1]},
            "ground_truth": {"resize": 16},
            "dataset": {"objects": 2, "total": 8, "test_objects": 2},
        }
    )
