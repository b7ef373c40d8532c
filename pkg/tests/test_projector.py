import numba
import numpy as np
import pytest

from fod_forge.errors import ConfigurationError
from fod_forge.utils.parallel import set_kernel_threads
from fod_forge.xray.geometry import ConeBeamGeometry, uniform_angles
from fod_forge.xray.projector import ConeBeamProjector, backproject, trace_path_lengths


@pytest.fixture
def projector() -> ConeBeamProjector:
    geometry = ConeBeamGeometry.uniform(8, detector_rows=40, detector_cols=40, pixel_size=0.15)
    return ConeBeamProjector(geometry, (32, 32, 32), 0.1)


def test_uniform_angles_cover_a_full_turn():
    angles = uniform_angles(1800)
    assert angles[0] == 0.0
    assert angles[450] == pytest.approx(np.pi / 2)
    assert angles[-1] < 2 * np.pi


def test_geometry_rejects_unsorted_angles():
    with pytest.raises(ValueError):
        ConeBeamGeometry(angles=[0.5, 0.1])


@pytest.mark.parametrize("seed", range(20))
def test_backprojection_is_the_adjoint(projector, seed):
    rng = np.random.default_rng(seed)
    volume = rng.random(projector.volume_shape)
    images = rng.random(projector.projection_shape)

    lhs = float(np.sum(projector.forward(volume) * images))
    rhs = float(np.sum(volume * projector.backward(images)))
    assert abs(lhs - rhs) / abs(lhs) < 1e-4


def test_central_ray_crosses_the_cube_once():
    geometry = ConeBeamGeometry.uniform(4, detector_rows=41, detector_cols=41, pixel_size=0.15)
    labels = np.zeros((32, 32, 32), dtype=np.uint8)
    labels[11:21, 11:21, 11:21] = 1
    for angle in range(4):
        lengths = trace_path_lengths(labels, geometry, angle, 1, 0.1)
        assert lengths[20, 20] == pytest.approx(1.0, abs=1e-6)
        assert lengths[0, 0] == 0.0


def test_path_lengths_only_count_the_requested_material():
    geometry = ConeBeamGeometry.uniform(4, detector_rows=41, detector_cols=41, pixel_size=0.15)
    labels = np.zeros((32, 32, 32), dtype=np.uint8)
    labels[11:21, 11:21, 11:21] = 1
    assert not trace_path_lengths(labels, geometry, 0, 2, 0.1).any()


def test_single_angle_backprojection_matches_operator(projector):
    rng = np.random.default_rng(0)
    image = rng.random(projector.geometry.detector_shape)
    single = backproject(image, projector.geometry, 3, projector.volume_shape, 0.1)
    assert np.allclose(single, projector.backward(image[np.newaxis], [3]))


def test_results_do_not_depend_on_thread_count(projector):
    rng = np.random.default_rng(1)
    volume = rng.random(projector.volume_shape)
    images = rng.random(projector.projection_shape)
    try:
        set_kernel_threads(1)
        forward_one = projector.forward(volume)
        backward_one = projector.backward(images)
        set_kernel_threads(numba.config.NUMBA_NUM_THREADS)
        forward_all = projector.forward(volume)
        backward_all = projector.backward(images)
    finally:
        set_kernel_threads(numba.config.NUMBA_NUM_THREADS)
    assert np.array_equal(forward_one, forward_all)
    assert np.array_equal(backward_one, backward_all)


def test_supersampling_keeps_the_adjoint_pair():
    geometry = ConeBeamGeometry.uniform(3, detector_rows=20, detector_cols=20, pixel_size=0.3)
    projector = ConeBeamProjector(geometry, (16, 16, 16), 0.2, supersample=2)
    rng = np.random.default_rng(5)
    volume = rng.random(projector.volume_shape)
    images = rng.random(projector.projection_shape)
    lhs = float(np.sum(projector.forward(volume) * images))
    rhs = float(np.sum(volume * projector.backward(images)))
    assert abs(lhs - rhs) / abs(lhs) < 1e-4


def test_projector_rejects_wrong_volume_shape(projector):
    with pytest.raises(ConfigurationError):
        projector.forward(np.zeros((8, 8, 8)))


def test_angle_index_out_of_range(small_geometry):
    with pytest.raises(ConfigurationError):
        trace_path_lengths(np.zeros((16, 16, 16), dtype=np.uint8), small_geometry, 99, 1, 0.2)


def test_source_inside_volume_is_rejected():
    geometry = ConeBeamGeometry.uniform(2, source_origin_dist=1.0)
    with pytest.raises(ConfigurationError):
        ConeBeamProjector(geometry, (64, 64, 64), 0.1)


def test_forward_is_linear(projector):
    rng = np.random.default_rng(7)
    x, y = rng.random(projector.volume_shape), rng.random(projector.volume_shape)
    combined = projector.forward(2.5 * x - 0.75 * y)
    assert np.allclose(combined, 2.5 * projector.forward(x) - 0.75 * projector.forward(y), rtol=1e-10, atol=1e-12)


def test_forward_is_monotone(projector):
    rng = np.random.default_rng(8)
    lower = rng.random(projector.volume_shape)
    upper = lower + rng.random(projector.volume_shape)
    assert np.all(projector.forward(lower) <= projector.forward(upper))


def test_zero_images_backproject_to_zero(projector):
    assert not projector.backward(np.zeros(projector.projection_shape)).any()


def test_single_pixel_backprojects_along_its_ray(projector):
    image = np.zeros(projector.projection_shape)
    image[2, 17, 23] = 1.0
    volume = projector.backward(image)
    crossed = volume > 0

    assert crossed.any()
    assert crossed.sum() <= sum(projector.volume_shape)
    ray_length = projector.forward(np.ones(projector.volume_shape))[2, 17, 23]
    assert volume.sum() == pytest.approx(ray_length, rel=1e-9)
    assert projector.forward(crossed.astype(float))[2, 17, 23] == pytest.approx(ray_length, rel=1e-9)


def test_oblique_rays_through_a_uniform_cube():
    geometry = ConeBeamGeometry.uniform(8, detector_rows=41, detector_cols=41, pixel_size=0.15)
    labels = np.zeros((32, 32, 32), dtype=np.uint8)
    labels[11:21, 11:21, 11:21] = 1

    diagonal = trace_path_lengths(labels, geometry, 1, 1, 0.1)
    assert diagonal[20, 20] == pytest.approx(np.sqrt(2.0), rel=0.01)

    # off-centre pixel at angle 0: the ray enters and leaves through the x faces
    lengths = trace_path_lengths(labels, geometry, 0, 1, 0.1)
    offset = 4 * geometry.pixel_size
    direction = np.array([geometry.source_detector_dist, offset, offset])
    expected = 1.0 * np.linalg.norm(direction) / direction[0]
    assert lengths[24, 24] == pytest.approx(expected, rel=0.01)
    assert lengths[24, 24] > lengths[20, 20]
