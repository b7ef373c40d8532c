"""Virtual projection of 3D foreign-object masks into 2D ground truth, and training-pair resizing."""

import logging
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Tuple

import numpy as np

from fod_forge.errors import ConfigurationError, ParameterError
from fod_forge.phantom import FOREIGN, LabeledVolume
from fod_forge.xray.geometry import ConeBeamGeometry
from fod_forge.xray.projector import ConeBeamProjector

logger = logging.getLogger(__name__)

Provenance = Literal["workflow", "absolute"]
PROVENANCES = ("workflow", "absolute")

EPS_LEN_FACTOR = 1e-6
CATMULL_ROM_A = -0.5
MASK_LEVEL = 0.5


@dataclass
class BinaryMask:
    values: np.ndarray
    angle_index: int
    object_id: int = 0
    provenance: Provenance = "workflow"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ParameterError(f"unknown mask provenance {self.provenance!r}")
        self.values = np.asarray(self.values, dtype=bool)


def check_scan_geometry(geometry: ConeBeamGeometry, scan_geometry_hash: Optional[str]) -> None:
    """Ground truth must be projected with the geometry the object was scanned with"""
    if scan_geometry_hash is not None and geometry.geometry_hash() != scan_geometry_hash:
        raise ConfigurationError(
            "projection geometry differs from the object's scan geometry "
            f"({geometry.geometry_hash()[:12]} != {scan_geometry_hash[:12]})"
        )


def virtual_project_stack(
    mask3d: np.ndarray,
    geometry: ConeBeamGeometry,
    voxel_size_cm: float,
    angle_indices: Optional[Sequence[int]] = None,
    eps_len: Optional[float] = None,
    scan_geometry_hash: Optional[str] = None,
    supersample: int = 1,
) -> np.ndarray:
    """Boolean [angle, row, col] stack: true where the ray crosses more than eps_len of the mask"""
    check_scan_geometry(geometry, scan_geometry_hash)
    if eps_len is None:
        eps_len = EPS_LEN_FACTOR * voxel_size_cm
    if eps_len < 0:
        raise ParameterError("eps_len must be >= 0")
    projector = ConeBeamProjector(geometry, mask3d.shape, voxel_size_cm, supersample)
    density = np.asarray(mask3d, dtype=bool).astype(np.float64)
    if not density.any():
        n = geometry.n_angles if angle_indices is None else len(angle_indices)
        for index in angle_indices or ():
            geometry.check_angle_index(int(index))
        return np.zeros((n,) + geometry.detector_shape, dtype=bool)
    return projector.forward(density, angle_indices) > eps_len


def virtual_project(
    mask3d: np.ndarray,
    geometry: ConeBeamGeometry,
    angle_index: int,
    voxel_size_cm: float,
    eps_len: Optional[float] = None,
    scan_geometry_hash: Optional[str] = None,
    object_id: int = 0,
    provenance: Provenance = "workflow",
    supersample: int = 1,
) -> BinaryMask:
    geometry.check_angle_index(angle_index)
    values = virtual_project_stack(
        mask3d,
        geometry,
        voxel_size_cm,
        [angle_index],
        eps_len=eps_len,
        scan_geometry_hash=scan_geometry_hash,
        supersample=supersample,
    )[0]
    return BinaryMask(values=values, angle_index=angle_index, object_id=object_id, provenance=provenance)


def absolute_ground_truth(
    phantom: LabeledVolume,
    geometry: ConeBeamGeometry,
    angle_index: int,
    eps_len: Optional[float] = None,
    scan_geometry_hash: Optional[str] = None,
    supersample: int = 1,
) -> BinaryMask:
    """Projection of the phantom's own foreign-object labels, bypassing reconstruction"""
    return virtual_project(
        phantom.mask(FOREIGN),
        geometry,
        angle_index,
        phantom.voxel_size_cm,
        eps_len=eps_len,
        scan_geometry_hash=scan_geometry_hash,
        object_id=phantom.object_id,
        provenance="absolute",
        supersample=supersample,
    )


def radiograph_label_mask(
    phantom: LabeledVolume, geometry: ConeBeamGeometry, angle_index: int
) -> np.ndarray:
    """Radiograph pixels covered by a foreign object, for the split radiograph histogram"""
    return absolute_ground_truth(phantom, geometry, angle_index).values


def catmull_rom(x: np.ndarray, a: float = CATMULL_ROM_A) -> np.ndarray:
    """Cubic convolution kernel; a = -0.5 gives Catmull-Rom"""
    x = np.abs(np.asarray(x, dtype=np.float64))
    inner = (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0
    outer = a * x**3 - 5.0 * a * x**2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, inner, np.where(x < 2.0, outer, 0.0))


def resize_weights(source: int, target: int) -> np.ndarray:
    """(target, source) matrix of bicubic weights.

    Pixel centres are aligned (s = (i + 0.5) * source / target - 0.5) and
    out-of-range taps are replicated from the edge.
    """
    scale = source / target
    weights = np.zeros((target, source), dtype=np.float64)
    for i in range(target):
        s = (i + 0.5) * scale - 0.5
        base = int(np.floor(s))
        taps = np.arange(base - 1, base + 3)
        kernel = catmull_rom(taps - s)
        np.add.at(weights[i], np.clip(taps, 0, source - 1), kernel)
    return weights


def resize_image(image: np.ndarray, target_dims: Tuple[int, int]) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    rows, cols = image.shape
    t_rows, t_cols = target_dims
    if t_rows > rows or t_cols > cols:
        raise ParameterError(f"resize target {target_dims} exceeds source {image.shape}")
    if (t_rows, t_cols) == (rows, cols):
        return image.copy()
    return resize_weights(rows, t_rows) @ image @ resize_weights(cols, t_cols).T


def resize_pair(
    radiograph: np.ndarray,
    mask: np.ndarray,
    target_dims: Tuple[int, int] = (128, 128),
) -> Tuple[np.ndarray, np.ndarray]:
    """Bicubic resize of a training pair; the mask is re-binarized at 0.5 afterwards"""
    if np.shape(radiograph) != np.shape(mask):
        raise ParameterError(
            f"radiograph {np.shape(radiograph)} and mask {np.shape(mask)} differ in shape"
        )
    resized = resize_image(radiograph, target_dims)
    field = resize_image(np.asarray(mask, dtype=np.float64), target_dims)
    return resized, field >= MASK_LEVEL
