"""Randomized base objects (corner-cut cubes) with embedded ellipsoidal foreign objects."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy import ndimage
from scipy.spatial.transform import Rotation

from fod_forge.errors import ParameterError, PlacementError
from fod_forge.utils.store import load_raw, save_raw

logger = logging.getLogger(__name__)

BACKGROUND, BASE, FOREIGN = 0, 1, 2


class PhantomParams(BaseModel):
    volume_dim: int = Field(default=128, ge=1)
    cube_dim: int = Field(default=64, ge=1)
    ellipsoid_radius_min: float = 3.0
    ellipsoid_radius_max: float = 7.0
    foreign_count_distribution: List[Tuple[int, float]] = Field(
        default_factory=lambda: [(1, 0.5), (2, 0.5)]
    )
    seed: int = Field(default=0, ge=0, lt=2**64)
    voxel_size_cm: float = Field(default=0.1, gt=0)

    def problems(self) -> List[str]:
        """Invariant violations, empty when the parameters are valid"""
        found = []
        if self.cube_dim > self.volume_dim:
            found.append("cube_dim must not exceed volume_dim")
        if not 0 < self.ellipsoid_radius_min <= self.ellipsoid_radius_max:
            found.append("need 0 < ellipsoid_radius_min <= ellipsoid_radius_max")
        if self.ellipsoid_radius_max >= self.cube_dim / 2:
            found.append("ellipsoid_radius_max must be below cube_dim / 2")
        if not self.foreign_count_distribution:
            found.append("foreign_count_distribution is empty")
        else:
            counts = [c for c, _ in self.foreign_count_distribution]
            probs = [p for _, p in self.foreign_count_distribution]
            if any(c < 0 for c in counts):
                found.append("foreign counts must be >= 0")
            if any(p < 0 for p in probs):
                found.append("foreign count probabilities must be >= 0")
            if abs(sum(probs) - 1.0) > 1e-9:
                found.append("foreign count probabilities must sum to 1")
        return found

    @model_validator(mode="after")
    def _check_invariants(self) -> "PhantomParams":
        found = self.problems()
        if found:
            raise ValueError("; ".join(found))
        return self


@dataclass(frozen=True)
class CutPlane:
    """Plane in voxel-edge coordinates; voxels with dot(normal, x - anchor) > 0 are cut."""

    anchor: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        if abs(float(np.linalg.norm(self.normal)) - 1.0) > 1e-9:
            raise ParameterError("cut plane normal must have unit length")


@dataclass
class LabeledVolume:
    """Material labels indexed [z, y, x]: 0 background, 1 base, 2 foreign."""

    labels: np.ndarray
    voxel_size_cm: float
    object_id: int = 0
    seed: int = 0
    foreign_objects: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return nx, ny, nz

    def mask(self, material_id: int) -> np.ndarray:
        return self.labels == material_id


def _ensure_valid(params: PhantomParams) -> None:
    found = params.problems()
    if found:
        raise ParameterError("invalid phantom parameters: " + "; ".join(found))


def phantom_rng(master_seed: int, object_index: int) -> np.random.Generator:
    """Per-phantom stream keyed by (master_seed, object_index)"""
    return np.random.default_rng([master_seed, object_index])


def cube_bounds(params: PhantomParams) -> Tuple[float, float]:
    """Lower and upper cube faces in voxel-edge coordinates (same on every axis)"""
    lo = (params.volume_dim - params.cube_dim) // 2
    return float(lo), float(lo + params.cube_dim)


def plane_through_points(points: np.ndarray, center: np.ndarray) -> Optional[CutPlane]:
    """Plane through three points with its normal facing away from center.

    Returns None when the points are collinear or coincide (zero-volume cut).
    """
    p0, p1, p2 = (np.asarray(p, dtype=np.float64) for p in points)
    normal = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(normal)
    if norm < 1e-12:
        return None
    normal = normal / norm
    if np.dot(normal, center - p0) > 0:
        normal = -normal
    return CutPlane(anchor=p0, normal=normal)


def corner_planes(params: PhantomParams, fractions: np.ndarray) -> List[CutPlane]:
    """One plane per cube corner.

    fractions has shape (8, 3): for corner k and axis a, the position of the
    cut point along the outgoing edge, 0 at the corner and 1 at the edge midpoint.
    """
    lo, hi = cube_bounds(params)
    half = params.cube_dim / 2.0
    center = np.full(3, (lo + hi) / 2.0)
    planes = []
    for k, corner_bits in enumerate(np.ndindex(2, 2, 2)):
        corner = np.array([hi if bit else lo for bit in corner_bits])
        points = []
        for axis in range(3):
            direction = -1.0 if corner_bits[axis] else 1.0
            point = corner.copy()
            point[axis] += direction * fractions[k, axis] * half
            points.append(point)
        plane = plane_through_points(np.array(points), center)
        if plane is not None:
            planes.append(plane)
    return planes


def carve_cube(params: PhantomParams, planes: Sequence[CutPlane]) -> np.ndarray:
    """Centered cube with every voxel strictly on the outer side of a plane cleared"""
    _ensure_valid(params)
    n = params.volume_dim
    lo, hi = cube_bounds(params)
    lo_i, hi_i = int(lo), int(hi)
    centers = np.arange(lo_i, hi_i, dtype=np.float64) + 0.5
    z, y, x = np.meshgrid(centers, centers, centers, indexing="ij")
    keep = np.ones(z.shape, dtype=bool)
    for plane in planes:
        ax, ay, az = plane.anchor
        nx_, ny_, nz_ = plane.normal
        side = (x - ax) * nx_ + (y - ay) * ny_ + (z - az) * nz_
        keep &= side <= 0
    volume = np.zeros((n, n, n), dtype=bool)
    volume[lo_i:hi_i, lo_i:hi_i, lo_i:hi_i] = keep
    return volume


def make_cut_cube(params: PhantomParams, rng: np.random.Generator) -> np.ndarray:
    """Cube with its eight corners cut off by randomly placed planes"""
    _ensure_valid(params)
    fractions = rng.uniform(0.0, 1.0, size=(8, 3))
    return carve_cube(params, corner_planes(params, fractions))


def rotate_volume(
    volume: np.ndarray,
    angles: Optional[Sequence[float]] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Rotate a binary volume about its center with nearest-neighbour resampling.

    angles are extrinsic rotations about the x, y and z grid axes in radians;
    when omitted they are drawn uniformly from [0, 2pi) using rng.
    """
    if volume.ndim != 3 or len(set(volume.shape)) != 1:
        raise ParameterError(f"rotate_volume needs a cubic volume, got {volume.shape}")
    if angles is None:
        if rng is None:
            raise ParameterError("rotate_volume needs angles or an rng")
        angles = rng.uniform(0.0, 2.0 * np.pi, size=3)
    angles = np.asarray(angles, dtype=np.float64)
    if not angles.any():
        return volume.copy()

    # Rotation acts on (x, y, z); array axes are (z, y, x).
    rot_xyz = Rotation.from_euler("xyz", angles).as_matrix()
    flip = np.eye(3)[::-1]
    rot_idx = flip @ rot_xyz @ flip
    inverse = rot_idx.T
    center = (np.array(volume.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - inverse @ center
    rotated = ndimage.affine_transform(
        volume.astype(np.uint8),
        inverse,
        offset=offset,
        order=0,
        mode="constant",
        cval=0,
    )
    return rotated.astype(bool)


def uniform_rotation(rng: np.random.Generator) -> Rotation:
    """Rotation drawn uniformly over SO(3) from a uniform unit quaternion"""
    u1, u2, u3 = rng.random(3)
    quat = [
        np.sqrt(1.0 - u1) * np.sin(2.0 * np.pi * u2),
        np.sqrt(1.0 - u1) * np.cos(2.0 * np.pi * u2),
        np.sqrt(u1) * np.sin(2.0 * np.pi * u3),
        np.sqrt(u1) * np.cos(2.0 * np.pi * u3),
    ]
    return Rotation.from_quat(quat)


def rasterize_ellipsoid(
    labels: np.ndarray,
    center: np.ndarray,
    semi_axes: np.ndarray,
    rotation: np.ndarray,
    value: int = FOREIGN,
) -> int:
    """Label every voxel whose center lies inside the ellipsoid; returns the voxel count.

    center is in (z, y, x) index coordinates, rotation maps ellipsoid-local
    axes to index axes.
    """
    reach = float(np.max(semi_axes))
    lower = np.maximum(np.floor(center - reach).astype(int), 0)
    upper = np.minimum(np.ceil(center + reach).astype(int) + 1, labels.shape)
    if np.any(upper <= lower):
        return 0
    grids = np.meshgrid(
        *(np.arange(lower[a], upper[a], dtype=np.float64) for a in range(3)),
        indexing="ij",
    )
    offsets = np.stack([g - center[a] for a, g in enumerate(grids)], axis=-1)
    local = offsets @ rotation
    inside = np.sum((local / semi_axes) ** 2, axis=-1) <= 1.0
    region = labels[lower[0] : upper[0], lower[1] : upper[1], lower[2] : upper[2]]
    region[inside] = value
    return int(inside.sum())


def place_foreign_objects(
    base: np.ndarray,
    params: PhantomParams,
    rng: np.random.Generator,
    object_id: int = 0,
) -> LabeledVolume:
    """Embed a random number of randomly oriented ellipsoids centred on base voxels"""
    _ensure_valid(params)
    base_voxels = np.argwhere(base)
    if len(base_voxels) == 0:
        raise PlacementError("cannot place foreign objects in an empty base object")

    counts = np.array([c for c, _ in params.foreign_count_distribution])
    probs = np.array([p for _, p in params.foreign_count_distribution], dtype=np.float64)
    count = int(rng.choice(counts, p=probs / probs.sum()))

    labels = np.where(base, BASE, BACKGROUND).astype(np.uint8)
    placed = []
    for _ in range(count):
        semi_axes = rng.uniform(
            params.ellipsoid_radius_min, params.ellipsoid_radius_max, size=3
        )
        orientation = uniform_rotation(rng)
        center = base_voxels[rng.integers(len(base_voxels))].astype(np.float64)
        voxels = rasterize_ellipsoid(labels, center, semi_axes, orientation.as_matrix())
        placed.append(
            {
                "center_zyx": center.tolist(),
                "semi_axes": semi_axes.tolist(),
                "quaternion": orientation.as_quat().tolist(),
                "voxels": voxels,
            }
        )
    return LabeledVolume(
        labels=labels,
        voxel_size_cm=params.voxel_size_cm,
        object_id=object_id,
        seed=params.seed,
        foreign_objects=placed,
    )


def generate_phantom(params: PhantomParams, object_id: int) -> LabeledVolume:
    """Full phantom recipe: cut cube, random rotation, foreign objects"""
    rng = phantom_rng(params.seed, object_id)
    cube = make_cut_cube(params, rng)
    rotated = rotate_volume(cube, rng=rng)
    phantom = place_foreign_objects(rotated, params, rng, object_id=object_id)
    logger.debug(
        "Phantom %d: %d base voxels, %d foreign objects",
        object_id,
        int(rotated.sum()),
        len(phantom.foreign_objects),
    )
    return phantom


def save_phantom(phantom: LabeledVolume, path: Path, params: PhantomParams, extra: Optional[Dict[str, Any]] = None) -> str:
    meta = {
        "dims": list(phantom.dims),
        "voxel_size_cm": phantom.voxel_size_cm,
        "seed": phantom.seed,
        "object_id": phantom.object_id,
        "params": params.model_dump(),
        "foreign_objects": phantom.foreign_objects,
        **(extra or {}),
    }
    return save_raw(path, phantom.labels, meta)


def load_phantom(path: Path) -> LabeledVolume:
    labels, meta = load_raw(path)
    return LabeledVolume(
        labels=labels,
        voxel_size_cm=float(meta["voxel_size_cm"]),
        object_id=int(meta.get("object_id", 0)),
        seed=int(meta.get("seed", 0)),
        foreign_objects=list(meta.get("foreign_objects", [])),
    )
