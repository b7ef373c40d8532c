"""Circular cone-beam scan geometry.

World frame in cm: the volume is centred at the origin and rotates about z.
At angle phi the source sits at -SOD * (cos phi, sin phi, 0) and the flat
detector centre at +ODD * (cos phi, sin phi, 0). Detector columns run along
(-sin phi, cos phi, 0), rows along +z.
"""

from typing import List

import numpy as np
from pydantic import BaseModel, Field, field_validator

from fod_forge.errors import ConfigurationError
from fod_forge.utils.store import hash_json


class ConeBeamGeometry(BaseModel):
    source_origin_dist: float = Field(default=44.14, gt=0)
    origin_detector_dist: float = Field(default=25.66, gt=0)
    detector_rows: int = Field(default=128, gt=0)
    detector_cols: int = Field(default=128, gt=0)
    pixel_size: float = Field(default=0.16, gt=0)
    angles: List[float] = Field(default_factory=lambda: uniform_angles(1800))

    @field_validator("angles")
    @classmethod
    def _check_angles(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("at least one angle is required")
        arr = np.asarray(value, dtype=np.float64)
        if np.any(arr < 0) or np.any(arr >= 2 * np.pi):
            raise ValueError("angles must lie in [0, 2pi)")
        if np.any(np.diff(arr) <= 0):
            raise ValueError("angles must be strictly increasing")
        return value

    @classmethod
    def uniform(cls, n_angles: int, **kwargs) -> "ConeBeamGeometry":
        return cls(angles=uniform_angles(n_angles), **kwargs)

    @property
    def n_angles(self) -> int:
        return len(self.angles)

    @property
    def detector_shape(self) -> tuple:
        return self.detector_rows, self.detector_cols

    @property
    def source_detector_dist(self) -> float:
        return self.source_origin_dist + self.origin_detector_dist

    def geometry_hash(self) -> str:
        return hash_json(self.model_dump())

    def check_angle_index(self, angle_index: int) -> None:
        if not 0 <= angle_index < self.n_angles:
            raise ConfigurationError(
                f"angle index {angle_index} outside 0..{self.n_angles - 1}"
            )

    def vectors(self) -> np.ndarray:
        """Per-angle (source, detector centre, column axis, row axis), shape (n, 4, 3)"""
        phi = np.asarray(self.angles, dtype=np.float64)
        cos_p, sin_p = np.cos(phi), np.sin(phi)
        zeros, ones = np.zeros_like(phi), np.ones_like(phi)
        direction = np.stack([cos_p, sin_p, zeros], axis=-1)
        out = np.empty((len(phi), 4, 3), dtype=np.float64)
        out[:, 0] = -self.source_origin_dist * direction
        out[:, 1] = self.origin_detector_dist * direction
        out[:, 2] = np.stack([-sin_p, cos_p, zeros], axis=-1)
        out[:, 3] = np.stack([zeros, zeros, ones], axis=-1)
        return out

    def pixel_center(self, angle_index: int, row: float, col: float) -> np.ndarray:
        src, det, u, v = self.vectors()[angle_index]
        off_u = (col - (self.detector_cols - 1) / 2.0) * self.pixel_size
        off_v = (row - (self.detector_rows - 1) / 2.0) * self.pixel_size
        return det + off_u * u + off_v * v

    def source_position(self, angle_index: int) -> np.ndarray:
        return self.vectors()[angle_index, 0]


def uniform_angles(n_angles: int) -> List[float]:
    """n angles evenly spaced over a full rotation, starting at 0"""
    if n_angles < 1:
        raise ConfigurationError("n_angles must be >= 1")
    return (np.arange(n_angles, dtype=np.float64) * (2.0 * np.pi / n_angles)).tolist()
