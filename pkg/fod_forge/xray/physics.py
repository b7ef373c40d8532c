"""Polychromatic Beer-Lambert forward model, Poisson noise and flat/dark correction."""

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from fod_forge.errors import ConfigurationError, DataError, ParameterError
from fod_forge.utils.store import hash_json
from fod_forge.xray.geometry import ConeBeamGeometry
from fod_forge.xray.projector import ConeBeamProjector

logger = logging.getLogger(__name__)

LOG_FLOOR_COUNTS = 1.0

# Stream tags for the keyed noise generators.
_PROJECTION_STREAM = 1
_FLAT_STREAM = 2


class Spectrum(BaseModel):
    energies: List[float]
    weights: List[float]
    total_flux: float = Field(default=250_000.0, gt=0)

    @model_validator(mode="after")
    def _check(self) -> "Spectrum":
        if not self.energies or len(self.energies) != len(self.weights):
            raise ValueError("energies and weights must be non-empty and of equal length")
        if np.any(np.diff(self.energies) <= 0):
            raise ValueError("spectrum energies must be strictly ascending")
        weights = np.asarray(self.weights)
        if np.any(weights < 0) or not np.any(weights > 0):
            raise ValueError("spectrum weights must be non-negative and not all zero")
        return self

    def fluence(self) -> np.ndarray:
        """Photons per pixel per second in each energy bin, I0(e)"""
        weights = np.asarray(self.weights, dtype=np.float64)
        return self.total_flux * weights / weights.sum()

    def spectrum_hash(self) -> str:
        return hash_json(self.model_dump())


class MaterialAttenuation(BaseModel):
    material_id: int
    name: str = ""
    energies: List[float]
    mu: List[float]

    @model_validator(mode="after")
    def _check(self) -> "MaterialAttenuation":
        if len(self.energies) < 2 or len(self.energies) != len(self.mu):
            raise ValueError("attenuation table needs >= 2 rows of (energy, mu)")
        if np.any(np.diff(self.energies) <= 0):
            raise ValueError("attenuation energies must be strictly ascending")
        if np.any(np.asarray(self.mu) < 0):
            raise ValueError("attenuation coefficients must be non-negative")
        return self

    def covers(self, spectrum: Spectrum) -> bool:
        return self.energies[0] <= spectrum.energies[0] and spectrum.energies[-1] <= self.energies[-1]

    def mu_at(self, energies: Sequence[float]) -> np.ndarray:
        """Linear attenuation (1/cm), log-log interpolated between table rows"""
        energies = np.asarray(energies, dtype=np.float64)
        table_e = np.asarray(self.energies, dtype=np.float64)
        table_mu = np.asarray(self.mu, dtype=np.float64)
        if energies.min() < table_e[0] or energies.max() > table_e[-1]:
            raise ConfigurationError(
                f"material {self.material_id} table spans {table_e[0]}-{table_e[-1]} keV, "
                f"requested {energies.min()}-{energies.max()} keV"
            )
        if np.all(table_mu > 0):
            return np.exp(np.interp(np.log(energies), np.log(table_e), np.log(table_mu)))
        return np.interp(energies, table_e, table_mu)


@dataclass
class Radiograph:
    """Flat/dark corrected absorbance image."""

    values: np.ndarray
    angle_index: int
    object_id: int


@dataclass
class ScanResult:
    radiographs: np.ndarray  # [angle, row, col] absorbance
    flat: np.ndarray
    dark: np.ndarray
    mean_flat_counts: float


def default_spectrum(
    e_min: float = 15.0,
    e_max: float = 90.0,
    bin_width: float = 1.0,
    total_flux: float = 250_000.0,
) -> Spectrum:
    """Uniform weights over bin_width keV bins from e_min to e_max inclusive"""
    energies = np.arange(e_min, e_max + bin_width / 2.0, bin_width)
    return Spectrum(
        energies=energies.tolist(),
        weights=np.ones_like(energies).tolist(),
        total_flux=total_flux,
    )


def load_spectrum_csv(path: Path, total_flux: float) -> Spectrum:
    """Two-column CSV (energy_keV, weight)"""
    table = _read_two_columns(path)
    return Spectrum(
        energies=table[:, 0].tolist(),
        weights=table[:, 1].tolist(),
        total_flux=total_flux,
    )


def load_material_csv(path: Path, material_id: int, name: str = "") -> MaterialAttenuation:
    """Two-column CSV (energy_keV, mu_per_cm)"""
    table = _read_two_columns(path)
    return MaterialAttenuation(
        material_id=material_id,
        name=name or Path(path).stem,
        energies=table[:, 0].tolist(),
        mu=table[:, 1].tolist(),
    )


def _read_two_columns(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"table not found: {path}")
    frame = pd.read_csv(path, comment="#")
    if frame.shape[1] < 2:
        raise ConfigurationError(f"{path} must have two columns")
    return frame.iloc[:, :2].to_numpy(dtype=np.float64)


def default_materials() -> Dict[int, MaterialAttenuation]:
    """Soft tissue for the base object (label 1) and cortical bone for foreign objects (label 2)"""
    tables = resources.files("fod_forge.data.materials")
    materials = {}
    for material_id, name in ((1, "tissue"), (2, "bone")):
        with resources.as_file(tables / f"{name}.csv") as path:
            materials[material_id] = load_material_csv(path, material_id, name)
    return materials


def expected_counts(
    paths: Mapping[int, np.ndarray],
    spectrum: Spectrum,
    materials: Mapping[int, MaterialAttenuation],
    exposure_s: float,
) -> np.ndarray:
    """I = t * sum_e I0(e) * exp(-sum_m mu_m(e) * L_m), per pixel"""
    if exposure_s <= 0:
        raise ParameterError("exposure time must be positive")
    if not paths:
        raise ParameterError("expected_counts needs at least one path-length image")
    shapes = {np.shape(p) for p in paths.values()}
    if len(shapes) != 1:
        raise ParameterError(f"path-length images differ in shape: {sorted(shapes)}")
    shape = shapes.pop()

    energies = np.asarray(spectrum.energies, dtype=np.float64)
    line_integral = np.zeros((len(energies),) + shape, dtype=np.float64)
    for material_id, lengths in paths.items():
        lengths = np.asarray(lengths, dtype=np.float64)
        if material_id not in materials:
            if np.any(lengths != 0):
                raise ConfigurationError(f"no attenuation table for material {material_id}")
            continue
        mu = materials[material_id].mu_at(energies)
        line_integral += mu.reshape((-1,) + (1,) * len(shape)) * lengths

    fluence = spectrum.fluence().reshape((-1,) + (1,) * len(shape))
    return exposure_s * np.sum(fluence * np.exp(-line_integral), axis=0)


def noise_rng(master_seed: int, object_id: int, angle_index: int) -> np.random.Generator:
    """Noise stream keyed by (master_seed, object, angle); pixels draw in raster order"""
    return np.random.default_rng([master_seed, object_id, _PROJECTION_STREAM, angle_index])


def add_poisson(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise ParameterError("Poisson expectations must be finite and non-negative")
    return rng.poisson(counts).astype(np.float64)


def simulate_flatfield(
    spectrum: Spectrum,
    exposure_s: float,
    shape: tuple,
    master_seed: int,
    object_id: int,
    realizations: int = 10,
) -> np.ndarray:
    """Mean of noisy empty-beam images"""
    level = exposure_s * float(spectrum.fluence().sum())
    expected = np.full(shape, level, dtype=np.float64)
    total = np.zeros(shape, dtype=np.float64)
    for k in range(realizations):
        rng = np.random.default_rng([master_seed, object_id, _FLAT_STREAM, k])
        total += add_poisson(expected, rng)
    return total / realizations


def correct_and_log(
    noisy: np.ndarray,
    flat: np.ndarray,
    dark: np.ndarray,
    floor: float = LOG_FLOOR_COUNTS,
) -> np.ndarray:
    """Absorbance -ln(max(noisy - dark, floor) / (flat - dark)); negative values are kept"""
    noisy = np.asarray(noisy, dtype=np.float64)
    flat = np.asarray(flat, dtype=np.float64)
    dark = np.asarray(dark, dtype=np.float64)
    if flat.shape != dark.shape or noisy.shape[-flat.ndim :] != flat.shape:
        raise DataError(
            f"image shapes differ: noisy {noisy.shape}, flat {flat.shape}, dark {dark.shape}"
        )
    gain = flat - dark
    if np.any(gain <= 0):
        raise DataError("flatfield must exceed darkfield at every pixel")
    return -np.log(np.maximum(noisy - dark, floor) / gain)


def material_path_lengths(
    projector: ConeBeamProjector,
    labels: np.ndarray,
    material_ids: Sequence[int],
) -> Dict[int, np.ndarray]:
    """Path-length stacks [angle, row, col] for each material over all angles"""
    return {
        mid: projector.forward((labels == mid).astype(np.float64)) for mid in material_ids
    }


def simulate_scan(
    labels: np.ndarray,
    voxel_size_cm: float,
    object_id: int,
    geometry: ConeBeamGeometry,
    spectrum: Spectrum,
    materials: Mapping[int, MaterialAttenuation],
    exposure_s: float,
    master_seed: int,
    supersample: int = 1,
    flat_realizations: int = 10,
) -> ScanResult:
    """Noisy corrected radiographs of a labelled phantom at every geometry angle"""
    for material in materials.values():
        if not material.covers(spectrum):
            raise ConfigurationError(
                f"material {material.material_id} table does not span the spectrum"
            )
    projector = ConeBeamProjector(geometry, labels.shape, voxel_size_cm, supersample)
    present = [int(m) for m in np.unique(labels) if m != 0]
    paths = material_path_lengths(projector, labels, present)
    if not paths:
        paths = {1: np.zeros(projector.projection_shape)}

    shape = geometry.detector_shape
    flat = simulate_flatfield(spectrum, exposure_s, shape, master_seed, object_id, flat_realizations)
    dark = np.zeros(shape, dtype=np.float64)

    radiographs = np.empty(projector.projection_shape, dtype=np.float64)
    for a in range(geometry.n_angles):
        counts = expected_counts({m: p[a] for m, p in paths.items()}, spectrum, materials, exposure_s)
        noisy = add_poisson(counts, noise_rng(master_seed, object_id, a))
        radiographs[a] = correct_and_log(noisy, flat, dark)
    logger.debug("Scanned object %d: %d angles", object_id, geometry.n_angles)
    return ScanResult(
        radiographs=radiographs,
        flat=flat,
        dark=dark,
        mean_flat_counts=float(flat.mean()),
    )
