"""Pipeline configuration: one validated model with a section per stage."""

import json
import logging
import math
import os
import tomllib
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fod_forge.dataset import mixed_pool_demand
from fod_forge.errors import ConfigurationError
from fod_forge.evalmetrics import DetectionParams, default_min_component_px
from fod_forge.phantom import PhantomParams
from fod_forge.recon import SirtConfig
from fod_forge.utils.store import hash_json
from fod_forge.xray.geometry import ConeBeamGeometry
from fod_forge.xray.physics import (
    MaterialAttenuation,
    Spectrum,
    default_materials,
    default_spectrum,
    load_material_csv,
    load_spectrum_csv,
)

logger = logging.getLogger(__name__)

load_dotenv()

LOG_LEVEL_ENV = "FOD_FORGE_LOG_LEVEL"


def default_log_level() -> str:
    return os.getenv(LOG_LEVEL_ENV, "INFO").upper()


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PhantomSection(_Section):
    count: int = Field(default=20, ge=1)
    many_count: int = Field(default=0, ge=0)
    volume_dim: int = Field(default=128, ge=1)
    cube_dim: int = Field(default=64, ge=1)
    ellipsoid_radius_min: float = 3.0
    ellipsoid_radius_max: float = 7.0
    foreign_count_distribution: List[Tuple[int, float]] = Field(
        default_factory=lambda: [(1, 0.5), (2, 0.5)]
    )
    many_distribution: List[Tuple[int, float]] = Field(
        default_factory=lambda: [(5, 0.25), (6, 0.25), (7, 0.25), (8, 0.25)]
    )
    voxel_size_cm: float = Field(default=0.1, gt=0)

    def params(self, master_seed: int, many: bool = False) -> PhantomParams:
        """Phantom parameters for the regular pool, or the many-object pool"""
        try:
            return PhantomParams(
                volume_dim=self.volume_dim,
                cube_dim=self.cube_dim,
                ellipsoid_radius_min=self.ellipsoid_radius_min,
                ellipsoid_radius_max=self.ellipsoid_radius_max,
                foreign_count_distribution=(
                    self.many_distribution if many else self.foreign_count_distribution
                ),
                seed=master_seed,
                voxel_size_cm=self.voxel_size_cm,
            )
        except ValidationError as e:
            raise ConfigurationError(f"invalid phantom section: {e}") from e

    @property
    def object_ids(self) -> List[int]:
        return list(range(self.count + self.many_count))

    def is_many(self, object_id: int) -> bool:
        return object_id >= self.count


class GeometrySection(_Section):
    source_origin_dist: float = Field(default=44.14, gt=0)
    origin_detector_dist: float = Field(default=25.66, gt=0)
    detector_rows: int = Field(default=128, gt=0)
    detector_cols: int = Field(default=128, gt=0)
    pixel_size: float = Field(default=0.16, gt=0)
    n_angles: int = Field(default=1800, ge=1)
    supersample: int = Field(default=1, ge=1)

    def to_geometry(self) -> ConeBeamGeometry:
        return ConeBeamGeometry.uniform(
            self.n_angles,
            source_origin_dist=self.source_origin_dist,
            origin_detector_dist=self.origin_detector_dist,
            detector_rows=self.detector_rows,
            detector_cols=self.detector_cols,
            pixel_size=self.pixel_size,
        )


class SpectrumSection(_Section):
    spectrum_csv: Optional[Path] = None
    e_min: float = Field(default=15.0, gt=0)
    e_max: float = Field(default=90.0, gt=0)
    bin_width: float = Field(default=1.0, gt=0)
    total_flux: float = Field(default=250_000.0, gt=0)
    exposure_s: float = Field(default=0.002, gt=0)
    flat_realizations: int = Field(default=10, ge=1)
    materials: Dict[int, Path] = Field(default_factory=dict)

    def to_spectrum(self) -> Spectrum:
        if self.spectrum_csv is not None:
            return load_spectrum_csv(self.spectrum_csv, self.total_flux)
        return default_spectrum(self.e_min, self.e_max, self.bin_width, self.total_flux)

    def to_materials(self) -> Dict[int, MaterialAttenuation]:
        materials = default_materials()
        for material_id, path in self.materials.items():
            materials[int(material_id)] = load_material_csv(path, int(material_id))
        return materials


class SegmentationSection(_Section):
    method: Literal["otsu", "fixed"] = "otsu"
    theta: float = 0.04
    sweep: List[float] = Field(default_factory=list)
    sweep_factors: List[float] = Field(default_factory=list)
    otsu_scope: Literal["per_object", "global"] = "per_object"
    n_bins: int = Field(default=256, ge=1)
    min_component_voxels: int = Field(default=0, ge=0)

    def variants(self) -> List[str]:
        """Names of every segmentation produced, the primary one first"""
        names = [primary_variant(self)]
        names += [theta_variant(t) for t in self.sweep]
        names += [factor_variant(f) for f in self.sweep_factors]
        seen = []
        for name in names:
            if name not in seen:
                seen.append(name)
        return seen


def primary_variant(section: SegmentationSection) -> str:
    return "otsu" if section.method == "otsu" else theta_variant(section.theta)


def theta_variant(theta: float) -> str:
    return f"theta_{theta:.4f}"


def factor_variant(factor: float) -> str:
    return f"otsu_x{factor:g}"


class GroundTruthSection(_Section):
    absolute: bool = True
    resize: Optional[int] = 128
    provenance: Literal["workflow", "absolute"] = "workflow"
    eps_len_factor: float = Field(default=1e-6, ge=0)
    export_png: bool = False


class DatasetSection(_Section):
    strategy: Literal["workflow", "manual", "mixed"] = "workflow"
    objects: int = Field(default=10, ge=1)
    total: int = Field(default=1800, ge=1)
    test_objects: int = Field(default=5, ge=0)
    ratio: float = Field(default=0.5, ge=0, le=1)
    seed: Optional[int] = None


class EvalSection(_Section):
    enabled: bool = True
    eta: float = Field(default=0.3, gt=0, lt=1)
    delta: float = Field(default=0.3, gt=0, lt=1)
    min_size: Optional[int] = Field(default=None, ge=1)
    connectivity: Literal[4, 8] = 4

    def params(self, image_shape: Tuple[int, int]) -> DetectionParams:
        min_size = self.min_size or default_min_component_px(image_shape)
        return DetectionParams(
            eta=self.eta,
            delta=self.delta,
            min_component_px=min_size,
            connectivity=self.connectivity,
        )


class PipelineConfig(_Section):
    master_seed: int = Field(default=0, ge=0, lt=2**64)
    threads: Optional[int] = Field(default=None, ge=1)
    output_dir: Path = Path("fod_output")
    phantom: PhantomSection = Field(default_factory=PhantomSection)
    geometry: GeometrySection = Field(default_factory=GeometrySection)
    spectrum: SpectrumSection = Field(default_factory=SpectrumSection)
    sirt: SirtConfig = Field(default_factory=SirtConfig)
    segmentation: SegmentationSection = Field(default_factory=SegmentationSection)
    ground_truth: GroundTruthSection = Field(default_factory=GroundTruthSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    @model_validator(mode="after")
    def _cross_check(self) -> "PipelineConfig":
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def problems(self) -> List[str]:
        found = []
        g = self.geometry
        resize = self.ground_truth.resize
        if resize is not None and (resize > g.detector_rows or resize > g.detector_cols):
            found.append(f"resize target {resize} exceeds detector {g.detector_rows}x{g.detector_cols}")
        thetas = [self.segmentation.theta] + list(self.segmentation.sweep)
        if not all(math.isfinite(t) for t in thetas):
            found.append("segmentation thresholds must be finite")
        if any(f <= 0 for f in self.segmentation.sweep_factors):
            found.append("sweep factors must be positive")
        if self.phantom.cube_dim > self.phantom.volume_dim:
            found.append("phantom cube does not fit the reconstruction grid")
        if self.phantom.ellipsoid_radius_max >= self.phantom.cube_dim / 2:
            found.append("phantom ellipsoid_radius_max must be below cube_dim / 2")
        if self.spectrum.e_min >= self.spectrum.e_max:
            found.append("spectrum e_min must be below e_max")
        paths = list(self.spectrum.materials.values())
        if self.spectrum.spectrum_csv is not None:
            paths.append(self.spectrum.spectrum_csv)
        found += [f"file not found: {p}" for p in paths if not Path(p).exists()]
        d = self.dataset
        needed = d.objects + d.test_objects
        if d.strategy != "mixed" and needed > self.phantom.count:
            found.append(f"dataset needs {needed} objects, phantom.count is {self.phantom.count}")
        if d.strategy == "mixed":
            if self.phantom.many_count == 0:
                found.append("the mixed strategy needs phantom.many_count > 0")
            from_regular, from_many = mixed_pool_demand(d.ratio, d.objects)
            regular = self.phantom.count - d.test_objects
            if d.test_objects > self.phantom.count:
                found.append(f"dataset needs {d.test_objects} test objects, phantom.count is {self.phantom.count}")
            elif max(from_regular, 1) > regular:
                found.append(
                    f"the mixed strategy takes {from_regular} regular objects, only {regular} are left for training"
                )
            if from_many > self.phantom.many_count:
                found.append(
                    f"the mixed strategy takes {from_many} many-object phantoms, "
                    f"phantom.many_count is {self.phantom.many_count}"
                )
        if d.strategy == "manual" and d.objects < 2:
            found.append("the manual strategy needs dataset.objects >= 2")
        return found

    @property
    def dataset_seed(self) -> int:
        return self.master_seed if self.dataset.seed is None else self.dataset.seed

    def image_shape(self) -> Tuple[int, int]:
        """Shape of training images after the optional resize"""
        if self.ground_truth.resize is None:
            return self.geometry.detector_rows, self.geometry.detector_cols
        return self.ground_truth.resize, self.ground_truth.resize

    def section_hash(self, name: str) -> str:
        return hash_json(getattr(self, name).model_dump(mode="json"))

    def config_hash(self) -> str:
        return hash_json(self.model_dump(mode="json", exclude={"threads", "output_dir"}))


def load_config(path: Optional[Path] = None, **overrides) -> PipelineConfig:
    """TOML or JSON file (by extension), defaults when path is None.

    Keyword overrides replace top-level keys after the file is read.
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            if path.suffix == ".json":
                data = json.loads(path.read_text(encoding="utf-8"))
            else:
                with open(path, "rb") as f:
                    data = tomllib.load(f)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
            raise ConfigurationError(f"cannot parse {path}: {e}") from e
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e
    logger.debug("Loaded configuration %s", config.config_hash()[:12])
    return config
