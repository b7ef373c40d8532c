"""SIRT reconstruction of attenuation volumes from corrected radiograph stacks."""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from fod_forge.errors import ConfigurationError, DataError, ForgeError
from fod_forge.utils.parallel import BatchResult, parallel_map
from fod_forge.utils.store import load_raw, save_raw
from fod_forge.xray.geometry import ConeBeamGeometry
from fod_forge.xray.projector import ConeBeamProjector

logger = logging.getLogger(__name__)

_PRECONDITIONER_CACHE: Dict[tuple, Tuple[np.ndarray, np.ndarray]] = {}
_CACHE_LIMIT = 4


class SirtConfig(BaseModel):
    iterations: int = Field(default=100, ge=1)
    nonneg_clamp: bool = False
    epsilon: float = Field(default=1e-10, gt=0)


@dataclass
class ReconVolume:
    """Attenuation estimate (1/cm) indexed [z, y, x]."""

    values: np.ndarray
    voxel_size_cm: float
    object_id: int = 0
    iterations: int = 0
    residuals: List[float] = field(default_factory=list)

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.values.shape
        return nx, ny, nz


def preconditioners(projector: ConeBeamProjector, epsilon: float) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse row sums R and inverse column sums C of A, cached per projector grid"""
    key = projector.cache_key + (epsilon,)
    cached = _PRECONDITIONER_CACHE.get(key)
    if cached is not None:
        return cached
    row_sums = projector.forward(np.ones(projector.volume_shape))
    col_sums = projector.backward(np.ones(projector.projection_shape))
    inv_rows = 1.0 / np.maximum(row_sums, epsilon)
    inv_cols = 1.0 / np.maximum(col_sums, epsilon)
    if len(_PRECONDITIONER_CACHE) >= _CACHE_LIMIT:
        _PRECONDITIONER_CACHE.pop(next(iter(_PRECONDITIONER_CACHE)))
    _PRECONDITIONER_CACHE[key] = (inv_rows, inv_cols)
    return inv_rows, inv_cols


def _check_stack(radiographs: np.ndarray, geometry: ConeBeamGeometry) -> np.ndarray:
    stack = np.asarray(radiographs, dtype=np.float64)
    if stack.ndim != 3:
        raise DataError(f"radiograph stack must be [angle, row, col], got shape {stack.shape}")
    if stack.shape[1:] != geometry.detector_shape:
        raise ConfigurationError(
            f"radiographs are {stack.shape[1:]}, geometry detector is {geometry.detector_shape}"
        )
    if stack.shape[0] != geometry.n_angles:
        raise DataError(
            f"stack holds {stack.shape[0]} angles, geometry has {geometry.n_angles}"
        )
    if not np.all(np.isfinite(stack)):
        raise DataError("radiograph stack contains non-finite values")
    return stack


def sirt(
    radiographs: np.ndarray,
    geometry: ConeBeamGeometry,
    cfg: SirtConfig,
    volume_shape: Tuple[int, int, int],
    voxel_size_cm: float,
    supersample: int = 1,
    object_id: int = 0,
    track_residual: bool = False,
) -> ReconVolume:
    """x <- x + C A^T R (b - A x), starting from zero.

    With track_residual the weighted residual ||R^(1/2) (b - A x_k)|| is
    recorded for every iterate, including the returned one.
    """
    b = _check_stack(radiographs, geometry)
    projector = ConeBeamProjector(geometry, volume_shape, voxel_size_cm, supersample)
    inv_rows, inv_cols = preconditioners(projector, cfg.epsilon)

    x = np.zeros(projector.volume_shape, dtype=np.float64)
    residuals = []
    for _ in range(cfg.iterations):
        residual = b - projector.forward(x)
        if track_residual:
            residuals.append(float(np.sqrt(np.sum(inv_rows * residual**2))))
        x += inv_cols * projector.backward(inv_rows * residual)
        if cfg.nonneg_clamp:
            np.maximum(x, 0.0, out=x)
    if track_residual:
        residual = b - projector.forward(x)
        residuals.append(float(np.sqrt(np.sum(inv_rows * residual**2))))

    logger.debug("SIRT object %d: %d iterations", object_id, cfg.iterations)
    return ReconVolume(
        values=x,
        voxel_size_cm=voxel_size_cm,
        object_id=object_id,
        iterations=cfg.iterations,
        residuals=residuals,
    )


@dataclass
class ReconJob:
    """One object of a batch; radiographs is an in-memory stack or a raw stack path."""

    object_id: int
    radiographs: Union[np.ndarray, Path]
    geometry: ConeBeamGeometry
    cfg: SirtConfig
    volume_shape: Tuple[int, int, int]
    voxel_size_cm: float
    supersample: int = 1


def _run_job(job: ReconJob) -> BatchResult[ReconVolume]:
    try:
        stack = job.radiographs
        if not isinstance(stack, np.ndarray):
            stack, _ = load_raw(Path(stack))
        volume = sirt(
            stack,
            job.geometry,
            job.cfg,
            job.volume_shape,
            job.voxel_size_cm,
            supersample=job.supersample,
            object_id=job.object_id,
        )
        return BatchResult(object_id=job.object_id, value=volume)
    except ForgeError as e:
        return BatchResult(object_id=job.object_id, error=f"{type(e).__name__}: {e}")


def reconstruct_batch(jobs: Sequence[ReconJob], parallelism: int = 1) -> List[BatchResult[ReconVolume]]:
    """Independent reconstructions in input order; failures are returned, not raised"""
    results = parallel_map(_run_job, list(jobs), parallelism)
    for result in results:
        if not result.ok:
            logger.error("Reconstruction failed for object %d: %s", result.object_id, result.error)
    return results


def save_recon(volume: ReconVolume, path: Path, meta: Optional[dict] = None) -> str:
    sidecar = {
        "dims": list(volume.dims),
        "voxel_size_cm": volume.voxel_size_cm,
        "iterations": volume.iterations,
        "object_id": volume.object_id,
        **(meta or {}),
    }
    return save_raw(path, volume.values.astype(np.float32), sidecar)


def load_recon(path: Path) -> ReconVolume:
    values, meta = load_raw(path)
    return ReconVolume(
        values=values.astype(np.float64),
        voxel_size_cm=float(meta["voxel_size_cm"]),
        object_id=int(meta.get("object_id", 0)),
        iterations=int(meta.get("iterations", 0)),
    )
