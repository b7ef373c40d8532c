"""Ray-driven cone-beam projector and its exact adjoint.

Each detector pixel is hit by the ray from the source to the pixel centre
(or ss x ss sub-pixel rays when supersampling). Path lengths through voxels
are computed by incremental voxel traversal. The backprojector walks the very
same rays, so the pair is adjoint up to floating-point rounding.
"""

import logging
from typing import Optional, Sequence, Tuple

import numpy as np
from numba import njit, prange

from fod_forge.errors import ConfigurationError
from fod_forge.xray.geometry import ConeBeamGeometry

logger = logging.getLogger(__name__)

# Fixed so that the summation order, and therefore the result, does not
# depend on the number of threads.
BACKPROJECT_CHUNKS = 8

_INF = np.inf


@njit(cache=True, nogil=True)
def _traverse(vol, buf, x0, y0, z0, x1, y1, z1, length, value, scatter):
    """Walk the segment p0 -> p1 (grid units) through the voxel grid.

    Gather mode returns sum(vol * segment length); scatter mode adds
    value * segment length into buf. length is the world length of p0 -> p1.
    """
    nz, ny, nx = buf.shape
    dx = x1 - x0
    dy = y1 - y0
    dz = z1 - z0
    t_in = 0.0
    t_out = 1.0

    if dx != 0.0:
        ta = (0.0 - x0) / dx
        tb = (nx - x0) / dx
        t_in = max(t_in, min(ta, tb))
        t_out = min(t_out, max(ta, tb))
    elif x0 < 0.0 or x0 >= nx:
        return 0.0
    if dy != 0.0:
        ta = (0.0 - y0) / dy
        tb = (ny - y0) / dy
        t_in = max(t_in, min(ta, tb))
        t_out = min(t_out, max(ta, tb))
    elif y0 < 0.0 or y0 >= ny:
        return 0.0
    if dz != 0.0:
        ta = (0.0 - z0) / dz
        tb = (nz - z0) / dz
        t_in = max(t_in, min(ta, tb))
        t_out = min(t_out, max(ta, tb))
    elif z0 < 0.0 or z0 >= nz:
        return 0.0
    if t_in >= t_out:
        return 0.0

    ix = min(max(int(np.floor(x0 + t_in * dx)), 0), nx - 1)
    iy = min(max(int(np.floor(y0 + t_in * dy)), 0), ny - 1)
    iz = min(max(int(np.floor(z0 + t_in * dz)), 0), nz - 1)

    if dx > 0.0:
        step_x, tx, dtx = 1, (ix + 1 - x0) / dx, 1.0 / dx
    elif dx < 0.0:
        step_x, tx, dtx = -1, (ix - x0) / dx, -1.0 / dx
    else:
        step_x, tx, dtx = 0, _INF, _INF
    if dy > 0.0:
        step_y, ty, dty = 1, (iy + 1 - y0) / dy, 1.0 / dy
    elif dy < 0.0:
        step_y, ty, dty = -1, (iy - y0) / dy, -1.0 / dy
    else:
        step_y, ty, dty = 0, _INF, _INF
    if dz > 0.0:
        step_z, tz, dtz = 1, (iz + 1 - z0) / dz, 1.0 / dz
    elif dz < 0.0:
        step_z, tz, dtz = -1, (iz - z0) / dz, -1.0 / dz
    else:
        step_z, tz, dtz = 0, _INF, _INF

    acc = 0.0
    t = t_in
    while True:
        t_next = min(min(tx, ty), min(tz, t_out))
        seg = (t_next - t) * length
        if seg > 0.0:
            if scatter:
                buf[iz, iy, ix] += value * seg
            else:
                acc += vol[iz, iy, ix] * seg
        if t_next >= t_out:
            break
        if tx <= ty and tx <= tz:
            ix += step_x
            tx += dtx
        elif ty <= tz:
            iy += step_y
            ty += dty
        else:
            iz += step_z
            tz += dtz
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny or iz < 0 or iz >= nz:
            break
        t = t_next
    return acc


@njit(cache=True, nogil=True)
def _ray_endpoints(vectors, a, row, col, su, sv, rows, cols, ss, pixel_size, vs, half):
    """Source and sub-pixel centre of one ray, converted to grid units"""
    off_u = (col - (cols - 1) * 0.5 + (su + 0.5) / ss - 0.5) * pixel_size
    off_v = (row - (rows - 1) * 0.5 + (sv + 0.5) / ss - 0.5) * pixel_size
    sx = vectors[a, 0, 0]
    sy = vectors[a, 0, 1]
    sz = vectors[a, 0, 2]
    px = vectors[a, 1, 0] + off_u * vectors[a, 2, 0] + off_v * vectors[a, 3, 0]
    py = vectors[a, 1, 1] + off_u * vectors[a, 2, 1] + off_v * vectors[a, 3, 1]
    pz = vectors[a, 1, 2] + off_u * vectors[a, 2, 2] + off_v * vectors[a, 3, 2]
    length = np.sqrt((px - sx) ** 2 + (py - sy) ** 2 + (pz - sz) ** 2)
    return (
        sx / vs + half[2],
        sy / vs + half[1],
        sz / vs + half[0],
        px / vs + half[2],
        py / vs + half[1],
        pz / vs + half[0],
        length,
    )


@njit(parallel=True, cache=True, nogil=True)
def _forward_kernel(vol, vectors, rows, cols, pixel_size, vs, ss, out):
    n_angles = vectors.shape[0]
    nz, ny, nx = vol.shape
    half = np.array([nz * 0.5, ny * 0.5, nx * 0.5])
    weight = 1.0 / (ss * ss)
    for job in prange(n_angles * rows):
        a = job // rows
        r = job % rows
        for c in range(cols):
            acc = 0.0
            for su in range(ss):
                for sv in range(ss):
                    x0, y0, z0, x1, y1, z1, length = _ray_endpoints(
                        vectors, a, r, c, su, sv, rows, cols, ss, pixel_size, vs, half
                    )
                    acc += _traverse(vol, vol, x0, y0, z0, x1, y1, z1, length, 0.0, False)
            out[a, r, c] = acc * weight


@njit(parallel=True, cache=True, nogil=True)
def _backward_kernel(images, vectors, rows, cols, pixel_size, vs, ss, buffers):
    n_angles = vectors.shape[0]
    n_chunks, nz, ny, nx = buffers.shape
    half = np.array([nz * 0.5, ny * 0.5, nx * 0.5])
    weight = 1.0 / (ss * ss)
    for chunk in prange(n_chunks):
        buf = buffers[chunk]
        for a in range(chunk, n_angles, n_chunks):
            for r in range(rows):
                for c in range(cols):
                    value = images[a, r, c]
                    if value == 0.0:
                        continue
                    for su in range(ss):
                        for sv in range(ss):
                            x0, y0, z0, x1, y1, z1, length = _ray_endpoints(
                                vectors, a, r, c, su, sv, rows, cols, ss, pixel_size, vs, half
                            )
                            _traverse(buf, buf, x0, y0, z0, x1, y1, z1, length, value * weight, True)


class ConeBeamProjector:
    """Linear operator A between a [z, y, x] voxel grid and a projection stack.

    Projection stacks are indexed [angle, row, col]; values are line integrals
    in (voxel value) * cm.
    """

    def __init__(
        self,
        geometry: ConeBeamGeometry,
        volume_shape: Tuple[int, int, int],
        voxel_size_cm: float,
        supersample: int = 1,
    ):
        if len(volume_shape) != 3 or min(volume_shape) < 1:
            raise ConfigurationError(f"invalid volume shape {volume_shape}")
        if voxel_size_cm <= 0:
            raise ConfigurationError("voxel size must be positive")
        if supersample < 1:
            raise ConfigurationError("supersample must be >= 1")
        half_diagonal = 0.5 * voxel_size_cm * float(np.linalg.norm(volume_shape))
        if geometry.source_origin_dist <= half_diagonal:
            raise ConfigurationError(
                "source lies inside the reconstruction volume; "
                f"SOD {geometry.source_origin_dist} cm <= {half_diagonal:.3f} cm"
            )
        self.geometry = geometry
        self.volume_shape = tuple(int(n) for n in volume_shape)
        self.voxel_size_cm = float(voxel_size_cm)
        self.supersample = int(supersample)
        self._vectors = geometry.vectors()

    @property
    def projection_shape(self) -> Tuple[int, int, int]:
        return (
            self.geometry.n_angles,
            self.geometry.detector_rows,
            self.geometry.detector_cols,
        )

    @property
    def cache_key(self) -> tuple:
        return (
            self.geometry.geometry_hash(),
            self.volume_shape,
            self.voxel_size_cm,
            self.supersample,
        )

    def _select(self, angle_indices: Optional[Sequence[int]]) -> np.ndarray:
        if angle_indices is None:
            return self._vectors
        for index in angle_indices:
            self.geometry.check_angle_index(int(index))
        return np.ascontiguousarray(self._vectors[np.asarray(angle_indices, dtype=np.int64)])

    def forward(
        self, volume: np.ndarray, angle_indices: Optional[Sequence[int]] = None
    ) -> np.ndarray:
        if volume.shape != self.volume_shape:
            raise ConfigurationError(
                f"volume shape {volume.shape} does not match projector grid {self.volume_shape}"
            )
        vectors = self._select(angle_indices)
        rows, cols = self.geometry.detector_shape
        out = np.zeros((len(vectors), rows, cols), dtype=np.float64)
        _forward_kernel(
            np.ascontiguousarray(volume, dtype=np.float64),
            vectors,
            rows,
            cols,
            self.geometry.pixel_size,
            self.voxel_size_cm,
            self.supersample,
            out,
        )
        return out

    def backward(
        self, projections: np.ndarray, angle_indices: Optional[Sequence[int]] = None
    ) -> np.ndarray:
        vectors = self._select(angle_indices)
        rows, cols = self.geometry.detector_shape
        expected = (len(vectors), rows, cols)
        if projections.shape != expected:
            raise ConfigurationError(
                f"projection shape {projections.shape} does not match geometry {expected}"
            )
        n_chunks = min(BACKPROJECT_CHUNKS, len(vectors))
        buffers = np.zeros((n_chunks,) + self.volume_shape, dtype=np.float64)
        _backward_kernel(
            np.ascontiguousarray(projections, dtype=np.float64),
            vectors,
            rows,
            cols,
            self.geometry.pixel_size,
            self.voxel_size_cm,
            self.supersample,
            buffers,
        )
        return buffers.sum(axis=0)


def trace_path_lengths(
    labels: np.ndarray,
    geometry: ConeBeamGeometry,
    angle_index: int,
    material_id: int,
    voxel_size_cm: float,
    supersample: int = 1,
) -> np.ndarray:
    """Per-pixel intersection length (cm) of each ray with voxels of material_id"""
    geometry.check_angle_index(angle_index)
    projector = ConeBeamProjector(geometry, labels.shape, voxel_size_cm, supersample)
    density = (labels == material_id).astype(np.float64)
    return projector.forward(density, [angle_index])[0]


def backproject(
    image: np.ndarray,
    geometry: ConeBeamGeometry,
    angle_index: int,
    volume_shape: Tuple[int, int, int],
    voxel_size_cm: float,
    supersample: int = 1,
) -> np.ndarray:
    """Adjoint of trace_path_lengths for one angle"""
    geometry.check_angle_index(angle_index)
    projector = ConeBeamProjector(geometry, volume_shape, voxel_size_cm, supersample)
    return projector.backward(image[np.newaxis], [angle_index])
