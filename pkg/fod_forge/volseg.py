"""Histograms, Otsu and fixed global thresholds, and 3D connected components."""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from fod_forge.errors import DegenerateHistogramError, ParameterError

logger = logging.getLogger(__name__)

DEFAULT_BINS = 256

# Boolean [z, y, x] segmentation.
BinaryVolume = np.ndarray

_CONNECTIVITY_RANK = {
    2: {4: 1, 8: 2},
    3: {6: 1, 18: 2, 26: 3},
}


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    foreign_counts: Optional[np.ndarray] = None
    other_counts: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.bin_edges) != len(self.counts) + 1:
            raise ParameterError("histogram needs len(bin_edges) == len(counts) + 1")
        if np.any(np.asarray(self.counts) < 0):
            raise ParameterError("histogram counts must be non-negative")

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(np.sum(self.counts))


@dataclass
class ComponentLabels:
    """Connected components: labels 1..count, sizes[k - 1] is the size of label k."""

    labels: np.ndarray
    sizes: np.ndarray

    @property
    def count(self) -> int:
        return len(self.sizes)


def value_range(values: np.ndarray) -> Tuple[float, float]:
    """[min, max] of values, widened by 0.5 on each side when constant"""
    values = np.asarray(values)
    if values.size == 0:
        return 0.0, 1.0
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return lo - 0.5, hi + 0.5
    return lo, hi


def histogram(
    values: np.ndarray,
    n_bins: int = DEFAULT_BINS,
    value_range_: Optional[Tuple[float, float]] = None,
    label_mask: Optional[np.ndarray] = None,
) -> Histogram:
    """Fixed-width histogram; values outside the range land in the end bins.

    With label_mask the counts are also split into foreign (mask true) and
    other series.
    """
    if n_bins < 1:
        raise ParameterError("n_bins must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    lo, hi = value_range(values) if value_range_ is None else map(float, value_range_)
    if not lo < hi:
        raise ParameterError(f"histogram range needs min < max, got ({lo}, {hi})")
    edges = np.linspace(lo, hi, n_bins + 1)

    def count(selected: np.ndarray) -> np.ndarray:
        counts, _ = np.histogram(np.clip(selected, lo, hi), bins=edges)
        return counts.astype(np.int64)

    if label_mask is None:
        return Histogram(bin_edges=edges, counts=count(values.ravel()))
    label_mask = np.asarray(label_mask, dtype=bool)
    if label_mask.shape != values.shape:
        raise ParameterError(f"label mask {label_mask.shape} does not match values {values.shape}")
    foreign = count(values[label_mask])
    other = count(values[~label_mask])
    return Histogram(bin_edges=edges, counts=foreign + other, foreign_counts=foreign, other_counts=other)


def sum_histograms(histograms: Iterable[Histogram]) -> Histogram:
    histograms = list(histograms)
    if not histograms:
        raise ParameterError("no histograms to sum")
    edges = histograms[0].bin_edges
    for h in histograms[1:]:
        if not np.array_equal(h.bin_edges, edges):
            raise ParameterError("histograms must share bin edges to be summed")
    return Histogram(bin_edges=edges, counts=np.sum([h.counts for h in histograms], axis=0))


def otsu(hist: Histogram) -> float:
    """Edge maximizing the between-class variance of the bin-index values.

    Class 0 holds bins below candidate edge k, class 1 the rest. Scores are
    compared in exact rational arithmetic; ties go to the lowest edge.
    """
    counts = [Fraction(c) for c in np.asarray(hist.counts).tolist()]
    if sum(1 for c in counts if c > 0) < 2:
        raise DegenerateHistogramError("Otsu needs at least two non-empty bins")

    total_n = sum(counts)
    total_s = sum(k * c for k, c in enumerate(counts))
    best_k, best_score = None, None
    n0 = s0 = Fraction(0)
    for k in range(1, len(counts)):
        n0 += counts[k - 1]
        s0 += (k - 1) * counts[k - 1]
        n1 = total_n - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = total_s - s0
        score = (s0 * n1 - s1 * n0) ** 2 / (n0 * n1)
        if best_score is None or score > best_score:
            best_k, best_score = k, score
    return float(hist.bin_edges[best_k])


def otsu_threshold(volume: np.ndarray, n_bins: int = DEFAULT_BINS) -> float:
    """Otsu threshold of one volume over its own [min, max] range"""
    return otsu(histogram(volume, n_bins))


def otsu_global(volumes: Sequence[np.ndarray], n_bins: int = DEFAULT_BINS) -> float:
    """Single Otsu threshold from the summed histograms of several volumes"""
    if not volumes:
        raise ParameterError("otsu_global needs at least one volume")
    lo = min(float(np.min(v)) for v in volumes)
    hi = max(float(np.max(v)) for v in volumes)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return otsu(sum_histograms(histogram(v, n_bins, (lo, hi)) for v in volumes))


def threshold(volume: np.ndarray, theta: float) -> BinaryVolume:
    """1 where value >= theta"""
    if not np.isfinite(theta):
        raise ParameterError(f"threshold must be finite, got {theta}")
    return np.asarray(volume) >= theta


def threshold_sweep(volume: np.ndarray, thetas: Sequence[float]) -> Dict[float, BinaryVolume]:
    """One segmentation per threshold, keyed by threshold in input order"""
    if len(thetas) == 0:
        raise ParameterError("threshold sweep needs at least one threshold")
    return {float(theta): threshold(volume, theta) for theta in thetas}


def label_components(mask: np.ndarray, connectivity: int, min_size: int = 0) -> ComponentLabels:
    """Connected components of a 2D or 3D boolean array.

    Components smaller than min_size are dropped and the remaining labels are
    renumbered consecutively in scan order.
    """
    mask = np.asarray(mask, dtype=bool)
    ranks = _CONNECTIVITY_RANK.get(mask.ndim)
    if ranks is None or connectivity not in ranks:
        raise ParameterError(f"unsupported connectivity {connectivity} for {mask.ndim}D input")
    structure = ndimage.generate_binary_structure(mask.ndim, ranks[connectivity])
    labels, count = ndimage.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    if min_size > 0 and count:
        keep = sizes >= min_size
        remap = np.zeros(count + 1, dtype=labels.dtype)
        remap[1:][keep] = np.arange(1, int(keep.sum()) + 1)
        labels = remap[labels]
        sizes = sizes[keep]
    return ComponentLabels(labels=labels, sizes=sizes.astype(np.int64))


def components3d(volume: BinaryVolume, connectivity: int = 6, min_size: int = 0) -> ComponentLabels:
    return label_components(volume, connectivity, min_size)


def remove_small_components(volume: BinaryVolume, min_size: int, connectivity: int = 6) -> BinaryVolume:
    """Optional 3D denoising; min_size <= 1 returns the input unchanged"""
    if min_size <= 1:
        return np.asarray(volume, dtype=bool)
    return components3d(volume, connectivity, min_size).labels > 0
