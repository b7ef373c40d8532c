from collections import deque
from fractions import Fraction

import numpy as np
import pytest

from fod_forge.errors import DegenerateHistogramError, ParameterError
from fod_forge.volseg import (
    Histogram,
    components3d,
    histogram,
    label_components,
    otsu,
    otsu_global,
    otsu_threshold,
    remove_small_components,
    threshold,
    threshold_sweep,
)


def exhaustive_otsu_edge(counts, edges):
    """Edge maximizing w0 * w1 * (mu0 - mu1)^2, first maximum wins"""
    total = sum(counts)
    weighted = sum(j * c for j, c in enumerate(counts))
    best, best_edge = None, None
    n0 = s0 = 0
    for k in range(1, len(counts)):
        n0 += counts[k - 1]
        s0 += (k - 1) * counts[k - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(s0, n0)
        mu1 = Fraction(weighted - s0, n1)
        variance = Fraction(n0, total) * Fraction(n1, total) * (mu0 - mu1) ** 2
        if best is None or variance > best:
            best, best_edge = variance, edges[k]
    return best_edge


def flood_fill(mask, offsets):
    labels = np.zeros(mask.shape, dtype=np.int64)
    current = 0
    for start in zip(*np.nonzero(mask)):
        if labels[start]:
            continue
        current += 1
        labels[start] = current
        queue = deque([start])
        while queue:
            point = queue.popleft()
            for offset in offsets:
                neighbour = tuple(p + o for p, o in zip(point, offset))
                if all(0 <= n < s for n, s in zip(neighbour, mask.shape)) and mask[neighbour] and not labels[neighbour]:
                    labels[neighbour] = current
                    queue.append(neighbour)
    return labels


def canonical(labels):
    """Relabel by order of first appearance in raster order"""
    flat = labels.ravel()
    ids = [v for v in dict.fromkeys(flat.tolist()) if v != 0]
    remap = np.zeros(int(flat.max()) + 1, dtype=np.int64)
    for new, old in enumerate(ids, start=1):
        remap[old] = new
    return remap[labels]


FACE_2D = [(0, 1), (0, -1), (1, 0), (-1, 0)]
FACE_3D = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def test_otsu_matches_exhaustive_search():
    rng = np.random.default_rng(0)
    edges = np.linspace(0.0, 1.0, 257)
    for _ in range(200):
        counts = rng.integers(0, 1000, 256)
        counts[rng.random(256) < 0.3] = 0
        hist = Histogram(bin_edges=edges, counts=counts)
        assert otsu(hist) == exhaustive_otsu_edge(counts.tolist(), edges)


def test_otsu_splits_two_clusters():
    values = np.concatenate([np.full(500, 0.0), np.full(300, 10.0)])
    theta = otsu_threshold(values)
    assert 0.0 < theta <= 10.0
    assert threshold(values, theta).sum() == 300


def test_otsu_needs_two_populated_bins():
    with pytest.raises(DegenerateHistogramError):
        otsu_threshold(np.full((4, 4, 4), 0.3))


def test_global_otsu_uses_the_pooled_histogram():
    rng = np.random.default_rng(3)
    a = rng.normal(0.0, 1.0, (8, 8, 8))
    b = rng.normal(4.0, 1.0, (8, 8, 8))
    pooled = np.concatenate([a.ravel(), b.ravel()])
    assert otsu_global([a, b]) == otsu_threshold(pooled)


def test_histogram_splits_by_label():
    values = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    mask = np.array([False, False, False, True, True, True])
    hist = histogram(values, 2, label_mask=mask)
    assert hist.counts.tolist() == [3, 3]
    assert hist.foreign_counts.tolist() == [0, 3]
    assert hist.other_counts.tolist() == [3, 0]


def test_threshold_boundary_is_foreground():
    volume = np.array([0.1, 0.2, 0.3])
    assert threshold(volume, 0.2).tolist() == [False, True, True]


def test_threshold_must_be_finite():
    with pytest.raises(ParameterError):
        threshold(np.zeros(3), float("nan"))


def test_sweep_masks_are_nested():
    volume = np.random.default_rng(5).random((8, 8, 8))
    thetas = [0.2, 0.4, 0.5, 0.7]
    masks = threshold_sweep(volume, thetas)
    assert list(masks) == thetas
    for low, high in zip(thetas, thetas[1:]):
        assert not np.any(masks[high] & ~masks[low])


def test_empty_sweep_is_rejected():
    with pytest.raises(ParameterError):
        threshold_sweep(np.zeros(3), [])


def test_2d_components_match_flood_fill():
    rng = np.random.default_rng(7)
    for _ in range(500):
        mask = rng.random((32, 32)) < 0.5
        result = label_components(mask, 4)
        expected = flood_fill(mask, FACE_2D)
        assert result.count == expected.max()
        assert np.array_equal(canonical(result.labels), expected)


def test_3d_components_match_flood_fill():
    rng = np.random.default_rng(8)
    for _ in range(500):
        mask = rng.random((16, 16, 16)) < 0.3
        result = components3d(mask, 6)
        expected = flood_fill(mask, FACE_3D)
        assert result.count == expected.max()
        assert np.array_equal(canonical(result.labels), expected)


def test_diagonal_neighbours_join_only_with_full_connectivity():
    mask = np.zeros((3, 3, 3), dtype=bool)
    mask[0, 0, 0] = mask[1, 1, 1] = True
    assert components3d(mask, 6).count == 2
    assert components3d(mask, 26).count == 1


def test_min_size_drops_and_renumbers():
    mask = np.zeros((10, 10), dtype=bool)
    mask[0, 0] = True
    mask[5:8, 5:8] = True
    result = label_components(mask, 4, min_size=2)
    assert result.count == 1
    assert result.sizes.tolist() == [9]
    assert set(np.unique(result.labels)) == {0, 1}


def test_unsupported_connectivity():
    with pytest.raises(ParameterError):
        label_components(np.zeros((4, 4), dtype=bool), 6)


def test_remove_small_components():
    volume = np.zeros((8, 8, 8), dtype=bool)
    volume[0, 0, 0] = True
    volume[3:6, 3:6, 3:6] = True
    cleaned = remove_small_components(volume, 2)
    assert not cleaned[0, 0, 0]
    assert cleaned.sum() == 27


@pytest.mark.parametrize("factor", [2, 7, 1000])
def test_otsu_ignores_a_common_count_scale(factor):
    counts = np.array([3, 9, 4, 1, 0, 2, 8, 5, 1])
    edges = np.linspace(0.0, 1.0, len(counts) + 1)
    base = otsu(Histogram(bin_edges=edges, counts=counts))
    assert otsu(Histogram(bin_edges=edges, counts=counts * factor)) == base


def test_two_bins_split_evenly():
    hist = histogram(np.array([0.0, 1.0, 2.0, 3.0]), n_bins=2)
    assert hist.counts.tolist() == [2, 2]
    assert hist.bin_edges.tolist() == [0.0, 1.5, 3.0]


def test_histogram_keeps_every_value():
    values = np.random.default_rng(4).normal(size=(6, 7, 8))
    assert int(histogram(values, n_bins=17, value_range_=(-1.0, 1.0)).counts.sum()) == values.size
    assert int(histogram(values, n_bins=5).counts.sum()) == values.size


def test_constant_volume_fills_one_bin():
    hist = histogram(np.full((4, 4, 4), 0.35), n_bins=10, value_range_=(0.0, 1.0))
    assert np.count_nonzero(hist.counts) == 1
    assert hist.counts[3] == 64
