"""Segmentation quality measures and their aggregation over a test set.

Three measures are computed per image pair (prediction vs target):

- average class accuracy: mean of the foreign-object and background recalls;
- detection: a target component of at least min_component_px pixels counts
  as detected when more than eta of its pixels are predicted;
- false positives: a predicted component of at least min_component_px pixels
  counts as false when less than delta of its pixels are in the target.

Detection and false-positive percentages pool the component counts of all
images; an image without qualifying components adds nothing to either side.
"""

import logging
import re
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, Field

from fod_forge.errors import DataError, ParameterError
from fod_forge.utils.store import load_raw, save_json_store
from fod_forge.volseg import ComponentLabels, label_components

logger = logging.getLogger(__name__)

MIN_SIZE_FRACTION = 0.0005
PAIR_PATTERN = re.compile(r"obj(\d+)_a(\d+)\.(png|raw)$")

PairKey = Tuple[int, int]


class DetectionParams(BaseModel):
    eta: float = Field(default=0.3, gt=0, lt=1)
    delta: float = Field(default=0.3, gt=0, lt=1)
    min_component_px: int = Field(default=8, ge=1)
    connectivity: Literal[4, 8] = 4


def default_min_component_px(shape: Tuple[int, int]) -> int:
    """0.05% of the image area, 8 pixels at 128 x 128"""
    rows, cols = shape
    return max(1, int(round(MIN_SIZE_FRACTION * rows * cols)))


class ImageMetrics(BaseModel):
    object_id: int
    angle_index: int
    accuracy: float
    jaccard: float
    detected: int
    target_components: int
    false_positives: int
    predicted_components: int


class MetricsReport(BaseModel):
    mean_accuracy: float
    detection_rate: float
    false_positive_rate: float
    mean_jaccard: float
    n_images: int
    n_target_components: int = 0
    n_predicted_components: int = 0
    params: DetectionParams
    images: List[ImageMetrics] = Field(default_factory=list)
    tags: Dict[str, float] = Field(default_factory=dict)
    config_hash: str = ""


def _pair(seg: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    seg = np.asarray(seg, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if seg.shape != target.shape:
        raise DataError(f"mask shapes differ: {seg.shape} vs {target.shape}")
    return seg, target


def _recall(hits: int, total: int) -> float:
    return 1.0 if total == 0 else hits / total


def average_class_accuracy(seg: np.ndarray, target: np.ndarray) -> float:
    seg, target = _pair(seg, target)
    foreign = int(target.sum())
    background = target.size - foreign
    recall_fo = _recall(int(np.sum(seg & target)), foreign)
    recall_bg = _recall(int(np.sum(~seg & ~target)), background)
    return 0.5 * (recall_fo + recall_bg)


def components2d(mask: np.ndarray, connectivity: int = 4) -> ComponentLabels:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ParameterError(f"components2d needs a 2D mask, got {mask.ndim}D")
    return label_components(mask, connectivity)


def _component_recalls(
    components: ComponentLabels, reference: np.ndarray, min_size: int
) -> np.ndarray:
    """Fraction of each qualifying component's pixels that are true in reference"""
    if components.count == 0:
        return np.zeros(0)
    hits = np.bincount(
        components.labels.ravel(),
        weights=reference.ravel().astype(np.float64),
        minlength=components.count + 1,
    )[1:]
    qualifying = components.sizes >= min_size
    return hits[qualifying] / components.sizes[qualifying]


def detection_counts(seg: np.ndarray, target: np.ndarray, params: DetectionParams) -> Tuple[int, int]:
    """(detected, qualifying) target components of one image"""
    seg, target = _pair(seg, target)
    recalls = _component_recalls(components2d(target, params.connectivity), seg, params.min_component_px)
    return int(np.sum(recalls > params.eta)), len(recalls)


def false_positive_counts(seg: np.ndarray, target: np.ndarray, params: DetectionParams) -> Tuple[int, int]:
    """(false, qualifying) predicted components of one image"""
    seg, target = _pair(seg, target)
    recalls = _component_recalls(components2d(seg, params.connectivity), target, params.min_component_px)
    return int(np.sum(recalls < params.delta)), len(recalls)


def _check_paired(segs: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> None:
    if len(segs) != len(targets):
        raise DataError(f"{len(segs)} predictions for {len(targets)} targets")


def _percentage(hits: int, total: int, empty: float) -> float:
    return empty if total == 0 else 100.0 * hits / total


def detection_rate(
    segs: Sequence[np.ndarray], targets: Sequence[np.ndarray], params: DetectionParams
) -> float:
    _check_paired(segs, targets)
    counts = [detection_counts(s, t, params) for s, t in zip(segs, targets)]
    return _percentage(sum(c[0] for c in counts), sum(c[1] for c in counts), 100.0)


def false_positive_rate(
    segs: Sequence[np.ndarray], targets: Sequence[np.ndarray], params: DetectionParams
) -> float:
    _check_paired(segs, targets)
    counts = [false_positive_counts(s, t, params) for s, t in zip(segs, targets)]
    return _percentage(sum(c[0] for c in counts), sum(c[1] for c in counts), 0.0)


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _pair(a, b)
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0
    return int(np.sum(a & b)) / union


def image_metrics(
    seg: np.ndarray, target: np.ndarray, params: DetectionParams, key: PairKey = (0, 0)
) -> ImageMetrics:
    detected, qualifying = detection_counts(seg, target, params)
    false, predicted = false_positive_counts(seg, target, params)
    return ImageMetrics(
        object_id=key[0],
        angle_index=key[1],
        accuracy=average_class_accuracy(seg, target),
        jaccard=jaccard(seg, target),
        detected=detected,
        target_components=qualifying,
        false_positives=false,
        predicted_components=predicted,
    )


def aggregate(images: Sequence[ImageMetrics], params: DetectionParams) -> MetricsReport:
    if not images:
        raise DataError("no image pairs to evaluate")
    images = sorted(images, key=lambda m: (m.object_id, m.angle_index))
    n_target = sum(m.target_components for m in images)
    n_predicted = sum(m.predicted_components for m in images)
    if n_target == 0:
        logger.warning("No target component reaches the minimum size; detection rate is vacuous")
    return MetricsReport(
        mean_accuracy=float(np.mean([m.accuracy for m in images])),
        detection_rate=_percentage(sum(m.detected for m in images), n_target, 100.0),
        false_positive_rate=_percentage(sum(m.false_positives for m in images), n_predicted, 0.0),
        mean_jaccard=float(np.mean([m.jaccard for m in images])),
        n_images=len(images),
        n_target_components=n_target,
        n_predicted_components=n_predicted,
        params=params,
        images=list(images),
    )


def evaluate_pairs(
    preds: Dict[PairKey, np.ndarray],
    targets: Dict[PairKey, np.ndarray],
    params: DetectionParams,
    allow_missing: bool = False,
) -> MetricsReport:
    missing_pred = sorted(set(targets) - set(preds))
    missing_target = sorted(set(preds) - set(targets))
    if (missing_pred or missing_target) and not allow_missing:
        raise DataError(
            "unpaired evaluation inputs: "
            f"no prediction for {_describe(missing_pred)}; no target for {_describe(missing_target)}"
        )
    for key in missing_pred + missing_target:
        logger.warning("Skipping unpaired image obj%04d_a%04d", *key)
    keys = sorted(set(preds) & set(targets))
    return aggregate([image_metrics(preds[k], targets[k], params, k) for k in keys], params)


def _describe(keys: List[PairKey]) -> str:
    if not keys:
        return "none"
    return ", ".join(f"obj{o:04d}_a{a:04d}" for o, a in keys)


def load_mask_file(path: Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        with Image.open(path) as image:
            return np.asarray(image) > 0
    values, _ = load_raw(path)
    return values > 0


def load_mask_dir(directory: Path) -> Dict[PairKey, np.ndarray]:
    """Masks named objNNNN_aNNNN.raw or .png anywhere below directory; raw wins over PNG"""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"mask directory not found: {directory}")
    found: Dict[PairKey, Dict[str, Path]] = {}
    for path in sorted(directory.rglob("obj*_a*.*")):
        match = PAIR_PATTERN.search(path.name)
        if match is None:
            continue
        key = (int(match.group(1)), int(match.group(2)))
        by_format = found.setdefault(key, {})
        if match.group(3) in by_format:
            raise DataError(f"duplicate mask for obj{key[0]:04d}_a{key[1]:04d} in {directory}")
        by_format[match.group(3)] = path
    return {
        key: load_mask_file(paths.get("raw", paths.get("png")))
        for key, paths in sorted(found.items())
    }


def write_report(report: MetricsReport, out_path: Path) -> Path:
    """report JSON plus a per-image CSV next to it"""
    out_path = Path(out_path)
    save_json_store(out_path, report.model_dump(mode="json"))
    csv_path = out_path.with_suffix(".csv")
    pd.DataFrame([m.model_dump() for m in report.images]).to_csv(csv_path, index=False)
    logger.info(
        "Evaluated %d images: ACC %.4f, detection %.1f%%, false positives %.1f%%, Jaccard %.4f",
        report.n_images,
        report.mean_accuracy,
        report.detection_rate,
        report.false_positive_rate,
        report.mean_jaccard,
    )
    return csv_path


def load_report(path: Path) -> MetricsReport:
    path = Path(path)
    if not path.exists():
        raise DataError(f"report not found: {path}")
    return MetricsReport.model_validate_json(path.read_text(encoding="utf-8"))


def evaluate_testset(
    pred_dir: Path,
    target_dir: Path,
    params: Optional[DetectionParams] = None,
    out_path: Optional[Path] = None,
    allow_missing: bool = False,
) -> MetricsReport:
    """Score externally produced prediction masks against target masks paired by (object, angle)"""
    preds = load_mask_dir(pred_dir)
    targets = load_mask_dir(target_dir)
    if params is None:
        shape = next(iter(targets.values())).shape if targets else (128, 128)
        params = DetectionParams(min_component_px=default_min_component_px(shape))
    report = evaluate_pairs(preds, targets, params, allow_missing=allow_missing)
    if out_path is not None:
        write_report(report, out_path)
    return report
