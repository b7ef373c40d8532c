import numpy as np
import pytest
from PIL import Image

from fod_forge.errors import DataError
from fod_forge.evalmetrics import (
    DetectionParams,
    average_class_accuracy,
    default_min_component_px,
    detection_counts,
    detection_rate,
    evaluate_pairs,
    evaluate_testset,
    false_positive_counts,
    false_positive_rate,
    image_metrics,
    jaccard,
    load_report,
)
from fod_forge.utils.store import save_raw

ANY_SIZE = DetectionParams(min_component_px=1)


@pytest.fixture
def target() -> np.ndarray:
    mask = np.zeros((32, 32), dtype=bool)
    mask[4:10, 4:10] = True
    mask[20:24, 15:30] = True
    return mask


def test_perfect_prediction(target):
    assert average_class_accuracy(target, target) == 1.0
    assert detection_rate([target], [target], ANY_SIZE) == 100.0
    assert false_positive_rate([target], [target], ANY_SIZE) == 0.0
    assert jaccard(target, target) == 1.0


def test_empty_prediction_on_positive_target(target):
    empty = np.zeros_like(target)
    assert detection_rate([empty], [target], ANY_SIZE) == 0.0
    assert false_positive_rate([empty], [target], ANY_SIZE) == 0.0
    assert average_class_accuracy(empty, target) == 0.5


def test_class_accuracy_micro_case():
    # 4 foreign pixels, 2 found; 12 background pixels, 2 wrongly marked
    target = np.zeros((4, 4), dtype=bool)
    target[0, :] = True
    seg = np.zeros((4, 4), dtype=bool)
    seg[0, :2] = True
    seg[3, :2] = True
    assert average_class_accuracy(seg, target) == pytest.approx(0.5 * (2 / 4 + 10 / 12))


def test_class_accuracy_is_not_symmetric():
    seg = np.ones((4, 4), dtype=bool)
    target = np.zeros((4, 4), dtype=bool)
    target[:2] = True
    assert average_class_accuracy(seg, target) == 0.5
    assert average_class_accuracy(target, seg) == 0.75


def test_detection_needs_more_than_eta():
    target = np.zeros((12, 12), dtype=bool)
    target[2, 1:11] = True
    seg = np.zeros_like(target)
    seg[2, 1:4] = True
    assert detection_counts(seg, target, ANY_SIZE) == (0, 1)
    seg[2, 4] = True
    assert detection_counts(seg, target, ANY_SIZE) == (1, 1)


def test_false_positive_needs_less_than_delta():
    seg = np.zeros((12, 12), dtype=bool)
    seg[5, 1:11] = True
    target = np.zeros_like(seg)
    target[5, 1:4] = True
    assert false_positive_counts(seg, target, ANY_SIZE) == (0, 1)
    target[5, 3] = False
    assert false_positive_counts(seg, target, ANY_SIZE) == (1, 1)


def test_small_components_are_ignored():
    target = np.zeros((16, 16), dtype=bool)
    target[0, 0:2] = True
    params = DetectionParams(min_component_px=8)
    assert detection_counts(np.zeros_like(target), target, params) == (0, 0)
    assert detection_rate([np.zeros_like(target)], [target], params) == 100.0


def test_diagonal_pixels_are_separate_with_four_connectivity():
    mask = np.zeros((4, 4), dtype=bool)
    mask[0, 0] = mask[1, 1] = True
    assert detection_counts(mask, mask, ANY_SIZE) == (2, 2)
    assert detection_counts(mask, mask, DetectionParams(min_component_px=1, connectivity=8)) == (1, 1)


def test_jaccard_edge_cases(target):
    empty = np.zeros_like(target)
    assert jaccard(empty, empty) == 1.0
    assert jaccard(empty, target) == 0.0
    shifted = np.roll(target, 2, axis=1)
    assert jaccard(target, shifted) == jaccard(shifted, target)


def test_shape_mismatch_is_a_data_error():
    with pytest.raises(DataError):
        jaccard(np.zeros((4, 4)), np.zeros((4, 5)))


def test_default_min_size_at_training_resolution():
    assert default_min_component_px((128, 128)) == 8


def test_aggregates_pool_component_counts():
    rng = np.random.default_rng(11)
    preds, targets = {}, {}
    for k in range(6):
        targets[(k, 0)] = rng.random((24, 24)) < 0.2
        preds[(k, 0)] = rng.random((24, 24)) < 0.2
    params = DetectionParams(min_component_px=2)
    report = evaluate_pairs(preds, targets, params)

    per_image = [image_metrics(preds[k], targets[k], params, k) for k in sorted(targets)]
    assert report.n_images == 6
    assert report.mean_accuracy == pytest.approx(np.mean([m.accuracy for m in per_image]))
    assert report.mean_jaccard == pytest.approx(np.mean([m.jaccard for m in per_image]))
    detected = sum(m.detected for m in per_image)
    qualifying = sum(m.target_components for m in per_image)
    assert report.detection_rate == pytest.approx(100.0 * detected / qualifying)
    assert report.detection_rate == pytest.approx(
        detection_rate([preds[k] for k in sorted(preds)], [targets[k] for k in sorted(targets)], params)
    )


def test_unpaired_inputs(target):
    preds = {(0, 1): target}
    targets = {(0, 1): target, (0, 2): target}
    with pytest.raises(DataError):
        evaluate_pairs(preds, targets, ANY_SIZE)
    report = evaluate_pairs(preds, targets, ANY_SIZE, allow_missing=True)
    assert report.n_images == 1


def test_evaluate_testset_from_directories(tmp_path, target):
    pred_dir, target_dir = tmp_path / "pred", tmp_path / "target"
    pred_dir.mkdir()
    save_raw(target_dir / "obj0003_a0010.raw", target, {})
    save_raw(target_dir / "obj0003_a0460.raw", target, {})
    Image.fromarray(target.astype(np.uint8) * 255).save(pred_dir / "obj0003_a0010.png")
    Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(pred_dir / "obj0003_a0460.png")

    report = evaluate_testset(pred_dir, target_dir, ANY_SIZE, out_path=tmp_path / "report.json")

    assert report.n_images == 2
    assert [(m.object_id, m.angle_index) for m in report.images] == [(3, 10), (3, 460)]
    assert report.detection_rate == 50.0
    assert (tmp_path / "report.csv").exists()
    assert load_report(tmp_path / "report.json") == report


def test_empty_targets_report_their_component_count(target):
    empty = np.zeros_like(target)
    report = evaluate_pairs({(0, 0): target}, {(0, 0): empty}, ANY_SIZE)
    assert report.detection_rate == 100.0
    assert report.n_target_components == 0
    assert report.n_predicted_components == 2
    assert report.false_positive_rate == 100.0


def test_aggregates_ignore_input_order():
    rng = np.random.default_rng(5)
    keys = [(k % 3, 10 * k) for k in range(7)]
    preds = {key: rng.random((20, 20)) < 0.25 for key in keys}
    targets = {key: rng.random((20, 20)) < 0.25 for key in keys}
    params = DetectionParams(min_component_px=2)

    shuffled = [keys[i] for i in rng.permutation(len(keys))]
    forward = evaluate_pairs(preds, targets, params)
    permuted = evaluate_pairs({k: preds[k] for k in shuffled}, {k: targets[k] for k in reversed(shuffled)}, params)

    assert permuted.model_dump() == forward.model_dump()
