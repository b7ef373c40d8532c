from collections import Counter

import pytest

from fod_forge.dataset import (
    DatasetManifest,
    ExampleRecord,
    ObjectEntry,
    check_manifest,
    compose_mixed,
    load_manifest,
    make_testset,
    mixed_pool_demand,
    mixed_selection,
    sample_manual,
    sample_workflow,
    save_manifest,
)
from fod_forge.errors import ConfigurationError, DataError, ParameterError
from fod_forge.xray.geometry import uniform_angles


def pool(ids, n_angles=1800):
    angles = uniform_angles(n_angles)
    return [ObjectEntry(object_id=k, angles=angles, geometry_hash="g0") for k in ids]


def test_workflow_takes_equal_shares():
    manifest = sample_workflow(pool(range(60)), 60, total=1800, seed=1)
    per_object = Counter(r.object_id for r in manifest.records)
    assert set(per_object.values()) == {30}
    assert manifest.counts() == {"train": 1620, "val": 180, "test": 0}


def test_single_workflow_object_uses_every_angle():
    manifest = sample_workflow(pool([4]), 1, total=1800, seed=2)
    assert sorted(r.angle_index for r in manifest.records) == list(range(1800))
    assert len(manifest.split("val")) == 180


def test_workflow_remainder_goes_to_the_earliest_objects():
    manifest = sample_workflow(pool(range(10)), 7, total=100, seed=3)
    per_object = Counter(r.object_id for r in manifest.records)
    selected = manifest.object_order[:7]
    assert [per_object[oid] for oid in selected] == [15, 15, 14, 14, 14, 14, 14]


def test_workflow_is_reproducible():
    first = sample_workflow(pool(range(12)), 5, total=200, seed=9)
    again = sample_workflow(pool(reversed(range(12))), 5, total=200, seed=9)
    assert first.model_dump_json() == again.model_dump_json()
    other = sample_workflow(pool(range(12)), 5, total=200, seed=10)
    assert other.model_dump_json() != first.model_dump_json()


def test_workflow_needs_enough_angles():
    with pytest.raises(DataError):
        sample_workflow(pool([0], n_angles=10), 1, total=20)


@pytest.mark.parametrize("i, train, val", [(9, 8, 1), (2, 1, 1), (60, 53, 7)])
def test_manual_split_sizes(i, train, val):
    manifest = sample_manual(pool(range(60)), i, seed=0)
    assert manifest.counts() == {"train": train, "val": val, "test": 0}
    assert len({r.object_id for r in manifest.records}) == i


def test_manual_needs_two_objects():
    with pytest.raises(ParameterError):
        sample_manual(pool(range(5)), 1)


def test_manual_choices_survive_adding_objects():
    objects = pool(range(20))
    nine = {r.object_id: r.angle_index for r in sample_manual(objects, 9, seed=4).records}
    twelve = {r.object_id: r.angle_index for r in sample_manual(objects, 12, seed=4).records}
    assert all(twelve[oid] == angle for oid, angle in nine.items())


def test_testset_has_two_orthogonal_views_per_object():
    testset = make_testset(pool(range(100, 151)), seed=5)
    assert len(testset.records) == 102
    assert all(r.split == "test" and r.provenance == "absolute" for r in testset.records)
    for first, second in zip(testset.records[::2], testset.records[1::2]):
        assert first.object_id == second.object_id
        assert (second.angle_index - first.angle_index) % 1800 == 450


def test_testset_is_reproducible():
    first = make_testset(pool(range(5)), seed=6)
    again = make_testset(pool(range(5)), seed=6)
    assert first.model_dump_json() == again.model_dump_json()


def test_testset_must_not_overlap_training():
    with pytest.raises(ConfigurationError):
        make_testset(pool(range(3)), seed=0, training_ids=[2, 7])


def test_mixed_half_and_half():
    few, many = pool(range(0, 20)), pool(range(100, 120))
    manifest = compose_mixed(few, many, ratio=0.5, i=10, seed=1, total=100)
    chosen = manifest.object_order
    assert len(chosen) == 10
    assert sum(oid < 100 for oid in chosen) == 5
    assert sum(oid >= 100 for oid in chosen) == 5


def test_mixed_with_full_ratio_is_workflow_on_the_first_pool():
    few, many = pool(range(0, 20)), pool(range(100, 120))
    mixed = compose_mixed(few, many, ratio=1.0, i=6, seed=2, total=120)
    workflow = sample_workflow(few, 6, total=120, seed=2)
    assert mixed.object_order == workflow.object_order[:6]
    assert [r.model_dump() for r in mixed.records] == [r.model_dump() for r in workflow.records]


def test_mixed_pool_exhaustion():
    with pytest.raises(DataError):
        mixed_selection([1, 2, 3], [10], 0.5, 6)


def test_mixed_rejects_shared_objects():
    with pytest.raises(ConfigurationError):
        compose_mixed(pool(range(5)), pool(range(4, 8)), i=2)


def test_manifest_check_catches_split_overlap():
    records = [
        ExampleRecord(object_id=1, angle_index=5, split="train"),
        ExampleRecord(object_id=1, angle_index=5, split="val"),
    ]
    manifest = DatasetManifest(
        strategy="workflow", object_order=[1], included_objects=1, records=records, master_seed=0
    )
    with pytest.raises(DataError):
        check_manifest(manifest)


def test_manifest_check_catches_missing_files(tmp_path):
    manifest = sample_manual(pool(range(4)), 2)
    manifest.records[0].radiograph_path = "train/images/missing.raw"
    with pytest.raises(DataError):
        check_manifest(manifest, tmp_path)


def test_saved_manifest_loads_back(tmp_path):
    manifest = sample_workflow(pool(range(4)), 2, total=10, seed=3)
    save_manifest(manifest, tmp_path / "manifest.json")
    assert load_manifest(tmp_path / "manifest.json") == manifest


@pytest.mark.parametrize("ratio", [0.0, 0.25, 0.5, 0.7, 1.0])
def test_mixed_pool_demand_counts_what_the_selection_takes(ratio):
    one, two = list(range(20)), list(range(100, 120))
    for i in range(1, 15):
        chosen = mixed_selection(one, two, ratio, i)
        assert mixed_pool_demand(ratio, i) == (sum(c < 100 for c in chosen), sum(c >= 100 for c in chosen))
