"""Training, validation and test set sampling with reproducible manifests."""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from fod_forge.errors import ConfigurationError, DataError, ParameterError

logger = logging.getLogger(__name__)

Split = Literal["train", "val", "test"]
Strategy = Literal["workflow", "manual", "mixed", "test"]

VALIDATION_EVERY = 10

# Tags of the per-object random streams.
_STRATUM_STREAM = 1
_MANUAL_STREAM = 2
_TEST_STREAM = 3
_SHUFFLE_STREAM = 4
_SECOND_POOL_STREAM = 5


class ObjectEntry(BaseModel):
    """A scanned object and the angles (radians) its radiographs were taken at."""

    object_id: int
    angles: List[float]
    geometry_hash: str = ""

    @property
    def n_angles(self) -> int:
        return len(self.angles)


class ExampleRecord(BaseModel):
    object_id: int
    angle_index: int
    split: Split
    radiograph_path: str = ""
    mask_path: str = ""
    provenance: str = "workflow"
    theta: Optional[float] = None
    geometry_hash: str = ""


class DatasetManifest(BaseModel):
    strategy: Strategy
    object_order: List[int]
    included_objects: int
    records: List[ExampleRecord]
    master_seed: int
    total: Optional[int] = None
    geometry_hash: str = ""
    theta_provenance: str = ""
    validation_rule: str = ""
    config_hash: str = ""
    tags: Dict[str, float] = Field(default_factory=dict)

    def split(self, name: Split) -> List[ExampleRecord]:
        return [r for r in self.records if r.split == name]

    def counts(self) -> Dict[str, int]:
        return {name: len(self.split(name)) for name in ("train", "val", "test")}


def example_name(object_id: int, angle_index: int) -> str:
    return f"obj{object_id:04d}_a{angle_index:04d}"


def object_order(objects: Sequence[ObjectEntry], seed: int, stream: Optional[int] = None) -> List[int]:
    """Seeded permutation of the object ids, independent of the input order"""
    ids = sorted(o.object_id for o in objects)
    key = [seed] if stream is None else [seed, stream]
    return [ids[k] for k in np.random.default_rng(key).permutation(len(ids))]


def _object_rng(seed: int, object_id: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, object_id, stream])


def _by_id(objects: Sequence[ObjectEntry]) -> Dict[int, ObjectEntry]:
    entries = {}
    for entry in objects:
        if entry.object_id in entries:
            raise DataError(f"object {entry.object_id} listed twice")
        if entry.n_angles < 1:
            raise DataError(f"object {entry.object_id} has no radiographs")
        entries[entry.object_id] = entry
    return entries


def _single_geometry(entries: Iterable[ObjectEntry]) -> str:
    hashes = {e.geometry_hash for e in entries}
    if len(hashes) > 1:
        raise ConfigurationError("objects were scanned with different geometries")
    return hashes.pop() if hashes else ""


def stratified_angles(n_angles: int, count: int, offset: int) -> List[int]:
    """count angle indices spread evenly over the rotation, starting at offset"""
    if count > n_angles:
        raise DataError(f"need {count} angles but only {n_angles} are available")
    return sorted((offset + (j * n_angles) // count) % n_angles for j in range(count))


def _workflow_records(selected: Sequence[ObjectEntry], total: int, seed: int) -> List[ExampleRecord]:
    """Equal share of total per object (remainder to the earliest), then every 10th after a shuffle is validation"""
    per_object, remainder = divmod(total, len(selected))
    records = []
    for position, entry in enumerate(selected):
        quota = per_object + (1 if position < remainder else 0)
        if quota > entry.n_angles:
            raise DataError(
                f"object {entry.object_id} has {entry.n_angles} angles, {quota} examples requested"
            )
        offset = int(_object_rng(seed, entry.object_id, _STRATUM_STREAM).integers(entry.n_angles))
        for angle in stratified_angles(entry.n_angles, quota, offset):
            records.append((entry.object_id, angle, entry.geometry_hash))

    shuffle = np.random.default_rng([seed, _SHUFFLE_STREAM]).permutation(len(records))
    return [
        ExampleRecord(
            object_id=records[k][0],
            angle_index=records[k][1],
            geometry_hash=records[k][2],
            split="val" if (j + 1) % VALIDATION_EVERY == 0 else "train",
        )
        for j, k in enumerate(shuffle)
    ]


def sample_workflow(
    objects: Sequence[ObjectEntry], i: int, total: int = 1800, seed: int = 0
) -> DatasetManifest:
    """Examples from the first i objects of the seeded order, many angles per object"""
    if i < 1:
        raise ParameterError("the workflow strategy needs i >= 1")
    if total < 1:
        raise ParameterError("total must be >= 1")
    entries = _by_id(objects)
    if i > len(entries):
        raise DataError(f"{i} objects requested, {len(entries)} available")
    order = object_order(objects, seed)
    selected = [entries[oid] for oid in order[:i]]
    return DatasetManifest(
        strategy="workflow",
        object_order=order,
        included_objects=i,
        records=_workflow_records(selected, total, seed),
        master_seed=seed,
        total=total,
        geometry_hash=_single_geometry(selected),
        validation_rule="every 10th example after a seeded shuffle",
    )


def sample_manual(objects: Sequence[ObjectEntry], i: int, seed: int = 0) -> DatasetManifest:
    """One random angle per object; the first floor(8i/9) examples train, the rest validate"""
    if i < 2:
        raise ParameterError("the manual strategy needs i >= 2")
    entries = _by_id(objects)
    if i > len(entries):
        raise DataError(f"{i} objects requested, {len(entries)} available")
    order = object_order(objects, seed)
    selected = [entries[oid] for oid in order[:i]]
    n_train = (8 * i) // 9
    records = []
    for position, entry in enumerate(selected):
        angle = int(_object_rng(seed, entry.object_id, _MANUAL_STREAM).integers(entry.n_angles))
        records.append(
            ExampleRecord(
                object_id=entry.object_id,
                angle_index=angle,
                geometry_hash=entry.geometry_hash,
                split="train" if position < n_train else "val",
            )
        )
    return DatasetManifest(
        strategy="manual",
        object_order=order,
        included_objects=i,
        records=records,
        master_seed=seed,
        total=i,
        geometry_hash=_single_geometry(selected),
        validation_rule="last ceil(i/9) objects of the order",
    )


def circular_distance(a: np.ndarray, b: float) -> np.ndarray:
    diff = np.mod(np.asarray(a) - b, 2.0 * np.pi)
    return np.minimum(diff, 2.0 * np.pi - diff)


def orthogonal_partner(angles: Sequence[float], angle_index: int) -> int:
    """Index of the available angle closest to 90 degrees past angle_index"""
    target = np.mod(angles[angle_index] + np.pi / 2.0, 2.0 * np.pi)
    return int(np.argmin(circular_distance(np.asarray(angles), target)))


def make_testset(
    objects: Sequence[ObjectEntry],
    seed: int = 0,
    training_ids: Iterable[int] = (),
) -> DatasetManifest:
    """A random angle and its orthogonal partner for every test object"""
    entries = _by_id(objects)
    overlap = sorted(set(entries) & set(training_ids))
    if overlap:
        raise ConfigurationError(f"test objects also used for training: {overlap}")
    records = []
    for oid in sorted(entries):
        entry = entries[oid]
        first = int(_object_rng(seed, oid, _TEST_STREAM).integers(entry.n_angles))
        chosen = [first]
        partner = orthogonal_partner(entry.angles, first)
        if partner != first:
            chosen.append(partner)
        for angle in chosen:
            records.append(
                ExampleRecord(
                    object_id=oid,
                    angle_index=angle,
                    geometry_hash=entry.geometry_hash,
                    split="test",
                    provenance="absolute",
                )
            )
    return DatasetManifest(
        strategy="test",
        object_order=sorted(entries),
        included_objects=len(entries),
        records=records,
        master_seed=seed,
        geometry_hash=_single_geometry(entries.values()),
        validation_rule="none",
    )


def mixed_pool_demand(ratio: float, i: int) -> Tuple[int, int]:
    """Objects mixed_selection takes from (pool one, pool two) for i picks"""
    from_one = min(i, int(np.floor(ratio * i + 0.5)))
    return from_one, i - from_one


def mixed_selection(
    pool_one: Sequence[int], pool_two: Sequence[int], ratio: float, i: int
) -> List[int]:
    """Interleave two ordered pools so that after k picks round(ratio * k) came from pool one"""
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError("ratio must lie in [0, 1]")
    selected, taken_one, taken_two = [], 0, 0
    for k in range(i):
        if int(np.floor(ratio * (k + 1) + 0.5)) > taken_one:
            if taken_one >= len(pool_one):
                raise DataError(f"first pool exhausted after {taken_one} objects")
            selected.append(pool_one[taken_one])
            taken_one += 1
        else:
            if taken_two >= len(pool_two):
                raise DataError(f"second pool exhausted after {taken_two} objects")
            selected.append(pool_two[taken_two])
            taken_two += 1
    return selected


def compose_mixed(
    objects_few: Sequence[ObjectEntry],
    objects_many: Sequence[ObjectEntry],
    ratio: float = 0.5,
    i: int = 1,
    seed: int = 0,
    total: int = 1800,
) -> DatasetManifest:
    """Workflow sampling over a blend of two phantom pools"""
    if not objects_few or not objects_many:
        raise ParameterError("both object pools must be non-empty")
    if i < 1:
        raise ParameterError("the mixed strategy needs i >= 1")
    few, many = _by_id(objects_few), _by_id(objects_many)
    shared = sorted(set(few) & set(many))
    if shared:
        raise ConfigurationError(f"objects present in both pools: {shared}")
    order = mixed_selection(
        object_order(objects_few, seed),
        object_order(objects_many, seed, _SECOND_POOL_STREAM),
        ratio,
        i,
    )
    selected = [few[oid] if oid in few else many[oid] for oid in order]
    return DatasetManifest(
        strategy="mixed",
        object_order=order,
        included_objects=i,
        records=_workflow_records(selected, total, seed),
        master_seed=seed,
        total=total,
        geometry_hash=_single_geometry(selected),
        validation_rule="every 10th example after a seeded shuffle",
        tags={"ratio": ratio},
    )


def check_manifest(manifest: DatasetManifest, root: Optional[Path] = None) -> None:
    """Split disjointness, angle/geometry pairing and, with root, file existence"""
    seen: Dict[tuple, str] = {}
    for record in manifest.records:
        key = (record.object_id, record.angle_index)
        if key in seen and seen[key] != record.split:
            raise DataError(f"{example_name(*key)} appears in splits {seen[key]} and {record.split}")
        seen[key] = record.split
        if manifest.geometry_hash and record.geometry_hash not in ("", manifest.geometry_hash):
            raise DataError(f"{example_name(*key)} was scanned with a different geometry")
        if root is not None:
            for rel in (record.radiograph_path, record.mask_path):
                if rel and not (Path(root) / rel).exists():
                    raise DataError(f"manifest references missing file {rel}")


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def load_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
