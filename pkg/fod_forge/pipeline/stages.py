"""Stage implementations shared by the pipeline graph and the CLI subcommands.

Every stage reads its inputs from and writes its outputs to the artifact
layout under the configured output directory.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from fod_forge import dataset as ds
from fod_forge.config import (
    PipelineConfig,
    factor_variant,
    primary_variant,
    theta_variant,
)
from fod_forge.errors import ConfigurationError, DataError, ForgeError, StageError
from fod_forge.evalmetrics import evaluate_testset, jaccard, write_report
from fod_forge.gtproject import resize_pair, virtual_project_stack
from fod_forge.phantom import FOREIGN, generate_phantom, load_phantom, save_phantom
from fod_forge.recon import ReconJob, load_recon, reconstruct_batch, save_recon
from fod_forge.utils.parallel import BatchResult, parallel_map
from fod_forge.utils.store import (
    get_store_path,
    load_json_store,
    load_raw,
    object_dir_name,
    raw_exists,
    save_json_store,
    save_raw,
    sidecar_path,
)
from fod_forge.volseg import (
    otsu_global,
    otsu_threshold,
    remove_small_components,
    threshold,
)
from fod_forge.xray.physics import simulate_scan

logger = logging.getLogger(__name__)

ABSOLUTE = "absolute"

# Directory under the artifact root that each stage writes.
STAGE_DIRS = {
    "phantom": "phantoms",
    "scan": "scans",
    "recon": "recons",
    "segment": "segmentations",
    "gt": "gt",
    "dataset": "dataset",
    "eval": "eval",
}

# Artifact directories that may be read from outside the artifact root.
INPUT_KINDS = ("phantoms", "scans", "recons", "segmentations")


@dataclass(frozen=True)
class Layout:
    """Artifact paths under root; inputs replaces single artifact directories.

    An input may name the artifact directory itself or the root of another run.
    """

    root: Path
    inputs: Tuple[Tuple[str, Path], ...] = ()

    @classmethod
    def create(cls, root: Path, inputs: Optional[Mapping[str, Path]] = None) -> "Layout":
        return cls(Path(root), tuple(sorted((k, Path(v)) for k, v in (inputs or {}).items())))

    def directory(self, kind: str) -> Path:
        override = dict(self.inputs).get(kind)
        if override is None:
            return self.root / kind
        if (override / kind).is_dir():
            return override / kind
        return override

    def stage_dir(self, stage: str) -> Path:
        return self.directory(STAGE_DIRS[stage])

    def phantom(self, object_id: int) -> Path:
        return self.directory("phantoms") / object_dir_name(object_id) / "labels.raw"

    def scan(self, object_id: int) -> Path:
        return self.directory("scans") / object_dir_name(object_id) / "radiographs.raw"

    def flat(self, object_id: int) -> Path:
        return self.directory("scans") / object_dir_name(object_id) / "flat.raw"

    def recon(self, object_id: int) -> Path:
        return self.directory("recons") / object_dir_name(object_id) / "recon.raw"

    def segmentation(self, variant: str, object_id: int) -> Path:
        return self.directory("segmentations") / variant / object_dir_name(object_id) / "mask.raw"

    def gt(self, variant: str, object_id: int) -> Path:
        return self.directory("gt") / variant / object_dir_name(object_id) / "masks.raw"

    @property
    def dataset_dir(self) -> Path:
        return self.directory("dataset")

    @property
    def eval_dir(self) -> Path:
        return self.directory("eval")

    @property
    def thresholds(self) -> Path:
        return self.directory("segmentations") / "thresholds.json"

    @property
    def gt_jaccard(self) -> Path:
        return self.directory("gt") / "jaccard.json"


def _raise_failures(stage: str, results: Sequence[BatchResult]) -> None:
    failed = [r for r in results if not r.ok]
    if failed:
        first = failed[0]
        raise StageError(
            f"{len(failed)} of {len(results)} objects failed; first: {first.error}",
            stage=stage,
            object_id=first.object_id,
        )


def _require(path: Path, stage: str, object_id: int) -> None:
    if not raw_exists(path):
        raise DataError(f"missing {stage} artifact for object {object_id}: {path}")


# phantom


def _phantom_job(args: Tuple[PipelineConfig, int, Path]) -> BatchResult[str]:
    config, object_id, path = args
    try:
        params = config.phantom.params(config.master_seed, config.phantom.is_many(object_id))
        phantom = generate_phantom(params, object_id)
        digest = save_phantom(
            phantom,
            path,
            params,
            {"config_hash": config.config_hash(), "pool": "many" if config.phantom.is_many(object_id) else "few"},
        )
        return BatchResult(object_id=object_id, value=digest)
    except ForgeError as e:
        return BatchResult(object_id=object_id, error=f"{type(e).__name__}: {e}")


def run_phantom(config: PipelineConfig, layout: Layout, threads: int = 1) -> Dict[str, Any]:
    jobs = [(config, oid, layout.phantom(oid)) for oid in config.phantom.object_ids]
    results = parallel_map(_phantom_job, jobs, threads)
    _raise_failures("phantom", results)
    logger.info("Generated %d phantoms", len(results))
    return {"objects": len(results)}


# scan


def _scan_job(args: Tuple[PipelineConfig, int, Layout]) -> BatchResult[str]:
    config, object_id, layout = args
    try:
        _require(layout.phantom(object_id), "phantom", object_id)
        phantom = load_phantom(layout.phantom(object_id))
        geometry = config.geometry.to_geometry()
        spectrum = config.spectrum.to_spectrum()
        result = simulate_scan(
            phantom.labels,
            phantom.voxel_size_cm,
            object_id,
            geometry,
            spectrum,
            config.spectrum.to_materials(),
            config.spectrum.exposure_s,
            config.master_seed,
            supersample=config.geometry.supersample,
            flat_realizations=config.spectrum.flat_realizations,
        )
        meta = {
            "object_id": object_id,
            "geometry": geometry.model_dump(exclude={"angles"}),
            "n_angles": geometry.n_angles,
            "geometry_hash": geometry.geometry_hash(),
            "spectrum_hash": spectrum.spectrum_hash(),
            "exposure_s": config.spectrum.exposure_s,
            "seed": config.master_seed,
            "mean_flat_counts": result.mean_flat_counts,
            "config_hash": config.config_hash(),
        }
        save_raw(layout.flat(object_id), result.flat.astype(np.float32), meta)
        digest = save_raw(layout.scan(object_id), result.radiographs.astype(np.float32), meta)
        return BatchResult(object_id=object_id, value=digest)
    except ForgeError as e:
        return BatchResult(object_id=object_id, error=f"{type(e).__name__}: {e}")


def run_scan(config: PipelineConfig, layout: Layout, threads: int = 1) -> Dict[str, Any]:
    jobs = [(config, oid, layout) for oid in config.phantom.object_ids]
    results = parallel_map(_scan_job, jobs, threads)
    _raise_failures("scan", results)
    logger.info("Scanned %d objects at %d angles", len(results), config.geometry.n_angles)
    return {"objects": len(results), "angles": config.geometry.n_angles}


def load_sidecar(path: Path) -> Dict[str, Any]:
    meta = load_json_store(sidecar_path(path))
    if not meta:
        raise DataError(f"missing sidecar for {path}")
    return meta


def scan_geometry_hash(layout: Layout, object_id: int) -> str:
    return load_sidecar(layout.scan(object_id))["geometry_hash"]


# recon


def run_recon(config: PipelineConfig, layout: Layout, threads: int = 1) -> Dict[str, Any]:
    geometry = config.geometry.to_geometry()
    dim = config.phantom.volume_dim
    jobs = []
    for oid in config.phantom.object_ids:
        _require(layout.scan(oid), "scan", oid)
        jobs.append(
            ReconJob(
                object_id=oid,
                radiographs=layout.scan(oid),
                geometry=geometry,
                cfg=config.sirt,
                volume_shape=(dim, dim, dim),
                voxel_size_cm=config.phantom.voxel_size_cm,
                supersample=config.geometry.supersample,
            )
        )
    results = reconstruct_batch(jobs, threads)
    _raise_failures("recon", results)
    for result in results:
        scan_meta = load_sidecar(layout.scan(result.object_id))
        save_recon(
            result.value,
            layout.recon(result.object_id),
            {
                "source_radiographs_sha256": scan_meta["sha256"],
                "geometry_hash": scan_meta["geometry_hash"],
                "config_hash": config.config_hash(),
            },
        )
    logger.info("Reconstructed %d objects with %d SIRT iterations", len(results), config.sirt.iterations)
    return {"objects": len(results), "iterations": config.sirt.iterations}


# segment


def variant_thresholds(config: PipelineConfig, otsu_value: Optional[float]) -> Dict[str, float]:
    """Threshold of every segmentation variant for one object"""
    seg = config.segmentation
    thresholds = {}
    if seg.method == "otsu":
        thresholds[primary_variant(seg)] = otsu_value
    else:
        thresholds[primary_variant(seg)] = seg.theta
    for theta in seg.sweep:
        thresholds[theta_variant(theta)] = theta
    for factor in seg.sweep_factors:
        thresholds[factor_variant(factor)] = factor * otsu_value
    return thresholds


def run_segment(config: PipelineConfig, layout: Layout, threads: int = 1) -> Dict[str, Any]:
    seg = config.segmentation
    ids = config.phantom.object_ids
    for oid in ids:
        _require(layout.recon(oid), "recon", oid)
    needs_otsu = seg.method == "otsu" or bool(seg.sweep_factors)

    global_otsu = None
    if needs_otsu and seg.otsu_scope == "global":
        global_otsu = otsu_global([load_recon(layout.recon(oid)).values for oid in ids], seg.n_bins)
        logger.info("Global Otsu threshold %.5f over %d objects", global_otsu, len(ids))

    table: Dict[str, Dict[str, float]] = {}
    for oid in ids:
        recon = load_recon(layout.recon(oid))
        recon_meta = load_sidecar(layout.recon(oid))
        otsu_value = None
        if needs_otsu:
            otsu_value = global_otsu if global_otsu is not None else otsu_threshold(recon.values, seg.n_bins)
        thresholds = variant_thresholds(config, otsu_value)
        for variant, theta in thresholds.items():
            mask = remove_small_components(threshold(recon.values, theta), seg.min_component_voxels)
            save_raw(
                layout.segmentation(variant, oid),
                mask,
                {
                    "object_id": oid,
                    "variant": variant,
                    "theta": theta,
                    "source_recon_sha256": recon_meta["sha256"],
                    "geometry_hash": recon_meta.get("geometry_hash", ""),
                    "config_hash": config.config_hash(),
                },
            )
        table[object_dir_name(oid)] = {"otsu": otsu_value, **thresholds}
        logger.debug("Segmented object %d: %s", oid, thresholds)

    save_json_store(layout.thresholds, table)
    logger.info("Segmented %d objects into %d variants", len(ids), len(seg.variants()))
    return {"objects": len(ids), "variants": seg.variants()}


# gt


def _gt_job(args: Tuple[PipelineConfig, int, Layout]) -> BatchResult[Dict[str, float]]:
    config, object_id, layout = args
    try:
        geometry = config.geometry.to_geometry()
        voxel = config.phantom.voxel_size_cm
        eps_len = config.ground_truth.eps_len_factor * voxel
        scan_hash = scan_geometry_hash(layout, object_id)

        def project(mask: np.ndarray) -> np.ndarray:
            return virtual_project_stack(
                mask,
                geometry,
                voxel,
                eps_len=eps_len,
                scan_geometry_hash=scan_hash,
                supersample=config.geometry.supersample,
            )

        meta = {"object_id": object_id, "geometry_hash": scan_hash, "config_hash": config.config_hash()}
        absolute = None
        if config.ground_truth.absolute:
            phantom = load_phantom(layout.phantom(object_id))
            absolute = project(phantom.mask(FOREIGN))
            save_raw(layout.gt(ABSOLUTE, object_id), absolute, {**meta, "provenance": ABSOLUTE})

        scores = {}
        for variant in config.segmentation.variants():
            path = layout.segmentation(variant, object_id)
            _require(path, "segment", object_id)
            mask3d, seg_meta = load_raw(path)
            stack = project(mask3d.astype(bool))
            save_raw(
                layout.gt(variant, object_id),
                stack,
                {**meta, "provenance": "workflow", "variant": variant, "theta": seg_meta["theta"]},
            )
            if absolute is not None:
                scores[variant] = float(np.mean([jaccard(w, a) for w, a in zip(stack, absolute)]))
        return BatchResult(object_id=object_id, value=scores)
    except ForgeError as e:
        return BatchResult(object_id=object_id, error=f"{type(e).__name__}: {e}")


def run_gt(config: PipelineConfig, layout: Layout, threads: int = 1) -> Dict[str, Any]:
    jobs = [(config, oid, layout) for oid in config.phantom.object_ids]
    results = parallel_map(_gt_job, jobs, threads)
    _raise_failures("gt", results)
    per_object = {object_dir_name(r.object_id): r.value for r in results}
    mean = {
        variant: float(np.mean([scores[variant] for scores in per_object.values()]))
        for variant in config.segmentation.variants()
        if config.ground_truth.absolute
    }
    save_json_store(layout.gt_jaccard, {"mean": mean, "per_object": per_object})
    for variant, value in mean.items():
        logger.info("Mean Jaccard %s vs absolute ground truth: %.4f", variant, value)
    return {"objects": len(results), "mean_jaccard": mean}


# dataset


def object_entries(config: PipelineConfig, layout: Layout, ids: Sequence[int]) -> List[ds.ObjectEntry]:
    angles = config.geometry.to_geometry().angles
    entries = []
    for oid in ids:
        _require(layout.scan(oid), "scan", oid)
        entries.append(ds.ObjectEntry(object_id=oid, angles=angles, geometry_hash=scan_geometry_hash(layout, oid)))
    return entries


def partition_objects(config: PipelineConfig) -> Tuple[List[int], List[int], List[int]]:
    """(training pool, many-object pool, test objects); test objects are the last regular ids"""
    regular = list(range(config.phantom.count))
    n_test = config.dataset.test_objects
    test = regular[len(regular) - n_test :] if n_test else []
    train = regular[: len(regular) - n_test]
    many = list(range(config.phantom.count, config.phantom.count + config.phantom.many_count))
    return train, many, test


def build_manifests(config: PipelineConfig, layout: Layout) -> Tuple[ds.DatasetManifest, Optional[ds.DatasetManifest]]:
    d = config.dataset
    seed = config.dataset_seed
    train_ids, many_ids, test_ids = partition_objects(config)
    train_pool = object_entries(config, layout, train_ids)
    if d.strategy == "workflow":
        manifest = ds.sample_workflow(train_pool, d.objects, d.total, seed)
    elif d.strategy == "manual":
        manifest = ds.sample_manual(train_pool, d.objects, seed)
    else:
        manifest = ds.compose_mixed(
            train_pool, object_entries(config, layout, many_ids), d.ratio, d.objects, seed, d.total
        )
    testset = None
    if test_ids:
        testset = ds.make_testset(object_entries(config, layout, test_ids), seed, train_ids + many_ids)
    return manifest, testset


def training_provenance(config: PipelineConfig) -> str:
    if config.ground_truth.provenance == ABSOLUTE and not config.ground_truth.absolute:
        raise ConfigurationError("absolute provenance requested but absolute ground truth is disabled")
    return config.ground_truth.provenance


def _export_png(path: Path, image: np.ndarray, is_mask: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if is_mask:
        Image.fromarray(np.asarray(image, dtype=np.uint8) * 255).save(path)
        return
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi == lo else (image - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)


class _StackCache:
    """Keeps the stacks of one object in memory while its records are exported"""

    def __init__(self):
        self._key = None
        self._stacks: Dict[Path, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        if path not in self._stacks:
            values, _ = load_raw(path)
            self._stacks[path] = values
        return self._stacks[path]

    def switch(self, object_id: int) -> None:
        if self._key != object_id:
            self._key = object_id
            self._stacks = {}


def export_records(
    config: PipelineConfig,
    layout: Layout,
    manifest: ds.DatasetManifest,
    subdir: str,
    mask_variant: str,
    prediction_variant: Optional[str] = None,
) -> None:
    """Write resized training pairs and fill in the record paths and provenance"""
    out = layout.dataset_dir / subdir
    target = config.image_shape()
    provenance = ABSOLUTE if mask_variant == ABSOLUTE else "workflow"
    thresholds = load_json_store(layout.thresholds)
    cache = _StackCache()
    for record in sorted(manifest.records, key=lambda r: (r.object_id, r.angle_index)):
        oid, angle = record.object_id, record.angle_index
        cache.switch(oid)
        _require(layout.scan(oid), "scan", oid)
        _require(layout.gt(mask_variant, oid), "gt", oid)
        radiograph = cache.get(layout.scan(oid))[angle]
        mask = cache.get(layout.gt(mask_variant, oid))[angle].astype(bool)
        image, mask = resize_pair(radiograph, mask, target)
        name = ds.example_name(oid, angle)
        meta = {
            "object_id": oid,
            "angle_index": angle,
            "geometry_hash": record.geometry_hash,
            "config_hash": config.config_hash(),
        }
        save_raw(out / "images" / f"{name}.raw", image.astype(np.float32), meta)
        save_raw(out / "masks" / f"{name}.raw", mask, {**meta, "provenance": provenance})
        if config.ground_truth.export_png:
            _export_png(out / "images" / f"{name}.png", image, is_mask=False)
            _export_png(out / "masks" / f"{name}.png", mask, is_mask=True)
        if prediction_variant is not None:
            predicted = cache.get(layout.gt(prediction_variant, oid))[angle].astype(bool)
            _, predicted = resize_pair(radiograph, predicted, target)
            save_raw(out / "workflow" / f"{name}.raw", predicted, {**meta, "provenance": "workflow"})
        record.radiograph_path = f"{subdir}/images/{name}.raw"
        record.mask_path = f"{subdir}/masks/{name}.raw"
        record.provenance = provenance
        if provenance == "workflow":
            record.theta = thresholds.get(object_dir_name(oid), {}).get(mask_variant)


def run_dataset(config: PipelineConfig, layout: Layout, threads: int = 1) -> Dict[str, Any]:
    manifest, testset = build_manifests(config, layout)
    provenance = training_provenance(config)
    variant = primary_variant(config.segmentation)
    mask_variant = ABSOLUTE if provenance == ABSOLUTE else variant
    manifest.theta_provenance = "absolute ground truth" if provenance == ABSOLUTE else variant
    manifest.config_hash = config.config_hash()
    export_records(config, layout, manifest, "train", mask_variant)
    ds.check_manifest(manifest, layout.dataset_dir)
    ds.save_manifest(manifest, layout.dataset_dir / "manifest.json")

    summary: Dict[str, Any] = {"strategy": manifest.strategy, **manifest.counts()}
    if testset is not None:
        test_variant = ABSOLUTE if config.ground_truth.absolute else variant
        testset.theta_provenance = "absolute ground truth" if test_variant == ABSOLUTE else variant
        testset.config_hash = config.config_hash()
        export_records(config, layout, testset, "test", test_variant, prediction_variant=variant)
        ds.check_manifest(testset, layout.dataset_dir)
        ds.save_manifest(testset, layout.dataset_dir / "test_manifest.json")
        summary["test"] = len(testset.records)
    logger.info(
        "Dataset %s: %d train, %d val, %d test examples",
        manifest.strategy,
        summary["train"],
        summary["val"],
        summary.get("test", 0),
    )
    return summary


# eval


def run_eval(config: PipelineConfig, layout: Layout, threads: int = 1) -> Dict[str, Any]:
    """Score workflow ground truth against absolute ground truth on the test records"""
    test_dir = layout.dataset_dir / "test"
    if not (test_dir / "masks").is_dir():
        logger.info("No test records, skipping evaluation")
        return {"skipped": True}
    params = config.eval.params(config.image_shape())
    report = evaluate_testset(test_dir / "workflow", test_dir / "masks", params)
    report.tags = {"objects": float(config.dataset.objects)}
    report.config_hash = config.config_hash()
    write_report(report, get_store_path(layout.eval_dir, "report.json"))
    return {
        "mean_accuracy": report.mean_accuracy,
        "detection_rate": report.detection_rate,
        "false_positive_rate": report.false_positive_rate,
        "mean_jaccard": report.mean_jaccard,
        "n_images": report.n_images,
        "n_target_components": report.n_target_components,
    }


STAGES = ("phantom", "scan", "recon", "segment", "gt", "dataset", "eval")

STAGE_FUNCTIONS = {
    "phantom": run_phantom,
    "scan": run_scan,
    "recon": run_recon,
    "segment": run_segment,
    "gt": run_gt,
    "dataset": run_dataset,
    "eval": run_eval,
}
