from pathlib import Path

import shutil

import pytest

from fod_forge.errors import ConfigurationError, PreconditionError
from fod_forge.pipeline import PipelineService, format_summary_as_markdown
from fod_forge.pipeline.stages import ABSOLUTE
from fod_forge.utils.store import hash_file, load_json_store, object_dir_name


def statuses(state) -> dict:
    return {entry["node"]: entry["status"] for entry in state["execution_log"]}


def test_full_run_writes_every_artifact(tiny_config):
    state = PipelineService().run(tiny_config)
    out = Path(tiny_config.output_dir)

    assert state["success"]
    assert (out / "summary.json").exists()
    assert (out / "dataset" / "manifest.json").exists()
    assert (out / "dataset" / "test_manifest.json").exists()
    report = load_json_store(out / "eval" / "report.json")
    assert report["n_images"] == 4

    summary = load_json_store(out / "summary.json")
    assert set(summary["jaccard"]) == set(tiny_config.segmentation.variants())
    assert all(0.0 <= value <= 1.0 for value in summary["jaccard"].values())


def test_unchanged_stages_are_cached(tiny_config):
    service = PipelineService()
    service.run(tiny_config)

    again = service.run(tiny_config)
    assert all(statuses(again)[stage] == "cached" for stage in ("phantom", "scan", "recon", "eval"))

    changed = tiny_config.model_copy(update={"sirt": tiny_config.sirt.model_copy(update={"iterations": 12})})
    rerun = statuses(service.run(changed))
    assert rerun["phantom"] == rerun["scan"] == "cached"
    assert all(rerun[stage] == "completed" for stage in ("recon", "segment", "gt", "dataset", "eval"))


def test_force_reruns_cached_stages(tiny_config):
    service = PipelineService()
    service.run(tiny_config, only=["phantom"])
    assert statuses(service.run(tiny_config, only=["phantom"], force=True))["phantom"] == "completed"


def test_stage_without_upstream_output_fails(tiny_config):
    with pytest.raises(PreconditionError) as info:
        PipelineService().run(tiny_config, only=["gt"])
    assert info.value.missing_stage == "segment"
    assert info.value.exit_code == 5


def test_runs_are_reproducible(tiny_config, tmp_path):
    first = tiny_config.model_copy(update={"output_dir": tmp_path / "first"})
    second = tiny_config.model_copy(update={"output_dir": tmp_path / "second"})
    PipelineService().run(first)
    PipelineService().run(second)

    def artifacts(root: Path) -> dict:
        files = [p for p in root.rglob("*") if p.suffix == ".raw" or p.name.endswith("manifest.json")]
        return {str(p.relative_to(root)): hash_file(p) for p in files}

    produced = artifacts(tmp_path / "first")
    assert produced
    assert produced == artifacts(tmp_path / "second")


def test_summary_markdown(tiny_config):
    state = PipelineService().run(tiny_config)
    text = format_summary_as_markdown(state["summaries"]["report"])
    assert "| Stage | Status |" in text
    assert "| phantom | completed |" in text
    assert "Detection rate" in text


def test_deleted_artifacts_rerun_their_stage(tiny_config):
    service = PipelineService()
    service.run(tiny_config, only=["phantom", "scan"])
    out = Path(tiny_config.output_dir)
    shutil.rmtree(out / "phantoms" / object_dir_name(0))

    rerun = statuses(service.run(tiny_config, only=["phantom", "scan"]))
    assert rerun["phantom"] == "completed"
    assert rerun["scan"] == "cached"
    assert (out / "phantoms" / object_dir_name(0) / "labels.raw").exists()


def test_edited_artifacts_rerun_their_stage(tiny_config):
    service = PipelineService()
    service.run(tiny_config, only=["phantom", "scan"])
    radiographs = Path(tiny_config.output_dir) / "scans" / object_dir_name(1) / "radiographs.raw"
    original = radiographs.read_bytes()
    radiographs.write_bytes(bytes(len(original)))

    rerun = statuses(service.run(tiny_config, only=["phantom", "scan"]))
    assert rerun["phantom"] == "cached"
    assert rerun["scan"] == "completed"
    assert radiographs.read_bytes() == original


def test_outputs_carry_the_config_hash(tiny_config):
    PipelineService().run(tiny_config)
    out = Path(tiny_config.output_dir)
    expected = tiny_config.config_hash()

    assert load_json_store(out / "dataset" / "manifest.json")["config_hash"] == expected
    assert load_json_store(out / "dataset" / "test_manifest.json")["config_hash"] == expected
    assert load_json_store(out / "eval" / "report.json")["config_hash"] == expected
    sidecars = list((out / "dataset").rglob("obj*_a*.json"))
    assert sidecars
    assert all(load_json_store(path)["config_hash"] == expected for path in sidecars)


def test_stage_reads_inputs_from_another_run(tiny_config, tmp_path):
    PipelineService().run(tiny_config, only=["phantom", "scan"])
    other = tiny_config.model_copy(update={"output_dir": tmp_path / "other"})
    inputs = {"scans": tiny_config.output_dir}

    state = PipelineService().run(other, only=["recon"], inputs=inputs)
    assert statuses(state)["recon"] == "completed"
    assert (tmp_path / "other" / "recons" / object_dir_name(0) / "recon.raw").exists()
    assert not (tmp_path / "other" / "scans").exists()

    assert statuses(PipelineService().run(other, only=["recon"], inputs=inputs))["recon"] == "cached"


def test_input_directories_are_validated(tiny_config, tmp_path):
    with pytest.raises(ConfigurationError):
        PipelineService().run(tiny_config, only=["recon"], inputs={"scans": tmp_path / "absent"})
    with pytest.raises(ConfigurationError):
        PipelineService().run(tiny_config, only=["scan", "recon"], inputs={"scans": tmp_path})
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(PreconditionError):
        PipelineService().run(tiny_config, only=["recon"], inputs={"scans": empty})


def test_absolute_ground_truth_ignores_reconstruction_settings(tiny_config):
    service = PipelineService()
    stages = ["phantom", "scan", "recon", "segment", "gt"]
    service.run(tiny_config, only=stages)
    absolute = Path(tiny_config.output_dir) / "gt" / ABSOLUTE
    before = {str(p.relative_to(absolute)): hash_file(p) for p in absolute.rglob("*.raw")}

    fewer = tiny_config.model_copy(update={"sirt": tiny_config.sirt.model_copy(update={"iterations": 2})})
    assert statuses(service.run(fewer, only=stages))["gt"] == "completed"
    assert before
    assert {str(p.relative_to(absolute)): hash_file(p) for p in absolute.rglob("*.raw")} == before
