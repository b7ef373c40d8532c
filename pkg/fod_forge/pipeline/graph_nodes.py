import logging
from pathlib import Path
from typing import Callable, Dict, Optional

from fod_forge.config import PipelineConfig
from fod_forge.errors import ForgeError, PreconditionError
from fod_forge.utils.store import digests_match, directory_digests, hash_json, load_json_store, save_json_store
from .formatters import build_summary
from .graph_state import PipelineState
from .stages import STAGE_DIRS, STAGE_FUNCTIONS, STAGES, Layout

logger = logging.getLogger(__name__)

# Config sections each stage depends on, besides its upstream stage.
STAGE_SECTIONS = {
    "phantom": ["phantom"],
    "scan": ["geometry", "spectrum"],
    "recon": ["sirt"],
    "segment": ["segmentation"],
    "gt": ["ground_truth"],
    "dataset": ["dataset", "ground_truth"],
    "eval": ["eval"],
}

UPSTREAM: Dict[str, Optional[str]] = {
    stage: (STAGES[i - 1] if i else None) for i, stage in enumerate(STAGES)
}


def cache_path(output_dir: Path, stage: str) -> Path:
    return Path(output_dir) / ".cache" / f"{stage}.json"


def stage_key(
    config: PipelineConfig,
    output_dir: Path,
    stage: str,
    known: Dict[str, str],
    layout: Optional[Layout] = None,
) -> str:
    """Content hash of the stage's config sections and its upstream stage key.

    When the upstream artifacts come from an input directory, the digest of
    that directory stands in for the upstream key.
    """
    layout = layout or Layout(Path(output_dir))
    upstream = UPSTREAM[stage]
    upstream_key = None
    if upstream is not None:
        if STAGE_DIRS[upstream] in dict(layout.inputs):
            upstream_dir = layout.stage_dir(upstream)
            digests = directory_digests(upstream_dir)
            if not digests:
                raise PreconditionError(stage, upstream, f"no artifacts in {upstream_dir}")
            upstream_key = hash_json(digests)
        else:
            upstream_key = known.get(upstream) or load_json_store(cache_path(output_dir, upstream)).get("key")
        if upstream_key is None:
            raise PreconditionError(stage, upstream, f"run '{upstream}' first")
    return hash_json(
        {
            "stage": stage,
            "master_seed": config.master_seed,
            "sections": {name: config.section_hash(name) for name in STAGE_SECTIONS[stage]},
            "upstream": upstream_key,
        }
    )


def _cache_valid(output_dir: Path, layout: Layout, stage: str, key: str) -> bool:
    cached = load_json_store(cache_path(output_dir, stage))
    if cached.get("key") != key or "artifacts" not in cached:
        return False
    if not digests_match(layout.stage_dir(stage), cached["artifacts"]):
        logger.warning("Artifacts of stage %s changed on disk, running it again", stage)
        return False
    return True


def _log(state: PipelineState, stage: str, status: str, **extra) -> None:
    state["execution_log"].append({"node": stage, "status": status, **extra})


def make_stage_node(stage: str) -> Callable[[PipelineState], PipelineState]:
    """Node that runs one stage, or skips it when its cache key is unchanged"""

    def stage_node(state: PipelineState) -> PipelineState:
        new_state = state.copy()
        new_state["current_node"] = stage
        config = state["config"]

        if stage not in state["stages"]:
            _log(new_state, stage, "not_selected")
            return new_state
        if stage == "eval" and not config.eval.enabled:
            _log(new_state, stage, "disabled")
            return new_state

        output_dir = Path(state["output_dir"])
        layout = Layout.create(output_dir, state["inputs"])
        try:
            key = stage_key(config, output_dir, stage, state["stage_keys"], layout)
            if not state["force"] and _cache_valid(output_dir, layout, stage, key):
                logger.info("Stage %s is up to date, skipping", stage)
                summary = load_json_store(cache_path(output_dir, stage)).get("summary", {})
                _log(new_state, stage, "cached")
            else:
                logger.info("Running stage %s", stage)
                summary = STAGE_FUNCTIONS[stage](config, layout, state["threads"])
                save_json_store(
                    cache_path(output_dir, stage),
                    {"key": key, "summary": summary, "artifacts": directory_digests(layout.stage_dir(stage))},
                )
                _log(new_state, stage, "completed")
            new_state["stage_keys"] = {**state["stage_keys"], stage: key}
            new_state["summaries"] = {**state["summaries"], stage: summary}
            return new_state

        except ForgeError as e:
            logger.error("Stage %s failed: %s", stage, e)
            new_state["success"] = False
            new_state["error"] = e
            new_state["error_message"] = str(e)
            _log(new_state, stage, "error", error=str(e))
            return new_state

    stage_node.__name__ = f"{stage}_node"
    return stage_node


def report_node(state: PipelineState) -> PipelineState:
    """Writes summary.json from the stage summaries and the stored Jaccard scores"""
    new_state = state.copy()
    new_state["current_node"] = "report"
    output_dir = Path(state["output_dir"])
    layout = Layout.create(output_dir, state["inputs"])
    summary = build_summary(state["config"], layout, state["execution_log"])
    save_json_store(output_dir / "summary.json", summary)
    new_state["summaries"] = {**state["summaries"], "report": summary}
    new_state["success"] = True
    _log(new_state, "report", "completed")
    return new_state


def should_continue_or_finish(state: PipelineState) -> str:
    """Stop at the first failed stage"""
    if state.get("error") is not None:
        logger.info("Stopping after failure in %s", state.get("current_node"))
        return "end"
    return "continue"
