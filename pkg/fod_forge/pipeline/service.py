import logging
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

from fod_forge.config import PipelineConfig
from fod_forge.errors import ConfigurationError
from fod_forge.utils.parallel import resolve_threads, set_kernel_threads
from .graph_builder import get_workflow
from .graph_state import PipelineState
from .stages import INPUT_KINDS, STAGE_DIRS, STAGES

logger = logging.getLogger(__name__)


def _check_inputs(inputs: Mapping[str, Union[str, Path]], stages: Iterable[str]) -> Dict[str, str]:
    """Input directories must exist and must not be written by a selected stage"""
    unknown = sorted(set(inputs) - set(INPUT_KINDS))
    if unknown:
        raise ConfigurationError(f"unknown input kinds {unknown}; choose from {list(INPUT_KINDS)}")
    written = {STAGE_DIRS[stage] for stage in stages}
    checked = {}
    for kind, path in sorted(inputs.items()):
        if kind in written:
            raise ConfigurationError(f"{kind} are read from {path} but a selected stage writes them")
        if not Path(path).is_dir():
            raise ConfigurationError(f"input directory for {kind} not found: {path}")
        checked[kind] = str(path)
    return checked


class PipelineService:
    """
    Runs the stage graph for one configuration
    """

    def __init__(self) -> None:
        self.workflow = get_workflow()

    def initial_state(
        self,
        config: PipelineConfig,
        only: Optional[Iterable[str]] = None,
        force: bool = False,
        threads: Optional[int] = None,
        inputs: Optional[Mapping[str, Union[str, Path]]] = None,
    ) -> PipelineState:
        stages = list(only) if only else list(STAGES)
        unknown = sorted(set(stages) - set(STAGES))
        if unknown:
            raise ConfigurationError(f"unknown stages {unknown}; choose from {list(STAGES)}")
        threads = resolve_threads(threads if threads is not None else config.threads)
        inputs = _check_inputs(inputs or {}, stages)
        return {
            "config": config,
            "output_dir": str(Path(config.output_dir)),
            "threads": threads,
            "stages": stages,
            "force": force,
            "inputs": inputs,
            "stage_keys": {},
            "summaries": {},
            "current_node": "",
            "execution_log": [],
            "success": False,
            "error": None,
            "error_message": None,
        }

    def run(
        self,
        config: PipelineConfig,
        only: Optional[Iterable[str]] = None,
        force: bool = False,
        threads: Optional[int] = None,
        inputs: Optional[Mapping[str, Union[str, Path]]] = None,
    ) -> PipelineState:
        """Run the selected stages in order; raises the first stage error"""
        state = self.initial_state(config, only, force, threads, inputs)
        set_kernel_threads(state["threads"])
        logger.info(
            "Pipeline %s: stages %s, %d threads, output %s",
            config.config_hash()[:12],
            ", ".join(state["stages"]),
            state["threads"],
            state["output_dir"],
        )
        final_state = self.workflow.run_workflow(state)
        if final_state.get("error") is not None:
            raise final_state["error"]
        return final_state


def run_pipeline(
    config: PipelineConfig,
    only: Optional[Iterable[str]] = None,
    force: bool = False,
    threads: Optional[int] = None,
    inputs: Optional[Mapping[str, Union[str, Path]]] = None,
) -> PipelineState:
    return PipelineService().run(config, only=only, force=force, threads=threads, inputs=inputs)
