from typing import Any, Dict, List, Optional, TypedDict

from fod_forge.config import PipelineConfig
from fod_forge.errors import ForgeError


class PipelineState(TypedDict):
    """State schema for the stage graph"""

    config: PipelineConfig
    output_dir: str
    threads: int

    # Stage selection
    stages: List[str]
    force: bool

    # Artifact kinds read from other directories, e.g. {"scans": "/data/run1"}
    inputs: Dict[str, str]

    # Cache keys and per-stage summaries of this run
    stage_keys: Dict[str, str]
    summaries: Dict[str, Dict[str, Any]]

    # Node execution tracking
    current_node: str
    execution_log: List[Dict[str, Any]]

    # Results
    success: bool
    error: Optional[ForgeError]
    error_message: Optional[str]
