from .formatters import format_summary_as_markdown
from .service import PipelineService, run_pipeline
from .stages import STAGES, Layout

__all__ = ["Layout", "PipelineService", "STAGES", "format_summary_as_markdown", "run_pipeline"]
