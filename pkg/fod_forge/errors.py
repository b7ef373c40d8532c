"""Exception hierarchy shared by every stage.

Each class carries the process exit code the CLI returns for it.
"""

from typing import Optional


class ForgeError(Exception):
    exit_code = 1


class ConfigurationError(ForgeError):
    """Invalid configuration, or inputs produced under a different configuration."""

    exit_code = 3


class ParameterError(ConfigurationError):
    """Invalid arguments to a single operation."""


class DataError(ForgeError):
    """Inputs exist but their content is unusable."""

    exit_code = 4


class PlacementError(DataError):
    pass


class DegenerateHistogramError(DataError):
    pass


class StageError(ForgeError):
    exit_code = 5

    def __init__(
        self,
        message: str,
        stage: Optional[str] = None,
        object_id: Optional[int] = None,
        angle_index: Optional[int] = None,
    ):
        self.stage = stage
        self.object_id = object_id
        self.angle_index = angle_index
        where = []
        if stage:
            where.append(f"stage={stage}")
        if object_id is not None:
            where.append(f"object={object_id}")
        if angle_index is not None:
            where.append(f"angle={angle_index}")
        suffix = f" [{', '.join(where)}]" if where else ""
        super().__init__(f"{message}{suffix}")


class PreconditionError(StageError):
    """An upstream stage has not produced the artifacts this stage needs."""

    def __init__(self, stage: str, missing_stage: str, detail: str = ""):
        self.missing_stage = missing_stage
        message = f"missing output of stage '{missing_stage}'"
        if detail:
            message += f": {detail}"
        super().__init__(message, stage=stage)
