from fod_forge.xray.geometry import ConeBeamGeometry, uniform_angles
from fod_forge.xray.projector import ConeBeamProjector, backproject, trace_path_lengths

__all__ = [
    "ConeBeamGeometry",
    "ConeBeamProjector",
    "backproject",
    "trace_path_lengths",
    "uniform_angles",
]
