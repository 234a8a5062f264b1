"""Multi-object tracking with 2D tracklets merged by 3D motion consistency."""
from ._accel import USE_NUMBA, backend_name
from .config import PipelineConfig
from .pipeline import Sequence, run_pipeline

__version__ = "0.1.0"

__all__ = ["PipelineConfig", "Sequence", "run_pipeline", "USE_NUMBA", "backend_name", "__version__"]
