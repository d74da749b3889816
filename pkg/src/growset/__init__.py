"""Online dataset growth with cleaning, neighbor-based gain and gain-weighted sampling."""

__version__ = "0.1.0"

from .core import DataRecord, GainAnnotatedRecord, PipelineConfig, normalize, seeded_rng  # noqa: E402
from .errors import GrowsetError  # noqa: E402
from .pipeline import GrowthState  # noqa: E402

__all__ = [
    "DataRecord",
    "GainAnnotatedRecord",
    "GrowsetError",
    "GrowthState",
    "PipelineConfig",
    "normalize",
    "seeded_rng",
    "__version__",
]
