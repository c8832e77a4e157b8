"""Cross-view object correspondence, alignment and region-grounded QA on synthetic multi-view scenes."""
from .errors import (CheckpointError, ConfigError, ContaminationError, DimensionError, EmptyRegionError,
                     GenerationError, GradCheckError, TrainingError)

__version__ = "0.1.0"
