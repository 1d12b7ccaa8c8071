"""
textspot: end-to-end scene text spotting at desk scale.

A query-based detector with learnable proposals, a dilated Swin backbone and a
recognition conversion that routes the recognizer's loss back into detection,
trained and evaluated on synthetic or annotated data.
"""

__version__ = "0.1.0"
__license__ = "MIT"
__description__ = "End-to-end scene text spotting with a jointly trained detector and recognizer."

# Data models
from .models import (
    DatasetRecord,
    DetectionScores,
    MetricsReport,
    PredictionsFile,
    RunConfig,
    SpottingResult,
    TextInstance,
)

# Error types
from .errors import (
    TextSpotError,
    ValidationError,
    DatasetValidationError,
    ConfigurationError,
    GeometryError,
    ShapeError,
    MaskCodecError,
    CheckpointError,
    NumericalFaultError,
    MetricCalculationError,
)

# Model and loops
from .config import config_manager
from .dataset import load_dataset, save_dataset
from .engine import evaluate, infer, train
from .metrics import detection_hmean, e2e_hmean, one_minus_ned
from .results import RunManager, load_model
from .spotter import TextSpotter
from .synth import generate_synthetic_sample

__all__ = [
    # Data models
    "DatasetRecord",
    "DetectionScores",
    "MetricsReport",
    "PredictionsFile",
    "RunConfig",
    "SpottingResult",
    "TextInstance",

    # Error types
    "TextSpotError",
    "ValidationError",
    "DatasetValidationError",
    "ConfigurationError",
    "GeometryError",
    "ShapeError",
    "MaskCodecError",
    "CheckpointError",
    "NumericalFaultError",
    "MetricCalculationError",

    # Model and loops
    "config_manager",
    "load_dataset",
    "save_dataset",
    "train",
    "evaluate",
    "infer",
    "detection_hmean",
    "e2e_hmean",
    "one_minus_ned",
    "RunManager",
    "load_model",
    "TextSpotter",
    "generate_synthetic_sample",
]
