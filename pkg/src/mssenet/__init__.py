"""Multi-scale squeeze-and-excitation network for speech emotion recognition."""

__version__ = "0.1.0"

from .estimator import MfccExtractor, MSSENetClassifier  # noqa: E402
from .model import ModelConfig, MSSENet, build_variant, receptive_field  # noqa: E402
from .training import EvalReport, TrainConfig, run_cv, uar_war  # noqa: E402

__all__ = [
    "MfccExtractor",
    "MSSENetClassifier",
    "ModelConfig",
    "MSSENet",
    "build_variant",
    "receptive_field",
    "EvalReport",
    "TrainConfig",
    "run_cv",
    "uar_war",
]
