"""Few-shot multi-label intent detection with an instance relation graph."""

from .config import TrainConfig
from .estimator import InstanceRelationClassifier

__all__ = ["InstanceRelationClassifier", "TrainConfig"]
