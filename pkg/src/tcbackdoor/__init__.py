"""Clean-label backdoors for video liveness detectors via a temporal blue-channel trigger."""

from .trigger import TriggerParams, poison_video
from .video import ALIVE, REBROADCAST, Dataset, LabeledVideo

__all__ = ["ALIVE", "REBROADCAST", "Dataset", "LabeledVideo", "TriggerParams", "poison_video"]
__version__ = "0.1.0"
