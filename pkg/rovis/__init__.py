"""rovis - video instance segmentation with track queries, on a numpy autodiff core."""

__version__ = "1.0.0"

from .errors import ConfigError, FormatError, GraphError, RovisError, ShapeError, TrainingError
from .rng import Rng
from .segmenter import FramePrediction, ModelConfig, QuerySet, QueryState, Segmenter
from .tracker import TrackerConfig, track_video, track_video_iou_link
from .tracks import TrackResult
from .trainer import TrainConfig, train

__all__ = [
    "__version__",
    "ConfigError",
    "FormatError",
    "GraphError",
    "RovisError",
    "ShapeError",
    "TrainingError",
    "Rng",
    "FramePrediction",
    "ModelConfig",
    "QuerySet",
    "QueryState",
    "Segmenter",
    "TrackerConfig",
    "track_video",
    "track_video_iou_link",
    "TrackResult",
    "TrainConfig",
    "train",
]
