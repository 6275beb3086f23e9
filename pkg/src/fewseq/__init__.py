"""Few-shot sequence classification with text-modulated prototypes.

A desk-scale engine for N-way K-shot classification of frame sequences:
per-frame encoders into a shared video-text embedding space, a video-text
contrastive head, text-guided prototype refinement with a temporal
Transformer, and ordered temporal alignment metrics, all trained episodically
and evaluated with confidence intervals.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .data import Dataset, Episode, SyntheticSpec, VideoSample
from .engine import Checkpoint, EvalReport, evaluate, predict_episode, train
from .metrics import MetricKind
from .model import Model

__all__ = [
    "Checkpoint",
    "Dataset",
    "Episode",
    "EvalReport",
    "MetricKind",
    "Model",
    "RunConfig",
    "SyntheticSpec",
    "VideoSample",
    "evaluate",
    "predict_episode",
    "train",
    "__version__",
]
