"""Few-shot classification with variational prototypes and a variational semantic memory."""
from .data import ClassDataset, DataError, Episode, load_image_folder, sample_episode, synthetic_splits
from .estimator import VSMClassifier
from .gaussian import DiagonalGaussian, GaussianMixture, kl_gaussian, mixture_log_density
from .memory import MemoryColdError, MemoryStore
from .networks import EncoderConfig, NetworkConfig, VSMNetworks
from .tensor import Tensor, no_grad, precision, set_precision
from .trainer import Learner, RunMetrics, TrainConfig, episode_loss, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ClassDataset", "DataError", "Episode", "load_image_folder", "sample_episode", "synthetic_splits",
    "VSMClassifier",
    "DiagonalGaussian", "GaussianMixture", "kl_gaussian", "mixture_log_density",
    "MemoryColdError", "MemoryStore",
    "EncoderConfig", "NetworkConfig", "VSMNetworks",
    "Tensor", "no_grad", "precision", "set_precision",
    "Learner", "RunMetrics", "TrainConfig", "episode_loss", "evaluate", "train",
]
