"""Multi-agent trajectory prediction: context rasters, spatio-temporal graphs,
graph double attention, a Wasserstein-regularised latent model and a
kinematically constrained decoder."""

__version__ = "0.1.0"

from .config import Config, ModelConfig  # noqa: E402
from .data import AgentType, PredictionCase, Scene, load_dataset, window_cases  # noqa: E402
from .model import TrajectoryPredictor, sample_predictions  # noqa: E402

__all__ = [
    "Config", "ModelConfig", "AgentType", "PredictionCase", "Scene", "load_dataset", "window_cases",
    "TrajectoryPredictor", "sample_predictions", "__version__",
]
