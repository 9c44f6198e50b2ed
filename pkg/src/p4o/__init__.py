"""Recurrent proximal policy optimization with a predictive-processing world
model, a matched LSTM baseline, toy pixel environments and a verification
suite."""

__version__ = "0.1.0"

from .agent import Agent
from .config import RunConfig, load_config
from .rng import Rng

__all__ = ["Agent", "RunConfig", "load_config", "Rng", "__version__"]
