"""Simulator for sparse federated learning with hierarchical personalized models."""

from .config import ExperimentConfig, get_preset
from .federation import HyperParams, run_training

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "HyperParams", "get_preset", "run_training"]
