"""Latent-variable generative classifiers, adversarial attacks and detectors."""
from .autodiff import GradientTape, Tensor
from .kernels import BACKEND
from .models import FACTORIZATIONS, DeepBayesModel, ModelConfig, build_model, predict, train
from .rng import RngStream
from .tworings import TwoRingsClassifier, TwoRingsSpec

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FACTORIZATIONS",
    "DeepBayesModel",
    "GradientTape",
    "ModelConfig",
    "RngStream",
    "Tensor",
    "TwoRingsClassifier",
    "TwoRingsSpec",
    "build_model",
    "predict",
    "train",
]
