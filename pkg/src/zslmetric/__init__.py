"""Metric learning of image/attribute consistency for zero-shot classification."""

from .model import Model, Triplet, TripletBatch, embed_image, score, score_squared
from .objective import HyperParams, Gradients, total_loss, gradients

__all__ = [
    "Model",
    "Triplet",
    "TripletBatch",
    "embed_image",
    "score",
    "score_squared",
    "HyperParams",
    "Gradients",
    "total_loss",
    "gradients",
]

__version__ = "0.1.0"
