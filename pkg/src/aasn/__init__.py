"""Anatomy-aware Siamese asymmetry detection, desk-scale numpy implementation."""

from .config import RunConfig
from .model import AasnModel, ModelConfig
from .tensor import Tensor

__all__ = ["AasnModel", "ModelConfig", "RunConfig", "Tensor"]
