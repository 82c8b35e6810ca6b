"""Transformer language model with a fixed-size continuous long-term memory."""

from .autodiff import Tensor
from .basis import BasisSpec, make_basis
from .memory import MemoryState
from .model import Model, ModelConfig

__all__ = ["Tensor", "BasisSpec", "make_basis", "MemoryState", "Model", "ModelConfig"]
__version__ = "0.1.0"
