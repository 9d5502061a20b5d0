"""Burst image restoration: alignment, pseudo-burst fusion, group upsampling."""

from .tensor import Tape, Tensor, create, grad_check
from .model import BIPNet, ModelConfig, build, load, save

__all__ = ["Tape", "Tensor", "create", "grad_check", "BIPNet", "ModelConfig", "build", "load", "save"]
__version__ = "0.1.0"
