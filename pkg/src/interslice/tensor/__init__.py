"""Minimal reverse-mode differentiable array engine on numpy."""
from . import ops
from .checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from .core import Tensor, as_tensor, no_grad
from .kernels import BACKEND
from .optim import Adam, AdamState, adam_step
from .params import ParamSet, backward

__all__ = [
    "Adam", "AdamState", "BACKEND", "ParamSet", "Tensor", "adam_step", "as_tensor", "backward",
    "decode_checkpoint", "encode_checkpoint", "load_checkpoint", "no_grad", "ops", "save_checkpoint",
]
