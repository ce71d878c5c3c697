from .tensor import Tensor, Tape, active_tape, default_dtype, set_default_dtype
from . import ops
from .optim import AdamState, SGDState, adam_step, clip_grad_norm, cosine_lr, sgd_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "Tape",
    "active_tape",
    "default_dtype",
    "set_default_dtype",
    "ops",
    "SGDState",
    "AdamState",
    "sgd_step",
    "adam_step",
    "clip_grad_norm",
    "cosine_lr",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]
