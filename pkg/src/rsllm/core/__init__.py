from .autograd import (ContractError, EmptyGraphError, NonFiniteError, Parameter, Tensor, backward,
                       is_grad_enabled, no_grad, reset_graph, set_debug)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import finite_difference_check
from .nn import LayerNorm, Linear, Module
from .optim import AdamState, adam_step, warmup_lr
from . import ops

__all__ = [
    "AdamState", "CheckpointError", "ContractError", "EmptyGraphError", "LayerNorm", "Linear", "Module",
    "NonFiniteError", "Parameter", "Tensor", "adam_step", "backward", "finite_difference_check",
    "is_grad_enabled", "load_checkpoint", "no_grad", "ops", "reset_graph", "save_checkpoint", "set_debug",
    "warmup_lr",
]
