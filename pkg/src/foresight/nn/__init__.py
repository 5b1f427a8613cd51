from . import tensor as F
from .gradcheck import grad_check
from .layers import FeedForward, LayerNorm, Linear, MultiHeadAttention, multi_head_attention
from .optim import AdamState, TrainingError, adam_step, clip_grad_norm
from .params import CheckpointError, Init, ParamStore, load_checkpoint, save_checkpoint
from .tensor import DimensionError, Tensor, no_grad

__all__ = [
    "F", "Tensor", "no_grad", "DimensionError", "ParamStore", "Init", "CheckpointError",
    "save_checkpoint", "load_checkpoint", "AdamState", "adam_step", "clip_grad_norm",
    "TrainingError", "grad_check", "Linear", "LayerNorm", "MultiHeadAttention",
    "FeedForward", "multi_head_attention",
]
