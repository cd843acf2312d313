from .autodiff import Tape, Var
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .vit import (
    Capture,
    ModelConfig,
    class_logits,
    cls_forward,
    cls_loss,
    count_params,
    forward_encoder,
    init_params,
    mim_loss,
    param_shapes,
)

__all__ = [
    "Capture",
    "Checkpoint",
    "ModelConfig",
    "Tape",
    "Var",
    "class_logits",
    "cls_forward",
    "cls_loss",
    "count_params",
    "forward_encoder",
    "init_params",
    "load_checkpoint",
    "mim_loss",
    "param_shapes",
    "save_checkpoint",
]
