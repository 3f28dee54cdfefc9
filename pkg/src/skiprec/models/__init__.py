from .checkpoint import CKPT_MAGIC, Checkpoint, CheckpointError
from .encoders import (
    ARCHITECTURES,
    EncoderOutput,
    ModelConfig,
    backward,
    encode,
    forward,
    init_params,
    param_shapes,
    resolve_architecture,
    score_items,
    truncated_normal,
)

__all__ = [
    "ARCHITECTURES",
    "CKPT_MAGIC",
    "Checkpoint",
    "CheckpointError",
    "EncoderOutput",
    "ModelConfig",
    "backward",
    "encode",
    "forward",
    "init_params",
    "param_shapes",
    "resolve_architecture",
    "score_items",
    "truncated_normal",
]
