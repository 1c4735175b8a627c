"""Minimal differentiable-computation core (numpy, reverse mode).

Only the ops needed by the toy encoders and fusion head: dense layers,
layer norm, multi-head self-attention blocks, GELU feed-forward, mean
pooling, softmax, and cross-entropy, plus AdamW with a cosine schedule,
a finite-difference gradient checker, and a binary checkpoint codec.
"""

from sleepfuse.nn.tensor import Tensor, concat
from sleepfuse.nn.layers import (
    Dense,
    FeedForward,
    LayerNorm,
    MultiHeadSelfAttention,
    Parameter,
    TransformerBlock,
    cross_entropy_loss,
    init_uniform,
)
from sleepfuse.nn.optim import AdamW, lr_schedule
from sleepfuse.nn.gradcheck import GradCheckResult, gradcheck
from sleepfuse.nn.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "AdamW",
    "Dense",
    "FeedForward",
    "GradCheckResult",
    "LayerNorm",
    "MultiHeadSelfAttention",
    "Parameter",
    "Tensor",
    "TransformerBlock",
    "concat",
    "cross_entropy_loss",
    "gradcheck",
    "init_uniform",
    "load_checkpoint",
    "lr_schedule",
    "save_checkpoint",
]
