"""Tiny byte-level decoder-only transformer: tokenizer, model, trainer,
evaluation, and checkpoint I/O."""

from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    IncrementalDecoder,
    ModelCheckpoint,
    ModelConfig,
    forward_logits,
    init_model,
    loss_and_grads,
    next_token_accuracy,
    perplexity,
    sequence_logits,
)
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, VOCAB_SIZE, ByteTokenizer
from .training import TrainConfig, train

__all__ = [
    "BOS_ID",
    "EOS_ID",
    "PAD_ID",
    "VOCAB_SIZE",
    "ByteTokenizer",
    "IncrementalDecoder",
    "ModelCheckpoint",
    "ModelConfig",
    "TrainConfig",
    "forward_logits",
    "init_model",
    "load_checkpoint",
    "loss_and_grads",
    "next_token_accuracy",
    "perplexity",
    "save_checkpoint",
    "sequence_logits",
    "train",
]
