"""Adam trainer over a byte corpus.

Each training window is a BOS token followed by ``context_len`` corpus
bytes, so the model learns a meaningful BOS-conditioned distribution for
later unconditional generation. Training arithmetic runs in float32 (the
checkpoint storage precision; compression and gradient verification use
the float64 paths), which roughly halves step time on one core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation, CorpusTooSmallError
from .model import ModelCheckpoint, _loss_and_grads_from_params
from .tokenizer import BOS_ID


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ContractViolation("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")


def train(
    model: ModelCheckpoint,
    corpus_tokens: np.ndarray,
    cfg: TrainConfig,
    log_every: int = 0,
) -> ModelCheckpoint:
    """Run ``cfg.steps`` Adam updates and return a new checkpoint.

    Deterministic for a fixed seed: window offsets come from one seeded
    generator and gradient reductions have a fixed order. ``steps == 0``
    returns the input weights unchanged.
    """
    config = model.config
    if config.vocab_size <= BOS_ID:
        raise ContractViolation(
            "trainer expects the byte-level vocabulary (BOS prepended per window)"
        )
    corpus = np.asarray(corpus_tokens, dtype=np.int64)
    if corpus.size < config.context_len:
        raise CorpusTooSmallError(
            f"corpus has {corpus.size} tokens, need >= {config.context_len}"
        )
    params = {k: v.astype(np.float32) for k, v in model.tensors.items()}
    if cfg.steps == 0:
        return ModelCheckpoint(config, dict(model.tensors))

    rng = np.random.default_rng(cfg.seed)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    t_len = config.context_len
    max_offset = corpus.size - t_len

    for step in range(1, cfg.steps + 1):
        offsets = rng.integers(0, max_offset + 1, size=cfg.batch_size)
        ids = np.empty((cfg.batch_size, t_len), dtype=np.int64)
        targets = np.empty_like(ids)
        ids[:, 0] = BOS_ID
        for r, off in enumerate(offsets):
            window = corpus[off : off + t_len]
            ids[r, 1:] = window[:-1]
            targets[r] = window
        mask = np.ones_like(ids, dtype=np.float32)
        loss, grads = _loss_and_grads_from_params(params, config, ids, targets, mask)
        bc1 = 1.0 - cfg.beta1**step
        bc2 = 1.0 - cfg.beta2**step
        for key in params:
            g = grads[key]
            m[key] = cfg.beta1 * m[key] + (1.0 - cfg.beta1) * g
            v[key] = cfg.beta2 * v[key] + (1.0 - cfg.beta2) * g * g
            params[key] -= cfg.learning_rate * (m[key] / bc1) / (
                np.sqrt(v[key] / bc2) + cfg.eps
            )
        if log_every and (step % log_every == 0 or step == 1):
            print(f"step {step:5d}  loss {loss:.4f}", flush=True)

    tensors = {k: p.astype(np.float32) for k, p in params.items()}
    return ModelCheckpoint(config, tensors)
