"""Decoder-only transformer in plain numpy, with hand-derived gradients.

Fixed architecture: learned token + position embeddings, pre-LayerNorm
blocks (causal multi-head attention, GELU feed-forward, no biases on the
projections), a final LayerNorm, and a weight-tied output head by default.

Weights live in checkpoints as float32; every forward/backward pass here
upcasts once and computes in float64. All routines are deterministic:
fixed batch layout, fixed reduction order (``math.fsum`` over per-example
loss sums), no hidden global state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from ..errors import ContractViolation
from .tokenizer import VOCAB_SIZE

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    model_dim: int = 128
    ffn_dim: int = 512
    context_len: int = 256
    vocab_size: int = VOCAB_SIZE
    tie_output: bool = True

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ContractViolation(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}"
            )
        if self.context_len < 2:
            raise ContractViolation("context_len must be >= 2")
        if min(self.layers, self.heads - 1, self.model_dim - 1,
               self.ffn_dim - 1, self.vocab_size - 1) < 0:
            raise ContractViolation("config dimensions must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def tensor_names(self) -> list[str]:
        """Canonical tensor order used by init, checkpoints, and grads."""
        names = ["tok_emb", "pos_emb"]
        for i in range(self.layers):
            prefix = f"blocks.{i}"
            names += [
                f"{prefix}.ln1.g", f"{prefix}.ln1.b",
                f"{prefix}.attn.wq", f"{prefix}.attn.wk",
                f"{prefix}.attn.wv", f"{prefix}.attn.wo",
                f"{prefix}.ln2.g", f"{prefix}.ln2.b",
                f"{prefix}.ffn.w_in", f"{prefix}.ffn.w_out",
            ]
        names += ["ln_f.g", "ln_f.b"]
        if not self.tie_output:
            names.append("lm_head")
        return names

    def tensor_shape(self, name: str) -> tuple[int, ...]:
        d, f, v = self.model_dim, self.ffn_dim, self.vocab_size
        if name in ("tok_emb", "lm_head"):
            return (v, d)
        if name == "pos_emb":
            return (self.context_len, d)
        leaf = name.rsplit(".", 1)[-1] if name.count(".") else name
        if name.endswith((".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b")) or name in (
            "ln_f.g", "ln_f.b"
        ):
            return (d,)
        if leaf in ("wq", "wk", "wv", "wo"):
            return (d, d)
        if leaf == "w_in":
            return (f, d)
        if leaf == "w_out":
            return (d, f)
        raise KeyError(name)


@dataclass
class ModelCheckpoint:
    """Model weights (float32 at rest) plus the architecture config."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    _params64: dict[str, np.ndarray] | None = field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self):
        expected = self.config.tensor_names()
        if sorted(self.tensors) != sorted(expected):
            raise ContractViolation("tensor set does not match config")
        for name in expected:
            t = self.tensors[name]
            if t.shape != self.config.tensor_shape(name):
                raise ContractViolation(
                    f"tensor {name} has shape {t.shape}, "
                    f"expected {self.config.tensor_shape(name)}"
                )
            if not np.isfinite(t).all():
                raise ContractViolation(f"tensor {name} contains non-finite values")

    def params64(self) -> dict[str, np.ndarray]:
        """Cached float64 view of the weights (read-only)."""
        if self._params64 is None:
            p = {k: v.astype(np.float64) for k, v in self.tensors.items()}
            for a in p.values():
                a.setflags(write=False)
            self._params64 = p
        return self._params64

    def head_weight64(self) -> np.ndarray:
        p = self.params64()
        return p["tok_emb"] if self.config.tie_output else p["lm_head"]


def init_model(config: ModelConfig, seed: int = 0) -> ModelCheckpoint:
    """Random initialization: N(0, 0.02) embeddings/projections, residual
    projections scaled down by 1/sqrt(2*layers), unit LayerNorm gains."""
    rng = np.random.default_rng(seed)
    resid_scale = 1.0 / math.sqrt(max(1, 2 * config.layers))
    tensors = {}
    for name in config.tensor_names():
        shape = config.tensor_shape(name)
        if name.endswith(".g") or name == "ln_f.g":
            t = np.ones(shape)
        elif name.endswith(".b") or name == "ln_f.b":
            t = np.zeros(shape)
        else:
            t = rng.normal(0.0, 0.02, size=shape)
            if name.endswith((".attn.wo", ".ffn.w_out")):
                t *= resid_scale
        tensors[name] = t.astype(np.float32)
    return ModelCheckpoint(config, tensors)


# ---------------------------------------------------------------------------
# primitive forward/backward pieces
# ---------------------------------------------------------------------------


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * inv
    return dx, dg, db


def _gelu_cdf(z):
    return 0.5 * (1.0 + erf(z * _INV_SQRT2))


def _gelu(z):
    return z * _gelu_cdf(z)


def _gelu_grad(z, cdf):
    pdf = np.exp(-0.5 * z * z) * _INV_SQRT2PI
    return cdf + z * pdf


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _causal_bias(t, dtype=np.float64):
    return np.triu(np.full((t, t), -np.inf, dtype=dtype), k=1)


def _softmax_last(s):
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# full-sequence forward / backward
# ---------------------------------------------------------------------------


def _forward(p, config, ids, need_cache):
    b, t = ids.shape
    h = p["tok_emb"][ids] + p["pos_emb"][:t][None, :, :]
    scale = 1.0 / math.sqrt(config.head_dim)
    bias = _causal_bias(t, h.dtype)
    caches = []
    for i in range(config.layers):
        pre = f"blocks.{i}"
        a, ln1c = _layernorm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        q = _split_heads(a @ p[f"{pre}.attn.wq"].T, config.heads)
        k = _split_heads(a @ p[f"{pre}.attn.wk"].T, config.heads)
        v = _split_heads(a @ p[f"{pre}.attn.wv"].T, config.heads)
        att = _softmax_last(q @ k.transpose(0, 1, 3, 2) * scale + bias)
        ctx = _merge_heads(att @ v)
        h = h + ctx @ p[f"{pre}.attn.wo"].T
        a2, ln2c = _layernorm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        z = a2 @ p[f"{pre}.ffn.w_in"].T
        cdf = _gelu_cdf(z)
        gz = z * cdf
        h = h + gz @ p[f"{pre}.ffn.w_out"].T
        if need_cache:
            caches.append((a, ln1c, q, k, v, att, ctx, a2, ln2c, z, cdf, gz))
    hf, lnfc = _layernorm(h, p["ln_f.g"], p["ln_f.b"])
    w_head = p["tok_emb"] if config.tie_output else p["lm_head"]
    logits = hf @ w_head.T
    return logits, (caches, hf, lnfc)


def _validate_context(config, n):
    if not 1 <= n <= config.context_len:
        raise ContractViolation(
            f"context length {n} outside [1, {config.context_len}]"
        )


def sequence_logits(model: ModelCheckpoint, ids) -> np.ndarray:
    """Logits for every position of one sequence: shape (len, vocab).

    Row ``i`` scores the token at position ``i + 1`` given positions
    ``<= i``; causal masking guarantees row ``i`` ignores later tokens.
    """
    ids = np.asarray(ids, dtype=np.int64)
    _validate_context(model.config, ids.size)
    logits, _ = _forward(model.params64(), model.config, ids[None, :], False)
    return logits[0]


def forward_logits(model: ModelCheckpoint, context) -> np.ndarray:
    """Next-token logits after the full ``context``: shape (vocab,)."""
    return sequence_logits(model, context)[-1]


def _batch_nll(p, config, ids, targets, mask, need_cache=False):
    """Per-position negative log-likelihood and softmax cache."""
    logits, cache = _forward(p, config, ids, need_cache)
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    tgt_logit = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    nll = (lse - tgt_logit) * mask.astype(logits.dtype, copy=False)
    return nll, logits, cache


def loss_from_params(p, config, ids, targets, mask) -> float:
    """Mean next-token NLL over unmasked positions (float64 params in)."""
    nll, _, _ = _batch_nll(p, config, ids, targets, mask)
    count = int(mask.sum())
    return math.fsum(float(row.sum()) for row in nll) / count


def _stack_batch(config, batch, pad_id):
    seqs = [np.asarray(s, dtype=np.int64) for s in batch]
    if not seqs:
        raise ContractViolation("batch must be non-empty")
    for s in seqs:
        if s.size < 2:
            raise ContractViolation("each sequence needs length >= 2")
        _validate_context(config, s.size - 1)
    t = max(s.size for s in seqs) - 1
    ids = np.full((len(seqs), t), pad_id, dtype=np.int64)
    targets = np.full((len(seqs), t), pad_id, dtype=np.int64)
    for r, s in enumerate(seqs):
        ids[r, : s.size - 1] = s[:-1]
        targets[r, : s.size - 1] = s[1:]
    mask = (targets != pad_id).astype(np.float64)
    return ids, targets, mask


def loss_and_grads(model: ModelCheckpoint, batch, pad_id: int | None = None):
    """Mean cross-entropy over non-PAD next-token positions, plus gradients
    for every trainable tensor.

    Args:
        batch: list of token sequences (length >= 2 each). Sequences are
            right-padded with ``pad_id`` to a rectangle; padded targets are
            excluded from the loss.

    Returns:
        ``(loss, grads)`` with ``grads`` keyed like the model tensors.
    """
    config = model.config
    if pad_id is None:
        pad_id = config.vocab_size - 1
    ids, targets, mask = _stack_batch(config, batch, pad_id)
    p = model.params64()
    loss, grads = _loss_and_grads_from_params(p, config, ids, targets, mask)
    return loss, grads


def _loss_and_grads_from_params(p, config, ids, targets, mask):
    nll, logits, (caches, hf, lnfc) = _batch_nll(
        p, config, ids, targets, mask, need_cache=True
    )
    count = int(mask.sum())
    loss = math.fsum(float(row.sum()) for row in nll) / count

    b, t = ids.shape
    d = config.model_dim
    dtype = logits.dtype
    scale = 1.0 / math.sqrt(config.head_dim)
    grads = {name: np.zeros(config.tensor_shape(name), dtype=dtype) for name in
             config.tensor_names()}

    dlogits = _softmax_last(logits)
    np.subtract.at(dlogits, (np.arange(b)[:, None], np.arange(t)[None, :], targets), 1.0)
    dlogits *= (mask / count)[..., None]

    dlogits = dlogits.astype(dtype, copy=False)
    w_head = p["tok_emb"] if config.tie_output else p["lm_head"]
    dhf = dlogits @ w_head
    dw_head = dlogits.reshape(-1, config.vocab_size).T @ hf.reshape(-1, d)
    grads["tok_emb" if config.tie_output else "lm_head"] += dw_head

    dh, dgf, dbf = _layernorm_backward(dhf, p["ln_f.g"], lnfc)
    grads["ln_f.g"] += dgf
    grads["ln_f.b"] += dbf

    for i in reversed(range(config.layers)):
        pre = f"blocks.{i}"
        a, ln1c, q, k, v, att, ctx, a2, ln2c, z, cdf, gz = caches[i]
        w_in, w_out = p[f"{pre}.ffn.w_in"], p[f"{pre}.ffn.w_out"]

        dgz = dh @ w_out
        grads[f"{pre}.ffn.w_out"] += dh.reshape(-1, d).T @ gz.reshape(-1, config.ffn_dim)
        dz = dgz * _gelu_grad(z, cdf)
        grads[f"{pre}.ffn.w_in"] += dz.reshape(-1, config.ffn_dim).T @ a2.reshape(-1, d)
        da2 = dz @ w_in
        dres, dg2, db2 = _layernorm_backward(da2, p[f"{pre}.ln2.g"], ln2c)
        grads[f"{pre}.ln2.g"] += dg2
        grads[f"{pre}.ln2.b"] += db2
        dh = dh + dres

        wo = p[f"{pre}.attn.wo"]
        dctx = dh @ wo
        grads[f"{pre}.attn.wo"] += dh.reshape(-1, d).T @ ctx.reshape(-1, d)
        dc = _split_heads(dctx, config.heads)
        datt = dc @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dc
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        dq = ds @ k * scale
        dk = ds.transpose(0, 1, 3, 2) @ q * scale
        da = np.zeros_like(a)
        for name, grad_h in (("wq", dq), ("wk", dk), ("wv", dv)):
            g2d = _merge_heads(grad_h).reshape(-1, d)
            grads[f"{pre}.attn.{name}"] += g2d.T @ a.reshape(-1, d)
            da += _merge_heads(grad_h) @ p[f"{pre}.attn.{name}"]
        dres, dg1, db1 = _layernorm_backward(da, p[f"{pre}.ln1.g"], ln1c)
        grads[f"{pre}.ln1.g"] += dg1
        grads[f"{pre}.ln1.b"] += db1
        dh = dh + dres

    np.add.at(grads["tok_emb"], ids, dh)
    grads["pos_emb"][:t] += dh.sum(axis=0)
    return loss, grads


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _sequence_nll_sum(model, seq):
    """Summed next-token NLL for one sequence, chunked to the context
    window (windows are scored independently, without cross-window state)."""
    seq = np.asarray(seq, dtype=np.int64)
    if seq.size < 2:
        raise ContractViolation("sequence needs length >= 2 for evaluation")
    ctx = model.config.context_len
    p = model.params64()
    total = 0.0
    positions = 0
    for start in range(0, seq.size - 1, ctx):
        stop = min(start + ctx, seq.size - 1)
        ids = seq[start:stop][None, :]
        targets = seq[start + 1 : stop + 1][None, :]
        nll, _, _ = _batch_nll(
            p, model.config, ids, targets, np.ones_like(ids, dtype=np.float64)
        )
        total += float(nll.sum())
        positions += stop - start
    return total, positions


def perplexity(model: ModelCheckpoint, data) -> float:
    """Mean over examples of exp(per-example mean next-token NLL)."""
    ppls = []
    for seq in data:
        total, positions = _sequence_nll_sum(model, seq)
        ppls.append(math.exp(total / positions))
    if not ppls:
        raise ContractViolation("perplexity requires at least one sequence")
    return float(np.mean(ppls))


def next_token_accuracy(model: ModelCheckpoint, data) -> float:
    """Fraction of positions where the argmax prediction is the true token."""
    hits = 0
    positions = 0
    ctx = model.config.context_len
    for seq in data:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size < 2:
            raise ContractViolation("sequence needs length >= 2 for evaluation")
        for start in range(0, seq.size - 1, ctx):
            stop = min(start + ctx, seq.size - 1)
            logits = sequence_logits(model, seq[start : stop + 1])[:-1]
            hits += int((logits.argmax(axis=-1) == seq[start + 1 : stop + 1]).sum())
            positions += stop - start
    if positions == 0:
        raise ContractViolation("no scorable positions")
    return hits / positions


# ---------------------------------------------------------------------------
# incremental decoding (used by calibration-data generation)
# ---------------------------------------------------------------------------


class IncrementalDecoder:
    """Sequential decoding state for one sequence.

    Re-uses per-position attention keys/values instead of re-running the
    full prefix at every step, which keeps ancestral sampling linear in
    the generated length. The arithmetic per step is the same as the
    batched forward pass restricted to the newest position.
    """

    def __init__(self, model: ModelCheckpoint):
        self.p = model.params64()
        self.config = model.config
        cfg = model.config
        self._k = np.zeros((cfg.layers, cfg.heads, cfg.context_len, cfg.head_dim))
        self._v = np.zeros_like(self._k)
        self.length = 0

    def reset(self):
        self.length = 0

    def step(self, token: int) -> np.ndarray:
        """Feed one token, return next-token logits of shape (vocab,)."""
        cfg, p = self.config, self.p
        pos = self.length
        _validate_context(cfg, pos + 1)
        scale = 1.0 / math.sqrt(cfg.head_dim)
        x = p["tok_emb"][token] + p["pos_emb"][pos]
        for i in range(cfg.layers):
            pre = f"blocks.{i}"
            a = _vec_layernorm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            q = (p[f"{pre}.attn.wq"] @ a).reshape(cfg.heads, cfg.head_dim)
            self._k[i, :, pos] = (p[f"{pre}.attn.wk"] @ a).reshape(
                cfg.heads, cfg.head_dim
            )
            self._v[i, :, pos] = (p[f"{pre}.attn.wv"] @ a).reshape(
                cfg.heads, cfg.head_dim
            )
            keys = self._k[i, :, : pos + 1]
            vals = self._v[i, :, : pos + 1]
            s = (keys @ q[:, :, None])[:, :, 0] * scale
            s -= s.max(axis=1, keepdims=True)
            att = np.exp(s)
            att /= att.sum(axis=1, keepdims=True)
            ctx = (att[:, None, :] @ vals)[:, 0, :]
            x = x + p[f"{pre}.attn.wo"] @ ctx.reshape(cfg.model_dim)
            a2 = _vec_layernorm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            x = x + p[f"{pre}.ffn.w_out"] @ _gelu(p[f"{pre}.ffn.w_in"] @ a2)
        hf = _vec_layernorm(x, p["ln_f.g"], p["ln_f.b"])
        w_head = p["tok_emb"] if cfg.tie_output else p["lm_head"]
        self.length = pos + 1
        return w_head @ hf


def _vec_layernorm(x, g, b):
    mu = x.mean()
    xc = x - mu
    inv = 1.0 / math.sqrt((xc * xc).mean() + _LN_EPS)
    return g * (xc * inv) + b
