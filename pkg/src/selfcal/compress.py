"""Layer-wise post-training compression driven by calibration activations.

Methods:

* ``wanda``: 2:4 semi-structured pruning by |weight| * activation norm,
  no weight updates.
* ``sparsegpt``: 2:4 pruning with optimal-brain-surgeon error
  compensation through the inverse-Hessian Cholesky factor.
* ``gptq``: symmetric 4-bit quantization with the same OBS compensation,
  optional descending-activation column ordering.
* ``rtn``: round-to-nearest on the same grid, calibration-free baseline.
* ``aws``: activation-weighted scale search — per-channel scales
  ``mean_abs**alpha`` (geometric mean normalized), RTN on the scaled
  weights, alpha picked by a weighted reconstruction objective.

The layer Hessian is ``H = sum_t x_t x_t^T`` over all calibration token
positions; dampening ``lambda = dampening * mean(diag H)`` is added just
before factorization and retried x10 up to 3 times on failure. All
compression arithmetic is float64; compressed tensors are stored back as
float32.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics
from .calibration import CalibrationSet
from .errors import ContractViolation, DecompositionError
from .tiny_lm import ModelCheckpoint
from .tiny_lm.model import _causal_bias, _gelu, _layernorm, _softmax_last, _merge_heads, _split_heads

METHODS = ("wanda", "sparsegpt", "gptq", "rtn", "aws")

_DAMP_RETRIES = 3
_ALPHA_GRID = [round(0.05 * k, 2) for k in range(21)]


@dataclass(frozen=True)
class CompressionConfig:
    method: str = "gptq"
    sparsity_n: int = 2
    sparsity_m: int = 4
    bits: int = 4
    group_size: int = 128
    dampening: float = 0.01
    symmetric: bool = True
    desc_act_order: bool = True
    true_sequential: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractViolation(f"unknown method {self.method!r}")
        if not self.symmetric:
            raise ContractViolation("only symmetric quantization is supported")
        if self.bits < 2:
            raise ContractViolation("bits must be >= 2")
        if self.group_size < 1:
            raise ContractViolation("group_size must be >= 1")
        if self.dampening < 0:
            raise ContractViolation("dampening must be >= 0")
        if (self.sparsity_n, self.sparsity_m) != (2, 4):
            raise ContractViolation("only 2:4 sparsity is supported")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionConfig":
        return cls(**d)


@dataclass
class LayerCalibStats:
    """Accumulated input statistics for one linear layer."""

    layer_id: str
    hessian: np.ndarray          # (d_in, d_in), sum of x x^T, no dampening
    mean_abs: np.ndarray         # (d_in,)
    token_count: int

    @property
    def col_norms(self) -> np.ndarray:
        return np.sqrt(np.diag(self.hessian))


class _StatsAccumulator:
    def __init__(self, layer_id: str, d_in: int):
        self.layer_id = layer_id
        self.h = np.zeros((d_in, d_in))
        self.abs_sum = np.zeros(d_in)
        self.count = 0

    def add(self, x2d: np.ndarray) -> None:
        self.h += x2d.T @ x2d
        self.abs_sum += np.abs(x2d).sum(axis=0)
        self.count += x2d.shape[0]

    def finish(self) -> LayerCalibStats:
        if self.count == 0:
            raise ContractViolation("no activations accumulated")
        return LayerCalibStats(
            self.layer_id, self.h, self.abs_sum / self.count, self.count
        )


# ---------------------------------------------------------------------------
# per-layer results
# ---------------------------------------------------------------------------


@dataclass
class PruneResult:
    weight: np.ndarray
    mask: np.ndarray             # True where pruned
    error: float | None = None   # ||X dW^T||_F^2 when the method tracks it


@dataclass
class QuantResult:
    weight: np.ndarray
    scales: np.ndarray           # (d_out, n_groups), the grid scale per group
    col_group: np.ndarray        # (d_in,) group index of each original column
    error: float | None = None


@dataclass
class AwsResult:
    weight: np.ndarray
    inner: QuantResult           # RTN result for weight / channel_scale
    channel_scale: np.ndarray    # (d_in,)
    alpha: float
    error: float                 # weighted objective used for the alpha search


def reconstruction_error(delta: np.ndarray, hessian: np.ndarray) -> float:
    """``||X dW^T||_F^2`` evaluated through ``H = X^T X``."""
    return float(np.sum((delta @ hessian) * delta))


def _inverse_cholesky_factor(h: np.ndarray, dampening: float) -> np.ndarray:
    """Upper-triangular U with ``U.T @ U == (h + damp)^-1``.

    Dampening is ``dampening * mean(diag h)`` on the diagonal, multiplied
    by 10 after each factorization failure, at most 3 retries.
    """
    d = h.shape[0]
    base = float(np.mean(np.diag(h)))
    damp = dampening
    for attempt in range(_DAMP_RETRIES + 1):
        try:
            l = numerics.cholesky(h + damp * base * np.eye(d))
            hinv = numerics.inverse_from_cholesky(l)
            hinv = (hinv + hinv.T) / 2.0
            return numerics.cholesky(hinv).T
        except DecompositionError:
            if attempt == _DAMP_RETRIES:
                raise
            damp = (damp if damp > 0 else 0.01) * 10.0


def _check_24(d_in: int):
    if d_in % 4 != 0:
        raise ContractViolation(f"2:4 pruning needs d_in divisible by 4, got {d_in}")


def _lowest_two_mask(scores: np.ndarray) -> np.ndarray:
    """Per row of a (rows, 4) score block, mark the 2 lowest entries.

    Ties resolve to the lower column index (stable sort order)."""
    order = np.argsort(scores, axis=1, kind="stable")
    mask = np.zeros(scores.shape, dtype=bool)
    rows = np.arange(scores.shape[0])[:, None]
    mask[rows, order[:, :2]] = True
    return mask


def wanda_prune(w: np.ndarray, col_norms: np.ndarray) -> PruneResult:
    """2:4 pruning by score ``|W_ij| * col_norms_j`` within each group of
    four consecutive input columns; surviving weights are unchanged."""
    w = np.asarray(w, dtype=np.float64)
    d_out, d_in = w.shape
    _check_24(d_in)
    norms = np.asarray(col_norms, dtype=np.float64)
    if norms.shape != (d_in,):
        raise ContractViolation("col_norms must have one entry per input column")
    scores = np.abs(w) * norms[None, :]
    mask = np.zeros_like(w, dtype=bool)
    for j in range(0, d_in, 4):
        mask[:, j : j + 4] = _lowest_two_mask(scores[:, j : j + 4])
    out = w.copy()
    out[mask] = 0.0
    return PruneResult(out, mask)


def sparsegpt_prune(
    w: np.ndarray,
    h: np.ndarray,
    cfg: CompressionConfig,
    mask: np.ndarray | None = None,
) -> PruneResult:
    """OBS pruning sweep: columns left to right in lazy blocks of
    ``cfg.group_size``; per group of four columns the two lowest-saliency
    weights per row (``w^2 / U_jj^2``) are zeroed, and each column's
    pruned mass is pushed into the not-yet-processed columns through the
    inverse-Hessian factor.

    ``mask`` overrides the 2:4 selection with an explicit prune pattern
    (used for surgical single-column pruning).
    """
    w64 = np.asarray(w, dtype=np.float64)
    d_out, d_in = w64.shape
    if mask is None:
        _check_24(d_in)
    elif mask.shape != w64.shape:
        raise ContractViolation("mask shape must match the weight matrix")
    u = _inverse_cholesky_factor(np.asarray(h, dtype=np.float64), cfg.dampening)
    diag_u = np.diag(u)

    cur = w64.copy()
    pruned = np.zeros_like(cur, dtype=bool) if mask is None else mask.astype(bool)
    block = max(4, cfg.group_size - cfg.group_size % 4)
    for i1 in range(0, d_in, block):
        i2 = min(i1 + block, d_in)
        err_block = np.zeros((d_out, i2 - i1))
        for j in range(i1, i2):
            if mask is None and j % 4 == 0:
                quad = cur[:, j : j + 4]
                scores = quad * quad / (diag_u[j : j + 4] ** 2)[None, :]
                pruned[:, j : j + 4] = _lowest_two_mask(scores)
            col = cur[:, j].copy()
            q = col.copy()
            q[pruned[:, j]] = 0.0
            cur[:, j] = q
            err = (col - q) / diag_u[j]
            if j + 1 < i2:
                cur[:, j + 1 : i2] -= np.outer(err, u[j, j + 1 : i2])
            err_block[:, j - i1] = err
        if i2 < d_in:
            cur[:, i2:] -= err_block @ u[i1:i2, i2:]
    error = reconstruction_error(cur - w64, np.asarray(h, dtype=np.float64))
    return PruneResult(cur, pruned, error)


def _group_scales(block: np.ndarray, qmax: int) -> np.ndarray:
    s = np.abs(block).max(axis=1) / qmax
    s[s == 0.0] = 1.0
    return s


def _round_to_grid(col: np.ndarray, s: np.ndarray, qmax: int) -> np.ndarray:
    return s * np.clip(np.round(col / s), -qmax, qmax)


def gptq_quantize(
    w: np.ndarray, h: np.ndarray, cfg: CompressionConfig
) -> QuantResult:
    """OBS quantization sweep on the symmetric ``bits``-bit grid.

    With ``desc_act_order`` the columns are processed in descending
    Hessian-diagonal order (ties keep the original order) and restored at
    the end. Scales are per row per group of ``group_size`` consecutive
    post-permutation columns, computed when the sweep reaches the group.
    """
    w64 = np.asarray(w, dtype=np.float64)
    h64 = np.asarray(h, dtype=np.float64)
    d_out, d_in = w64.shape
    qmax = cfg.qmax

    if cfg.desc_act_order:
        perm = np.argsort(-np.diag(h64), kind="stable")
    else:
        perm = np.arange(d_in)
    cur = w64[:, perm].copy()
    u = _inverse_cholesky_factor(h64[np.ix_(perm, perm)], cfg.dampening)
    diag_u = np.diag(u)

    group = cfg.group_size
    n_groups = (d_in + group - 1) // group
    scales = np.empty((d_out, n_groups))
    for i1 in range(0, d_in, group):
        i2 = min(i1 + group, d_in)
        g = i1 // group
        s = _group_scales(cur[:, i1:i2], qmax)
        scales[:, g] = s
        err_block = np.zeros((d_out, i2 - i1))
        for j in range(i1, i2):
            col = cur[:, j].copy()
            quantized = _round_to_grid(col, s, qmax)
            cur[:, j] = quantized
            err = (col - quantized) / diag_u[j]
            if j + 1 < i2:
                cur[:, j + 1 : i2] -= np.outer(err, u[j, j + 1 : i2])
            err_block[:, j - i1] = err
        if i2 < d_in:
            cur[:, i2:] -= err_block @ u[i1:i2, i2:]

    inv = np.argsort(perm)
    out = cur[:, inv]
    col_group = np.empty(d_in, dtype=np.int64)
    col_group[perm] = np.arange(d_in) // group
    error = reconstruction_error(out - w64, h64)
    return QuantResult(out, scales, col_group, error)


def rtn_quantize(w: np.ndarray, cfg: CompressionConfig) -> QuantResult:
    """Per-row per-group symmetric round-to-nearest; no calibration."""
    w64 = np.asarray(w, dtype=np.float64)
    d_out, d_in = w64.shape
    qmax = cfg.qmax
    group = cfg.group_size
    n_groups = (d_in + group - 1) // group
    out = np.empty_like(w64)
    scales = np.empty((d_out, n_groups))
    for i1 in range(0, d_in, group):
        i2 = min(i1 + group, d_in)
        g = i1 // group
        s = _group_scales(w64[:, i1:i2], qmax)
        scales[:, g] = s
        out[:, i1:i2] = s[:, None] * np.clip(
            np.round(w64[:, i1:i2] / s[:, None]), -qmax, qmax
        )
    return QuantResult(out, scales, np.arange(d_in) // group)


def aws_quantize(
    w: np.ndarray, mean_abs: np.ndarray, cfg: CompressionConfig
) -> AwsResult:
    """Grid search over ``alpha``: scale channels by ``mean_abs**alpha``
    (normalized to geometric mean 1; zero channels get scale 1), quantize
    the scaled weights with RTN, scale back, and keep the alpha with the
    lowest activation-weighted squared error. ``alpha = 0`` is in the
    grid, so the result never loses to plain RTN under this objective.
    """
    w64 = np.asarray(w, dtype=np.float64)
    m = np.asarray(mean_abs, dtype=np.float64)
    if m.shape != (w64.shape[1],):
        raise ContractViolation("mean_abs must have one entry per input column")
    if (m < 0).any():
        raise ContractViolation("mean_abs must be non-negative")
    positive = m > 0

    best: AwsResult | None = None
    for alpha in _ALPHA_GRID:
        s = np.ones_like(m)
        if positive.any():
            sp = m[positive] ** alpha
            sp = sp / np.exp(np.mean(np.log(sp)))
            s[positive] = sp
        inner = rtn_quantize(w64 / s[None, :], cfg)
        out = inner.weight * s[None, :]
        err = float(np.sum(((out - w64) * m[None, :]) ** 2))
        if best is None or err < best.error:
            best = AwsResult(out, inner, s, alpha, err)
    return best


# ---------------------------------------------------------------------------
# model-level pipeline
# ---------------------------------------------------------------------------


@dataclass
class LayerReport:
    layer: str
    method: str
    recon_error: float
    sparsity: float
    bits: int
    seconds: float


@dataclass
class CompressionReport:
    method: str
    config: dict
    model_hash: str
    calib_hash: str
    layers: list[LayerReport] = field(default_factory=list)

    def result_dict(self) -> dict:
        """Deterministic portion (timings excluded)."""
        return {
            "method": self.method,
            "config": self.config,
            "model_hash": self.model_hash,
            "calib_hash": self.calib_hash,
            "layers": [
                {
                    "layer": l.layer,
                    "method": l.method,
                    "recon_error": l.recon_error,
                    "sparsity": l.sparsity,
                    "bits": l.bits,
                }
                for l in self.layers
            ],
        }

    def timing_dict(self) -> dict:
        return {l.layer: l.seconds for l in self.layers}

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("layer,method,recon_error,sparsity,bits,seconds\n")
            for l in self.layers:
                fh.write(
                    f"{l.layer},{l.method},{l.recon_error!r},"
                    f"{l.sparsity!r},{l.bits},{l.seconds!r}\n"
                )


def model_fingerprint(model: ModelCheckpoint) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(asdict(model.config), sort_keys=True).encode())
    for name in model.config.tensor_names():
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(model.tensors[name], dtype="<f4").tobytes())
    return digest.hexdigest()[:16]


def calib_fingerprint(calib: CalibrationSet) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(calib.spec.to_dict(), sort_keys=True).encode())
    digest.update(np.ascontiguousarray(calib.examples, dtype="<u4").tobytes())
    return digest.hexdigest()[:16]


def target_layer_names(config) -> list[str]:
    names = []
    for i in range(config.layers):
        pre = f"blocks.{i}"
        names += [
            f"{pre}.attn.wq", f"{pre}.attn.wk", f"{pre}.attn.wv",
            f"{pre}.attn.wo", f"{pre}.ffn.w_in", f"{pre}.ffn.w_out",
        ]
    return names


def _window_groups(examples, ctx: int) -> list[np.ndarray]:
    """Split every example into context-sized windows and stack windows of
    equal length, longest group first; within a group the (example,
    window) order is preserved. The grouping is a pure function of the
    data, so downstream accumulation order is fixed."""
    buckets: dict[int, list[np.ndarray]] = {}
    for seq in examples:
        seq = np.asarray(seq, dtype=np.int64)
        for start in range(0, seq.size, ctx):
            window = seq[start : start + ctx]
            buckets.setdefault(window.size, []).append(window)
    return [np.stack(buckets[t]) for t in sorted(buckets, reverse=True)]


class _SequentialDriver:
    """Pushes all calibration windows through the model block by block,
    optionally swapping in compressed weights as it goes."""

    def __init__(self, model: ModelCheckpoint, calib: CalibrationSet):
        if calib.examples.shape[0] == 0 or calib.examples.size == 0:
            raise ContractViolation("calibration set is empty")
        self.p = model.params64()
        self.config = model.config
        groups = _window_groups(calib.examples, model.config.context_len)
        self.hs = [
            self.p["tok_emb"][ids] + self.p["pos_emb"][: ids.shape[1]][None]
            for ids in groups
        ]

    def _accumulate(self, layer_id: str, acts: list[np.ndarray]) -> LayerCalibStats:
        acc = _StatsAccumulator(layer_id, acts[0].shape[-1])
        for a in acts:
            acc.add(a.reshape(-1, a.shape[-1]))
        return acc.finish()

    def run_block(self, index: int, weight_for):
        """Process block ``index``. ``weight_for(layer_id, stats)`` returns
        the float64 weight to use going forward (compressed or original)."""
        cfg, p = self.config, self.p
        pre = f"blocks.{index}"
        scale = 1.0 / np.sqrt(cfg.head_dim)

        a_list = [
            _layernorm(h, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])[0] for h in self.hs
        ]
        qkv_stats = self._accumulate(f"{pre}.attn.wq", a_list)
        wq = weight_for(f"{pre}.attn.wq", qkv_stats)
        wk = weight_for(
            f"{pre}.attn.wk",
            LayerCalibStats(f"{pre}.attn.wk", qkv_stats.hessian,
                            qkv_stats.mean_abs, qkv_stats.token_count),
        )
        wv = weight_for(
            f"{pre}.attn.wv",
            LayerCalibStats(f"{pre}.attn.wv", qkv_stats.hessian,
                            qkv_stats.mean_abs, qkv_stats.token_count),
        )

        ctx_list = []
        for a in a_list:
            t = a.shape[1]
            q = _split_heads(a @ wq.T, cfg.heads)
            k = _split_heads(a @ wk.T, cfg.heads)
            v = _split_heads(a @ wv.T, cfg.heads)
            att = _softmax_last(q @ k.transpose(0, 1, 3, 2) * scale + _causal_bias(t))
            ctx_list.append(_merge_heads(att @ v))
        out_stats = self._accumulate(f"{pre}.attn.wo", ctx_list)
        wo = weight_for(f"{pre}.attn.wo", out_stats)
        self.hs = [h + c @ wo.T for h, c in zip(self.hs, ctx_list)]

        a2_list = [
            _layernorm(h, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])[0] for h in self.hs
        ]
        in_stats = self._accumulate(f"{pre}.ffn.w_in", a2_list)
        w_in = weight_for(f"{pre}.ffn.w_in", in_stats)
        g_list = [_gelu(a2 @ w_in.T) for a2 in a2_list]
        out2_stats = self._accumulate(f"{pre}.ffn.w_out", g_list)
        w_out = weight_for(f"{pre}.ffn.w_out", out2_stats)
        self.hs = [h + g @ w_out.T for h, g in zip(self.hs, g_list)]


def capture_layer_inputs(
    model: ModelCheckpoint, calib: CalibrationSet, cfg: CompressionConfig
) -> dict[str, LayerCalibStats]:
    """Input statistics for every target layer of the uncompressed model."""
    driver = _SequentialDriver(model, calib)
    collected: dict[str, LayerCalibStats] = {}
    p = model.params64()

    def keep_original(layer_id: str, stats: LayerCalibStats) -> np.ndarray:
        collected[layer_id] = stats
        return p[layer_id]

    for i in range(model.config.layers):
        driver.run_block(i, keep_original)
    return collected


def _compress_layer(w64, stats: LayerCalibStats, cfg: CompressionConfig):
    """Dispatch one layer; returns (new_weight64, recon_error, sparsity, bits)."""
    if cfg.method == "wanda":
        res = wanda_prune(w64, stats.col_norms)
        sparsity = float(res.mask.mean())
        bits = 32
    elif cfg.method == "sparsegpt":
        res = sparsegpt_prune(w64, stats.hessian, cfg)
        sparsity = float(res.mask.mean())
        bits = 32
    elif cfg.method == "gptq":
        res = gptq_quantize(w64, stats.hessian, cfg)
        sparsity = float((res.weight == 0.0).mean())
        bits = cfg.bits
    elif cfg.method == "rtn":
        res = rtn_quantize(w64, cfg)
        sparsity = float((res.weight == 0.0).mean())
        bits = cfg.bits
    elif cfg.method == "aws":
        res = aws_quantize(w64, stats.mean_abs, cfg)
        sparsity = float((res.weight == 0.0).mean())
        bits = cfg.bits
    else:  # pragma: no cover - guarded by config validation
        raise ContractViolation(cfg.method)
    error = reconstruction_error(res.weight - w64, stats.hessian)
    return res.weight, error, sparsity, bits


def compress_model(
    model: ModelCheckpoint, calib: CalibrationSet, cfg: CompressionConfig
) -> tuple[ModelCheckpoint, CompressionReport]:
    """Apply ``cfg.method`` to every attention/FFN projection.

    With ``cfg.true_sequential`` each layer's calibration inputs flow
    through the already-compressed earlier layers; otherwise all
    statistics are captured from the original model first. Embeddings,
    layer norms, and (if untied) the output head are left untouched. The
    result is a pure function of (model, calibration set, config).
    """
    report = CompressionReport(
        method=cfg.method,
        config=cfg.to_dict(),
        model_hash=model_fingerprint(model),
        calib_hash=calib_fingerprint(calib),
    )
    new_tensors = {k: v.copy() for k, v in model.tensors.items()}
    p = model.params64()

    def compress_now(layer_id: str, stats: LayerCalibStats) -> np.ndarray:
        start = time.perf_counter()
        weight, error, sparsity, bits = _compress_layer(p[layer_id], stats, cfg)
        stored = weight.astype(np.float32)
        new_tensors[layer_id] = stored
        report.layers.append(
            LayerReport(layer_id, cfg.method, error, sparsity, bits,
                        time.perf_counter() - start)
        )
        return stored.astype(np.float64)

    if cfg.true_sequential:
        driver = _SequentialDriver(model, calib)
        for i in range(model.config.layers):
            driver.run_block(i, compress_now)
    else:
        stats_map = capture_layer_inputs(model, calib, cfg)
        for layer_id in target_layer_names(model.config):
            compress_now(layer_id, stats_map[layer_id])

    return ModelCheckpoint(model.config, new_tensors), report
