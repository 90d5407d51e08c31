"""Calibration-set construction from three sources.

* ``self``: sampled from the model itself, conditioned only on BOS, with a
  per-step temperature that ramps linearly from ``t_initial`` to
  ``t_final`` over ``n`` steps and stays at ``t_final`` afterwards.
* ``corpus``: uniformly placed windows of consecutive tokens from a text
  corpus.
* ``random_vocab``: i.i.d. uniform token ids, special ids excluded.

Every example draws from its own RNG stream derived from
``(seed, example_index)``, so sets are reproducible regardless of how the
work is scheduled.
"""

from __future__ import annotations

import hashlib
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import numerics
from .errors import (
    BadMagicError,
    ContractViolation,
    CorpusTooSmallError,
    GenerationStalledError,
    ShapeMismatchError,
    TruncatedFileError,
)
from .tiny_lm import BOS_ID, EOS_ID, ByteTokenizer, IncrementalDecoder, ModelCheckpoint

SOURCES = ("self", "corpus", "random_vocab")
CALIB_MAGIC = b"CAL1"
_LEN = struct.Struct("<Q")

# Segments that repeatedly yield nothing (immediate EOS) abort generation.
STALL_LIMIT = 16


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Independent RNG stream for (seed, index), stable across platforms."""
    digest = hashlib.sha256(f"selfcal:{seed}:{index}".encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))


@dataclass(frozen=True)
class TemperatureSchedule:
    """Linear temperature ramp: ``t_initial`` -> ``t_final`` over ``n`` steps."""

    t_initial: float = 1.0
    t_final: float = 1.0
    n: int = 10

    def __post_init__(self):
        if not (np.isfinite(self.t_initial) and np.isfinite(self.t_final)):
            raise ContractViolation("schedule temperatures must be finite")
        if self.t_initial < 0 or self.t_final < 0:
            raise ContractViolation("schedule temperatures must be >= 0")
        if self.n < 1:
            raise ContractViolation("ramp length n must be >= 1")


def schedule_temperature(i: int, s: TemperatureSchedule) -> float:
    """Temperature for generation step ``i`` (1-based)."""
    if i < 1:
        raise ContractViolation("step index starts at 1")
    if i > s.n:
        return s.t_final
    return s.t_initial + (i / s.n) * (s.t_final - s.t_initial)


@dataclass(frozen=True)
class CalibrationSpec:
    source: str = "self"
    num_examples: int = 128
    example_len: int = 2048
    seed: int = 0
    schedule: TemperatureSchedule = field(default_factory=TemperatureSchedule)
    stopword_constraint: bool = False
    corpus_path: str | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ContractViolation(f"unknown source {self.source!r}")
        if self.num_examples < 1 or self.example_len < 1:
            raise ContractViolation("num_examples and example_len must be >= 1")
        if self.stopword_constraint and self.source != "self":
            raise ContractViolation("stopword_constraint applies to the self source")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.source != "self":
            d.pop("schedule")
            d.pop("stopword_constraint")
        if self.source != "corpus":
            d.pop("corpus_path")
        return d


@dataclass
class CalibrationSet:
    spec: CalibrationSpec
    examples: np.ndarray  # (num_examples, example_len) int64

    def __post_init__(self):
        self.examples = np.asarray(self.examples, dtype=np.int64)
        if self.examples.shape != (self.spec.num_examples, self.spec.example_len):
            raise ContractViolation(
                f"examples shape {self.examples.shape} does not match spec"
            )
        if self.spec.source == "self":
            if not (self.examples[:, 0] == BOS_ID).all():
                raise ContractViolation("self-generated examples must start with BOS")
            tail = self.examples[:, 1:]
            if tail.size and int(tail.max(initial=0)) >= BOS_ID:
                raise ContractViolation(
                    "self-generated examples must contain no specials after BOS"
                )
        elif self.spec.source == "random_vocab":
            if int(self.examples.max(initial=0)) >= BOS_ID:
                raise ContractViolation("random_vocab examples must exclude specials")

    def __len__(self) -> int:
        return self.spec.num_examples

    def __iter__(self):
        return iter(self.examples)

    def prefix(self, n: int) -> "CalibrationSet":
        """First ``n`` examples, used by the data-quantity ablation."""
        if not 1 <= n <= self.spec.num_examples:
            raise ContractViolation(f"prefix size {n} out of range")
        spec = CalibrationSpec(**{**self.spec.__dict__, "num_examples": n})
        return CalibrationSet(spec, self.examples[:n].copy())


def sample_next_token(logits, t: float, rng, allowed=None) -> int:
    """Draw one token id from the temperature-scaled distribution.

    With ``allowed`` given, the distribution is restricted to that id set
    and renormalized (computed directly on the subset, which is the same
    distribution but immune to underflow). ``t == 0`` picks the argmax of
    the allowed logits, ties toward the lowest id.
    """
    u = np.asarray(logits, dtype=np.float64)
    if allowed is not None:
        idx = np.asarray(sorted(allowed), dtype=np.int64)
        if idx.size == 0:
            raise ContractViolation("allowed set must be non-empty")
        sub = numerics.softmax_with_temperature(u[idx], t)
        if not sub.sum() > 0:
            raise ContractViolation("allowed set has no finite-probability token")
        return int(idx[_draw(sub, rng, t)])
    p = numerics.softmax_with_temperature(u, t)
    return _draw(p, rng, t)


def _draw(p: np.ndarray, rng, t: float) -> int:
    if t == 0.0:
        return int(np.argmax(p))
    cdf = np.cumsum(p)
    return int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))


def generate_example(
    model: ModelCheckpoint,
    s: TemperatureSchedule,
    length: int,
    rng,
    constraint=None,
) -> np.ndarray:
    """One self-generated example of exactly ``length`` tokens.

    Starts with BOS and samples until EOS or the context window fills; if
    the example is still short, further segments are generated (each
    restarting from BOS, with the restart BOS dropped and EOS never kept)
    and concatenated, then the result is truncated to ``length``. The
    step counter behind the temperature schedule restarts per segment.
    The ``constraint`` id set applies only to the very first sampled
    token. Raises :class:`GenerationStalledError` after ``STALL_LIMIT``
    consecutive segments that contribute nothing.
    """
    if length < 1:
        raise ContractViolation("example length must be >= 1")
    decoder = IncrementalDecoder(model)
    out = [BOS_ID]
    first_segment = True
    empty_segments = 0
    while len(out) < length:
        produced = _generate_segment(
            decoder, s, length - len(out), rng,
            constraint if first_segment else None,
        )
        out.extend(produced)
        first_segment = False
        if produced:
            empty_segments = 0
        else:
            empty_segments += 1
            if empty_segments >= STALL_LIMIT:
                raise GenerationStalledError(
                    f"{STALL_LIMIT} consecutive empty segments"
                )
    return np.asarray(out[:length], dtype=np.int64)


def _generate_segment(decoder, s, budget, rng, constraint):
    decoder.reset()
    logits = decoder.step(BOS_ID)
    produced = []
    i = 1
    while len(produced) < budget:
        t = schedule_temperature(i, s)
        allowed = constraint if i == 1 and constraint is not None else None
        token = sample_next_token(logits, t, rng, allowed)
        if token == EOS_ID:
            return produced
        produced.append(token)
        if decoder.length >= decoder.config.context_len:
            return produced
        logits = decoder.step(token)
        i += 1
    return produced


def build_calibration_set(
    spec: CalibrationSpec,
    model: ModelCheckpoint | None = None,
    corpus_tokens=None,
    tokenizer: ByteTokenizer | None = None,
    threads: int = 1,
) -> CalibrationSet:
    """Materialize a calibration set from its spec.

    ``self`` needs ``model``; ``corpus`` needs ``corpus_tokens`` or
    ``spec.corpus_path``. The result is a pure function of the spec (plus
    the model/corpus contents), whatever ``threads`` is.
    """
    tokenizer = tokenizer or ByteTokenizer()
    n, length = spec.num_examples, spec.example_len

    if spec.source == "random_vocab":
        ids = tokenizer.nonspecial_ids
        rows = [
            ids[derive_rng(spec.seed, i).integers(0, ids.size, size=length)]
            for i in range(n)
        ]
        return CalibrationSet(spec, np.stack(rows))

    if spec.source == "corpus":
        if corpus_tokens is None:
            if spec.corpus_path is None:
                raise ContractViolation("corpus source needs corpus_tokens or a path")
            corpus_tokens = tokenizer.encode(Path(spec.corpus_path).read_bytes())
        corpus = np.asarray(corpus_tokens, dtype=np.int64)
        if corpus.size < length:
            raise CorpusTooSmallError(
                f"corpus has {corpus.size} tokens, need >= {length}"
            )
        rows = []
        for i in range(n):
            offset = int(derive_rng(spec.seed, i).integers(0, corpus.size - length + 1))
            rows.append(corpus[offset : offset + length])
        return CalibrationSet(spec, np.stack(rows))

    if model is None:
        raise ContractViolation("self source needs a model")
    constraint = (
        frozenset(tokenizer.stopword_first_token_ids)
        if spec.stopword_constraint
        else None
    )

    def one(i: int) -> np.ndarray:
        return generate_example(
            model, spec.schedule, length, derive_rng(spec.seed, i), constraint
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, range(n)))
    else:
        rows = [one(i) for i in range(n)]
    return CalibrationSet(spec, np.stack(rows))


# ---------------------------------------------------------------------------
# serialization: JSON header + little-endian uint32 token payload
# ---------------------------------------------------------------------------


def save_calibration_set(cs: CalibrationSet, path, tokenizer=None) -> None:
    tokenizer = tokenizer or ByteTokenizer()
    header = json.dumps(
        {
            "spec": cs.spec.to_dict(),
            "tokenizer": tokenizer.fingerprint(),
            "writer": "selfcal-0.1",
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    payload = np.ascontiguousarray(cs.examples, dtype="<u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CALIB_MAGIC)
        fh.write(_LEN.pack(len(header)))
        fh.write(header)
        fh.write(payload)


def load_calibration_set(path) -> CalibrationSet:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CALIB_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CALIB_MAGIC!r}")
    if len(raw) < 12:
        raise TruncatedFileError(f"{path}: missing header length")
    (header_len,) = _LEN.unpack_from(raw, 4)
    header_end = 12 + header_len
    if len(raw) < header_end:
        raise TruncatedFileError(f"{path}: header truncated")
    header = json.loads(raw[12:header_end].decode("utf-8"))
    spec_dict = dict(header["spec"])
    if "schedule" in spec_dict:
        spec_dict["schedule"] = TemperatureSchedule(**spec_dict["schedule"])
    spec = CalibrationSpec(**spec_dict)
    count = spec.num_examples * spec.example_len
    payload = raw[header_end:]
    if len(payload) < 4 * count:
        raise TruncatedFileError(f"{path}: token payload truncated")
    if len(payload) != 4 * count:
        raise ShapeMismatchError(f"{path}: payload size does not match spec")
    tokens = np.frombuffer(payload, dtype="<u4").astype(np.int64)
    return CalibrationSet(spec, tokens.reshape(spec.num_examples, spec.example_len))
