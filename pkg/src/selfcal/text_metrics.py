"""Calibration-text analysis: perplexity, repetition fraction, vocabulary
coverage, n-gram diversity, and the fitted Zipf exponent."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ContractViolation
from .tiny_lm import ModelCheckpoint, perplexity

CSV_HEADER = "ppl,repetitions,coverage,diversity,zipf"


@dataclass(frozen=True)
class TextMetricsReport:
    ppl: float
    repetitions: float
    coverage: float
    diversity: float
    zipf: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_row(self) -> str:
        """Row matching ``CSV_HEADER`` (PPL, Rep., Cov., Div., Zipf order)."""
        return (
            f"{self.ppl!r},{self.repetitions!r},{self.coverage!r},"
            f"{self.diversity!r},{self.zipf!r}"
        )


def _sequences(data) -> list[np.ndarray]:
    seqs = [np.asarray(s, dtype=np.int64) for s in data]
    if not seqs:
        raise ContractViolation("metrics need at least one sequence")
    return seqs


def repetition_fraction(data) -> float:
    """Fraction of tokens already seen earlier in the same sequence,
    averaged with the ``1/(|D| * L)`` normalization (the first token of a
    sequence can never be a repeat). Requires uniform sequence length."""
    seqs = _sequences(data)
    length = seqs[0].size
    if any(s.size != length for s in seqs):
        raise ContractViolation("repetition_fraction needs uniform-length sequences")
    if length == 0:
        raise ContractViolation("sequences must be non-empty")
    repeats = 0
    for seq in seqs:
        seen = set()
        for tok in seq.tolist():
            if tok in seen:
                repeats += 1
            else:
                seen.add(tok)
    return repeats / (len(seqs) * length)


def vocabulary_coverage(data, vocab_size: int) -> float:
    """Distinct token ids in the data over the full vocabulary size
    (special ids count toward the denominator)."""
    seqs = _sequences(data)
    if vocab_size < 1:
        raise ContractViolation("vocab_size must be positive")
    distinct: set[int] = set()
    for seq in seqs:
        distinct.update(np.unique(seq).tolist())
    return len(distinct) / vocab_size


def ngram_diversity(data, max_n: int = 4) -> float:
    """Mean over n in 1..max_n of (unique n-grams / total n-grams), pooled
    across the whole set; n-grams never span sequence boundaries."""
    seqs = _sequences(data)
    if max_n < 1:
        raise ContractViolation("max_n must be >= 1")
    if any(s.size < max_n for s in seqs):
        raise ContractViolation(f"every sequence needs length >= {max_n}")
    ratios = []
    for n in range(1, max_n + 1):
        unique: set[tuple[int, ...]] = set()
        total = 0
        for seq in seqs:
            toks = seq.tolist()
            unique.update(zip(*(toks[k:] for k in range(n))))
            total += seq.size - n + 1
        ratios.append(len(unique) / total)
    return float(np.mean(ratios))


def zipf_coefficient(data) -> float:
    """Negated least-squares slope of log(frequency) against log(rank)
    over the descending token-frequency ranking."""
    seqs = _sequences(data)
    counts = Counter()
    for seq in seqs:
        ids, freq = np.unique(seq, return_counts=True)
        for i, f in zip(ids.tolist(), freq.tolist()):
            counts[i] += f
    if len(counts) < 2:
        raise ContractViolation("zipf fit needs at least two distinct tokens")
    freqs = np.sort(np.array(list(counts.values()), dtype=np.float64))[::-1]
    log_rank = np.log(np.arange(1, freqs.size + 1, dtype=np.float64))
    log_freq = np.log(freqs)
    slope = np.polyfit(log_rank, log_freq, 1)[0]
    return float(-slope)


def analyze(model: ModelCheckpoint, data) -> TextMetricsReport:
    """All five metrics for a calibration set, scored under ``model``."""
    seqs = _sequences(data)
    return TextMetricsReport(
        ppl=perplexity(model, seqs),
        repetitions=repetition_fraction(seqs),
        coverage=vocabulary_coverage(seqs, model.config.vocab_size),
        diversity=ngram_diversity(seqs),
        zipf=zipf_coefficient(seqs),
    )
