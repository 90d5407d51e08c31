"""Self-generated calibration data for post-training compression of a
tiny byte-level language model.

Subpackages and modules:

* :mod:`selfcal.numerics` — float64 kernels (matmul, temperature softmax,
  Cholesky, triangular inversion).
* :mod:`selfcal.tiny_lm` — byte tokenizer, transformer, trainer,
  perplexity, checkpoint I/O.
* :mod:`selfcal.calibration` — temperature-scheduled self-generation plus
  corpus and random-vocabulary baselines.
* :mod:`selfcal.compress` — Wanda / SparseGPT 2:4 pruning, GPTQ / RTN /
  activation-weighted-scaling 4-bit quantization.
* :mod:`selfcal.text_metrics` — repetition, coverage, n-gram diversity,
  Zipf exponent, perplexity of calibration text.
* :mod:`selfcal.harness` — multi-seed experiments and ablations.
* :mod:`selfcal.cli` — ``selfcal`` command-line tool.
"""

from . import assets, calibration, compress, harness, numerics, text_metrics, tiny_lm

__version__ = "0.1.0"

__all__ = [
    "assets",
    "calibration",
    "compress",
    "harness",
    "numerics",
    "text_metrics",
    "tiny_lm",
    "__version__",
]
