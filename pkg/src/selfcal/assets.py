"""Paths to the bundled corpus, held-out split, and trained checkpoint."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def _data_path(name: str) -> Path:
    return Path(str(resources.files("selfcal").joinpath("data", name)))


def corpus_path() -> Path:
    """Training corpus (~1 MB of synthetic English-like text)."""
    return _data_path("corpus.txt")


def heldout_path() -> Path:
    """Held-out split from the same generator, disjoint stream."""
    return _data_path("heldout.txt")


def bundled_model_path() -> Path:
    """Checkpoint trained on the bundled corpus (see tools/train_bundled_model.py)."""
    return _data_path("tiny_lm.tlm")
