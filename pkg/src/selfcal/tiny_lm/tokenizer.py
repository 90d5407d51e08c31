"""Byte-level tokenizer.

Token ids 0..255 are raw byte values; three special ids sit above them:
BOS (256), EOS (257), PAD (258). ``encode`` never emits specials and
``decode`` skips them, so encode/decode is the identity on arbitrary byte
strings.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

NUM_BYTES = 256
BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = NUM_BYTES + 3


def _load_stopword_first_bytes() -> frozenset[int]:
    """First byte of every bundled stop word, as token ids.

    The bundled list holds common lowercase English stop words; at byte
    level the usable constraint for "start like an English stop word" is
    the set of their first bytes.
    """
    text = (
        resources.files("selfcal").joinpath("data/stopwords.txt").read_text("utf-8")
    )
    ids = {word.strip().encode("utf-8")[0] for word in text.split() if word.strip()}
    return frozenset(ids)


@dataclass(frozen=True)
class ByteTokenizer:
    """Fixed byte-level vocabulary with reserved BOS/EOS/PAD ids."""

    vocab_size: int = VOCAB_SIZE
    bos_id: int = BOS_ID
    eos_id: int = EOS_ID
    pad_id: int = PAD_ID
    stopword_first_token_ids: frozenset[int] = field(
        default_factory=_load_stopword_first_bytes
    )

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.bos_id, self.eos_id, self.pad_id))

    @property
    def nonspecial_ids(self) -> np.ndarray:
        return np.arange(NUM_BYTES, dtype=np.int64)

    def encode(self, text: bytes | str) -> np.ndarray:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return np.frombuffer(text, dtype=np.uint8).astype(np.int64)

    def decode(self, tokens) -> bytes:
        ids = np.asarray(tokens, dtype=np.int64)
        return bytes(ids[ids < NUM_BYTES].astype(np.uint8).tobytes())

    def fingerprint(self) -> str:
        """Stable hash of the vocabulary layout, stored in data files."""
        desc = f"bytes:{NUM_BYTES};bos:{self.bos_id};eos:{self.eos_id};pad:{self.pad_id}"
        return hashlib.sha256(desc.encode()).hexdigest()[:16]
