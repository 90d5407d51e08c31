import json
import struct

import numpy as np
import pytest

from selfcal.errors import BadMagicError, ShapeMismatchError, TruncatedFileError
from selfcal.tiny_lm import forward_logits, load_checkpoint, save_checkpoint


@pytest.fixture
def saved(tmp_path, tiny_model):
    path = tmp_path / "model.tlm"
    save_checkpoint(tiny_model, path)
    return path


def test_roundtrip_is_bit_identical(saved, tiny_model, tmp_path):
    loaded = load_checkpoint(saved)
    for name, tensor in tiny_model.tensors.items():
        np.testing.assert_array_equal(loaded.tensors[name], tensor)
    again = tmp_path / "again.tlm"
    save_checkpoint(loaded, again)
    assert again.read_bytes() == saved.read_bytes()


def test_roundtrip_preserves_forward_logits(saved, tiny_model):
    loaded = load_checkpoint(saved)
    ctx = [1, 2, 3]
    np.testing.assert_array_equal(
        forward_logits(loaded, ctx), forward_logits(tiny_model, ctx)
    )


def test_corrupted_magic(saved):
    raw = bytearray(saved.read_bytes())
    raw[:4] = b"NOPE"
    saved.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_checkpoint(saved)


def test_truncated_header(saved):
    saved.write_bytes(saved.read_bytes()[:10])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(saved)


def test_truncated_payload(saved):
    saved.write_bytes(saved.read_bytes()[:-8])
    with pytest.raises(TruncatedFileError):
        load_checkpoint(saved)


def test_header_with_wrong_tensor_length(saved):
    raw = saved.read_bytes()
    (header_len,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12 : 12 + header_len])
    header["tensors"][0]["shape"][0] += 1  # declares more bytes than stored
    blob = json.dumps(header).encode()
    saved.write_bytes(raw[:4] + struct.pack("<Q", len(blob)) + blob + raw[12 + header_len :])
    with pytest.raises((ShapeMismatchError, TruncatedFileError)):
        load_checkpoint(saved)


def test_payload_size_mismatch_is_shape_error(saved):
    raw = saved.read_bytes()
    saved.write_bytes(raw + b"\x00\x00\x00\x00")  # extra payload bytes
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(saved)
