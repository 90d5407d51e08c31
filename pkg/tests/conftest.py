import numpy as np
import pytest

from selfcal import assets
from selfcal.harness import load_eval_windows
from selfcal.tiny_lm import (
    ModelCheckpoint,
    ModelConfig,
    TrainConfig,
    init_model,
    load_checkpoint,
    train,
)
from selfcal.tiny_lm.tokenizer import ByteTokenizer


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(
        layers=1, heads=2, model_dim=16, ffn_dim=32, context_len=16, vocab_size=11
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=3)


@pytest.fixture(scope="session")
def small_model():
    """A lightly trained small model: cheap, but with real structure."""
    config = ModelConfig(
        layers=2, heads=2, model_dim=32, ffn_dim=64, context_len=64
    )
    tokens = ByteTokenizer().encode(assets.corpus_path().read_bytes())[:200_000]
    return train(
        init_model(config, seed=0),
        tokens,
        TrainConfig(steps=120, batch_size=4, learning_rate=1e-3, seed=0),
    )


@pytest.fixture(scope="session")
def bundled_model() -> ModelCheckpoint:
    path = assets.bundled_model_path()
    if not path.exists():
        pytest.skip("bundled checkpoint missing; run tools/train_bundled_model.py")
    return load_checkpoint(path)


@pytest.fixture(scope="session")
def eval_windows():
    return load_eval_windows(assets.heldout_path(), num=16, length=256)


def constant_token_model(token: int, vocab: int = 11) -> ModelCheckpoint:
    """Zero-layer untied model whose argmax is ``token`` for any context."""
    config = ModelConfig(
        layers=0, heads=1, model_dim=4, ffn_dim=4, context_len=16,
        vocab_size=vocab, tie_output=False,
    )
    tensors = {
        name: np.zeros(config.tensor_shape(name), dtype=np.float32)
        for name in config.tensor_names()
    }
    tensors["ln_f.g"][:] = 1.0
    tensors["tok_emb"][:, 0] = 1.0  # every context maps to the same hidden state
    hidden = np.array([1.0, -1.0 / 3, -1.0 / 3, -1.0 / 3], dtype=np.float32)
    hidden /= np.sqrt((hidden**2).mean() + 1e-5)
    tensors["lm_head"][token] = hidden
    return ModelCheckpoint(config, tensors)
