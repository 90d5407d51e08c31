import math

import numpy as np
import pytest

from selfcal.errors import ContractViolation
from selfcal.tiny_lm import (
    ModelCheckpoint,
    ModelConfig,
    forward_logits,
    init_model,
    loss_and_grads,
    perplexity,
    sequence_logits,
)
from selfcal.tiny_lm.model import (
    _loss_and_grads_from_params,
    _stack_batch,
    loss_from_params,
)

from conftest import constant_token_model


def _reference_forward(model, ids):
    """Independent re-implementation: per-position loops, math-module ops."""
    cfg = model.config
    p = {k: v.astype(np.float64) for k, v in model.tensors.items()}
    t = len(ids)
    hd = cfg.head_dim

    def ln(vec, g, b):
        mu = sum(vec) / len(vec)
        var = sum((x - mu) ** 2 for x in vec) / len(vec)
        inv = 1.0 / math.sqrt(var + 1e-5)
        return np.array([g[i] * (vec[i] - mu) * inv + b[i] for i in range(len(vec))])

    h = [p["tok_emb"][tok] + p["pos_emb"][pos] for pos, tok in enumerate(ids)]
    for li in range(cfg.layers):
        pre = f"blocks.{li}"
        a = [ln(h[i], p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"]) for i in range(t)]
        q = [p[f"{pre}.attn.wq"] @ a[i] for i in range(t)]
        k = [p[f"{pre}.attn.wk"] @ a[i] for i in range(t)]
        v = [p[f"{pre}.attn.wv"] @ a[i] for i in range(t)]
        ctx = []
        for i in range(t):
            heads = []
            for hh in range(cfg.heads):
                s = slice(hh * hd, (hh + 1) * hd)
                scores = [float(q[i][s] @ k[j][s]) / math.sqrt(hd) for j in range(i + 1)]
                mx = max(scores)
                ws = [math.exp(x - mx) for x in scores]
                z = sum(ws)
                heads.append(sum((w / z) * v[j][s] for j, w in enumerate(ws)))
            ctx.append(np.concatenate(heads))
        h = [h[i] + p[f"{pre}.attn.wo"] @ ctx[i] for i in range(t)]
        a2 = [ln(h[i], p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"]) for i in range(t)]
        for i in range(t):
            z = p[f"{pre}.ffn.w_in"] @ a2[i]
            gz = np.array([x * 0.5 * (1 + math.erf(x / math.sqrt(2))) for x in z])
            h[i] = h[i] + p[f"{pre}.ffn.w_out"] @ gz
    hf = [ln(h[i], p["ln_f.g"], p["ln_f.b"]) for i in range(t)]
    head = p["tok_emb"] if cfg.tie_output else p["lm_head"]
    return np.stack([head @ hf[i] for i in range(t)])


def _uniform_model(vocab=11):
    config = ModelConfig(
        layers=1, heads=2, model_dim=8, ffn_dim=16, context_len=12, vocab_size=vocab
    )
    tensors = {
        name: np.zeros(config.tensor_shape(name), dtype=np.float32)
        for name in config.tensor_names()
    }
    for name in tensors:
        if name.endswith(".g"):
            tensors[name][:] = 1.0
    return ModelCheckpoint(config, tensors)


class TestForward:
    def test_constructed_model_forces_argmax(self):
        model = constant_token_model(token=4)
        for context in ([0], [1, 2, 3], [9, 9, 9, 9]):
            assert int(np.argmax(forward_logits(model, context))) == 4

    def test_deterministic(self, tiny_model):
        ctx = [1, 2, 3, 4]
        np.testing.assert_array_equal(
            forward_logits(tiny_model, ctx), forward_logits(tiny_model, ctx)
        )

    def test_matches_reference_implementation(self, tiny_model):
        ids = np.random.default_rng(0).integers(0, 11, size=9)
        ours = sequence_logits(tiny_model, ids)
        ref = _reference_forward(tiny_model, ids.tolist())
        np.testing.assert_allclose(ours, ref, atol=1e-10)

    def test_context_too_long(self, tiny_model):
        with pytest.raises(ContractViolation):
            forward_logits(tiny_model, list(range(17)))
        with pytest.raises(ContractViolation):
            forward_logits(tiny_model, [])

    def test_position_causal(self, tiny_model):
        rng = np.random.default_rng(1)
        ids = rng.integers(0, 11, size=12)
        base = sequence_logits(tiny_model, ids)
        for j in (4, 8, 11):
            mutated = ids.copy()
            mutated[j] = (mutated[j] + 3) % 11
            changed = sequence_logits(tiny_model, mutated)
            np.testing.assert_array_equal(changed[:j], base[:j])
            assert not np.array_equal(changed[j], base[j])


class TestLossAndGrads:
    def test_uniform_logits_loss_is_log_vocab(self):
        model = _uniform_model(vocab=11)
        batch = [np.random.default_rng(0).integers(0, 11, size=8)]
        loss, _ = loss_and_grads(model, batch)
        assert abs(loss - math.log(11)) < 1e-12

    def test_duplicating_batch_keeps_loss_identical(self, tiny_model):
        rng = np.random.default_rng(2)
        batch = [rng.integers(0, 11, size=9), rng.integers(0, 11, size=5)]
        loss_once, _ = loss_and_grads(tiny_model, batch)
        loss_twice, _ = loss_and_grads(tiny_model, batch + batch)
        assert loss_once == loss_twice

    def test_gradients_cover_every_tensor(self, tiny_model):
        batch = [np.random.default_rng(3).integers(0, 11, size=8)]
        _, grads = loss_and_grads(tiny_model, batch)
        assert sorted(grads) == sorted(tiny_model.config.tensor_names())
        assert all(np.isfinite(g).all() for g in grads.values())

    def test_spot_check_against_finite_differences(self, tiny_model):
        cfg = tiny_model.config
        rng = np.random.default_rng(4)
        ids, targets, mask = _stack_batch(
            cfg, [rng.integers(0, 11, size=10)], pad_id=10
        )
        p = {k: v.astype(np.float64) for k, v in tiny_model.tensors.items()}
        _, grads = _loss_and_grads_from_params(p, cfg, ids, targets, mask)
        h = 1e-5
        for name, index in [("blocks.0.attn.wq", (3, 5)), ("tok_emb", (7, 2))]:
            pp = {k: v.copy() for k, v in p.items()}
            pp[name][index] += h
            up = loss_from_params(pp, cfg, ids, targets, mask)
            pp[name][index] -= 2 * h
            down = loss_from_params(pp, cfg, ids, targets, mask)
            fd = (up - down) / (2 * h)
            assert abs(fd - grads[name][index]) / max(abs(fd), 1e-12) < 1e-4

    def test_preconditions(self, tiny_model):
        with pytest.raises(ContractViolation):
            loss_and_grads(tiny_model, [])
        with pytest.raises(ContractViolation):
            loss_and_grads(tiny_model, [[3]])


class TestPerplexity:
    def test_uniform_model_gives_vocab_size(self):
        model = _uniform_model(vocab=11)
        data = [np.random.default_rng(0).integers(0, 11, size=10) for _ in range(3)]
        assert abs(perplexity(model, data) - 11.0) < 1e-9

    def test_near_oracle_model_gives_one(self):
        model = constant_token_model(token=4)
        model.tensors["lm_head"] *= 400.0  # saturate the softmax
        data = [np.full(12, 4)]
        assert abs(perplexity(model, data) - 1.0) < 1e-9

    def test_matches_independent_nll_accumulation(self, tiny_model):
        rng = np.random.default_rng(5)
        data = [rng.integers(0, 11, size=n) for n in (9, 12, 7)]
        ppls = []
        for seq in data:
            logits = sequence_logits(tiny_model, seq[:-1])
            total = 0.0
            for pos in range(len(seq) - 1):
                row = logits[pos] - logits[pos].max()
                probs = np.exp(row) / np.exp(row).sum()
                total += -math.log(probs[seq[pos + 1]])
            ppls.append(math.exp(total / (len(seq) - 1)))
        expected = float(np.mean(ppls))
        assert abs(perplexity(tiny_model, data) - expected) < 1e-9

    def test_long_sequences_are_windowed(self, tiny_model):
        seq = np.random.default_rng(6).integers(0, 11, size=40)  # > context_len
        value = perplexity(tiny_model, [seq])
        assert np.isfinite(value) and value > 1.0


class TestTraining:
    def test_zero_steps_returns_same_weights(self):
        from selfcal.tiny_lm import TrainConfig, train

        model = init_model(
            ModelConfig(layers=1, heads=2, model_dim=8, ffn_dim=16,
                        context_len=16),
            seed=1,
        )
        corpus = np.random.default_rng(0).integers(0, 256, size=400)
        out = train(model, corpus, TrainConfig(steps=0, seed=1))
        for name, tensor in model.tensors.items():
            np.testing.assert_array_equal(out.tensors[name], tensor)

    def test_fixed_seed_is_bit_reproducible(self):
        from selfcal.tiny_lm import TrainConfig, train

        model = init_model(
            ModelConfig(layers=1, heads=2, model_dim=8, ffn_dim=16,
                        context_len=16),
            seed=2,
        )
        corpus = np.random.default_rng(0).integers(0, 256, size=400)
        cfg = TrainConfig(steps=5, batch_size=2, seed=9)
        a = train(model, corpus, cfg)
        b = train(model, corpus, cfg)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_corpus_too_small(self, tiny_model):
        from selfcal.errors import CorpusTooSmallError
        from selfcal.tiny_lm import TrainConfig, train

        with pytest.raises(CorpusTooSmallError):
            train(tiny_model, np.arange(4), TrainConfig(steps=1))

    def test_training_reduces_heldout_perplexity(self, small_model, eval_windows):
        untrained = init_model(small_model.config, seed=0)
        data = [w[:65] for w in eval_windows[:4]]
        assert perplexity(small_model, data) < perplexity(untrained, data)
