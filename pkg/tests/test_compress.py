import numpy as np
import pytest

from selfcal.calibration import CalibrationSet, CalibrationSpec, build_calibration_set
from selfcal.compress import (
    CompressionConfig,
    aws_quantize,
    capture_layer_inputs,
    compress_model,
    gptq_quantize,
    reconstruction_error,
    rtn_quantize,
    sparsegpt_prune,
    target_layer_names,
    wanda_prune,
)
from selfcal.errors import ContractViolation, DecompositionError
from selfcal.tiny_lm.model import _layernorm


def _correlated_instance(seed, d_out=16, d_in=32, tokens=300):
    rng = np.random.default_rng(seed)
    mix = np.eye(d_in) + 0.4 * rng.standard_normal((d_in, d_in))
    x = rng.standard_normal((tokens, d_in)) @ mix
    h = x.T @ x
    w = rng.standard_normal((d_out, d_in))
    return w, h, x


def _calib_from_rows(rows):
    rows = np.asarray(rows)
    spec = CalibrationSpec(source="corpus", num_examples=rows.shape[0],
                           example_len=rows.shape[1], seed=0)
    return CalibrationSet(spec, rows)


class TestWanda:
    def test_magnitude_order_with_unit_norms(self):
        res = wanda_prune(np.array([[1.0, -2.0, 3.0, -4.0]]), np.ones(4))
        np.testing.assert_array_equal(res.weight, [[0.0, 0.0, 3.0, -4.0]])

    def test_activation_norms_change_selection(self):
        res = wanda_prune(
            np.array([[1.0, -2.0, 3.0, -4.0]]), np.array([10.0, 10.0, 0.1, 0.1])
        )
        np.testing.assert_array_equal(res.weight, [[1.0, -2.0, 0.0, 0.0]])

    def test_kept_pair_is_best_of_all_choices(self):
        rng = np.random.default_rng(8)
        w = rng.standard_normal((8, 16))
        norms = np.abs(rng.standard_normal(16)) + 0.1
        res = wanda_prune(w, norms)
        scores = np.abs(w) * norms
        from itertools import combinations

        for row in range(8):
            for g in range(0, 16, 4):
                kept = {j for j in range(4) if not res.mask[row, g + j]}
                best = max(combinations(range(4), 2),
                           key=lambda pair: sum(scores[row, g + j] for j in pair))
                assert kept == set(best)

    def test_ties_prune_lower_index_first(self):
        res = wanda_prune(np.array([[1.0, 1.0, 1.0, 1.0]]), np.ones(4))
        np.testing.assert_array_equal(res.mask, [[True, True, False, False]])

    def test_dimension_contract(self):
        with pytest.raises(ContractViolation):
            wanda_prune(np.ones((2, 6)), np.ones(6))


class TestSparseGpt:
    def test_identity_hessian_reduces_to_magnitude_pruning(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((4, 8))
        cfg = CompressionConfig(method="sparsegpt", dampening=0.0)
        res = sparsegpt_prune(w, np.eye(8), cfg)
        magnitude = wanda_prune(w, np.ones(8))
        np.testing.assert_array_equal(res.weight, magnitude.weight)
        assert res.error == pytest.approx(float((w[res.mask] ** 2).sum()), rel=1e-12)

    def test_two_column_closed_form(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((40, 2))
        h = x.T @ x
        w = np.array([[1.5, -0.7]])
        mask = np.array([[True, False]])
        cfg = CompressionConfig(method="sparsegpt", dampening=0.0)
        res = sparsegpt_prune(w, h, cfg, mask=mask)
        # least-squares refit of the surviving column
        refit = float(x[:, 1] @ (x @ w[0]) / (x[:, 1] @ x[:, 1]))
        assert res.weight[0, 0] == 0.0
        assert res.weight[0, 1] == pytest.approx(refit, rel=1e-10)
        hinv = np.linalg.inv(h)
        assert res.error == pytest.approx(float(w[0, 0] ** 2 / hinv[0, 0]), rel=1e-9)

    def test_beats_wanda_on_correlated_activations(self):
        w, h, _ = _correlated_instance(seed=21, d_out=8, d_in=16)
        cfg = CompressionConfig(method="sparsegpt")
        sg = sparsegpt_prune(w, h, cfg)
        wd = wanda_prune(w, np.sqrt(np.diag(h)))
        assert sg.error <= reconstruction_error(wd.weight - w, h)

    def test_exact_sparsity(self):
        w, h, _ = _correlated_instance(seed=22, d_out=8, d_in=16)
        res = sparsegpt_prune(w, h, CompressionConfig(method="sparsegpt"))
        assert res.mask.mean() == 0.5
        quads = (res.weight.reshape(8, 4, 4) == 0).sum(axis=2)
        assert (quads >= 2).all()

    def test_singular_hessian_raises_after_retries(self):
        with pytest.raises(DecompositionError):
            sparsegpt_prune(np.ones((2, 4)), np.zeros((4, 4)),
                            CompressionConfig(method="sparsegpt"))

    def test_dampening_rescues_rank_deficient_hessian(self):
        x = np.random.default_rng(5).standard_normal((2, 8))  # rank 2 < 8
        h = x.T @ x
        res = sparsegpt_prune(np.ones((3, 8)), h,
                              CompressionConfig(method="sparsegpt"))
        assert np.isfinite(res.weight).all()


class TestGptq:
    def test_constant_row_is_exact(self):
        w = np.full((2, 8), 3.5)  # scale 0.5, all values on the grid
        res = gptq_quantize(w, np.eye(8), CompressionConfig(method="gptq"))
        np.testing.assert_array_equal(res.weight, w)
        assert res.error == 0.0

    def test_grid_membership(self):
        w, h, _ = _correlated_instance(seed=30)
        cfg = CompressionConfig(method="gptq")
        res = gptq_quantize(w, h, cfg)
        s = res.scales[:, res.col_group]
        q = np.round(res.weight / s)
        assert np.abs(q).max() <= cfg.qmax
        np.testing.assert_array_equal(res.weight, s * q)

    def test_beats_rtn_on_average(self):
        gptq_errors, rtn_errors = [], []
        for seed in range(10):
            w, h, _ = _correlated_instance(seed=100 + seed)
            cfg = CompressionConfig(method="gptq")
            gptq_errors.append(gptq_quantize(w, h, cfg).error)
            rtn_errors.append(
                reconstruction_error(rtn_quantize(w, cfg).weight - w, h)
            )
        assert np.mean(gptq_errors) <= np.mean(rtn_errors)

    def test_equal_diagonal_matches_unordered(self):
        rng = np.random.default_rng(31)
        corr = rng.standard_normal((32, 16))
        h = corr.T @ corr
        d = np.sqrt(np.diag(h))
        h = h / np.outer(d, d)
        np.fill_diagonal(h, 1.0)  # exactly equal -> stable sort keeps identity
        w = rng.standard_normal((4, 16))
        ordered = gptq_quantize(w, h, CompressionConfig(method="gptq"))
        plain = gptq_quantize(w, h, CompressionConfig(method="gptq",
                                                      desc_act_order=False))
        np.testing.assert_array_equal(ordered.weight, plain.weight)

    def test_groups_follow_activation_order(self):
        w, h, _ = _correlated_instance(seed=32, d_in=32)
        res = gptq_quantize(w, h, CompressionConfig(method="gptq", group_size=16))
        perm = np.argsort(-np.diag(h), kind="stable")
        np.testing.assert_array_equal(
            res.col_group[perm], np.arange(32) // 16
        )


class TestRtn:
    def test_zeros_stay_zero(self):
        cfg = CompressionConfig(method="rtn")
        np.testing.assert_array_equal(
            rtn_quantize(np.zeros((2, 6)), cfg).weight, np.zeros((2, 6))
        )

    def test_on_grid_row_unchanged(self):
        row = 0.5 * np.arange(-7, 8, dtype=np.float64)
        res = rtn_quantize(row[None, :], CompressionConfig(method="rtn"))
        np.testing.assert_array_equal(res.weight, row[None, :])

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(33)
        w = rng.standard_normal((3, 20))
        cfg = CompressionConfig(method="rtn", group_size=8)
        res = rtn_quantize(w, cfg)
        for r in range(3):
            for c in range(20):
                g0 = (c // 8) * 8
                s = np.abs(w[r, g0 : g0 + 8]).max() / 7
                q = min(7, max(-7, round(w[r, c] / s)))
                assert res.weight[r, c] == pytest.approx(s * q, rel=1e-15)


class TestAws:
    def test_equal_mean_abs_degenerates_to_rtn(self):
        rng = np.random.default_rng(34)
        w = rng.standard_normal((4, 12))
        cfg = CompressionConfig(method="aws", group_size=12)
        res = aws_quantize(w, np.full(12, 2.0), cfg)
        rtn = rtn_quantize(w, cfg)
        np.testing.assert_allclose(res.weight, rtn.weight, rtol=1e-12, atol=1e-14)

    def test_chosen_alpha_never_loses_to_rtn(self):
        for seed in range(5):
            w, h, x = _correlated_instance(seed=200 + seed, d_out=6, d_in=16)
            m = np.abs(x).mean(axis=0)
            cfg = CompressionConfig(method="aws", group_size=16)
            res = aws_quantize(w, m, cfg)
            rtn = rtn_quantize(w, cfg)
            rtn_objective = float(np.sum(((rtn.weight - w) * m[None, :]) ** 2))
            assert res.error <= rtn_objective

    def test_reported_error_matches_recomputation(self):
        w, h, x = _correlated_instance(seed=35, d_out=6, d_in=16)
        m = np.abs(x).mean(axis=0)
        res = aws_quantize(w, m, CompressionConfig(method="aws", group_size=16))
        recomputed = float(np.sum(((res.weight - w) * m[None, :]) ** 2))
        assert res.error == pytest.approx(recomputed, rel=1e-12)

    def test_zero_channels_get_unit_scale(self):
        rng = np.random.default_rng(36)
        w = rng.standard_normal((3, 8))
        m = np.array([0.0, 1.0, 2.0, 0.0, 3.0, 1.0, 0.5, 0.0])
        res = aws_quantize(w, m, CompressionConfig(method="aws", group_size=8))
        np.testing.assert_array_equal(res.channel_scale[m == 0], 1.0)

    def test_inner_rtn_grid_membership(self):
        w, h, x = _correlated_instance(seed=37, d_out=6, d_in=16)
        m = np.abs(x).mean(axis=0)
        cfg = CompressionConfig(method="aws", group_size=16)
        res = aws_quantize(w, m, cfg)
        inner = res.inner
        s = inner.scales[:, inner.col_group]
        q = np.round(inner.weight / s)
        assert np.abs(q).max() <= cfg.qmax
        np.testing.assert_array_equal(inner.weight, s * q)
        np.testing.assert_array_equal(res.weight, inner.weight * res.channel_scale)


class TestCapture:
    def test_identical_examples_scale_hessian_linearly(self, small_model):
        row = np.random.default_rng(40).integers(0, 256, size=32)
        single = _calib_from_rows([row])
        repeated = _calib_from_rows([row] * 5)
        cfg = CompressionConfig(method="wanda")
        h1 = capture_layer_inputs(small_model, single, cfg)
        h5 = capture_layer_inputs(small_model, repeated, cfg)
        for layer in target_layer_names(small_model.config):
            np.testing.assert_allclose(
                h5[layer].hessian, 5.0 * h1[layer].hessian, rtol=1e-12
            )
            assert h5[layer].token_count == 5 * h1[layer].token_count

    def test_col_norms_definition(self, small_model):
        calib = _calib_from_rows(
            np.random.default_rng(41).integers(0, 256, size=(3, 24))
        )
        stats = capture_layer_inputs(small_model, calib,
                                     CompressionConfig(method="wanda"))
        for s in stats.values():
            np.testing.assert_allclose(
                s.col_norms**2, np.diag(s.hessian), rtol=1e-6
            )

    def test_first_layer_hessian_matches_bruteforce(self, small_model):
        rows = np.random.default_rng(42).integers(0, 256, size=(2, 10))
        calib = _calib_from_rows(rows)
        stats = capture_layer_inputs(small_model, calib,
                                     CompressionConfig(method="wanda"))
        p = small_model.params64()
        h = np.zeros((32, 32))
        count = 0
        for row in rows:
            emb = p["tok_emb"][row] + p["pos_emb"][: row.size]
            a, _ = _layernorm(emb, p["blocks.0.ln1.g"], p["blocks.0.ln1.b"])
            for pos in range(row.size):
                h += np.outer(a[pos], a[pos])
                count += 1
        np.testing.assert_allclose(stats["blocks.0.attn.wq"].hessian, h, atol=1e-9)
        assert stats["blocks.0.attn.wq"].token_count == count

    def test_empty_set_rejected(self, small_model):
        spec = CalibrationSpec(source="corpus", num_examples=1, example_len=8, seed=0)
        calib = CalibrationSet(spec, np.zeros((1, 8), dtype=np.int64))
        calib.examples = calib.examples[:0]
        with pytest.raises(ContractViolation):
            capture_layer_inputs(small_model, calib, CompressionConfig(method="rtn"))


class TestCompressModel:
    @pytest.fixture(scope="class")
    def calib(self, small_model):
        spec = CalibrationSpec(source="random_vocab", num_examples=4,
                               example_len=48, seed=50)
        return build_calibration_set(spec)

    def test_rtn_ignores_calibration_contents(self, small_model):
        a = build_calibration_set(CalibrationSpec(
            source="random_vocab", num_examples=2, example_len=16, seed=1))
        b = build_calibration_set(CalibrationSpec(
            source="random_vocab", num_examples=2, example_len=16, seed=2))
        cfg = CompressionConfig(method="rtn")
        out_a, _ = compress_model(small_model, a, cfg)
        out_b, _ = compress_model(small_model, b, cfg)
        for name in out_a.tensors:
            np.testing.assert_array_equal(out_a.tensors[name], out_b.tensors[name])

    @pytest.mark.parametrize("method", ["wanda", "sparsegpt"])
    def test_pruning_leaves_every_target_layer_half_sparse(
        self, small_model, calib, method
    ):
        out, report = compress_model(small_model, calib,
                                     CompressionConfig(method=method))
        for name in target_layer_names(small_model.config):
            w = out.tensors[name]
            quads = (w.reshape(w.shape[0], -1, 4) == 0).sum(axis=2)
            assert (quads >= 2).all()
            assert (w == 0).mean() == 0.5
        assert all(l.sparsity == 0.5 for l in report.layers)

    def test_untargeted_tensors_untouched(self, small_model, calib):
        out, _ = compress_model(small_model, calib,
                                CompressionConfig(method="gptq"))
        targets = set(target_layer_names(small_model.config))
        for name, tensor in small_model.tensors.items():
            if name not in targets:
                np.testing.assert_array_equal(out.tensors[name], tensor)

    def test_deterministic(self, small_model, calib):
        cfg = CompressionConfig(method="sparsegpt")
        a, ra = compress_model(small_model, calib, cfg)
        b, rb = compress_model(small_model, calib, cfg)
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])
        assert ra.result_dict() == rb.result_dict()

    def test_non_sequential_capture_path(self, small_model, calib):
        cfg = CompressionConfig(method="gptq", true_sequential=False)
        out, report = compress_model(small_model, calib, cfg)
        assert len(report.layers) == len(target_layer_names(small_model.config))
        assert all(np.isfinite(l.recon_error) for l in report.layers)

    def test_report_contents(self, small_model, calib):
        _, report = compress_model(small_model, calib,
                                   CompressionConfig(method="gptq"))
        d = report.result_dict()
        assert d["method"] == "gptq"
        assert len(d["layers"]) == 12  # 2 blocks x 6 projections
        assert all(l["bits"] == 4 for l in d["layers"])
        assert "seconds" not in str(d)
        assert report.timing_dict()  # wall times live outside the result dict

    def test_compressed_model_still_evaluates(self, small_model, calib,
                                              eval_windows):
        from selfcal.tiny_lm import perplexity

        out, _ = compress_model(small_model, calib,
                                CompressionConfig(method="gptq"))
        data = [w[:65] for w in eval_windows[:2]]
        assert np.isfinite(perplexity(out, data))
