import numpy as np
import pytest

from euatlab import nn, rng
from oracles import fd_param_grads, flatten_grads, max_rel_error, naive_forward


def tiny_model(seed=0, sizes=(3, 5, 4, 2), dropout=0.0):
    return nn.MlpModel.init(list(sizes), dropout_rate=dropout, seed=seed)


class TestForward:
    def test_identity_single_layer(self):
        model = nn.MlpModel(
            [nn.DenseLayer(np.eye(2), np.zeros(2), "identity")], dropout_rate=0.0
        )
        logits, _ = nn.forward(model, np.array([[1.0, 2.0]]))
        assert np.array_equal(logits, np.array([[1.0, 2.0]]))

    def test_all_keep_mask_scales_activations(self):
        # inverted dropout: an all-keep mask at p=0.5 multiplies hidden
        # activations by 2, and a linear head doubles with them
        gen = np.random.default_rng(7)
        model = nn.MlpModel(
            [
                nn.DenseLayer(gen.normal(size=(4, 3)), gen.normal(size=4), "relu"),
                nn.DenseLayer(gen.normal(size=(2, 4)), np.zeros(2), "identity"),
            ],
            dropout_rate=0.5,
        )
        x = gen.normal(size=(5, 3))
        plain, _ = nn.forward(model, x)
        mask = nn.DropoutMask([np.full(4, 2.0)], seed=0)
        scaled, _ = nn.forward(model, x, mask)
        assert np.allclose(scaled, 2.0 * plain, rtol=0, atol=1e-12)

    def test_matches_naive_matmul_oracle(self):
        model = tiny_model(seed=3)
        x = np.random.default_rng(11).normal(size=(6, 3))
        logits, _ = nn.forward(model, x)
        assert np.max(np.abs(logits - naive_forward(model, x))) < 1e-12

    def test_masked_matches_naive_oracle(self):
        model = tiny_model(seed=4, dropout=0.4)
        mask = nn.sample_mask(model, seed=9)
        x = np.random.default_rng(12).normal(size=(4, 3))
        logits, _ = nn.forward(model, x, mask)
        assert np.max(np.abs(logits - naive_forward(model, x, mask))) < 1e-12

    def test_shape_mismatch_reports_dimensions(self):
        model = tiny_model()
        with pytest.raises(nn.EngineError, match="4 features"):
            nn.forward(model, np.zeros((2, 4)))

    def test_eval_mode_is_deterministic(self):
        model = tiny_model(seed=5)
        x = np.random.default_rng(0).normal(size=(3, 3))
        a, _ = nn.forward(model, x)
        b, _ = nn.forward(model, x)
        assert np.array_equal(a, b)


class TestSoftmax:
    def test_symmetry(self):
        assert np.allclose(nn.softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_shift_invariance(self):
        for c in (-3.0, 0.0, 17.5):
            assert np.allclose(nn.softmax(np.full(4, c)), 0.25, atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        p = nn.softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0)
        assert p[1] == pytest.approx(0.0, abs=1e-300)

    def test_rows_sum_to_one(self):
        z = np.random.default_rng(2).normal(scale=5.0, size=(50, 7))
        sums = nn.softmax(z).sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) < 1e-12


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        model = tiny_model(seed=6)
        x = np.random.default_rng(1).normal(size=(4, 3))
        _, cache = nn.forward(model, x)
        grads, xgrad = nn.backward(cache, np.zeros((4, 2)))
        for gw, gb in grads:
            assert not gw.any() and not gb.any()
        assert not xgrad.any()

    def test_linear_layer_weight_gradient(self):
        # y = Wx, upstream g: dL/dW = g^T x
        w = np.random.default_rng(3).normal(size=(2, 3))
        model = nn.MlpModel([nn.DenseLayer(w, np.zeros(2), "identity")], 0.0)
        x = np.random.default_rng(4).normal(size=(5, 3))
        g = np.random.default_rng(5).normal(size=(5, 2))
        _, cache = nn.forward(model, x)
        grads, _ = nn.backward(cache, g)
        assert np.allclose(grads[0][0], g.T @ x, atol=1e-12)
        assert np.allclose(grads[0][1], g.sum(axis=0), atol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_finite_differences(self, seed):
        model = tiny_model(seed=seed)
        gen = np.random.default_rng(100 + seed)
        x = gen.normal(size=(4, 3))
        w_out = gen.normal(size=(4, 2))

        def loss(m):
            logits, _ = nn.forward(m, x)
            return float((logits * w_out).sum())

        logits, cache = nn.forward(model, x)
        analytic, _ = nn.backward(cache, w_out)
        numeric = fd_param_grads(loss, model)
        assert max_rel_error(flatten_grads(analytic), numeric) < 1e-4

    def test_masked_backward_matches_finite_differences(self):
        model = tiny_model(seed=8, dropout=0.3)
        mask = nn.sample_mask(model, seed=21)
        gen = np.random.default_rng(42)
        x = gen.normal(size=(3, 3))
        w_out = gen.normal(size=(3, 2))

        def loss(m):
            logits, _ = nn.forward(m, x, mask)
            return float((logits * w_out).sum())

        _, cache = nn.forward(model, x, mask)
        analytic, _ = nn.backward(cache, w_out)
        numeric = fd_param_grads(loss, model)
        assert max_rel_error(flatten_grads(analytic), numeric) < 1e-4

    def test_stale_cache_rejected(self):
        model = tiny_model(seed=9)
        x = np.random.default_rng(6).normal(size=(2, 3))
        _, cache = nn.forward(model, x)
        state = nn.OptimizerState.for_model(model, lr=0.1)
        zero = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers]
        assert nn.sgd_step(model, zero, state)
        with pytest.raises(nn.EngineError, match="stale"):
            nn.backward(cache, np.zeros((2, 2)))

    def test_mismatched_upstream_rejected(self):
        model = tiny_model(seed=9)
        _, cache = nn.forward(model, np.zeros((2, 3)))
        with pytest.raises(nn.EngineError, match="shape"):
            nn.backward(cache, np.zeros((2, 5)))


class TestSgd:
    def rand_grads(self, model, seed=0):
        gen = np.random.default_rng(seed)
        return [
            (gen.normal(size=l.weights.shape), gen.normal(size=l.bias.shape))
            for l in model.layers
        ]

    def test_zero_lr_leaves_parameters_unchanged(self):
        model = tiny_model(seed=10)
        before = model.copy()
        state = nn.OptimizerState.for_model(model, lr=0.0, momentum=0.9)
        assert nn.sgd_step(model, self.rand_grads(model), state)
        assert model.parameters_equal(before)

    def test_plain_sgd_exact(self):
        model = tiny_model(seed=11)
        before = model.copy()
        grads = self.rand_grads(model, seed=1)
        state = nn.OptimizerState.for_model(model, lr=0.05, momentum=0.0)
        nn.sgd_step(model, grads, state)
        for (gw, gb), old, new in zip(grads, before.layers, model.layers):
            assert np.array_equal(new.weights, old.weights - 0.05 * gw)
            assert np.array_equal(new.bias, old.bias - 0.05 * gb)

    def test_two_momentum_steps_on_constant_grad(self):
        # v1 = g, v2 = 0.9 g + g: total displacement -lr (g + 1.9 g)
        model = tiny_model(seed=12)
        before = model.copy()
        grads = self.rand_grads(model, seed=2)
        state = nn.OptimizerState.for_model(model, lr=0.1, momentum=0.9)
        nn.sgd_step(model, grads, state)
        nn.sgd_step(model, grads, state)
        for (gw, _), old, new in zip(grads, before.layers, model.layers):
            assert np.allclose(new.weights, old.weights - 0.1 * 2.9 * gw, atol=1e-12)

    def test_weight_decay_folded_into_gradient(self):
        model = tiny_model(seed=13)
        before = model.copy()
        zero = [(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers]
        state = nn.OptimizerState.for_model(model, lr=0.1, momentum=0.0, weight_decay=0.01)
        nn.sgd_step(model, zero, state)
        for old, new in zip(before.layers, model.layers):
            assert np.allclose(new.weights, old.weights * (1 - 0.1 * 0.01), atol=1e-15)

    def test_non_finite_gradient_refused(self):
        model = tiny_model(seed=14)
        before = model.copy()
        grads = self.rand_grads(model)
        grads[0][0][0, 0] = np.nan
        state = nn.OptimizerState.for_model(model, lr=0.1)
        assert not nn.sgd_step(model, grads, state)
        assert model.parameters_equal(before)
        assert model.version == before.version


class TestDropoutMask:
    def test_zero_rate_gives_all_keep_scale_one(self):
        model = tiny_model(seed=15, dropout=0.0)
        mask = nn.sample_mask(model, seed=3)
        for scale in mask.scales:
            assert np.array_equal(scale, np.ones_like(scale))

    def test_same_seed_is_bit_identical(self):
        model = tiny_model(seed=16, dropout=0.3)
        a = nn.sample_mask(model, seed=999)
        b = nn.sample_mask(model, seed=999)
        for sa, sb in zip(a.scales, b.scales):
            assert np.array_equal(sa, sb)

    def test_entries_are_zero_or_inverse_keep(self):
        model = tiny_model(seed=17, dropout=0.25)
        mask = nn.sample_mask(model, seed=5)
        allowed = {0.0, 1.0 / 0.75}
        for scale in mask.scales:
            assert set(np.unique(scale)) <= allowed

    def test_empirical_keep_rate(self):
        model = nn.MlpModel.init([1, 100_000, 2], dropout_rate=0.3, seed=18)
        mask = nn.sample_mask(model, seed=7)
        keep_rate = np.mean(mask.scales[0] > 0)
        assert abs(keep_rate - 0.7) < 0.01

    def test_mask_shape_validated(self):
        model = tiny_model(seed=19, dropout=0.3)
        bad = nn.DropoutMask([np.ones(2)], seed=0)
        with pytest.raises(nn.EngineError):
            nn.forward(model, np.zeros((1, 3)), bad)


def test_mask_average_converges_to_plain_pass_on_linear_net():
    # with identity activations the network is linear in the masked
    # activations, so the mask average must approach the no-mask pass
    gen = np.random.default_rng(31)
    model = nn.MlpModel(
        [
            nn.DenseLayer(gen.normal(size=(8, 3)), gen.normal(size=8), "identity"),
            nn.DenseLayer(gen.normal(size=(2, 8)), gen.normal(size=2), "identity"),
        ],
        dropout_rate=0.3,
    )
    x = gen.normal(size=(1, 3))
    plain, _ = nn.forward(model, x)
    draws = np.array(
        [nn.forward(model, x, nn.sample_mask(model, rng.derive_seed(0, i)))[0][0]
         for i in range(4000)]
    )
    mc_err = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - plain[0]) < 3.0 * mc_err + 1e-12)


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = tiny_model(seed=20, dropout=0.3)
        path = tmp_path / "model.json"
        nn.save_checkpoint(model, path, seed=123)
        loaded = nn.load_checkpoint(path)
        assert loaded.parameters_equal(model)
        assert loaded.dropout_rate == model.dropout_rate
        assert [l.activation for l in loaded.layers] == [
            l.activation for l in model.layers
        ]

    def test_rejects_unknown_version(self, tmp_path):
        path = tmp_path / "model.json"
        path.write_text('{"format_version": 99, "kind": "mlp"}')
        with pytest.raises(nn.EngineError):
            nn.load_checkpoint(path)


class TestValidation:
    def test_dropout_rate_bounds(self):
        with pytest.raises(nn.EngineError):
            nn.MlpModel.init([2, 3, 2], dropout_rate=1.0)

    def test_layer_widths_must_chain(self):
        layers = [
            nn.DenseLayer(np.zeros((4, 2)), np.zeros(4), "relu"),
            nn.DenseLayer(np.zeros((2, 3)), np.zeros(2), "identity"),
        ]
        with pytest.raises(nn.EngineError, match="chain"):
            nn.MlpModel(layers, 0.0)
