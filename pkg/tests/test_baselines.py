import math

import numpy as np
import pytest

from euatlab import baselines, data, nn, training, uncertainty
from oracles import isotonic_nnls


class TestIsotonicFit:
    def test_monotone_targets_interpolate(self):
        conf = np.array([0.1, 0.3, 0.6, 0.9])
        correct = np.array([0.0, 0.0, 1.0, 1.0])
        mapping = baselines.isotonic_fit(conf, correct)
        assert np.allclose(mapping(conf), correct, atol=1e-12)

    def test_single_violation_pools_to_half(self):
        mapping = baselines.isotonic_fit(np.array([0.2, 0.8]), np.array([1.0, 0.0]))
        assert np.allclose(mapping.levels, [0.5, 0.5], atol=1e-15)

    def test_matches_quadratic_program_oracle(self):
        gen = np.random.default_rng(0)
        for trial in range(10):
            conf = np.sort(gen.random(25))
            conf += np.arange(25) * 1e-9  # make breakpoints unique
            y = (gen.random(25) < conf).astype(float)
            mapping = baselines.isotonic_fit(conf, y)
            expected = isotonic_nnls(y)
            assert np.max(np.abs(mapping.levels - expected)) < 1e-6, f"trial {trial}"

    def test_duplicate_confidences_pool_targets(self):
        conf = np.array([0.5, 0.5, 0.9, 0.9])
        y = np.array([0.0, 1.0, 1.0, 1.0])
        mapping = baselines.isotonic_fit(conf, y)
        assert np.allclose(mapping.breakpoints, [0.5, 0.9])
        assert np.allclose(mapping.levels, [0.5, 1.0])

    def test_non_decreasing_on_dense_grid(self):
        gen = np.random.default_rng(1)
        conf = gen.random(60)
        y = (gen.random(60) < 0.5).astype(float)
        mapping = baselines.isotonic_fit(conf, y)
        grid = np.linspace(0.0, 1.0, 1000)
        values = mapping(grid)
        assert np.all(np.diff(values) >= -1e-15)
        assert values.min() >= 0.0 and values.max() <= 1.0

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            baselines.isotonic_fit(np.array([0.5]), np.array([1.0]))


class TestIsotonicApply:
    def identity_map(self):
        return baselines.IsotonicMap(np.array([0.0, 1.0]), np.array([0.0, 1.0]))

    def test_identity_map_leaves_distribution_unchanged(self):
        probs = np.array([0.7, 0.2, 0.1])
        out = baselines.isotonic_apply(self.identity_map(), probs)
        assert np.array_equal(out, probs)

    def test_flat_half_map_on_binary(self):
        mapping = baselines.IsotonicMap(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
        out = baselines.isotonic_apply(mapping, np.array([0.9, 0.1]))
        assert np.allclose(out, [0.5, 0.5], atol=1e-12)
        assert out[0] >= out[1]  # argmax preserved through the tie

    def test_hand_rescaled_three_class_case(self):
        mapping = baselines.IsotonicMap(np.array([0.0, 1.0]), np.array([-0.2, 0.8]))
        # maps 0.8 -> 0.6; remaining classes scale by (1-0.6)/(1-0.8) = 2
        out = baselines.isotonic_apply(mapping, np.array([0.8, 0.15, 0.05]))
        assert np.allclose(out, [0.6, 0.3, 0.1], atol=1e-12)

    def test_argmax_preserved_under_strictly_increasing_maps(self):
        gen = np.random.default_rng(2)
        # include strongly deflating maps, which would dethrone the top
        # class under plain rescaling
        maps = [
            baselines.IsotonicMap(np.array([0.0, 1.0]), np.array([0.0, 0.3])),
            baselines.IsotonicMap(
                np.array([0.0, 0.4, 1.0]), np.array([0.05, 0.1, 0.9])
            ),
            self.identity_map(),
        ]
        for mapping in maps:
            assert mapping.strictly_increasing
            for _ in range(50):
                probs = gen.dirichlet(np.ones(4))
                out = baselines.isotonic_apply(mapping, probs)
                assert int(np.argmax(out)) == int(np.argmax(probs))
                assert out.sum() == pytest.approx(1.0, abs=1e-12)
                assert np.all(out >= 0.0)

    def test_batch_apply(self):
        probs = np.random.default_rng(3).dirichlet(np.ones(3), size=8)
        out = baselines.isotonic_apply(self.identity_map(), probs)
        assert out.shape == probs.shape


def small_schedule(**kw):
    defaults = dict(pretrain_epochs=4, euat_epochs=2, pretrain_lr=0.1, batch_size=32)
    defaults.update(kw)
    return training.TrainingSchedule(**defaults)


class TestEnsemble:
    def setup_data(self, seed=0):
        ds = data.generate_dataset("gaussian_blobs", 240, 0.08, seed=seed)
        return ds

    def test_single_member_matches_ce_baseline(self):
        ds = self.setup_data()
        schedule = small_schedule()
        seed = 42
        template = nn.MlpModel.init([2, 8, 2], 0.3, seed=seed)
        ens, _ = baselines.ensemble_train(
            template, *ds.train, *ds.validation, schedule, n_members=1, seeds=[seed]
        )
        ce = baselines.train_ce(
            nn.MlpModel.init([2, 8, 2], 0.3, seed=seed),
            *ds.train, *ds.validation, schedule, seed=seed,
        )
        assert ens.members[0].parameters_equal(ce.model)

    def test_identical_seeds_give_identical_members(self):
        ds = self.setup_data(seed=1)
        template = nn.MlpModel.init([2, 8, 2], 0.3, seed=0)
        ens, _ = baselines.ensemble_train(
            template, *ds.train, *ds.validation, small_schedule(),
            n_members=3, seeds=[7, 7, 7],
        )
        assert ens.members[0].parameters_equal(ens.members[1])
        assert ens.members[0].parameters_equal(ens.members[2])
        x = ds.test[0][:5]
        single = baselines.ensemble_probs(baselines.Ensemble([ens.members[0]], [7]), x)
        combined = baselines.ensemble_probs(ens, x)
        assert np.allclose(combined, single, atol=1e-15)

    def test_prediction_is_hand_averaged_member_mean(self):
        members = [nn.MlpModel.init([2, 6, 3], 0.0, seed=s) for s in (1, 2, 3)]
        ens = baselines.Ensemble(members, [1, 2, 3])
        x = np.random.default_rng(4).random((7, 2))
        expected = np.zeros((7, 3))
        for m in members:
            logits, _ = nn.forward(m, x)
            expected += nn.softmax(logits)
        expected /= 3.0
        dist = baselines.ensemble_predict(ens, x)
        assert np.max(np.abs(dist.probs - expected)) < 1e-12
        assert dist.sample_count == 3

    def test_two_opposed_members_give_uniform(self):
        a = nn.MlpModel([nn.DenseLayer(np.zeros((2, 1)), np.array([40.0, 0.0]), "identity")], 0.0)
        b = nn.MlpModel([nn.DenseLayer(np.zeros((2, 1)), np.array([0.0, 40.0]), "identity")], 0.0)
        dist = baselines.ensemble_predict(baselines.Ensemble([a, b], [0, 1]), np.zeros((1, 1)))
        assert np.allclose(dist.probs, [[0.5, 0.5]], atol=1e-12)
        assert uncertainty.predictive_entropy(dist)[0] == pytest.approx(math.log(2.0))

    def test_ensemble_entropy_jensen(self):
        members = [nn.MlpModel.init([2, 6, 4], 0.0, seed=s) for s in (5, 6, 7)]
        ens = baselines.Ensemble(members, [5, 6, 7])
        x = np.random.default_rng(8).random((20, 2))
        dist = baselines.ensemble_predict(ens, x)
        h_mean = uncertainty.entropy(dist.probs)
        mean_h = uncertainty.entropy(dist.per_sample_probs).mean(axis=0)
        assert np.all(h_mean >= mean_h - 1e-12)

    def test_empty_ensemble_rejected(self):
        with pytest.raises(ValueError):
            baselines.Ensemble([], [])

    def test_budget_split_across_members(self):
        ds = self.setup_data(seed=2)
        schedule = small_schedule(pretrain_epochs=6, euat_epochs=6)
        template = nn.MlpModel.init([2, 8, 2], 0.3, seed=0)
        _, outcomes = baselines.ensemble_train(
            template, *ds.train, *ds.validation, schedule, n_members=3,
            seeds=[1, 2, 3],
        )
        for out in outcomes:
            assert len(out.loss_trajectory) == 4  # 12 total epochs / 3 members


class TestCeFamily:
    def test_lambda_zero_reproduces_ce_bit_exactly(self):
        ds = data.generate_dataset("gaussian_blobs", 200, 0.08, seed=3)
        schedule = small_schedule()
        a = baselines.train_ce(
            nn.MlpModel.init([2, 8, 2], 0.3, seed=9), *ds.train, *ds.validation,
            schedule, seed=11,
        )
        b = baselines.train_ce_pe(
            nn.MlpModel.init([2, 8, 2], 0.3, seed=9), *ds.train, *ds.validation,
            schedule, seed=11, lam=0.0,
        )
        assert a.loss_trajectory == b.loss_trajectory
        assert a.model.parameters_equal(b.model)
        assert a.best_epoch == b.best_epoch

    def test_both_paths_emit_identical_report_schema(self):
        ds = data.generate_dataset("gaussian_blobs", 200, 0.08, seed=4)
        schedule = small_schedule()
        a = baselines.train_ce(
            nn.MlpModel.init([2, 8, 2], 0.3, seed=1), *ds.train, *ds.validation,
            schedule, seed=1,
        )
        b = baselines.train_ce_pe(
            nn.MlpModel.init([2, 8, 2], 0.3, seed=1), *ds.train, *ds.validation,
            schedule, seed=1, lam=1.0,
        )
        assert [set(r) for r in a.report] == [set(r) for r in b.report]

    def test_negative_lambda_rejected(self):
        ds = data.generate_dataset("gaussian_blobs", 100, 0.08, seed=5)
        with pytest.raises(ValueError):
            baselines.train_ce_pe(
                nn.MlpModel.init([2, 8, 2], 0.3, seed=1), *ds.train, *ds.validation,
                small_schedule(), seed=1, lam=-1.0,
            )
