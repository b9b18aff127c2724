import numpy as np
import pytest

from euatlab import data, nn, robustness, training


def linear_model(k=3, d=4, seed=0):
    gen = np.random.default_rng(seed)
    return nn.MlpModel(
        [nn.DenseLayer(gen.normal(size=(k, d)), gen.normal(size=k), "identity")], 0.0
    )


class TestFgsm:
    def test_zero_epsilon_is_identity(self):
        model = linear_model()
        x = np.random.default_rng(1).random((5, 4))
        cfg = robustness.AttackConfig(epsilon=0.0)
        adv = robustness.fgsm(model, x, np.zeros(5, dtype=int), cfg)
        assert np.array_equal(adv, x)

    def test_sign_pattern_matches_closed_form_linear_gradient(self):
        # for logits z = Wx + b and CE loss, dL/dx = W^T (softmax(z) - onehot)
        model = linear_model(seed=2)
        gen = np.random.default_rng(3)
        x = gen.random((6, 4))
        y = gen.integers(0, 3, size=6)
        cfg = robustness.AttackConfig(epsilon=0.01, clip_min=-10, clip_max=10)
        adv = robustness.fgsm(model, x, y, cfg)
        logits, _ = nn.forward(model, x)
        probs = nn.softmax(logits)
        onehot = np.zeros_like(probs)
        onehot[np.arange(6), y] = 1.0
        grad = (probs - onehot) @ model.layers[0].weights
        assert np.array_equal(np.sign(adv - x), np.sign(grad))

    def test_linf_bound_holds_exactly(self):
        model = nn.MlpModel.init([4, 8, 3], dropout_rate=0.3, seed=4)
        gen = np.random.default_rng(5)
        cfg = robustness.AttackConfig(epsilon=4.0 / 255.0)
        for _ in range(20):
            x = gen.random((8, 4))
            y = gen.integers(0, 3, size=8)
            adv = robustness.fgsm(model, x, y, cfg)
            assert np.max(np.abs(adv - x)) <= cfg.epsilon
            assert adv.min() >= cfg.clip_min and adv.max() <= cfg.clip_max

    def test_step_structure(self):
        # each coordinate moves by ~epsilon, or stays (zero grad / clipping)
        model = linear_model(seed=6)
        gen = np.random.default_rng(7)
        x = gen.random((10, 4))
        y = gen.integers(0, 3, size=10)
        cfg = robustness.AttackConfig(epsilon=0.02)
        adv = robustness.fgsm(model, x, y, cfg)
        diff = np.abs(adv - x)
        full = np.isclose(diff, cfg.epsilon, rtol=0, atol=4 * np.spacing(1.0))
        clipped = (adv == cfg.clip_min) | (adv == cfg.clip_max)
        assert np.all(full | clipped | (diff == 0.0))

    def test_deterministic(self):
        model = nn.MlpModel.init([4, 6, 2], dropout_rate=0.4, seed=8)
        x = np.random.default_rng(9).random((5, 4))
        y = np.zeros(5, dtype=int)
        cfg = robustness.AttackConfig()
        a = robustness.fgsm(model, x, y, cfg)
        b = robustness.fgsm(model, x, y, cfg)
        assert np.array_equal(a, b)

    def test_out_of_range_input_rejected(self):
        model = linear_model()
        with pytest.raises(ValueError):
            robustness.fgsm(
                model, np.full((1, 4), 2.0), np.zeros(1, dtype=int),
                robustness.AttackConfig(),
            )

    def test_euat_loss_attack_variant(self):
        model = nn.MlpModel.init([4, 6, 3], dropout_rate=0.3, seed=10)
        gen = np.random.default_rng(11)
        x = gen.random((6, 4))
        y = gen.integers(0, 3, size=6)
        cfg = robustness.AttackConfig(epsilon=0.02, loss="euat")
        adv = robustness.fgsm(model, x, y, cfg)
        assert np.max(np.abs(adv - x)) <= cfg.epsilon
        assert np.array_equal(adv, robustness.fgsm(model, x, y, cfg))

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError):
            robustness.AttackConfig(epsilon=-0.1)
        with pytest.raises(ValueError):
            robustness.AttackConfig(clip_min=1.0, clip_max=0.0)
        with pytest.raises(ValueError):
            robustness.AttackConfig(loss="pgd")


class TestAdversarialTraining:
    def test_zero_epsilon_reduces_to_standard_training(self):
        ds = data.generate_dataset("gaussian_blobs", 200, 0.08, seed=12)
        schedule = training.TrainingSchedule(pretrain_epochs=4, euat_epochs=3,
                                             pretrain_lr=0.1, batch_size=32)
        model = nn.MlpModel.init([2, 8, 2], 0.3, seed=13)
        attack = robustness.make_attack(robustness.AttackConfig(epsilon=0.0))
        plain = training.pretrain(model, *ds.train, schedule=schedule, seed=14)
        attacked = training.pretrain(
            model, *ds.train, schedule=schedule, seed=14, attack=attack
        )
        assert plain.model.parameters_equal(attacked.model)
        assert plain.loss_trajectory == attacked.loss_trajectory

    def test_zero_epsilon_euat_phase_identical(self):
        ds = data.generate_dataset("gaussian_blobs", 200, 0.1, seed=15)
        schedule = training.TrainingSchedule(pretrain_epochs=4, euat_epochs=3,
                                             pretrain_lr=0.1, euat_lr=0.01,
                                             batch_size=32)
        pre = training.pretrain(
            nn.MlpModel.init([2, 8, 2], 0.3, seed=16), *ds.train,
            schedule=schedule, seed=17,
        ).model
        attack = robustness.make_attack(robustness.AttackConfig(epsilon=0.0))
        plain = training.euat_train(
            pre, *ds.train, *ds.validation, schedule=schedule, n_mc=4, seed=18
        )
        attacked = training.euat_train(
            pre, *ds.train, *ds.validation, schedule=schedule, n_mc=4, seed=18,
            attack=attack,
        )
        assert plain.model.parameters_equal(attacked.model)


class TestGaussianCorruption:
    def test_zero_sigma_is_identity(self):
        x = np.random.default_rng(19).random((10, 3))
        out = robustness.gaussian_corrupt(x, robustness.CorruptionConfig(sigma=0.0))
        assert np.array_equal(out, x)

    def test_same_seed_identical(self):
        x = np.random.default_rng(20).random((10, 3))
        cfg = robustness.CorruptionConfig(sigma=0.2, seed=21)
        assert np.array_equal(
            robustness.gaussian_corrupt(x, cfg), robustness.gaussian_corrupt(x, cfg)
        )

    def test_noise_moment_matches_sigma(self):
        # inputs at 0.5 with small sigma never clip, so the realized
        # per-coordinate std equals sigma up to sampling error
        x = np.full((1000, 100), 0.5)
        cfg = robustness.CorruptionConfig(sigma=0.05, seed=22)
        noise = robustness.gaussian_corrupt(x, cfg) - x
        assert abs(noise.std() - 0.05) / 0.05 < 0.02

    def test_output_stays_in_range(self):
        x = np.random.default_rng(23).random((50, 4))
        out = robustness.gaussian_corrupt(x, robustness.CorruptionConfig(sigma=0.5, seed=24))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_dataset_wrapper_records_provenance(self):
        ds = data.generate_dataset("rings", 100, 0.02, seed=25)
        out = robustness.corrupt_dataset(ds, robustness.CorruptionConfig(sigma=0.1, seed=26))
        assert out.provenance["corruption"] == {
            "kind": "gaussian", "sigma": 0.1, "seed": 26,
        }
        assert np.array_equal(out.labels, ds.labels)
        assert not np.array_equal(out.inputs, ds.inputs)

    def test_corrupted_dataset_round_trips_through_cache(self, tmp_path):
        ds = data.generate_dataset("gaussian_blobs", 80, 0.05, seed=27)
        out = robustness.corrupt_dataset(ds, robustness.CorruptionConfig(sigma=0.2, seed=28))
        path = tmp_path / "corrupted.npz"
        data.save_dataset(path, out)
        loaded = data.load_dataset(path)
        assert np.array_equal(loaded.inputs, out.inputs)
        assert loaded.provenance["corruption"]["sigma"] == 0.2


class TestAdversarialDataset:
    def test_provenance_and_bound(self):
        ds = data.generate_dataset("gaussian_blobs", 60, 0.08, seed=29)
        model = nn.MlpModel.init([2, 8, 2], 0.0, seed=30)
        cfg = robustness.AttackConfig(epsilon=0.02)
        adv = robustness.adversarial_dataset(model, ds, cfg)
        assert adv.provenance["attack"] == {"kind": "fgsm", "epsilon": 0.02, "loss": "ce"}
        assert np.max(np.abs(adv.inputs - ds.inputs)) <= 0.02
        assert np.array_equal(adv.labels, ds.labels)


class TestAdversarialTrainDispatch:
    def test_trains_each_method_with_attack(self):
        from euatlab.experiment import ExperimentConfig

        base = ExperimentConfig.from_dict(
            {
                "seed": 31,
                "dataset": {"kind": "gaussian_blobs", "n": 160, "noise": 0.08},
                "model": {"hidden": [8], "dropout_rate": 0.2},
                "schedule": {
                    "pretrain_epochs": 2, "euat_epochs": 2,
                    "pretrain_lr": 0.05, "euat_lr": 0.01, "batch_size": 32,
                },
                "mc_samples": 4,
                "ensemble_members": 2,
            }
        )
        for method in ("euat", "ce", "ce_pe", "ensemble"):
            resolved, dataset, trained = robustness.adversarial_train(
                method, base, robustness.AttackConfig(epsilon=0.01)
            )
            assert resolved.adversarial_training
            assert resolved.attack.epsilon == 0.01
            probs = trained.predictor.probs(dataset.test[0][:3], seed=0)
            assert probs.shape == (3, 2)
