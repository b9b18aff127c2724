"""Experiment orchestration: resolved configs, method training, threshold
tuning, test protocols (clean, flipping, noise OOD, gradient-sign attack),
and on-disk run artifacts.

A run directory contains the manifest (resolved config, stage log, file
digests), the per-epoch CSV, the metrics report JSON, uncertainty
histograms, a per-input prediction dump, and a self-contained checkpoint.
Metrics artifacts are deterministic given the config: replaying a manifest
single-threaded reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, metrics, rng
from .baselines import (
    Ensemble,
    IsotonicMap,
    ensemble_probs,
    ensemble_train,
    isotonic_apply,
    isotonic_fit,
    train_ce,
    train_ce_pe,
)
from .data import Dataset, generate_dataset, load_idx, make_binary_task
from .metrics import EvalRecords, records_from_probs
from .nn import MlpModel, backward, checkpoint_json, forward, model_from_checkpoint_dict, softmax
from .robustness import AttackConfig, CorruptionConfig, fgsm, gaussian_corrupt, make_attack
from .training import TrainingSchedule, TrainOutcome, euat_train, pretrain
from .uncertainty import mc_predict_probs

METHODS = ("euat", "ce", "ce_pe", "calibrated_ce", "ensemble")

PROTOCOLS = ("clean", "flip", "ood", "attack")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class DatasetConfig:
    kind: str = "gaussian_blobs"  # generator name or "idx"
    n: int = 2000
    noise: float = 0.1
    class_count: int = 2
    dim: int = 2  # blobs only: extra coordinates are uninformative
    val_fraction: float = 0.1
    test_fraction: float = 0.2
    binary_positive_class: int | None = None
    images_path: str | None = None
    labels_path: str | None = None


@dataclass
class ModelConfig:
    hidden: list[int] = field(default_factory=lambda: [32, 32])
    dropout_rate: float = 0.3


@dataclass
class ExperimentConfig:
    method: str = "euat"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    mc_samples: int = 20
    ce_pe_lambda: float = 1.0
    ensemble_members: int = 5
    ensemble_full_budget: bool = False
    threshold_objective: str = "ua"
    ece_bins: int = 15
    histogram_bins: int = 50
    adversarial_training: bool = False
    attack: AttackConfig = field(default_factory=AttackConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    protocols: list[str] = field(default_factory=lambda: ["clean"])
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.threshold_objective not in ("ua", "flip_gain"):
            raise ConfigError(f"unknown threshold objective {self.threshold_objective!r}")
        for p in self.protocols:
            if p not in PROTOCOLS:
                raise ConfigError(f"unknown protocol {p!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        try:
            for key, sub in (
                ("dataset", DatasetConfig),
                ("model", ModelConfig),
                ("schedule", TrainingSchedule),
                ("attack", AttackConfig),
                ("corruption", CorruptionConfig),
            ):
                if key in doc and isinstance(doc[key], dict):
                    doc[key] = sub(**doc[key])
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def build_dataset(config: ExperimentConfig) -> Dataset:
    dc = config.dataset
    data_seed = rng.derive_seed(config.seed, "data")
    if dc.kind == "idx":
        if not dc.images_path or not dc.labels_path:
            raise ConfigError("idx dataset needs images_path and labels_path")
        ds = load_idx(
            dc.images_path, dc.labels_path, data_seed, dc.val_fraction, dc.test_fraction
        )
    else:
        ds = generate_dataset(
            dc.kind, dc.n, dc.noise, data_seed, dc.class_count,
            dc.val_fraction, dc.test_fraction, dc.dim,
        )
    if dc.binary_positive_class is not None:
        ds = make_binary_task(ds, dc.binary_positive_class)
    return ds


def build_model(config: ExperimentConfig, dataset: Dataset) -> MlpModel:
    sizes = [dataset.inputs.shape[1], *config.model.hidden, dataset.class_count]
    return MlpModel.init(
        sizes, config.model.dropout_rate, rng.derive_seed(config.seed, "init-model")
    )


@dataclass
class Predictor:
    """Uniform prediction surface over the trained artifact of any method."""

    model: MlpModel | None = None
    ensemble: Ensemble | None = None
    calibration: IsotonicMap | None = None
    n_mc: int = 20

    def probs(self, inputs: np.ndarray, seed: int) -> np.ndarray:
        if self.ensemble is not None:
            p = ensemble_probs(self.ensemble, inputs)
        else:
            p = mc_predict_probs(self.model, inputs, self.n_mc, seed)
        if self.calibration is not None:
            p = isotonic_apply(self.calibration, p)
        return p

    def records(self, inputs, labels, seed) -> EvalRecords:
        return records_from_probs(self.probs(inputs, seed), labels)

    def input_grad_ce(self, inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Evaluation-mode CE input gradient of the predicted distribution
        (mean over members for ensembles); used by the attack protocol."""
        labels = np.asarray(labels, dtype=np.int64)
        models = self.ensemble.members if self.ensemble is not None else [self.model]
        rows = np.arange(len(labels))
        per_model = []
        for m in models:
            logits, cache = forward(m, inputs)
            per_model.append((softmax(logits), cache))
        mean = sum(p for p, _ in per_model) / len(per_model)
        d_mean = np.zeros_like(mean)
        d_mean[rows, labels] = -1.0 / np.clip(mean[rows, labels], 1e-12, 1.0)
        grad = None
        for p, cache in per_model:
            gp = d_mean / len(per_model)
            gz = p * (gp - (gp * p).sum(axis=1, keepdims=True))
            _, xg = backward(cache, gz)
            grad = xg if grad is None else grad + xg
        return grad

    def attacked(self, inputs, labels, cfg: AttackConfig) -> np.ndarray:
        if self.ensemble is None and self.calibration is None:
            return fgsm(self.model, inputs, labels, cfg)
        # calibration never changes the predicted class, so attacking the
        # base predictive distribution is the faithful surrogate
        x = np.asarray(inputs, dtype=np.float64)
        if np.any(x < cfg.clip_min) or np.any(x > cfg.clip_max):
            raise ValueError("inputs must lie within [clip_min, clip_max]")
        if cfg.epsilon == 0.0:
            return x.copy()
        adv = np.clip(
            x + cfg.epsilon * np.sign(self.input_grad_ce(x, labels)),
            cfg.clip_min,
            cfg.clip_max,
        )
        for _ in range(3):
            over = np.abs(adv - x) > cfg.epsilon
            if not over.any():
                break
            adv[over] = np.nextafter(adv[over], x[over])
        return adv


@dataclass
class TrainedMethod:
    predictor: Predictor
    report: list[dict]
    outcome: TrainOutcome | None = None
    member_reports: list[list[dict]] | None = None


def train_method(config: ExperimentConfig, dataset: Dataset) -> TrainedMethod:
    """Train the configured method on the dataset's train/validation splits."""
    x_train, y_train = dataset.train
    x_val, y_val = dataset.validation
    attack = make_attack(config.attack) if config.adversarial_training else None
    seed = rng.derive_seed(config.seed, "train")
    model = build_model(config, dataset)
    n_mc = config.mc_samples

    if config.method == "euat":
        pre = pretrain(model, x_train, y_train, config.schedule, seed, attack=attack)
        out = euat_train(
            pre.model, x_train, y_train, x_val, y_val, config.schedule,
            n_mc, seed, attack=attack,
        )
        out.loss_trajectory = pre.loss_trajectory + out.loss_trajectory
        out.diverged = out.diverged or pre.diverged
        return TrainedMethod(Predictor(model=out.model, n_mc=n_mc), out.report, out)

    if config.method in ("ce", "calibrated_ce"):
        out = train_ce(
            model, x_train, y_train, x_val, y_val, config.schedule, seed,
            n_mc_eval=n_mc, attack=attack,
        )
        predictor = Predictor(model=out.model, n_mc=n_mc)
        if config.method == "calibrated_ce":
            records = predictor.records(
                x_val, y_val, rng.derive_seed(config.seed, "calibration-eval")
            )
            predictor.calibration = isotonic_fit(
                records.confidence, records.correct.astype(np.float64)
            )
        return TrainedMethod(predictor, out.report, out)

    if config.method == "ce_pe":
        out = train_ce_pe(
            model, x_train, y_train, x_val, y_val, config.schedule, seed,
            lam=config.ce_pe_lambda, n_mc_eval=n_mc, attack=attack,
        )
        return TrainedMethod(Predictor(model=out.model, n_mc=n_mc), out.report, out)

    # ensemble
    seeds = [
        rng.derive_seed(config.seed, "ensemble-member", i)
        for i in range(config.ensemble_members)
    ]
    ens, outcomes = ensemble_train(
        model, x_train, y_train, x_val, y_val, config.schedule,
        n_members=config.ensemble_members, seeds=seeds, n_mc_eval=n_mc,
        full_budget_per_member=config.ensemble_full_budget, attack=attack,
    )
    return TrainedMethod(
        Predictor(ensemble=ens, n_mc=n_mc),
        outcomes[0].report,
        member_reports=[o.report for o in outcomes],
    )


def tune_on_validation(
    predictor: Predictor, dataset: Dataset, config: ExperimentConfig
) -> float:
    records = predictor.records(
        *dataset.validation, rng.derive_seed(config.seed, "threshold-eval")
    )
    return metrics.tune_threshold(records, config.threshold_objective)


def flip_eval(
    predictor: Predictor,
    inputs: np.ndarray,
    labels: np.ndarray,
    threshold: float,
    seed: int,
    ece_bins: int = 15,
) -> dict:
    """Binary protocol: invert the predicted class wherever normalized
    entropy exceeds the threshold; report both error rates plus F1,
    precision, TPR, TNR of the flipped predictions and the metric suite."""
    probs = predictor.probs(inputs, seed)
    if probs.shape[1] != 2:
        raise ConfigError("flip evaluation needs a binary task")
    records = records_from_probs(probs, labels)
    pred = records.pred_label
    flipped = np.where(records.uncertainty > threshold, 1 - pred, pred)
    labels = np.asarray(labels, dtype=np.int64)

    tp = int(np.sum((flipped == 1) & (labels == 1)))
    tn = int(np.sum((flipped == 0) & (labels == 0)))
    fp = int(np.sum((flipped == 1) & (labels == 0)))
    fn = int(np.sum((flipped == 0) & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    tpr = tp / (tp + fn) if tp + fn else 0.0
    tnr = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * precision * tpr / (precision + tpr) if precision + tpr else 0.0

    return {
        "threshold": float(threshold),
        "error_without_flip": float(np.mean(pred != labels)),
        "error_with_flip": float(np.mean(flipped != labels)),
        "flipped_count": int(np.sum(records.uncertainty > threshold)),
        "f1": f1,
        "precision": precision,
        "tpr": tpr,
        "tnr": tnr,
        "metrics": metrics.summarize(records, threshold, ece_bins),
    }


def ood_eval(
    predictor: Predictor,
    dataset: Dataset,
    threshold: float,
    config: ExperimentConfig,
) -> dict:
    """Evaluate on a Gaussian-corrupted copy of the test split."""
    x_test, y_test = dataset.test
    cfg = CorruptionConfig(
        config.corruption.sigma, rng.derive_seed(config.seed, "ood-noise")
    )
    corrupted = gaussian_corrupt(x_test, cfg)
    records = predictor.records(
        corrupted, y_test, rng.derive_seed(config.seed, "ood-eval")
    )
    report = metrics.summarize(records, threshold, config.ece_bins)
    report["sigma"] = cfg.sigma
    return report


def attack_eval(
    predictor: Predictor,
    dataset: Dataset,
    threshold: float,
    config: ExperimentConfig,
) -> dict:
    """Evaluate on gradient-sign adversarial versions of the test split."""
    x_test, y_test = dataset.test
    adv = predictor.attacked(x_test, y_test, config.attack)
    records = predictor.records(
        adv, y_test, rng.derive_seed(config.seed, "attack-eval")
    )
    report = metrics.summarize(records, threshold, config.ece_bins)
    report["epsilon"] = config.attack.epsilon
    report["linf"] = float(np.max(np.abs(adv - x_test))) if len(x_test) else 0.0
    return report


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_epoch_csv(path, reports: dict[int, list[dict]]):
    """Per-epoch rows for every member (member 0 = the single model)."""
    columns = ["member", "epoch", "train_error", "val_error", "ua", "uauc",
               "ece", "wasserstein", "corr", "wall_time", "skipped"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for member, rows in reports.items():
            for row in rows:
                writer.writerow(
                    [member] + [_fmt(row.get(c, "")) for c in columns[1:]]
                )


def write_histogram_csv(path, records: EvalRecords, n_bins: int):
    edges, c_counts, w_counts = metrics.uncertainty_histograms(records, n_bins)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "correct_count", "wrong_count"])
        for i in range(n_bins):
            writer.writerow(
                [_fmt(float(edges[i])), _fmt(float(edges[i + 1])),
                 int(c_counts[i]), int(w_counts[i])]
            )


def write_predictions_csv(path, records: EvalRecords, probs: np.ndarray):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        k = probs.shape[1]
        writer.writerow(
            ["id", "true_label", "pred_label", "normalized_entropy"]
            + [f"p{c}" for c in range(k)]
        )
        for i in range(len(records)):
            writer.writerow(
                [i, int(records.true_label[i]), int(records.pred_label[i]),
                 _fmt(float(records.uncertainty[i]))]
                + [_fmt(float(p)) for p in probs[i]]
            )


def predictor_checkpoint(predictor: Predictor) -> dict:
    if predictor.ensemble is not None:
        return {
            "kind": "ensemble",
            "members": [
                json.loads(checkpoint_json(m)) for m in predictor.ensemble.members
            ],
            "seeds": predictor.ensemble.seeds,
        }
    doc = json.loads(checkpoint_json(predictor.model))
    if predictor.calibration is not None:
        doc = {
            "kind": "calibrated",
            "base": doc,
            "calibration": {
                "breakpoints": predictor.calibration.breakpoints.tolist(),
                "levels": predictor.calibration.levels.tolist(),
            },
        }
    return doc


def predictor_from_checkpoint(doc: dict, n_mc: int) -> Predictor:
    kind = doc.get("kind")
    if kind == "ensemble":
        members = [model_from_checkpoint_dict(m) for m in doc["members"]]
        return Predictor(ensemble=Ensemble(members, doc["seeds"]), n_mc=n_mc)
    if kind == "calibrated":
        return Predictor(
            model=model_from_checkpoint_dict(doc["base"]),
            calibration=IsotonicMap(
                np.array(doc["calibration"]["breakpoints"]),
                np.array(doc["calibration"]["levels"]),
            ),
            n_mc=n_mc,
        )
    return Predictor(model=model_from_checkpoint_dict(doc), n_mc=n_mc)


def run_experiment(config: ExperimentConfig, output_dir=None) -> dict:
    """Dataset -> training -> threshold tuning -> protocols -> artifacts.

    Returns the manifest; writes everything under ``output_dir`` (falls
    back to ``config.output_dir``). Stage failures are recorded in the
    manifest before the exception propagates.
    """
    out_dir = Path(output_dir or config.output_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "code_version": __version__,
        "config": config.to_dict(),
        "stages": [],
        "files": {},
    }
    started = time.perf_counter()

    def stage(name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            manifest["stages"].append(
                {"stage": name, "status": "failed", "error": str(exc)}
            )
            (out_dir / "manifest.json").write_bytes(_json_bytes(manifest))
            raise
        manifest["stages"].append(
            {"stage": name, "status": "ok",
             "wall_time": time.perf_counter() - t0}
        )
        return result

    dataset = stage("dataset", lambda: build_dataset(config))
    trained = stage("train", lambda: train_method(config, dataset))
    threshold = stage(
        "tune-threshold", lambda: tune_on_validation(trained.predictor, dataset, config)
    )
    manifest["tuned_threshold"] = threshold

    def clean_eval():
        x_test, y_test = dataset.test
        probs = trained.predictor.probs(
            x_test, rng.derive_seed(config.seed, "test-eval")
        )
        records = records_from_probs(probs, y_test)
        return records, probs, metrics.summarize(records, threshold, config.ece_bins)

    records, probs, clean_report = stage("evaluate", clean_eval)
    reports = {"clean": clean_report}
    if "flip" in config.protocols:
        reports["flip"] = stage(
            "flip",
            lambda: flip_eval(
                trained.predictor, *dataset.test, threshold,
                rng.derive_seed(config.seed, "flip-eval"), config.ece_bins,
            ),
        )
    if "ood" in config.protocols:
        reports["ood"] = stage(
            "ood", lambda: ood_eval(trained.predictor, dataset, threshold, config)
        )
    if "attack" in config.protocols:
        reports["attack"] = stage(
            "attack", lambda: attack_eval(trained.predictor, dataset, threshold, config)
        )

    def persist():
        metrics_bytes = _json_bytes(reports)
        (out_dir / "metrics.json").write_bytes(metrics_bytes)
        member_reports = (
            {i: rep for i, rep in enumerate(trained.member_reports)}
            if trained.member_reports
            else {0: trained.report}
        )
        write_epoch_csv(out_dir / "per_epoch.csv", member_reports)
        write_histogram_csv(out_dir / "histogram.csv", records, config.histogram_bins)
        write_predictions_csv(out_dir / "predictions.csv", records, probs)
        checkpoint_bytes = _json_bytes(predictor_checkpoint(trained.predictor))
        (out_dir / "checkpoint.json").write_bytes(checkpoint_bytes)
        manifest["files"] = {
            "metrics": "metrics.json",
            "per_epoch": "per_epoch.csv",
            "histogram": "histogram.csv",
            "predictions": "predictions.csv",
            "checkpoint": "checkpoint.json",
        }
        manifest["digests"] = {
            "metrics": hashlib.sha256(metrics_bytes).hexdigest(),
            "checkpoint": hashlib.sha256(checkpoint_bytes).hexdigest(),
        }

    stage("persist", persist)
    manifest["reports"] = reports
    manifest["wall_time"] = time.perf_counter() - started
    (out_dir / "manifest.json").write_bytes(_json_bytes(manifest))
    return manifest


def load_run(run_dir) -> tuple[ExperimentConfig, Predictor, dict]:
    """Reload the config, trained predictor, and manifest of a finished run."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    config = ExperimentConfig.from_dict(manifest["config"])
    checkpoint = json.loads((run_dir / "checkpoint.json").read_text())
    predictor = predictor_from_checkpoint(checkpoint, config.mc_samples)
    return config, predictor, manifest


def replay(manifest_path, output_dir) -> dict:
    """Re-execute a manifest's config and byte-compare the metric artifacts.

    Wall-time columns are excluded from the per-epoch comparison; every
    other reported number must match exactly.
    """
    manifest_path = Path(manifest_path)
    original_dir = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    config = ExperimentConfig.from_dict(manifest["config"])
    run_experiment(config, output_dir)

    identical = {}
    for name in ("metrics.json", "histogram.csv", "predictions.csv", "checkpoint.json"):
        identical[name] = (
            (original_dir / name).read_bytes() == (Path(output_dir) / name).read_bytes()
        )

    def rows_sans_wall_time(path):
        with open(path) as fh:
            rows = list(csv.reader(fh))
        drop = rows[0].index("wall_time")
        return [[c for i, c in enumerate(r) if i != drop] for r in rows]

    identical["per_epoch.csv"] = rows_sans_wall_time(
        original_dir / "per_epoch.csv"
    ) == rows_sans_wall_time(Path(output_dir) / "per_epoch.csv")
    return {"identical": all(identical.values()), "files": identical}


COMPARE_METRICS = (
    "error", "ua", "uauc", "ece", "wasserstein", "corr_residual", "threshold"
)


def compare_methods(
    config: ExperimentConfig, methods: list[str], output_dir
) -> dict:
    """Run several methods on the identical dataset/seed and tabulate the
    clean-test metrics side by side (one row per metric)."""
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = {}
    for method in methods:
        doc = config.to_dict()
        doc["method"] = method
        sub = ExperimentConfig.from_dict(doc)
        manifest = run_experiment(sub, out_dir / method)
        columns[method] = manifest["reports"]["clean"]
    table = [
        [metric] + [columns[m].get(metric) for m in methods]
        for metric in COMPARE_METRICS
    ]
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + list(methods))
        for row in table:
            writer.writerow([_fmt(v) for v in row])
    return {"methods": list(methods), "table": table}
