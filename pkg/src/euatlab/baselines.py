"""Comparison methods: plain CE training, CE+PE training, isotonic
post-hoc calibration of the top-label confidence, and deep ensembles.

All baselines share the validation-based model selection used by the
error-driven trainer, and the ensemble honors a fair total gradient-sample
budget by default (total epochs divided across members).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .nn import MlpModel, forward, softmax
from .training import TrainingSchedule, TrainOutcome, ce_family_train
from .uncertainty import PredictiveDistribution


@dataclass
class IsotonicMap:
    """Monotone piecewise-linear map fitted on top-label confidences."""

    breakpoints: np.ndarray  # ascending confidences
    levels: np.ndarray  # non-decreasing calibrated values in [0, 1]

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=np.float64)
        self.levels = np.asarray(self.levels, dtype=np.float64)
        if self.breakpoints.shape != self.levels.shape:
            raise ValueError("breakpoints and levels must have equal length")
        if np.any(np.diff(self.breakpoints) < 0):
            raise ValueError("breakpoints must be ascending")
        if np.any(np.diff(self.levels) < -1e-15):
            raise ValueError("levels must be non-decreasing")

    def __call__(self, confidence):
        return np.clip(
            np.interp(confidence, self.breakpoints, self.levels), 0.0, 1.0
        )

    @property
    def strictly_increasing(self) -> bool:
        return bool(np.all(np.diff(self.levels) > 0))


def isotonic_fit(confidences: np.ndarray, correctness: np.ndarray) -> IsotonicMap:
    """Pool-adjacent-violators solution: the monotone least-squares fit of
    correctness against confidence."""
    conf = np.asarray(confidences, dtype=np.float64)
    y = np.asarray(correctness, dtype=np.float64)
    if conf.shape != y.shape or conf.ndim != 1:
        raise ValueError("confidences and correctness must be equal-length vectors")
    if len(conf) < 2:
        raise ValueError(f"isotonic fit needs >= 2 points, got {len(conf)}")

    order = np.argsort(conf, kind="stable")
    xs, inverse = np.unique(conf[order], return_inverse=True)
    weights = np.bincount(inverse).astype(np.float64)
    targets = np.bincount(inverse, weights=y[order]) / weights

    # PAV: maintain a stack of blocks with non-decreasing means
    block_value: list[float] = []
    block_weight: list[float] = []
    block_size: list[int] = []
    for value, weight in zip(targets, weights):
        block_value.append(float(value))
        block_weight.append(float(weight))
        block_size.append(1)
        while len(block_value) > 1 and block_value[-2] > block_value[-1]:
            v, w, s = block_value.pop(), block_weight.pop(), block_size.pop()
            merged = (block_value[-1] * block_weight[-1] + v * w) / (
                block_weight[-1] + w
            )
            block_value[-1] = merged
            block_weight[-1] += w
            block_size[-1] += s
    levels = np.repeat(block_value, block_size)
    return IsotonicMap(xs, np.clip(levels, 0.0, 1.0))


def isotonic_apply(
    mapping: IsotonicMap, dist: PredictiveDistribution | np.ndarray
) -> np.ndarray:
    """Recalibrate the top-class probability and rescale the remaining mass
    proportionally over the other classes.

    The calibrated top probability is floored at the tie point with the
    second-largest class, so the predicted class never changes (standard
    contract for post-hoc calibration: confidences move, predictions do
    not).
    """
    probs = dist.probs if isinstance(dist, PredictiveDistribution) else dist
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    batch = np.atleast_2d(probs).copy()
    for row in batch:
        top = int(np.argmax(row))
        p_top = row[top]
        rest = 1.0 - p_top
        others_sorted = np.sort(np.delete(row, top))
        p_second = others_sorted[-1] if len(others_sorted) else 0.0
        q = float(mapping(p_top))
        tie = p_second / (rest + p_second) if rest + p_second > 0 else 0.0
        q = max(q, tie)
        if rest > 0:
            scale = (1.0 - q) / rest
            row *= scale
        else:
            row[:] = (1.0 - q) / max(len(row) - 1, 1)
        row[top] = q
        total = row.sum()
        if abs(total - 1.0) > 1e-12:  # leave float dust alone
            row /= total
        if int(np.argmax(row)) != top:  # knife-edge tie from the floor
            row[top] = np.nextafter(row.max(), np.inf)
            row /= row.sum()
    return batch[0] if single else batch


@dataclass
class Ensemble:
    members: list[MlpModel]
    seeds: list[int]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        first = self.members[0]
        for m in self.members:
            if m.class_count != first.class_count:
                raise ValueError("ensemble members must share class_count")


def ensemble_train(
    model_template: MlpModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    val_inputs: np.ndarray,
    val_labels: np.ndarray,
    schedule: TrainingSchedule,
    n_members: int = 5,
    seeds: list[int] | None = None,
    n_mc_eval: int = 20,
    full_budget_per_member: bool = False,
    attack=None,
) -> tuple[Ensemble, list[TrainOutcome]]:
    """Train ``n_members`` independent CE learners with distinct seeds.

    The total epoch budget (pretrain + error-driven epochs) is divided
    across members so every compared method consumes the same number of
    gradient samples; ``full_budget_per_member`` lifts that cap.
    """
    if n_members < 1:
        raise ValueError("ensemble needs at least one member")
    if seeds is None:
        seeds = [rng.derive_seed(0, "ensemble-member", i) for i in range(n_members)]
    if len(seeds) != n_members:
        raise ValueError(f"need {n_members} seeds, got {len(seeds)}")
    total = schedule.pretrain_epochs + schedule.euat_epochs
    epochs = total if full_budget_per_member else max(total // n_members, 1)

    members, outcomes = [], []
    for seed in seeds:
        layer_sizes = (
            [model_template.input_width]
            + model_template.hidden_widths
            + [model_template.class_count]
        )
        member = MlpModel.init(layer_sizes, model_template.dropout_rate, seed=seed)
        outcome = ce_family_train(
            member,
            inputs,
            labels,
            schedule,
            epochs=epochs,
            lr=schedule.pretrain_lr,
            seed=seed,
            lam=0.0,
            attack=attack,
            val_inputs=val_inputs,
            val_labels=val_labels,
            n_mc_eval=n_mc_eval,
            select=True,
        )
        members.append(outcome.model)
        outcomes.append(outcome)
    return Ensemble(members, list(seeds)), outcomes


def ensemble_probs(ensemble: Ensemble, inputs: np.ndarray) -> np.ndarray:
    """Mean of member softmax outputs under deterministic forward passes."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    acc = None
    for member in ensemble.members:
        logits, _ = forward(member, x)
        p = softmax(logits)
        acc = p if acc is None else acc + p
    return acc / len(ensemble.members)


def ensemble_predict(ensemble: Ensemble, inputs: np.ndarray) -> PredictiveDistribution:
    """Aggregate member outputs; entropy of the mean is the ensemble
    uncertainty."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    per_member = np.stack(
        [ensemble_probs(Ensemble([m], [0]), x) for m in ensemble.members]
    )
    mean = per_member.mean(axis=0)
    if single:
        mean, per_member = mean[0], per_member[:, 0, :]
    return PredictiveDistribution(
        probs=mean, sample_count=len(ensemble.members), per_sample_probs=per_member
    )


def train_ce(
    model: MlpModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    val_inputs: np.ndarray,
    val_labels: np.ndarray,
    schedule: TrainingSchedule,
    seed: int,
    n_mc_eval: int = 20,
    attack=None,
) -> TrainOutcome:
    """Plain CE baseline over the full epoch budget with validation-based
    model selection."""
    return ce_family_train(
        model,
        inputs,
        labels,
        schedule,
        epochs=schedule.pretrain_epochs + schedule.euat_epochs,
        lr=schedule.pretrain_lr,
        seed=seed,
        lam=0.0,
        attack=attack,
        val_inputs=val_inputs,
        val_labels=val_labels,
        n_mc_eval=n_mc_eval,
        select=True,
    )


def train_ce_pe(
    model: MlpModel,
    inputs: np.ndarray,
    labels: np.ndarray,
    val_inputs: np.ndarray,
    val_labels: np.ndarray,
    schedule: TrainingSchedule,
    seed: int,
    lam: float = 1.0,
    n_mc_eval: int = 20,
    attack=None,
) -> TrainOutcome:
    """CE plus lambda * PE baseline; lambda = 0 reproduces the CE
    trajectory bit-exactly under equal seeds."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    return ce_family_train(
        model,
        inputs,
        labels,
        schedule,
        epochs=schedule.pretrain_epochs + schedule.euat_epochs,
        lr=schedule.pretrain_lr,
        seed=seed,
        lam=lam,
        attack=attack,
        val_inputs=val_inputs,
        val_labels=val_labels,
        n_mc_eval=n_mc_eval,
        select=True,
    )
