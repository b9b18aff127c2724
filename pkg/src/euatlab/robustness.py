"""Gradient-sign adversarial examples and Gaussian-noise corruption.

The attack takes one signed gradient step of size epsilon in the L-inf
ball and clips back into the valid input range; the gradient is computed
in evaluation mode (no dropout) so the attack is a deterministic function
of (model, input, label, config). A final projection keeps the measured
L-inf distance at or below epsilon even under float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import CORRECT_SET, WRONG_SET, LabeledBatch, euat_loss
from .nn import MlpModel, backward, forward, softmax
from .training import predict_labels


@dataclass
class AttackConfig:
    epsilon: float = 4.0 / 255.0
    clip_min: float = 0.0
    clip_max: float = 1.0
    loss: str = "ce"  # "euat" attacks through the full two-branch loss

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.clip_min >= self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        if self.loss not in ("ce", "euat"):
            raise ValueError(f"attack loss must be 'ce' or 'euat', got {self.loss!r}")


@dataclass
class CorruptionConfig:
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")


def _ce_input_grad(model: MlpModel, inputs: np.ndarray, labels: np.ndarray):
    logits, cache = forward(model, inputs)
    probs = softmax(logits)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    _, input_grad = backward(cache, probs - onehot)
    return input_grad


def _euat_input_grad(model: MlpModel, inputs: np.ndarray, labels: np.ndarray):
    # deterministic variant: dropout disabled, membership from the current
    # evaluation-mode predictions
    frozen = model.copy()
    frozen.dropout_rate = 0.0
    correct = predict_labels(frozen, inputs) == labels
    membership = np.where(correct, CORRECT_SET, WRONG_SET).astype(np.int8)
    res = euat_loss(LabeledBatch(inputs, labels, membership), frozen, 1, seed=0)
    return res.input_grad


def fgsm(
    model: MlpModel, inputs: np.ndarray, labels: np.ndarray, cfg: AttackConfig
) -> np.ndarray:
    """x' = clip(x + eps * sign(dL/dx)); exact L-inf bound, deterministic."""
    x = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(x < cfg.clip_min) or np.any(x > cfg.clip_max):
        raise ValueError("inputs must lie within [clip_min, clip_max]")
    if cfg.epsilon == 0.0:
        return x.copy()
    if cfg.loss == "ce":
        grad = _ce_input_grad(model, x, labels)
    else:
        grad = _euat_input_grad(model, x, labels)
    adv = np.clip(x + cfg.epsilon * np.sign(grad), cfg.clip_min, cfg.clip_max)
    # project away half-ulp overshoot so the measured distance never
    # exceeds epsilon
    for _ in range(3):
        over = np.abs(adv - x) > cfg.epsilon
        if not over.any():
            break
        adv[over] = np.nextafter(adv[over], x[over])
    return adv


def make_attack(cfg: AttackConfig):
    """Per-batch training hook: (model, inputs, labels) -> attacked inputs."""

    def attack(model, inputs, labels):
        return fgsm(model, inputs, labels, cfg)

    return attack


def gaussian_corrupt(inputs: np.ndarray, cfg: CorruptionConfig) -> np.ndarray:
    """x' = clip(x + sigma * z) with per-coordinate standard normal z."""
    x = np.asarray(inputs, dtype=np.float64)
    if cfg.sigma == 0.0:
        return x.copy()
    z = rng_normal(cfg.seed, x.shape)
    return np.clip(x + cfg.sigma * z, 0.0, 1.0)


def rng_normal(seed, shape):
    from . import rng

    return rng.substream(seed, "gaussian-corrupt").standard_normal(shape)


def corrupt_dataset(dataset, cfg: CorruptionConfig):
    """Corrupted copy of a dataset with provenance recording sigma and seed."""
    from .data import Dataset

    provenance = dict(dataset.provenance)
    provenance["corruption"] = {"kind": "gaussian", "sigma": cfg.sigma, "seed": cfg.seed}
    return Dataset(
        inputs=gaussian_corrupt(dataset.inputs, cfg),
        labels=dataset.labels.copy(),
        splits={k: v.copy() for k, v in dataset.splits.items()},
        provenance=provenance,
    )


def adversarial_dataset(model: MlpModel, dataset, cfg: AttackConfig):
    """Attacked copy of a dataset (cacheable via data.save_dataset); the
    provenance records the attack bound."""
    from .data import Dataset

    provenance = dict(dataset.provenance)
    provenance["attack"] = {"kind": "fgsm", "epsilon": cfg.epsilon, "loss": cfg.loss}
    return Dataset(
        inputs=fgsm(model, dataset.inputs, dataset.labels, cfg),
        labels=dataset.labels.copy(),
        splits={k: v.copy() for k, v in dataset.splits.items()},
        provenance=provenance,
    )


def adversarial_train(method: str, config, attack_cfg: AttackConfig | None = None):
    """Train a method with every mini-batch replaced by its attacked version.

    ``config`` is an experiment config; returns (resolved config, dataset,
    trained method). For the error-driven method the correct/wrong
    partition is computed on attacked training rows as well.
    """
    from .experiment import (  # runtime import: experiment depends on this module
        ExperimentConfig,
        build_dataset,
        train_method,
    )

    doc = config.to_dict()
    doc["method"] = method
    doc["adversarial_training"] = True
    if attack_cfg is not None:
        doc["attack"] = {
            "epsilon": attack_cfg.epsilon,
            "clip_min": attack_cfg.clip_min,
            "clip_max": attack_cfg.clip_max,
            "loss": attack_cfg.loss,
        }
    resolved = ExperimentConfig.from_dict(doc)
    dataset = build_dataset(resolved)
    return resolved, dataset, train_method(resolved, dataset)
