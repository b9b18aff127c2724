"""Differentiable losses over MC-dropout predictive distributions.

All losses act on the *averaged* distribution and backpropagate through
every retained stochastic pass. Probabilities are clamped to
[CLAMP_MIN, 1] inside each logarithm, which removes the only singularity;
the clamped region contributes a constant slope so finite differences and
analytic gradients agree everywhere the engine can land.

The error-driven composite treats the two halves of a batch differently:
rows flagged as current mispredictions are trained with CE minus predictive
entropy (pushing their uncertainty up), correctly predicted rows with CE
plus predictive entropy (pushing it down).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MlpModel
from .uncertainty import PredictiveDistribution, mc_predict

CLAMP_MIN = 1e-12

# membership flags for error-driven batches
CORRECT_SET = 1
WRONG_SET = 0


@dataclass
class LabeledBatch:
    """Inputs, integer labels, and (for error-driven training) per-row
    membership flags in {CORRECT_SET, WRONG_SET}."""

    inputs: np.ndarray
    labels: np.ndarray
    membership: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.membership is not None:
            self.membership = np.asarray(self.membership, dtype=np.int8)
            if self.membership.shape != self.labels.shape:
                raise ValueError("membership flags must be per-row")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class EuatLossResult:
    value: float
    correct_sum: float  # sum of (CE + H) over CORRECT_SET rows
    wrong_sum: float  # sum of (CE - H) over WRONG_SET rows
    grads: list[tuple[np.ndarray, np.ndarray]]
    input_grad: np.ndarray


def _as_batch_probs(dist: PredictiveDistribution) -> np.ndarray:
    return np.atleast_2d(dist.probs)


def _ce_rows(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row -ln(p_label) and the gradient of their *sum* w.r.t. probs."""
    rows = np.arange(probs.shape[0])
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"labels shape {labels.shape} != ({probs.shape[0]},)")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("label out of range for class count")
    p_label = probs[rows, labels]
    values = -np.log(np.clip(p_label, CLAMP_MIN, 1.0))
    grad = np.zeros_like(probs)
    live = p_label > CLAMP_MIN
    grad[rows[live], labels[live]] = -1.0 / p_label[live]
    return values, grad


def _entropy_rows(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row clamped entropy and the gradient of their sum w.r.t. probs."""
    logp = np.log(np.clip(probs, CLAMP_MIN, 1.0))
    values = -(probs * logp).sum(axis=1)
    grad = np.where(probs > CLAMP_MIN, -(logp + 1.0), -np.log(CLAMP_MIN))
    return values, grad


def _require_grad_records(dist: PredictiveDistribution):
    if dist.grad_passes is None:
        raise ValueError(
            "loss gradients need per-sample records; call mc_predict with "
            "keep_grad_records=True"
        )


def ce_loss(
    dist: PredictiveDistribution, labels: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Cross-entropy -ln p_label of the averaged distribution, batch mean."""
    _require_grad_records(dist)
    probs = _as_batch_probs(dist)
    labels = np.atleast_1d(labels)
    values, grad = _ce_rows(probs, labels)
    grads, _ = dist.backprop_mean_prob_grad(grad / len(values))
    return float(values.mean()), grads


def entropy_term(
    dist: PredictiveDistribution,
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Predictive entropy of the averaged distribution (nats), batch mean."""
    _require_grad_records(dist)
    probs = _as_batch_probs(dist)
    values, grad = _entropy_rows(probs)
    grads, _ = dist.backprop_mean_prob_grad(grad / len(values))
    return float(values.mean()), grads


def ce_pe_loss(
    dist: PredictiveDistribution, labels: np.ndarray, lam: float
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Cross-entropy plus ``lam`` times predictive entropy, batch mean."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    _require_grad_records(dist)
    probs = _as_batch_probs(dist)
    labels = np.atleast_1d(labels)
    ce_vals, ce_grad = _ce_rows(probs, labels)
    h_vals, h_grad = _entropy_rows(probs)
    b = len(ce_vals)
    grads, _ = dist.backprop_mean_prob_grad((ce_grad + lam * h_grad) / b)
    return float((ce_vals + lam * h_vals).mean()), grads


def euat_loss(
    batch: LabeledBatch,
    model: MlpModel,
    n_samples: int,
    seed: int,
) -> EuatLossResult:
    """Error-driven composite: mean over rows of CE - H on WRONG_SET rows
    and CE + H on CORRECT_SET rows, with gradients through all MC passes.

    The two partial sums are reported separately alongside the mean.
    """
    if batch.membership is None:
        raise ValueError("error-driven loss needs per-row membership flags")
    dist = mc_predict(model, batch.inputs, n_samples, seed, keep_grad_records=True)
    probs = _as_batch_probs(dist)
    ce_vals, ce_grad = _ce_rows(probs, batch.labels)
    h_vals, h_grad = _entropy_rows(probs)

    sign = np.where(batch.membership == CORRECT_SET, 1.0, -1.0)
    values = ce_vals + sign * h_vals
    b = len(values)
    d_probs = (ce_grad + sign[:, None] * h_grad) / b
    grads, input_grad = dist.backprop_mean_prob_grad(d_probs)
    return EuatLossResult(
        value=float(values.mean()),
        correct_sum=float(values[batch.membership == CORRECT_SET].sum()),
        wrong_sum=float(values[batch.membership == WRONG_SET].sum()),
        grads=grads,
        input_grad=input_grad,
    )
