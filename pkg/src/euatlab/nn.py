"""Minimal feed-forward engine: dense layers, inverted dropout, exact
analytic gradients, and SGD with momentum and classical weight decay.

Everything is float64 and deterministic given its seeds. Dropout masks are
sampled per hidden *unit* and shared across the rows of a batch, so a mask
is one realization of a thinned network; evaluation-mode forward passes use
no mask and no rescaling (inverted dropout scales at sampling time).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng

ACTIVATIONS = ("relu", "identity")

CHECKPOINT_VERSION = 1


class EngineError(ValueError):
    """Shape mismatch, stale cache, or malformed model."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise EngineError(
                f"layer expects 2-d weights and 1-d bias, got "
                f"{self.weights.shape} / {self.bias.shape}"
            )
        if self.weights.shape[0] != self.bias.shape[0]:
            raise EngineError(
                f"bias length {self.bias.shape[0]} != output width "
                f"{self.weights.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise EngineError(f"unknown activation {self.activation!r}")

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]


class MlpModel:
    """Dense layer stack with a fixed dropout rate on hidden activations.

    The final layer emits ``class_count`` logits. A version counter is
    bumped on every parameter update so forward caches can detect staleness.
    """

    def __init__(self, layers: list[DenseLayer], dropout_rate: float = 0.3):
        if not layers:
            raise EngineError("model needs at least one layer")
        if not 0.0 <= dropout_rate < 1.0:
            raise EngineError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        for prev, cur in zip(layers, layers[1:]):
            if cur.in_width != prev.out_width:
                raise EngineError(
                    f"layer widths do not chain: {prev.out_width} -> {cur.in_width}"
                )
        self.layers = layers
        self.dropout_rate = float(dropout_rate)
        self.version = 0

    @property
    def class_count(self) -> int:
        return self.layers[-1].out_width

    @property
    def input_width(self) -> int:
        return self.layers[0].in_width

    @property
    def hidden_widths(self) -> list[int]:
        return [layer.out_width for layer in self.layers[:-1]]

    @classmethod
    def init(cls, layer_sizes: list[int], dropout_rate: float = 0.3, seed: int = 0):
        """He-initialized MLP with relu hidden layers and identity output.

        ``layer_sizes`` lists widths input-to-output, e.g. ``[2, 32, 32, 3]``.
        """
        if len(layer_sizes) < 2:
            raise EngineError("layer_sizes needs at least input and output width")
        gen = rng.substream(seed, "init")
        layers = []
        n = len(layer_sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes, layer_sizes[1:])):
            last = i == n - 1
            scale = np.sqrt(1.0 / fan_in) if last else np.sqrt(2.0 / fan_in)
            w = gen.normal(0.0, scale, size=(fan_out, fan_in))
            layers.append(
                DenseLayer(w, np.zeros(fan_out), "identity" if last else "relu")
            )
        return cls(layers, dropout_rate)

    def copy(self) -> "MlpModel":
        layers = [
            DenseLayer(l.weights.copy(), l.bias.copy(), l.activation)
            for l in self.layers
        ]
        clone = MlpModel(layers, self.dropout_rate)
        clone.version = self.version
        return clone

    def parameter_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weights)
            out.append(layer.bias)
        return out

    def parameters_equal(self, other: "MlpModel") -> bool:
        return all(
            np.array_equal(a, b)
            for a, b in zip(self.parameter_arrays(), other.parameter_arrays())
        )


@dataclass
class DropoutMask:
    """Per-hidden-layer keep masks, entries in ``{0, 1/(1-p)}``."""

    scales: list[np.ndarray]
    seed: int


def sample_mask(model: MlpModel, seed: int) -> DropoutMask:
    """Sample Bernoulli(1-p) keep decisions per hidden unit, pre-scaled.

    The same seed always reproduces the same mask bit-exactly.
    """
    p = model.dropout_rate
    gen = rng.substream(seed, "dropout-mask")
    scales = []
    for width in model.hidden_widths:
        keep = gen.random(width) >= p
        scales.append(keep.astype(np.float64) / (1.0 - p))
    return DropoutMask(scales, seed)


def _check_mask(model: MlpModel, mask: DropoutMask):
    widths = model.hidden_widths
    if len(mask.scales) != len(widths):
        raise EngineError(
            f"mask has {len(mask.scales)} layers, model has {len(widths)} hidden"
        )
    for i, (scale, width) in enumerate(zip(mask.scales, widths)):
        if scale.shape != (width,):
            raise EngineError(f"mask layer {i}: shape {scale.shape} != ({width},)")


@dataclass
class ForwardCache:
    """Activation record for one forward pass; consumed by :func:`backward`."""

    inputs: list[np.ndarray]  # input to each layer (post-mask activations)
    pre_acts: list[np.ndarray]  # pre-activation z of each layer
    weights: list[np.ndarray]  # weight arrays as seen at forward time
    activations: list[str]
    mask: DropoutMask | None
    model: MlpModel = field(repr=False)
    model_version: int = 0

    @property
    def batch_rows(self) -> int:
        return self.inputs[0].shape[0]


def forward(
    model: MlpModel, batch: np.ndarray, mask: DropoutMask | None = None
) -> tuple[np.ndarray, ForwardCache]:
    """Run the stack on a (rows, features) batch.

    With ``mask`` present the post-activation output of every hidden layer is
    multiplied by the layer's scaled keep mask; without it the pass is the
    deterministic evaluation-mode function of (model, batch).
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise EngineError(f"batch must be 2-d (rows, features), got shape {x.shape}")
    if x.shape[1] != model.input_width:
        raise EngineError(
            f"batch has {x.shape[1]} features, first layer expects "
            f"{model.input_width}"
        )
    if mask is not None:
        _check_mask(model, mask)

    inputs, pre_acts = [], []
    a = x
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        z = a @ layer.weights.T + layer.bias
        inputs.append(a)
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        if mask is not None and i < last:
            h = h * mask.scales[i]
        a = h
    logits = a
    if not np.all(np.isfinite(logits)):
        raise EngineError("non-finite logits produced by forward pass")
    cache = ForwardCache(
        inputs=inputs,
        pre_acts=pre_acts,
        weights=[l.weights for l in model.layers],
        activations=[l.activation for l in model.layers],
        mask=mask,
        model=model,
        model_version=model.version,
    )
    return logits, cache


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def backward(
    cache: ForwardCache, upstream_grad: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate an upstream logits gradient through a cached pass.

    Returns per-layer ``(d_weights, d_bias)`` in layer order plus the
    gradient with respect to the batch input (used by gradient-sign attacks).
    """
    if cache.model_version != cache.model.version:
        raise EngineError("stale forward cache: model parameters changed")
    g = np.asarray(upstream_grad, dtype=np.float64)
    n_layers = len(cache.weights)
    expected = (cache.batch_rows, cache.weights[-1].shape[0])
    if g.shape != expected:
        raise EngineError(f"upstream grad shape {g.shape} != logits shape {expected}")

    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * n_layers
    delta = g
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1 and cache.mask is not None:
            delta = delta * cache.mask.scales[i]
        if cache.activations[i] == "relu":
            delta = delta * (cache.pre_acts[i] > 0.0)
        grads[i] = (delta.T @ cache.inputs[i], delta.sum(axis=0))
        delta = delta @ cache.weights[i]
    return grads, delta


@dataclass
class OptimizerState:
    """Momentum buffers mirroring the model's parameter shapes."""

    velocities: list[tuple[np.ndarray, np.ndarray]]
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0

    @classmethod
    def for_model(cls, model: MlpModel, lr: float, momentum: float = 0.9,
                  weight_decay: float = 0.0) -> "OptimizerState":
        if lr < 0:
            raise EngineError(f"lr must be non-negative, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise EngineError(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0:
            raise EngineError(f"weight_decay must be non-negative, got {weight_decay}")
        vel = [
            (np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in model.layers
        ]
        return cls(vel, float(lr), float(momentum), float(weight_decay))


def sgd_step(
    model: MlpModel,
    grads: list[tuple[np.ndarray, np.ndarray]],
    state: OptimizerState,
) -> bool:
    """One momentum-SGD update: v <- mu*v + g + wd*theta; theta <- theta - lr*v.

    Returns False (refusing the step, model and state untouched) if any
    gradient entry is non-finite.
    """
    if len(grads) != len(model.layers):
        raise EngineError(
            f"got {len(grads)} gradient pairs for {len(model.layers)} layers"
        )
    for (gw, gb), layer in zip(grads, model.layers):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise EngineError(
                f"gradient shapes {gw.shape}/{gb.shape} do not mirror parameter "
                f"shapes {layer.weights.shape}/{layer.bias.shape}"
            )
    if not all(np.all(np.isfinite(gw)) and np.all(np.isfinite(gb)) for gw, gb in grads):
        return False

    for (gw, gb), (vw, vb), layer in zip(grads, state.velocities, model.layers):
        vw *= state.momentum
        vw += gw + state.weight_decay * layer.weights
        vb *= state.momentum
        vb += gb + state.weight_decay * layer.bias
        # fresh arrays keep previously issued forward caches internally
        # consistent; the version bump below invalidates them anyway
        layer.weights = layer.weights - state.lr * vw
        layer.bias = layer.bias - state.lr * vb
    model.version += 1
    return True


def save_checkpoint(model: MlpModel, path, seed: int | None = None):
    """Write a versioned JSON checkpoint with bit-exact float round-trip."""
    with open(path, "w") as fh:
        fh.write(checkpoint_json(model, seed))


def checkpoint_json(model: MlpModel, seed: int | None = None) -> str:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "mlp",
        "dropout_rate": model.dropout_rate,
        "seed": seed,
        "layers": [
            {
                "activation": l.activation,
                "shape": list(l.weights.shape),
                "weights": l.weights.ravel().tolist(),
                "bias": l.bias.tolist(),
            }
            for l in model.layers
        ],
    }
    return json.dumps(doc, sort_keys=True)


def model_from_checkpoint_dict(doc: dict) -> MlpModel:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise EngineError(f"unsupported checkpoint version {doc.get('format_version')}")
    layers = []
    for spec in doc["layers"]:
        out_w, in_w = spec["shape"]
        w = np.array(spec["weights"], dtype=np.float64).reshape(out_w, in_w)
        layers.append(DenseLayer(w, np.array(spec["bias"]), spec["activation"]))
    return MlpModel(layers, doc["dropout_rate"])


def load_checkpoint(path) -> MlpModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("kind") != "mlp":
        raise EngineError(f"checkpoint kind {doc.get('kind')!r} is not 'mlp'")
    return model_from_checkpoint_dict(doc)
