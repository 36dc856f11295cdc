"""Minimal feed-forward classifier used as a learned value-function backend.

Layers are plain numpy affine maps followed by an activation. The model is
immutable once built; ``train`` works on private copies of the weights and
returns a new model together with its per-epoch loss trace.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, logsumexp, softmax
from tqdm import tqdm

from exceptions import CapabilityError, ConfigError, DimensionError, TrainingError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "identity")
TARGETS = ("logit", "logodds", "feature_l1")


# ============================================================================
# MODEL
# ============================================================================

def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return expit(z)
    return z


def _activation_slope(z: np.ndarray, out: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return (z > 0).astype(float)      # subgradient 0 at the kink
    if act == "sigmoid":
        return out * (1.0 - out)
    return np.ones_like(z)


@dataclass(frozen=True)
class Layer:
    """out = act(a @ w.T + b) with w of shape (out, in)."""

    w: np.ndarray
    b: np.ndarray
    act: str = "relu"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if w.ndim != 2 or w.shape[0] != b.size:
            raise DimensionError(f"layer weight {w.shape} does not match bias {b.shape}")
        if self.act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.act!r}; expected one of {ACTIVATIONS}")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "b", b)

    @property
    def fan_in(self) -> int:
        return self.w.shape[1]

    @property
    def width(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class Target:
    """Scalar whose input gradient is requested from ``MlpModel.input_gradient``."""

    kind: str
    index: Optional[int] = None
    reference: Optional[np.ndarray] = None

    @classmethod
    def logit(cls, index: int) -> "Target":
        return cls("logit", index=index)

    @classmethod
    def logodds(cls, label: int) -> "Target":
        return cls("logodds", index=label)

    @classmethod
    def feature_l1(cls, reference: Sequence[float]) -> "Target":
        return cls("feature_l1", reference=np.asarray(reference, dtype=float))


@dataclass(frozen=True)
class MlpModel:
    """Stack of layers; the last emits class logits, ``hidden_tap`` names h."""

    layers: Tuple[Layer, ...]
    hidden_tap: Optional[int] = None
    loss_trace: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if len(layers) < 2:
            raise ConfigError("an MLP needs at least 2 layers so the hidden features exist")
        for k, (prev, nxt) in enumerate(zip(layers, layers[1:])):
            if nxt.fan_in != prev.width:
                raise DimensionError(f"layer {k + 1} expects {nxt.fan_in} inputs, layer {k} emits {prev.width}")
        tap = len(layers) - 2 if self.hidden_tap is None else int(self.hidden_tap)
        if not 0 <= tap <= len(layers) - 2:
            raise ConfigError(f"hidden_tap must be in [0, {len(layers) - 2}], got {tap}")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "hidden_tap", tap)

    @property
    def input_size(self) -> int:
        return self.layers[0].fan_in

    @property
    def classes(self) -> int:
        return self.layers[-1].width

    @property
    def hidden_size(self) -> int:
        return self.layers[self.hidden_tap].width

    # ------------------------------------------------------------------
    # Forward / backward
    # ------------------------------------------------------------------
    def _check(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[None, :]
        if inputs.ndim != 2 or inputs.shape[1] != self.input_size:
            raise DimensionError(f"model expects {self.input_size} inputs, got shape {inputs.shape}")
        return inputs

    def _trace(self, inputs: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
        """(pre-activation z, output a) for every layer."""
        memory = []
        a = inputs
        for layer in self.layers:
            z = a @ layer.w.T + layer.b
            a = _activate(z, layer.act)
            memory.append((z, a))
        return memory

    def _backward(self, inputs: np.ndarray, memory, grad_out: np.ndarray, start: int) -> np.ndarray:
        """Pull the gradient at the output of layer ``start`` back to the inputs."""
        g = grad_out
        for k in range(start, -1, -1):
            z, a = memory[k]
            g = (g * _activation_slope(z, a, self.layers[k].act)) @ self.layers[k].w
        return g

    def forward_batch(self, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        memory = self._trace(self._check(inputs))
        return memory[-1][1], memory[self.hidden_tap][1]

    def forward(self, x: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
        """(logits, h) for a single input vector."""
        logits, h = self.forward_batch(np.asarray(x, dtype=float)[None, :])
        return logits[0], h[0]

    def probabilities(self, inputs: np.ndarray) -> np.ndarray:
        logits, _ = self.forward_batch(inputs)
        return softmax(logits, axis=1)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        logits, _ = self.forward_batch(inputs)
        return np.argmax(logits, axis=1)

    def input_gradient_batch(self, inputs: np.ndarray, target: Target) -> Tuple[np.ndarray, np.ndarray]:
        """Target values (B,) and their input gradients (B, input_size)."""
        inputs = self._check(inputs)
        memory = self._trace(inputs)
        logits = memory[-1][1]
        last = len(self.layers) - 1
        if target.kind == "logit":
            self._check_class(target.index)
            seed = np.zeros_like(logits)
            seed[:, target.index] = 1.0
            return logits[:, target.index], self._backward(inputs, memory, seed, last)
        if target.kind == "logodds":
            self._check_class(target.index)
            # log p/(1-p) = z_label - logsumexp(z_others)
            others = np.delete(logits, target.index, axis=1)
            value = logits[:, target.index] - logsumexp(others, axis=1)
            seed = -softmax(np.where(np.arange(self.classes) == target.index, -np.inf, logits), axis=1)
            seed[:, target.index] = 1.0
            return value, self._backward(inputs, memory, seed, last)
        if target.kind == "feature_l1":
            reference = np.asarray(target.reference, dtype=float).reshape(-1)
            if reference.size != self.hidden_size:
                raise DimensionError(f"reference features have {reference.size} entries, h has {self.hidden_size}")
            diff = memory[self.hidden_tap][1] - reference
            value = np.abs(diff).sum(axis=1)
            return value, self._backward(inputs, memory, np.sign(diff), self.hidden_tap)
        raise ConfigError(f"unknown gradient target {target.kind!r}; expected one of {TARGETS}")

    def input_gradient(self, x: Sequence[float], target: Target) -> np.ndarray:
        _, g = self.input_gradient_batch(np.asarray(x, dtype=float)[None, :], target)
        return g[0]

    def label_gradient_batch(self, inputs: np.ndarray, label: int) -> Tuple[np.ndarray, np.ndarray]:
        """p(label) (B,) and dp/dinput (B, input_size)."""
        self._check_class(label)
        inputs = self._check(inputs)
        memory = self._trace(inputs)
        probs = softmax(memory[-1][1], axis=1)
        p = probs[:, label]
        seed = -p[:, None] * probs
        seed[:, label] += p
        return p, self._backward(inputs, memory, seed, len(self.layers) - 1)

    def feature_vjp(self, inputs: np.ndarray, grad_h: np.ndarray) -> np.ndarray:
        """grad_h (B, hidden_size) pulled back through h to the inputs."""
        inputs = self._check(inputs)
        memory = self._trace(inputs)
        return self._backward(inputs, memory, np.asarray(grad_h, dtype=float), self.hidden_tap)

    def _check_class(self, index: Optional[int]) -> None:
        if index is None or not 0 <= index < self.classes:
            raise ConfigError(f"class index {index} outside [0, {self.classes})")


# ============================================================================
# DATA
# ============================================================================

@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    columns: Tuple[str, ...] = ()

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] != labels.size:
            raise DimensionError(f"{features.shape} features do not match {labels.size} labels")
        if labels.size and labels.min() < 0:
            raise ConfigError("labels must be non-negative class indices")
        columns = tuple(self.columns) or tuple(f"x{i + 1}" for i in range(features.shape[1]))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "columns", columns)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n(self) -> int:
        return self.features.shape[1]

    @property
    def classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def feature_means(self) -> np.ndarray:
        return self.features.mean(axis=0)

    @property
    def bounds(self) -> np.ndarray:
        return np.column_stack([self.features.min(axis=0), self.features.max(axis=0)])

    @classmethod
    def from_csv(cls, path: str) -> "Dataset":
        """Header row required; the last column holds the class label."""
        if not os.path.exists(path):
            raise ConfigError(f"dataset not found: {path}")
        try:
            frame = pd.read_csv(path)
        except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
            raise ConfigError(f"{path}: unreadable dataset: {e}") from e
        if frame.shape[1] < 2:
            raise ConfigError(f"{path}: need at least one feature column and a label column")
        try:
            features = frame.iloc[:, :-1].to_numpy(dtype=float)
        except ValueError as e:
            raise ConfigError(f"{path}: non-numeric feature: {e}") from e
        return cls(features, frame.iloc[:, -1].to_numpy(), tuple(frame.columns[:-1]))

    def to_csv(self, path: str) -> None:
        frame = pd.DataFrame(self.features, columns=list(self.columns))
        frame["label"] = self.labels
        frame.to_csv(path, index=False, lineterminator="\n")


def make_blobs(per_class: int = 100, features: int = 2, classes: int = 2, seed: int = 0,
               spread: float = 0.1) -> Dataset:
    """Gaussian blobs in [0, 1]^features; class c is centred high on feature c."""
    if not 2 <= classes <= features:
        raise ConfigError(f"make_blobs needs 2 <= classes <= features, got {classes} and {features}")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    centers = np.full((classes, features), 0.2)
    centers[np.arange(classes), np.arange(classes)] = 0.8
    points = np.concatenate([c + rng.normal(0.0, spread, size=(per_class, features)) for c in centers])
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(labels.size)
    return Dataset(np.clip(points[order], 0.0, 1.0), labels[order])


# ============================================================================
# TRAINING
# ============================================================================

def init_model(sizes: Sequence[int], activation: str = "relu", seed: int = 0) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for k, (fan_in, width) in enumerate(zip(sizes, sizes[1:])):
        limit = 1.0 / np.sqrt(fan_in)
        act = "identity" if k == len(sizes) - 2 else activation
        layers.append(Layer(rng.uniform(-limit, limit, size=(width, fan_in)), np.zeros(width), act))
    return MlpModel(tuple(layers))


def cross_entropy(model: MlpModel, dataset: Dataset) -> float:
    logits, _ = model.forward_batch(dataset.features)
    picked = logits[np.arange(len(dataset)), dataset.labels]
    return float(np.mean(logsumexp(logits, axis=1) - picked))


def train(dataset: Dataset, arch: Sequence[int], epochs: int = 200, lr: float = 0.1, seed: int = 0,
          batch_size: int = 16, activation: str = "relu", progress: bool = False) -> MlpModel:
    """Mini-batch gradient descent on softmax cross-entropy.

    Args:
        dataset: Training rows; must be non-empty.
        arch: Hidden layer widths; input and output sizes come from the data.
        epochs: Passes over the data; 0 returns the initial model.
        lr: Step size.
        seed: Seeds both the weight init and the per-epoch shuffles.
        batch_size: Rows per update.
        activation: Hidden activation.
        progress: Show a tqdm bar over epochs.

    Returns:
        MlpModel: Trained model with ``loss_trace`` holding the mean loss per epoch.
    """
    if len(dataset) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if epochs < 0 or batch_size < 1 or lr <= 0:
        raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")
    if not arch:
        raise ConfigError("arch needs at least one hidden layer")
    classes = max(dataset.classes, 2)
    model = init_model([dataset.n, *arch, classes], activation, seed)
    weights = [np.array(layer.w) for layer in model.layers]
    biases = [np.array(layer.b) for layer in model.layers]
    acts = [layer.act for layer in model.layers]
    rng = np.random.default_rng([seed, 1])
    trace: List[float] = []

    for epoch in tqdm(range(epochs), desc="mlp train", disable=not progress):
        order = rng.permutation(len(dataset))
        batch_losses = []
        for start in range(0, order.size, batch_size):
            rows = order[start:start + batch_size]
            a = dataset.features[rows]
            memory = []
            for w, b, act in zip(weights, biases, acts):
                z = a @ w.T + b
                memory.append((a, z))
                a = _activate(z, act)
            labels = dataset.labels[rows]
            batch_losses.append(np.mean(logsumexp(a, axis=1) - a[np.arange(rows.size), labels]))
            g = softmax(a, axis=1)
            g[np.arange(rows.size), labels] -= 1.0
            g /= rows.size
            for k in range(len(weights) - 1, -1, -1):
                a_in, z = memory[k]
                g = g * _activation_slope(z, _activate(z, acts[k]), acts[k])
                grad_w, grad_b = g.T @ a_in, g.sum(axis=0)
                g = g @ weights[k]
                weights[k] -= lr * grad_w
                biases[k] -= lr * grad_b
        loss = float(np.mean(batch_losses))
        if not np.isfinite(loss):
            raise TrainingError(f"training diverged at epoch {epoch} (loss {loss})")
        trace.append(loss)
        logger.debug("epoch %d loss %.6f", epoch, loss)

    layers = tuple(Layer(w, b, act) for w, b, act in zip(weights, biases, acts))
    if trace:
        logger.info("trained %s over %d epochs, final loss %.4f", [dataset.n, *arch, classes], epochs, trace[-1])
    return MlpModel(layers, loss_trace=tuple(trace))


def training_accuracy(model: MlpModel, dataset: Dataset) -> float:
    return float(np.mean(model.predict(dataset.features) == dataset.labels))


# ============================================================================
# PERSISTENCE
# ============================================================================

def model_to_dict(model: MlpModel) -> dict:
    return {
        "layers": [{"w": layer.w.tolist(), "b": layer.b.tolist(), "act": layer.act} for layer in model.layers],
        "hidden_tap": model.hidden_tap,
    }


def model_from_dict(data: dict) -> MlpModel:
    try:
        layers = tuple(Layer(np.asarray(d["w"], dtype=float), np.asarray(d["b"], dtype=float), d.get("act", "relu"))
                       for d in data["layers"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed weights: {e!r}") from e
    return MlpModel(layers, data.get("hidden_tap"))


def save_model(model: MlpModel, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(model_to_dict(model), f)
        f.write("\n")


def load_model(path: str) -> MlpModel:
    if not os.path.exists(path):
        raise ConfigError(f"weights file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return model_from_dict(data)


# ============================================================================
# BACKEND ADAPTER
# ============================================================================

class MlpBackend:
    """Value-function backend returning p(label | input).

    Pair with the ``logodds`` transform for v = log p/(1-p).
    """

    kind = "mlp"

    def __init__(self, model: MlpModel, label: int):
        if not 0 <= label < model.classes:
            raise ConfigError(f"label {label} outside [0, {model.classes})")
        self.model = model
        self.label = label
        self.arity = model.input_size

    def evaluate_batch(self, inputs: np.ndarray) -> np.ndarray:
        return self.model.probabilities(inputs)[:, self.label]

    def gradient_batch(self, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.model.label_gradient_batch(inputs, self.label)

    def features_batch(self, inputs: np.ndarray) -> np.ndarray:
        _, h = self.model.forward_batch(inputs)
        return h

    def feature_vjp(self, inputs: np.ndarray, grad_h: np.ndarray) -> np.ndarray:
        return self.model.feature_vjp(inputs, grad_h)


def require_features(backend) -> None:
    if not hasattr(backend, "features_batch"):
        raise CapabilityError(f"{backend.kind} backend exposes no intermediate features")
