"""Fully connected feedforward classifier with batch normalisation, trained with Adam.

Layer stack for the default architecture:
BN(12) -> Dense(12,256) -> ReLU -> BN(256) -> Dense(256,128) -> ReLU -> BN(128)
-> Dense(128,3) -> softmax. All arithmetic is float64.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from modules.dsp import feature_width, select_channels
from modules.errors import (
    DataError,
    InsufficientDataError,
    MalformedModelError,
    ModelDimensionError,
    ModelVersionError,
    NumericError,
    ParameterError,
    ShapeError,
    TrainingDivergedError,
)
from modules.signals import N_FEATURES, StateLabel, examples_to_arrays

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PROB_FLOOR = 1e-12
BN_ORDERS = ("post_activation", "pre_activation")


@dataclass
class ModelArchitecture:
    input_dim: int = N_FEATURES
    hidden: tuple = (256, 128)
    output_dim: int = 3
    activation: str = "relu"
    output_activation: str = "softmax"
    bn_input: bool = True
    bn_hidden: bool = True
    # post_activation: Dense -> ReLU -> BN; pre_activation: Dense -> BN -> ReLU
    bn_order: str = "post_activation"
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    # Feature columns the model reads; None means the raw input is used as is
    channels: str = "both"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self):
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(d) <= 0 for d in dims):
            raise ParameterError(f"All layer widths must be positive, got {dims}")
        if self.activation != "relu" or self.output_activation != "softmax":
            raise ParameterError("Only relu hidden and softmax output activations are supported")
        if self.bn_order not in BN_ORDERS:
            raise ParameterError(f"bn_order must be one of {BN_ORDERS}, got {self.bn_order!r}")
        if not self.bn_epsilon > 0 or not 0 <= self.bn_momentum < 1:
            raise ParameterError("Batch-norm epsilon must be > 0 and momentum in [0, 1)")
        if self.channels is not None and feature_width(self.channels) != self.input_dim:
            raise ParameterError(
                f"input_dim {self.input_dim} does not match the {self.channels!r} feature set"
            )
        return self

    @property
    def bn_positions(self):
        positions = []
        if self.bn_input:
            positions.append("input")
        if self.bn_hidden and self.hidden:
            positions.append("hidden")
        return positions

    @property
    def raw_width(self):
        """Width of the vectors predict() accepts before channel selection"""
        return N_FEATURES if self.channels is not None else self.input_dim

    def expected_counts(self):
        """Closed-form (total, trainable, non_trainable) parameter counts"""
        dims = (self.input_dim, *self.hidden, self.output_dim)
        dense = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
        bn_widths = (self.input_dim if self.bn_input else 0) + (sum(self.hidden) if self.bn_hidden else 0)
        return dense + 4 * bn_widths, dense + 2 * bn_widths, 2 * bn_widths

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
            "output_activation": self.output_activation,
            "bn_positions": self.bn_positions,
            "bn_order": self.bn_order,
            "epsilon": self.bn_epsilon,
            "momentum": self.bn_momentum,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, data):
        positions = data.get("bn_positions", [])
        return cls(
            input_dim=int(data["input_dim"]),
            hidden=tuple(data["hidden"]),
            output_dim=int(data["output_dim"]),
            activation=data.get("activation", "relu"),
            output_activation=data.get("output_activation", "softmax"),
            bn_input="input" in positions,
            bn_hidden="hidden" in positions,
            bn_order=data.get("bn_order", "post_activation"),
            bn_epsilon=float(data["epsilon"]),
            bn_momentum=float(data["momentum"]),
            channels=data.get("channels"),
        )


class DenseLayer:
    """Affine map y = x W^T + b with W stored out x in"""

    kind = "dense"
    trainable = ("weights", "bias")

    def __init__(self, weights, bias):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.grads = {}
        self._x = None

    @property
    def shape(self):
        return self.weights.shape

    def forward(self, x, training, update_moving=True):
        if training:
            self._x = x
        return x @ self.weights.T + self.bias

    def backward(self, grad):
        self.grads = {"weights": grad.T @ self._x, "bias": grad.sum(axis=0)}
        return grad @ self.weights

    def param_count(self):
        return self.weights.size + self.bias.size, 0


class ReLULayer:
    kind = "relu"
    trainable = ()

    def __init__(self):
        self.grads = {}
        self._mask = None

    def forward(self, x, training, update_moving=True):
        if training:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * self._mask

    def param_count(self):
        return 0, 0


class BatchNormLayer:
    """Per-feature standardisation with trainable scale/shift and moving statistics"""

    kind = "batchnorm"
    trainable = ("gamma", "beta")

    def __init__(self, width, epsilon=1e-3, momentum=0.99):
        self.gamma = np.ones(width)
        self.beta = np.zeros(width)
        self.moving_mean = np.zeros(width)
        self.moving_var = np.ones(width)
        self.epsilon = epsilon
        self.momentum = momentum
        self.grads = {}
        self._x_hat = None
        self._inv_std = None

    @property
    def width(self):
        return self.gamma.size

    def forward(self, x, training, update_moving=True):
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            x_hat = (x - mean) * inv_std
            self._x_hat = x_hat
            self._inv_std = inv_std
            if update_moving:
                self.moving_mean = self.momentum * self.moving_mean + (1.0 - self.momentum) * mean
                self.moving_var = self.momentum * self.moving_var + (1.0 - self.momentum) * var
        else:
            x_hat = (x - self.moving_mean) / np.sqrt(self.moving_var + self.epsilon)
        return self.gamma * x_hat + self.beta

    def backward(self, grad):
        batch = grad.shape[0]
        x_hat = self._x_hat
        self.grads = {"gamma": np.sum(grad * x_hat, axis=0), "beta": grad.sum(axis=0)}
        d_xhat = grad * self.gamma
        return (self._inv_std / batch) * (
            batch * d_xhat - d_xhat.sum(axis=0) - x_hat * np.sum(d_xhat * x_hat, axis=0)
        )

    def param_count(self):
        return 2 * self.width, 2 * self.width


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


class Model:
    """Sequential stack of layers plus the architecture it was built from"""

    def __init__(self, architecture, layers):
        self.architecture = architecture
        self.layers = list(layers)
        self._probs = None

    def forward(self, batch, mode="infer", update_moving=True):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.architecture.input_dim:
            raise ShapeError(f"Expected batch width {self.architecture.input_dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericError("Input batch contains non-finite values")
        if mode not in ("train", "infer"):
            raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
        training = mode == "train"
        if training and x.shape[0] < 2:
            raise ParameterError("Train-mode forward needs a batch of at least 2 examples")

        for layer in self.layers:
            x = layer.forward(x, training, update_moving)
        probs = softmax(x)
        if training:
            self._probs = probs
        return probs

    def backward(self, targets):
        """Backpropagate mean cross-entropy from the last train-mode forward"""
        if self._probs is None:
            raise ParameterError("backward() needs a preceding train-mode forward()")
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != self._probs.shape:
            raise ShapeError(f"Targets shape {targets.shape} != output shape {self._probs.shape}")

        # softmax + cross-entropy collapse to (probs - targets) / B
        grad = (self._probs - targets) / targets.shape[0]
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return [layer.grads[name] for layer in self.layers for name in layer.trainable]

    def trainable_parameters(self):
        return [getattr(layer, name) for layer in self.layers for name in layer.trainable]

    def parameter_names(self):
        return [f"{i}.{layer.kind}.{name}" for i, layer in enumerate(self.layers) for name in layer.trainable]

    def param_counts(self):
        total = trainable = non_trainable = 0
        for layer in self.layers:
            size, frozen = layer.param_count()
            if layer.kind == "batchnorm":
                total += size + frozen
                trainable += size
                non_trainable += frozen
            else:
                total += size
                trainable += size
        return total, trainable, non_trainable


def build_model(arch=None, seed=0):
    """Build the layer stack with Glorot-uniform dense weights and identity batch norms"""
    arch = (arch or ModelArchitecture()).validate()
    rng = np.random.default_rng(int(seed))

    def dense(fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return DenseLayer(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out))

    def batchnorm(width):
        return BatchNormLayer(width, arch.bn_epsilon, arch.bn_momentum)

    layers = []
    if arch.bn_input:
        layers.append(batchnorm(arch.input_dim))
    previous = arch.input_dim
    for width in arch.hidden:
        layers.append(dense(previous, width))
        if arch.bn_hidden and arch.bn_order == "pre_activation":
            layers.extend([batchnorm(width), ReLULayer()])
        elif arch.bn_hidden:
            layers.extend([ReLULayer(), batchnorm(width)])
        else:
            layers.append(ReLULayer())
        previous = width
    layers.append(dense(previous, arch.output_dim))
    return Model(arch, layers)


def forward(model, batch, mode="infer"):
    return model.forward(batch, mode)


def cross_entropy(probs, targets):
    """Mean categorical cross-entropy in nats, probabilities clipped to [1e-12, 1]"""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ShapeError(f"probs shape {probs.shape} != targets shape {targets.shape}")
    if probs.ndim == 1:
        probs, targets = probs[None, :], targets[None, :]
    q = np.clip(probs, PROB_FLOOR, 1.0)
    return float(-np.mean(np.sum(targets * np.log(q), axis=1)))


def backward(model, batch, targets, update_moving=True):
    """Train-mode forward then gradients of every trainable parameter"""
    model.forward(batch, "train", update_moving)
    return model.backward(targets)


@dataclass
class AdamState:
    m: list = None
    v: list = None
    t: int = 0
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7


def adam_step(params, grads, state):
    """One bias-corrected Adam update; arrays in ``params`` are updated in place"""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if np.shape(p) != np.shape(g) or np.shape(m) != np.shape(g):
            raise ShapeError(f"Parameter shape {np.shape(p)} != gradient shape {np.shape(g)}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.alpha * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7

    def validate(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ParameterError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_epsilon > 0):
            raise ParameterError("Adam betas must lie in [0, 1) and epsilon must be positive")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    # None when the validation split is empty
    val_loss: float | None = None
    val_accuracy: float | None = None
    seconds: float = 0.0

    def validation_text(self):
        if self.val_loss is None:
            return "val_loss=n/a val_acc=n/a"
        return f"val_loss={self.val_loss:.4f} val_acc={self.val_accuracy:.4f}"


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    steps: int = 0

    def __len__(self):
        return len(self.records)

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def to_frame(self):
        """history.csv layout (wall time left out so reruns compare equal)"""
        return pd.DataFrame(
            [(r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy) for r in self.records],
            columns=["epoch", "train_loss", "train_acc", "val_loss", "val_acc"],
        )


def batch_slices(n, batch_size):
    """Consecutive batches; a trailing batch of one is folded into the previous one"""
    bounds = list(range(0, n, batch_size)) + [n]
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start < 2:
        tail = slices.pop()
        slices[-1] = slice(slices[-1].start, tail.stop)
    return slices


def _one_hot_matrix(labels, classes):
    return np.eye(classes)[np.asarray(labels, dtype=np.int64)]


def _model_inputs(model, X):
    X = np.asarray(X, dtype=np.float64)
    if model.architecture.channels is not None:
        if X.shape[-1] != N_FEATURES:
            raise ShapeError(f"Expected {N_FEATURES} features, got {X.shape[-1]}")
        X = select_channels(X, model.architecture.channels)
    return X


def evaluate_model(model, X, labels):
    """Infer-mode loss and accuracy over a whole set"""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InsufficientDataError("Cannot evaluate on an empty set")
    probs = model.forward(_model_inputs(model, X), "infer")
    loss = cross_entropy(probs, _one_hot_matrix(labels, model.architecture.output_dim))
    accuracy = float(np.mean(np.argmax(probs, axis=1) == labels))
    return loss, accuracy


def train(model, split, config=None):
    """Fixed-epoch mini-batch training; returns the mutated model and its history"""
    config = (config or TrainConfig()).validate()
    X_train, y_train = examples_to_arrays(split.train)
    X_val, y_val = examples_to_arrays(split.validation)
    if y_train.size == 0:
        raise DataError("Training set is empty")
    X_train = _model_inputs(model, X_train)
    if X_val.size:
        X_val = _model_inputs(model, X_val)
    if y_train.size < 2 or (config.batch_size < 2 and model.architecture.bn_positions):
        raise ParameterError("Batch-normalised training needs batches of at least 2 examples")

    targets = _one_hot_matrix(y_train, model.architecture.output_dim)
    state = AdamState(alpha=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.adam_epsilon)
    rng = np.random.default_rng(int(config.seed))
    history = TrainHistory()
    params = model.trainable_parameters()

    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(y_train.size) if config.shuffle else np.arange(y_train.size)
        for batch in batch_slices(y_train.size, config.batch_size):
            index = order[batch]
            grads = backward(model, X_train[index], targets[index])
            loss = cross_entropy(model._probs, targets[index])
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            adam_step(params, grads, state)

        train_loss, train_acc = evaluate_model(model, X_train, y_train)
        val_loss, val_acc = evaluate_model(model, X_val, y_val) if y_val.size else (None, None)
        if not math.isfinite(train_loss):
            raise TrainingDivergedError(epoch)
        record = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc, time.perf_counter() - started)
        history.records.append(record)
        logger.info(
            "epoch %d/%d loss=%.4f acc=%.4f %s (%.2fs)",
            epoch, config.epochs, train_loss, train_acc, record.validation_text(), record.seconds,
        )

    history.steps = state.t
    return model, history


def predict_batch(model, features):
    """Infer-mode labels and probabilities for a matrix of feature rows"""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.architecture.raw_width:
        raise ShapeError(f"Expected {model.architecture.raw_width} features, got {X.shape[1]}")
    probs = model.forward(_model_inputs(model, X), "infer")
    return np.argmax(probs, axis=1), probs


def predict(model, features):
    """Label and class probabilities for one feature vector"""
    components = getattr(features, "components", features)
    labels, probs = predict_batch(model, np.asarray(components, dtype=np.float64).reshape(1, -1))
    return StateLabel(int(labels[0])), probs[0]


def _layer_document(layer):
    if layer.kind == "dense":
        return {
            "type": "dense",
            "in": int(layer.shape[1]),
            "out": int(layer.shape[0]),
            "weights": layer.weights.tolist(),
            "bias": layer.bias.tolist(),
        }
    if layer.kind == "batchnorm":
        return {
            "type": "batchnorm",
            "width": int(layer.width),
            "gamma": layer.gamma.tolist(),
            "beta": layer.beta.tolist(),
            "moving_mean": layer.moving_mean.tolist(),
            "moving_var": layer.moving_var.tolist(),
        }
    return {"type": layer.kind}


def save_model(model, path):
    """Write the versioned JSON model document; floats use shortest round-trip repr"""
    document = {
        "format_version": FORMAT_VERSION,
        "architecture": model.architecture.to_dict(),
        "layers": [_layer_document(layer) for layer in model.layers],
        "param_count": model.param_counts()[0],
    }
    try:
        text = json.dumps(document, allow_nan=False)
    except ValueError:
        raise NumericError("Model contains non-finite parameters; refusing to save") from None
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    logger.info("Saved model (%d parameters) to %s", document["param_count"], path)
    return path


def _array(doc, key, shape):
    try:
        values = np.asarray(doc[key], dtype=np.float64)
    except KeyError:
        raise MalformedModelError(f"Layer is missing '{key}'") from None
    except (TypeError, ValueError):
        raise MalformedModelError(f"Layer field '{key}' is not a numeric array") from None
    if values.shape != shape:
        raise ModelDimensionError(f"Layer field '{key}' has shape {values.shape}, expected {shape}")
    if not np.all(np.isfinite(values)):
        raise MalformedModelError(f"Layer field '{key}' contains non-finite values")
    return values


def load_model(path):
    """Read and validate a model document written by save_model"""
    with open(path, encoding="utf-8") as f:
        try:
            document = json.load(f)
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise MalformedModelError(f"{path}: not a valid model document ({e})") from None
    if not isinstance(document, dict) or "format_version" not in document:
        raise MalformedModelError(f"{path}: missing format_version")
    if document["format_version"] != FORMAT_VERSION:
        raise ModelVersionError(
            f"{path}: format_version {document['format_version']} is not supported (expected {FORMAT_VERSION})"
        )
    try:
        arch = ModelArchitecture.from_dict(document["architecture"]).validate()
        layer_docs = document["layers"]
        declared = int(document["param_count"])
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedModelError(f"{path}: invalid header ({e})") from None
    if not isinstance(layer_docs, list):
        raise MalformedModelError(f"{path}: layers must be a list, got {type(layer_docs).__name__}")

    model = build_model(arch, seed=0)
    if len(layer_docs) != len(model.layers):
        raise ModelDimensionError(f"{path}: {len(layer_docs)} layers, architecture needs {len(model.layers)}")
    for layer, doc in zip(model.layers, layer_docs):
        if not isinstance(doc, dict) or doc.get("type") != layer.kind:
            raise ModelDimensionError(f"{path}: layer order does not match the declared architecture")
        if layer.kind == "dense":
            layer.weights = _array(doc, "weights", layer.weights.shape)
            layer.bias = _array(doc, "bias", layer.bias.shape)
        elif layer.kind == "batchnorm":
            width = (layer.width,)
            layer.gamma = _array(doc, "gamma", width)
            layer.beta = _array(doc, "beta", width)
            layer.moving_mean = _array(doc, "moving_mean", width)
            layer.moving_var = _array(doc, "moving_var", width)
            if np.any(layer.moving_var < 0):
                raise MalformedModelError(f"{path}: negative moving variance")

    total = model.param_counts()[0]
    if declared != total or total != arch.expected_counts()[0]:
        raise ModelDimensionError(f"{path}: declared {declared} parameters, architecture has {total}")
    return model
