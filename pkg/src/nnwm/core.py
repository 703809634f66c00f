"""Minimal float64 layer stack: conv/dense/relu/avgpool, softmax cross-entropy,
Nesterov SGD and a central-difference gradient checker.

Tensors are plain ``np.ndarray`` of dtype float64. Image batches are NHWC and
convolution weights are laid out ``(S, S, D, L)``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, UsageError

LAYER_KINDS = ("conv2d", "dense", "relu", "avgpool", "softmax")


class Layer:
    kind = ""
    param_names: tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}

    def spec(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def init(self, rng: np.random.Generator) -> None:
        pass

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError


class Conv2D(Layer):
    """Stride-1 convolution with 'same' zero padding; weight shape (S, S, D, L)."""

    kind = "conv2d"
    param_names = ("W", "b")

    def __init__(self, name: str, size: int, depth: int, filters: int):
        super().__init__(name)
        if size < 1 or size % 2 == 0:
            raise ConfigError(f"{name}: filter size must be odd and positive, got {size}")
        self.size, self.depth, self.filters = size, depth, filters
        self.params = {
            "W": np.zeros((size, size, depth, filters)),
            "b": np.zeros(filters),
        }

    def spec(self):
        return {**super().spec(), "size": self.size, "depth": self.depth, "filters": self.filters}

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[2] != self.depth:
            raise ConfigError(f"{self.name}: expects (H, W, {self.depth}) input, got {in_shape}")
        return in_shape[:2] + (self.filters,)

    def init(self, rng):
        fan_in = self.size * self.size * self.depth
        self.params["W"] = rng.standard_normal(self.params["W"].shape) * np.sqrt(2.0 / fan_in)
        self.params["b"] = np.zeros(self.filters)

    def _cols(self, x):
        p = self.size // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        # (N, H, W, D, S, S) -> (N, H, W, S, S, D) so columns follow W's (i, j, k) order
        win = sliding_window_view(xp, (self.size, self.size), axis=(1, 2))
        return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))

    def forward(self, x):
        n, h, w, _ = x.shape
        cols = self._cols(x).reshape(n * h * w, -1)
        wmat = self.params["W"].reshape(-1, self.filters)
        y = cols @ wmat + self.params["b"]
        return y.reshape(n, h, w, self.filters), (x.shape, cols)

    def backward(self, dy, cache):
        (n, h, w, d), cols = cache
        s, p = self.size, self.size // 2
        dflat = dy.reshape(-1, self.filters)
        grads = {
            "W": (cols.T @ dflat).reshape(self.params["W"].shape),
            "b": dflat.sum(axis=0),
        }
        dcols = (dflat @ self.params["W"].reshape(-1, self.filters).T).reshape(n, h, w, s, s, d)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, d))
        for i in range(s):
            for j in range(s):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p:p + h, p:p + w, :], grads


class Dense(Layer):
    """Fully connected layer; flattens any trailing input dimensions."""

    kind = "dense"
    param_names = ("W", "b")

    def __init__(self, name: str, n_in: int, n_out: int):
        super().__init__(name)
        self.n_in, self.n_out = n_in, n_out
        self.params = {"W": np.zeros((n_in, n_out)), "b": np.zeros(n_out)}

    def spec(self):
        return {**super().spec(), "n_in": self.n_in, "n_out": self.n_out}

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.n_in:
            raise ConfigError(f"{self.name}: expects {self.n_in} inputs, got shape {in_shape}")
        return (self.n_out,)

    def init(self, rng):
        self.params["W"] = rng.standard_normal((self.n_in, self.n_out)) * np.sqrt(2.0 / self.n_in)
        self.params["b"] = np.zeros(self.n_out)

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        return flat @ self.params["W"] + self.params["b"], (x.shape, flat)

    def backward(self, dy, cache):
        shape, flat = cache
        grads = {"W": flat.T @ dy, "b": dy.sum(axis=0)}
        return (dy @ self.params["W"].T).reshape(shape), grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, mask):
        return dy * mask, {}


class AvgPool(Layer):
    """Non-overlapping average pooling; ``size=0`` pools globally."""

    kind = "avgpool"

    def __init__(self, name: str, size: int = 2):
        super().__init__(name)
        self.size = size

    def spec(self):
        return {**super().spec(), "size": self.size}

    def _window(self, in_shape):
        return (in_shape[0], in_shape[1]) if self.size == 0 else (self.size, self.size)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigError(f"{self.name}: expects (H, W, C) input, got {in_shape}")
        ph, pw = self._window(in_shape)
        if in_shape[0] % ph or in_shape[1] % pw:
            raise ConfigError(f"{self.name}: {in_shape[:2]} not divisible by pool {ph}x{pw}")
        return (in_shape[0] // ph, in_shape[1] // pw, in_shape[2])

    def forward(self, x):
        n, h, w, c = x.shape
        ph, pw = self._window(x.shape[1:])
        y = x.reshape(n, h // ph, ph, w // pw, pw, c).mean(axis=(2, 4))
        return y, x.shape

    def backward(self, dy, shape):
        n, h, w, c = shape
        ph, pw = self._window(shape[1:])
        dx = np.repeat(np.repeat(dy, ph, axis=1), pw, axis=2) / (ph * pw)
        return dx, {}


class SoftmaxOutput(Layer):
    """Marks the logits; the softmax itself is fused into the loss."""

    kind = "softmax"

    def forward(self, x):
        return x, None

    def backward(self, dy, cache):
        return dy, {}


def layer_from_spec(spec: dict) -> Layer:
    kind, name = spec.get("kind"), spec.get("name")
    if kind == "conv2d":
        return Conv2D(name, spec["size"], spec["depth"], spec["filters"])
    if kind == "dense":
        return Dense(name, spec["n_in"], spec["n_out"])
    if kind == "relu":
        return ReLU(name)
    if kind == "avgpool":
        return AvgPool(name, spec.get("size", 2))
    if kind == "softmax":
        return SoftmaxOutput(name)
    raise ConfigError(f"unknown layer kind {kind!r}; expected one of {LAYER_KINDS}")


class Model:
    """Sequential host network.

    ``regularizer`` is an optional object with attributes ``layer`` (a layer
    name) and a method ``penalty(W) -> (value, dvalue/dW)``; its value is added
    to the training objective and its gradient to that layer's weight gradient.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], embed_layer: str | None = None,
                 seed: int = 0, meta: dict | None = None):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.meta = dict(meta or {})
        self.regularizer = None
        self.version = 0
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        shape = self.input_shape
        for layer in layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self.embed_layer = None
        if embed_layer is not None:
            self.set_embed_layer(embed_layer)

    def set_embed_layer(self, name: str) -> None:
        if self.layer(name).kind != "conv2d":
            raise ConfigError(f"embed layer {name!r} is not a conv2d layer")
        self.embed_layer = name

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ConfigError(f"no layer named {name!r}")

    def init(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)
        self.seed = seed
        self.version += 1

    def param_keys(self) -> list[tuple[str, str]]:
        return [(layer.name, p) for layer in self.layers for p in layer.param_names]

    def parameters(self) -> list[np.ndarray]:
        return [self.layer(l).params[p] for l, p in self.param_keys()]

    def set_parameters(self, arrays: list[np.ndarray]) -> None:
        for (l, p), a in zip(self.param_keys(), arrays, strict=True):
            self.layer(l).params[p] = a
        self.version += 1

    def n_params(self) -> int:
        return sum(a.size for a in self.parameters())

    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.spec() for layer in self.layers],
            "embed_layer": self.embed_layer,
            "seed": self.seed,
        }

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def predict_proba(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            z = x[i:i + batch_size]
            for layer in self.layers:
                z, _ = layer.forward(z)
            out.append(softmax(z))
        return np.concatenate(out) if out else np.zeros((0,) + self.output_shape)

    def error_rate(self, x: np.ndarray, labels: np.ndarray) -> float:
        """Fraction misclassified; soft labels are compared via their argmax."""
        if len(x) == 0:
            return float("nan")
        pred = self.predict_proba(x).argmax(axis=1)
        true = labels if labels.ndim == 1 else labels.argmax(axis=1)
        return float(np.mean(pred != true))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def as_targets(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Integer labels -> one-hot; soft-target rows pass through."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ConfigError(f"class index outside [0, {n_classes})")
        return np.eye(n_classes)[labels.astype(int)]
    if labels.ndim != 2 or labels.shape[1] != n_classes:
        raise ConfigError(f"soft targets must have shape (N, {n_classes}), got {labels.shape}")
    return labels.astype(np.float64)


@dataclass
class Activations:
    """Per-layer forward caches for one batch."""

    caches: list
    logits: np.ndarray
    targets: np.ndarray
    version: int


def forward(model: Model, x: np.ndarray, labels: np.ndarray) -> tuple[Activations, float]:
    """Run the batch through the model; returns caches and mean cross-entropy E0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != model.input_shape:
        raise ConfigError(f"batch shape {x.shape[1:]} does not match model input {model.input_shape}")
    targets = as_targets(labels, model.output_shape[0])
    if len(targets) != len(x):
        raise ConfigError(f"{len(x)} inputs but {len(targets)} labels")
    caches = []
    z = x
    for layer in model.layers:
        z, cache = layer.forward(z)
        if not np.isfinite(z).all():
            raise NumericError(f"non-finite activation in layer {layer.name!r}")
        caches.append(cache)
    logz = z - z.max(axis=1, keepdims=True)
    logz = logz - np.log(np.exp(logz).sum(axis=1, keepdims=True))
    loss = float(-(targets * logz).sum() / len(x))
    return Activations(caches, z, targets, model.version), loss


def backward(model: Model, acts: Activations, labels: np.ndarray) -> list[np.ndarray]:
    """Gradients of E0 (plus the attached regularizer, if any), in ``model.param_keys()`` order."""
    targets = as_targets(labels, model.output_shape[0])
    if acts.version != model.version or targets.shape != acts.targets.shape \
            or not np.array_equal(targets, acts.targets):
        raise UsageError("activations are stale: labels or parameters changed since forward()")
    n = len(targets)
    dz = (softmax(acts.logits) - targets) / n
    per_layer: dict[str, dict[str, np.ndarray]] = {}
    for layer, cache in zip(reversed(model.layers), reversed(acts.caches)):
        dz, g = layer.backward(dz, cache)
        per_layer[layer.name] = g
    reg = model.regularizer
    if reg is not None:
        _, dW = reg.penalty(model.layer(reg.layer).params["W"])
        per_layer[reg.layer]["W"] = per_layer[reg.layer]["W"] + dW
    return [per_layer[l][p] for l, p in model.param_keys()]


def objective(model: Model, x: np.ndarray, labels: np.ndarray) -> float:
    """Full training objective E0 + (regularizer penalty)."""
    _, loss = forward(model, x, labels)
    reg = model.regularizer
    if reg is not None:
        loss += reg.penalty(model.layer(reg.layer).params["W"])[0]
    return loss


@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: list[tuple[int, float]] = field(default_factory=list)
    velocity: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight decay must be nonnegative, got {self.weight_decay}")
        for _, mult in self.schedule:
            if mult <= 0:
                raise ConfigError(f"schedule multiplier must be positive, got {mult}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for at, mult in self.schedule:
            if epoch >= at:
                lr *= mult
        return lr


def default_schedule(epochs: int) -> list[tuple[int, float]]:
    return [(int(0.6 * epochs), 0.2)] if epochs >= 2 else []


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState,
             epoch: int = 0) -> list[np.ndarray]:
    """One Nesterov step with L2 weight decay folded into the gradient.

    v <- mu*v + (g + wd*w);  w <- w - lr*((g + wd*w) + mu*v)
    """
    if len(params) != len(grads):
        raise ConfigError("params and grads differ in length")
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    lr, mu = state.lr_at(epoch), state.momentum
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        if w.shape != g.shape:
            raise ConfigError(f"param {i}: shape {w.shape} vs grad {g.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {i}")
        g = g + state.weight_decay * w if state.weight_decay else g
        if mu:
            v = mu * state.velocity[i] + g
            state.velocity[i] = v
            g = g + mu * v
        out.append(w - lr * g)
    return out


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    worst: tuple[str, str, tuple[int, ...]] | None
    checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tolerance)


def grad_check(model: Model, x: np.ndarray, labels: np.ndarray, tolerance: float = 1e-4,
               step: float = 1e-5, analytic: list[np.ndarray] | None = None,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of the full objective against central differences.

    Relative error per component is |a - n| / max(|a|, |n|, floor); the floor
    keeps components that are zero up to rounding from dominating the report.
    """
    if analytic is None:
        acts, _ = forward(model, x, labels)
        analytic = backward(model, acts, labels)
    worst, max_err, checked = None, 0.0, 0
    for (lname, pname), g in zip(model.param_keys(), analytic):
        p = model.layer(lname).params[pname]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = objective(model, x, labels)
            p[idx] = orig - step
            down = objective(model, x, labels)
            p[idx] = orig
            num = (up - down) / (2 * step)
            err = abs(g[idx] - num) / max(abs(g[idx]), abs(num), floor)
            checked += 1
            if worst is None or err > max_err:
                max_err, worst = err, (lname, pname, idx)
    return GradCheckReport(max_err, tolerance, worst, checked)
