"""Desk-scale host networks, datasets and the training loop for the three
embedding situations (train-, fine-tune- and distill-to-embed)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core
from .core import AvgPool, Conv2D, Dense, Model, ReLU, SoftmaxOutput
from .errors import ConfigError, DataError
from .watermark import Message, WatermarkKey, attach_regularizer, embedding_loss_W, extract

log = logging.getLogger(__name__)

PRESETS = ("toy-mlp", "small-cnn", "mini-wide")
SITUATIONS = ("none", "train-to-embed", "fine-tune-to-embed", "distill-to-embed")


def build_host(preset: str, seed: int, input_shape=(8, 8, 3), classes: int = 10, width: int = 1,
               embed_layer: str | None = None) -> Model:
    """Build and He-initialize a preset host.

    mini-wide mirrors the wide-residual layout without the shortcuts: the second
    conv of groups 2/3/4 has input depth 16k/32k/64k, i.e. M = 144k/288k/576k.
    """
    input_shape = tuple(input_shape)
    h, w, c = input_shape if len(input_shape) == 3 else (None, None, None)
    if preset == "toy-mlp":
        n_in = int(np.prod(input_shape))
        layers = [Dense("fc1", n_in, 16 * width), ReLU("relu1"), Dense("fc2", 16 * width, classes),
                  SoftmaxOutput("out")]
        default_embed = None
    elif preset == "small-cnn":
        if h is None:
            raise ConfigError("small-cnn needs (H, W, C) input")
        layers = [
            Conv2D("conv1", 3, c, 16), ReLU("relu1"),
            Conv2D("conv2", 3, 16, 16 * width), ReLU("relu2"), AvgPool("pool2", 2),
            Dense("fc", (h // 2) * (w // 2) * 16 * width, classes), SoftmaxOutput("out"),
        ]
        default_embed = "conv2"
    elif preset == "mini-wide":
        if h is None:
            raise ConfigError("mini-wide needs (H, W, C) input")
        k = width
        layers = [
            Conv2D("conv1", 3, c, 16), ReLU("relu1"),
            Conv2D("conv2a", 3, 16, 16 * k), ReLU("relu2a"),
            Conv2D("conv2b", 3, 16 * k, 16 * k), ReLU("relu2b"), AvgPool("pool2", 2),
            Conv2D("conv3a", 3, 16 * k, 32 * k), ReLU("relu3a"),
            Conv2D("conv3b", 3, 32 * k, 32 * k), ReLU("relu3b"), AvgPool("pool3", 2),
            Conv2D("conv4a", 3, 32 * k, 64 * k), ReLU("relu4a"),
            Conv2D("conv4b", 3, 64 * k, 64 * k), ReLU("relu4b"), AvgPool("gap", 0),
            Dense("fc", 64 * k, classes), SoftmaxOutput("out"),
        ]
        default_embed = "conv2b"
    else:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {PRESETS}")
    model = Model(layers, input_shape, embed_layer or default_embed, seed,
                  meta={"preset": preset, "classes": classes, "width": width, "epochs_trained": 0})
    model.init(seed)
    return model


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray = field(repr=False)
    labels: np.ndarray | None = field(repr=False)
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        inputs.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if len(labels) != len(inputs):
                raise ConfigError(f"{len(inputs)} inputs but {len(labels)} labels")
            if labels.ndim == 1 and labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
                raise ConfigError(f"class index outside [0, {self.n_classes})")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.inputs)

    def unlabeled(self) -> "Dataset":
        return Dataset(self.inputs, None, self.n_classes, self.split)


def make_synthetic(classes: int, dims, n: int, seed: int, separation: float = 4.0,
                   split: str = "train") -> Dataset:
    """Isotropic unit-variance Gaussian blobs around orthonormal class means.

    Class means are ``separation * q_c`` with orthonormal ``q_c`` and depend only
    on ``seed``; samples also depend on ``split``, so train and test share the
    task. Labels are balanced (round-robin) and then shuffled.
    """
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    dims = (dims,) if np.isscalar(dims) else tuple(dims)
    F = int(np.prod(dims))
    if F < classes:
        raise ConfigError(f"need at least {classes} dimensions for orthonormal means, got {F}")
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((F, classes)))
    means = separation * q.T
    rng = np.random.default_rng([seed, {"train": 0, "test": 1}.get(split, 2)])
    labels = rng.permutation(np.arange(n) % classes)
    x = means[labels] + rng.standard_normal((n, F))
    return Dataset(x.reshape((n,) + dims), labels, classes, split)


CIFAR_RECORD = 3073
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]


def _read_cifar(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 file {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        full = raw.size // CIFAR_RECORD * CIFAR_RECORD
        raise DataError(f"{path}: truncated record at byte offset {full} (file has {raw.size} bytes)")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: label {labels[bad]} > 9 at byte offset {bad * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return images, labels


def _stratified(labels: np.ndarray, count: int | None, rng: np.random.Generator, classes: int = 10) -> np.ndarray:
    if count is None:
        return np.arange(len(labels))
    per = [count // classes + (c < count % classes) for c in range(classes)]
    picked = []
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per[c]:
            raise DataError(f"class {c} has {len(idx)} records, {per[c]} requested")
        picked.append(rng.permutation(idx)[:per[c]])
    return np.sort(np.concatenate(picked))


def load_cifar10(data_dir, train_count: int | None = None, test_count: int | None = None,
                 seed: int = 0) -> tuple[Dataset, Dataset]:
    """Load a stratified subsample of the CIFAR-10 binary batches.

    Pixels are scaled to [0, 1] and the per-channel mean of the selected
    training images is subtracted from both splits. ``None`` counts take all
    records.
    """
    root = Path(data_dir)
    if not (root / CIFAR_TEST_FILES[0]).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    rng = np.random.default_rng(seed)
    splits = []
    for files, count in ((CIFAR_TRAIN_FILES, train_count), (CIFAR_TEST_FILES, test_count)):
        parts = [_read_cifar(root / f) for f in files]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
        idx = _stratified(labels, count, rng)
        splits.append((images[idx].astype(np.float64) / 255.0, labels[idx]))
    mean = splits[0][0].mean(axis=(0, 1, 2))
    return (Dataset(splits[0][0] - mean, splits[0][1], 10, "train"),
            Dataset(splits[1][0] - mean, splits[1][1], 10, "test"))


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: list[tuple[int, float]] | None = None
    lam: float = 0.01
    situation: str = "train-to-embed"
    seed: int = 0
    embed_layer: str | None = None

    def __post_init__(self):
        if self.situation not in SITUATIONS:
            raise ConfigError(f"situation must be one of {SITUATIONS}, got {self.situation!r}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def embeds(self) -> bool:
        return self.situation != "none"

    def optimizer(self) -> core.OptimizerState:
        sched = core.default_schedule(self.epochs) if self.schedule is None else [tuple(s) for s in self.schedule]
        return core.OptimizerState(self.lr, self.momentum, self.weight_decay, sched)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    stats: object | None = None  # DetectionStats when a key was used


def train(model: Model, data: Dataset, config: TrainConfig, key: WatermarkKey | None = None,
          message: Message | None = None, test_data: Dataset | None = None,
          teacher: Model | None = None) -> TrainResult:
    """Train a copy of ``model`` on E0 + lambda * E_R.

    fine-tune- and distill-to-embed require an already-trained model. Distilling
    replaces the targets by the teacher's softmax outputs (temperature 1); the
    teacher defaults to the incoming model and ``data.labels`` is never read.
    """
    if config.embeds != (key is not None) or (key is None) != (message is None):
        raise ConfigError(f"situation {config.situation!r} "
                          + ("requires a key and message" if config.embeds else "takes no key or message"))
    trained = model.meta.get("epochs_trained", 0) > 0
    if config.situation in ("fine-tune-to-embed", "distill-to-embed") and not trained:
        raise ConfigError(f"{config.situation} needs a pre-trained checkpoint")
    model = model.copy()
    layer = config.embed_layer or model.embed_layer
    if key is not None:
        attach_regularizer(model, layer, key, message, config.lam)
    if config.situation == "distill-to-embed":
        teacher = teacher or model
        targets = teacher.predict_proba(data.inputs)
    else:
        if data.labels is None:
            raise ConfigError(f"{config.situation} needs labelled data")
        targets = data.labels
    x = data.inputs
    state = config.optimizer()
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start:start + config.batch_size]
            acts, loss = core.forward(model, x[idx], targets[idx])
            grads = core.backward(model, acts, targets[idx])
            model.set_parameters(core.sgd_step(model.parameters(), grads, state, epoch))
            total += loss * len(idx)
        row = {"epoch": epoch + 1, "E0": total / len(x)}
        if key is not None:
            row["E_R"] = embedding_loss_W(key, message, model.layer(layer).params["W"])[0]
        if test_data is not None:
            row["test_error"] = model.error_rate(test_data.inputs, test_data.labels)
        history.append(row)
        log.debug("epoch %d %s", epoch + 1, row)
    model.regularizer = None
    model.meta["epochs_trained"] = model.meta.get("epochs_trained", 0) + config.epochs
    if history:
        model.meta["final_E0"] = history[-1]["E0"]
    stats = None
    if key is not None:
        stats = extract(key, model.layer(layer).params["W"], message)
        model.meta["final_E_R"] = history[-1]["E_R"] if history else None
    return TrainResult(model, history, stats)
