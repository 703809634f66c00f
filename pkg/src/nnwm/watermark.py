"""Projection-based weight watermark: key matrices, the BCE embedding loss,
extraction and bit error rate.

The embedding target of a conv layer with weights ``W`` of shape (S, S, D, L)
is the per-position mean over the L filters, flattened in (row, column,
depth) order: ``w[(i*S + j)*D + k] = mean_l W[i, j, k, l]``. Extraction
thresholds ``X @ w`` at zero, with a projection of exactly 0 read as bit 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError

KEY_KINDS = ("direct", "diff", "random")
KEY_FORMAT_VERSION = 1
CLAMP = 30.0
LOG_FLOOR = 1e-12
HIST_BINS = 32


def _column_stream(rng: np.random.Generator, T: int, M: int) -> np.ndarray:
    # distinct columns while T <= M; further permutations only once T > M
    reps = -(-T // M)
    return np.concatenate([rng.permutation(M) for _ in range(reps)])[:T]


@dataclass(frozen=True)
class WatermarkKey:
    kind: str
    seed: int
    T: int
    M: int

    def __post_init__(self):
        if self.kind not in KEY_KINDS:
            raise ConfigError(f"key kind must be one of {KEY_KINDS}, got {self.kind!r}")
        if self.T < 1 or self.M < 1:
            raise ConfigError(f"key needs T >= 1 and M >= 1, got T={self.T}, M={self.M}")
        if self.kind == "diff" and self.M < 2:
            raise ConfigError("diff key needs M >= 2")

    @cached_property
    def X(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        T, M = self.T, self.M
        if self.kind == "random":
            return rng.standard_normal((T, M))
        X = np.zeros((T, M))
        rows = np.arange(T)
        plus = _column_stream(rng, T, M)
        X[rows, plus] = 1.0
        if self.kind == "diff":
            # minus column uniform over the M-1 columns other than the row's plus column
            offs = rng.integers(1, M, size=T)
            X[rows, (plus + offs) % M] = -1.0
        return X

    def to_json(self) -> dict:
        return {"kind": self.kind, "seed": int(self.seed), "T": self.T, "M": self.M,
                "version": KEY_FORMAT_VERSION}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def from_json(cls, d: dict) -> "WatermarkKey":
        expected = {"kind", "seed", "T", "M", "version"}
        if set(d) != expected:
            raise ConfigError(f"key record fields must be {sorted(expected)}, got {sorted(d)}")
        if d["version"] != KEY_FORMAT_VERSION:
            raise ConfigError(f"unsupported key version {d['version']}")
        return cls(d["kind"], int(d["seed"]), int(d["T"]), int(d["M"]))

    @classmethod
    def load(cls, path) -> "WatermarkKey":
        return cls.from_json(json.loads(Path(path).read_text()))


def make_key(kind: str, seed: int, T: int, M: int) -> WatermarkKey:
    key = WatermarkKey(kind, int(seed), int(T), int(M))
    key.X  # realize eagerly so argument errors surface here
    return key


@dataclass(frozen=True)
class Message:
    """T-bit message; bytes are packed MSB-first, the last byte zero-padded."""

    bits: np.ndarray = field(repr=False)

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or bits.size == 0 or not np.isin(bits, (0, 1)).all():
            raise ConfigError("message bits must be a non-empty 1-D array of 0/1")
        object.__setattr__(self, "bits", bits.astype(np.uint8))

    def __len__(self):
        return self.bits.size

    @property
    def T(self) -> int:
        return self.bits.size

    @classmethod
    def ones(cls, T: int) -> "Message":
        return cls(np.ones(T, dtype=np.uint8))

    @classmethod
    def random(cls, T: int, seed: int) -> "Message":
        return cls(np.random.default_rng(seed).integers(0, 2, size=T))

    @classmethod
    def from_bytes(cls, data: bytes, T: int | None = None) -> "Message":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        T = bits.size if T is None else T
        if T > bits.size:
            raise ConfigError(f"{len(data)} bytes hold fewer than {T} bits")
        return cls(bits[:T])

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()

    @classmethod
    def from_hex(cls, hex_str: str, T: int) -> "Message":
        return cls.from_bytes(bytes.fromhex(hex_str), T)

    def to_hex(self) -> str:
        return self.to_bytes().hex()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"hex": self.to_hex(), "length": self.T}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Message":
        d = json.loads(Path(path).read_text())
        if set(d) != {"hex", "length"}:
            raise ConfigError(f"message file needs exactly 'hex' and 'length', got {sorted(d)}")
        return cls.from_hex(d["hex"], int(d["length"]))


@dataclass
class FlattenedTarget:
    w: np.ndarray
    shape: tuple[int, int, int]
    layer: str | None = None

    @property
    def M(self) -> int:
        return self.w.size


def flatten_target(W: np.ndarray, layer: str | None = None) -> FlattenedTarget:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 4 or W.shape[3] < 1:
        raise ConfigError(f"conv weights must be 4-D (S, S, D, L), got shape {W.shape}")
    return FlattenedTarget(W.mean(axis=3).reshape(-1), W.shape[:3], layer)


def embedding_loss(key: WatermarkKey, message: Message, w: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy of sigmoid(X w) against the message bits, and its gradient in w."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (key.M,) or message.T != key.T:
        raise ConfigError(f"key is {key.T}x{key.M}; got w of shape {w.shape} and {message.T} bits")
    z = np.clip(key.X @ w, -CLAMP, CLAMP)
    y, one_minus_y = expit(z), expit(-z)
    b = message.bits.astype(np.float64)
    loss = -np.sum(b * np.log(np.maximum(y, LOG_FLOOR)) + (1 - b) * np.log(np.maximum(one_minus_y, LOG_FLOOR)))
    return float(loss), key.X.T @ (y - b)


def embedding_loss_W(key: WatermarkKey, message: Message, W: np.ndarray) -> tuple[float, np.ndarray]:
    """Embedding loss as a function of the raw conv weights (chain rule through the filter mean)."""
    target = flatten_target(W)
    loss, gw = embedding_loss(key, message, target.w)
    L = W.shape[3]
    dW = np.repeat((gw / L).reshape(target.shape)[..., None], L, axis=3)
    return loss, dW


@dataclass
class EmbeddingRegularizer:
    """lambda * E_R attached to one conv layer; consumed by ``core.backward``."""

    layer: str
    key: WatermarkKey
    message: Message
    lam: float

    def penalty(self, W: np.ndarray) -> tuple[float, np.ndarray]:
        loss, dW = embedding_loss_W(self.key, self.message, W)
        return self.lam * loss, self.lam * dW


def target_size(model, layer: str | None = None) -> int:
    layer = layer or model.embed_layer
    if layer is None:
        raise ConfigError("model has no embed layer")
    conv = model.layer(layer)
    if conv.kind != "conv2d":
        raise ConfigError(f"layer {layer!r} is not a conv2d layer")
    return conv.size * conv.size * conv.depth


def attach_regularizer(model, layer: str | None, key: WatermarkKey, message: Message, lam: float):
    """Attach lambda * E_R to ``layer`` (default: the model's embed layer). Mutates and returns model."""
    layer = layer or model.embed_layer
    M = target_size(model, layer)
    if key.M != M:
        raise ConfigError(f"key M={key.M} does not match layer {layer!r} with M={M}")
    if message.T != key.T:
        raise ConfigError(f"message has {message.T} bits, key expects {key.T}")
    if lam < 0:
        raise ConfigError(f"lambda must be nonnegative, got {lam}")
    model.regularizer = EmbeddingRegularizer(layer, key, message, float(lam))
    return model


@dataclass
class DetectionStats:
    projections: np.ndarray
    y: np.ndarray
    bits: np.ndarray
    histogram: np.ndarray
    ber: float | None = None

    def to_json(self) -> dict:
        out = {
            "T": int(self.bits.size),
            "bits_hex": np.packbits(self.bits).tobytes().hex(),
            "histogram": {"bins": HIST_BINS, "range": [0.0, 1.0], "counts": self.histogram.tolist()},
            "y_mean": float(self.y.mean()),
            "y_min": float(self.y.min()),
        }
        if self.ber is not None:
            out["ber"] = self.ber
        return out


def extract(key: WatermarkKey, W: np.ndarray, reference: Message | None = None) -> DetectionStats:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 4 or W.shape[0] * W.shape[1] * W.shape[2] != key.M:
        raise ConfigError(f"weights of shape {W.shape} do not match key with M={key.M}")
    z = key.X @ flatten_target(W).w
    bits = (z >= 0).astype(np.uint8)
    y = expit(z)
    hist, _ = np.histogram(y, bins=HIST_BINS, range=(0.0, 1.0))
    stats = DetectionStats(z, y, bits, hist)
    if reference is not None:
        stats.ber = ber(stats, reference)
    return stats


def ber(stats: DetectionStats | np.ndarray, reference: Message | np.ndarray) -> float:
    bits = stats.bits if isinstance(stats, DetectionStats) else np.asarray(stats)
    ref = reference.bits if isinstance(reference, Message) else np.asarray(reference)
    if bits.shape != ref.shape:
        raise ConfigError(f"bit length mismatch: {bits.size} vs {ref.size}")
    return float(np.count_nonzero(bits != ref) / bits.size)
