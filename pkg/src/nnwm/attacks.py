"""Attacks on an embedded watermark: fine-tuning, magnitude pruning,
overwriting with a second key, and the post-hoc (training-free) embedding
baseline. Every attack works on a copy of the model."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Model
from .errors import ConfigError, NumericError
from .hosts import Dataset, TrainConfig, train
from .watermark import Message, WatermarkKey, embedding_loss, embedding_loss_W, extract, flatten_target, target_size

PRUNE_ORDERS = ("ascending", "descending", "random")
CURVE_COLUMNS = ("alpha", "order", "E_R", "BER")


@dataclass(frozen=True)
class PruneSpec:
    rate: float
    order: str = "ascending"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"pruning rate must be in [0, 1], got {self.rate}")
        if self.order not in PRUNE_ORDERS:
            raise ConfigError(f"pruning order must be one of {PRUNE_ORDERS}, got {self.order!r}")


@dataclass
class AttackReport:
    kind: str
    E_R: float | None = None          # before the attack
    E_R_after: float | None = None
    ber_before: float | None = None
    ber_after: float | None = None
    test_error_after: float | None = None
    curves: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    model: Model | None = field(default=None, repr=False, compare=False)  # the attacked copy

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "E_R": self.E_R,
            "E'_R": self.E_R_after,
            "ber_before": self.ber_before,
            "ber_after": self.ber_after,
            "test_error_after": self.test_error_after,
            "curves": self.curves,
            **self.extra,
        }

    def save(self, out_dir, stem: str | None = None) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or self.kind
        paths = [out / f"{stem}.json"]
        paths[0].write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        if self.curves:
            paths.append(out / f"{stem}.csv")
            write_curves(paths[1], self.curves)
        return paths


def write_curves(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in row.items()})


def _layer(model: Model, key: WatermarkKey, layer: str | None) -> str:
    layer = layer or model.embed_layer
    M = target_size(model, layer)
    if key.M != M:
        raise ConfigError(f"key M={key.M} does not match layer {layer!r} with M={M}")
    return layer


def _status(model: Model, layer: str, key: WatermarkKey, message: Message) -> tuple[float, float]:
    W = model.layer(layer).params["W"]
    return embedding_loss_W(key, message, W)[0], extract(key, W, message).ber


def prune_weights(W: np.ndarray, spec: PruneSpec) -> np.ndarray:
    """Zero round(rate * P) entries of W chosen by |W| order (stable ties) or at random."""
    flat = W.reshape(-1)
    k = int(np.floor(spec.rate * flat.size + 0.5))
    if spec.order == "ascending":
        idx = np.argsort(np.abs(flat), kind="stable")[:k]
    elif spec.order == "descending":
        idx = np.argsort(-np.abs(flat), kind="stable")[:k]
    else:
        idx = np.random.default_rng(spec.seed).permutation(flat.size)[:k]
    out = flat.copy()
    out[idx] = 0.0
    return out.reshape(W.shape)


def attack_prune(model: Model, key: WatermarkKey, message: Message, spec: PruneSpec,
                 layer: str | None = None, test_data: Dataset | None = None) -> AttackReport:
    layer = _layer(model, key, layer)
    er0, ber0 = _status(model, layer, key, message)
    pruned = model.copy()
    conv = pruned.layer(layer)
    conv.params["W"] = prune_weights(conv.params["W"], spec)
    er1, ber1 = _status(pruned, layer, key, message)
    report = AttackReport("prune", er0, er1, ber0, ber1, model=pruned,
                          extra={"alpha": spec.rate, "order": spec.order, "seed": spec.seed})
    if test_data is not None:
        report.test_error_after = pruned.error_rate(test_data.inputs, test_data.labels)
    return report


def prune_sweep(model: Model, key: WatermarkKey, message: Message, alphas, orders=PRUNE_ORDERS,
                seeds=(0,), layer: str | None = None) -> AttackReport:
    """E_R and BER per (alpha, order); the random order is averaged over ``seeds``."""
    layer = _layer(model, key, layer)
    W = model.layer(layer).params["W"]
    er0, ber0 = _status(model, layer, key, message)
    rows = []
    for alpha in sorted(alphas):
        for order in orders:
            runs = []
            for seed in (seeds if order == "random" else (0,)):
                Wp = prune_weights(W, PruneSpec(alpha, order, seed))
                runs.append((embedding_loss_W(key, message, Wp)[0], extract(key, Wp, message).ber))
            er, b = np.mean(runs, axis=0)
            rows.append({"alpha": float(alpha), "order": order, "E_R": float(er), "BER": float(b)})
    return AttackReport("prune-sweep", er0, None, ber0, None, curves=rows,
                        extra={"orders": list(orders), "random_seeds": list(seeds)})


def attack_finetune(model: Model, key: WatermarkKey, message: Message, data: Dataset, epochs: int,
                    config: TrainConfig | None = None, test_data: Dataset | None = None,
                    layer: str | None = None) -> AttackReport:
    """Continue training on the original objective only (no regularizer)."""
    layer = _layer(model, key, layer)
    er0, ber0 = _status(model, layer, key, message)
    base = asdict(config) if config is not None else {}
    base.update(epochs=epochs, situation="none", embed_layer=None)
    result = train(model, data, TrainConfig(**base), test_data=test_data)
    er1, ber1 = _status(result.model, layer, key, message)
    report = AttackReport("finetune", er0, er1, ber0, ber1, extra={"epochs": epochs})
    if test_data is not None:
        report.test_error_after = result.model.error_rate(test_data.inputs, test_data.labels)
    report.model = result.model
    return report


def attack_overwrite(model: Model, old_key: WatermarkKey, old_message: Message, new_key: WatermarkKey,
                     new_message: Message, data: Dataset, config: TrainConfig,
                     test_data: Dataset | None = None, layer: str | None = None) -> AttackReport:
    """Fine-tune-to-embed a second watermark and report the damage to the first.

    The new watermark goes into ``config.embed_layer`` (default: the layer of
    the original watermark).
    """
    layer = _layer(model, old_key, layer)
    if new_key.seed == old_key.seed:
        warnings.warn("overwrite key uses the same seed as the original key", stacklevel=2)
    er0, ber0 = _status(model, layer, old_key, old_message)
    cfg = TrainConfig(**{**asdict(config), "situation": "fine-tune-to-embed",
                         "embed_layer": config.embed_layer or layer})
    result = train(model, data, cfg, new_key, new_message, test_data=test_data)
    er1, ber1 = _status(result.model, layer, old_key, old_message)
    report = AttackReport("overwrite", er0, er1, ber0, ber1,
                          extra={"original_ber": ber1, "new_ber": result.stats.ber,
                                 "new_E_R": result.history[-1]["E_R"] if result.history else None,
                                 "new_layer": cfg.embed_layer, "new_lam": cfg.lam})
    if test_data is not None:
        report.test_error_after = result.model.error_rate(test_data.inputs, test_data.labels)
    report.model = result.model
    return report


def embed_posthoc(model: Model, key: WatermarkKey, message: Message, lam: float, steps: int = 1000,
                  lr: float = 0.01, test_data: Dataset | None = None, layer: str | None = None) -> AttackReport:
    """Embed without training: gradient descent on 1/2 ||w - w0||^2 + lam * E_R(w).

    Only the target layer's W moves; w is its filter mean, so every filter
    receives the same update (gradient / L).
    """
    layer = _layer(model, key, layer)
    out = model.copy()
    conv = out.layer(layer)
    W = conv.params["W"].copy()
    L = W.shape[3]
    w0 = flatten_target(W).w
    er0, ber0 = _status(model, layer, key, message)
    for _ in range(steps):
        target = flatten_target(W)
        er, g = embedding_loss(key, message, target.w)
        gw = (target.w - w0) + lam * g
        if not np.isfinite(er) or not np.isfinite(gw).all():
            raise NumericError("post-hoc embedding produced a non-finite loss")
        W = W - lr * np.repeat((gw / L).reshape(target.shape)[..., None], L, axis=3)
    conv.params["W"] = W
    out.version += 1
    w = flatten_target(W).w
    er1, ber1 = _status(out, layer, key, message)
    report = AttackReport("posthoc", er0, er1, ber0, ber1,
                          extra={"lam": lam, "steps": steps, "lr": lr, "distance": 0.5 * float(np.sum((w - w0) ** 2))})
    if test_data is not None:
        report.extra["test_error_before"] = model.error_rate(test_data.inputs, test_data.labels)
        report.test_error_after = out.error_rate(test_data.inputs, test_data.labels)
    report.model = out
    return report
