"""Desk-scale experiment recipes shared by ``scripts/`` and the acceptance suite.

One "run seed" s fixes every random choice of a run: host init (100 + s),
minibatch order (200 + s) and key (300 + s). The data set is the same for all
runs (seed 0). Trained models are memoized per process so that several
experiments can share the same embedded/baseline hosts.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
from scipy.stats import ks_2samp

from .attacks import attack_finetune, attack_overwrite, embed_posthoc, prune_sweep
from .hosts import TrainConfig, TrainResult, build_host, make_synthetic, train
from .watermark import Message, make_key, target_size

DEFAULT_LAMBDA = 0.01


@dataclass(frozen=True)
class Desk:
    classes: int = 10
    dims: tuple = (8, 8, 3)
    n_train: int = 4000
    n_test: int = 2000
    separation: float = 4.0
    data_seed: int = 0
    epochs: int = 15
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    preset: str = "small-cnn"
    width: int = 1

    def train_config(self, seed: int, lam: float = DEFAULT_LAMBDA, situation: str = "train-to-embed",
                     **kw) -> TrainConfig:
        return TrainConfig(epochs=kw.pop("epochs", self.epochs), batch_size=self.batch_size, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay, lam=lam,
                           situation=situation, seed=200 + seed, **kw)


DESK = Desk()


@functools.lru_cache(maxsize=8)
def desk_data(desk: Desk = DESK):
    args = (desk.classes, desk.dims)
    return (make_synthetic(*args, desk.n_train, desk.data_seed, desk.separation, "train"),
            make_synthetic(*args, desk.n_test, desk.data_seed, desk.separation, "test"))


def host(seed: int, desk: Desk = DESK, layer: str | None = None):
    return build_host(desk.preset, 100 + seed, desk.dims, desk.classes, desk.width, layer)


@functools.lru_cache(maxsize=64)
def baseline(seed: int, desk: Desk = DESK) -> TrainResult:
    data, test = desk_data(desk)
    return train(host(seed, desk), data, desk.train_config(seed, situation="none"), test_data=test)


@dataclass
class EmbedRun:
    result: TrainResult
    key: object
    message: Message
    layer: str
    seed: int

    @property
    def model(self):
        return self.result.model

    @property
    def E_R(self) -> float:
        return self.result.history[-1]["E_R"]

    @property
    def ber(self) -> float:
        return self.result.stats.ber

    @property
    def test_error(self) -> float:
        return self.result.history[-1]["test_error"]


@functools.lru_cache(maxsize=64)
def embedded(seed: int, kind: str = "random", T: int = 64, lam: float = DEFAULT_LAMBDA, desk: Desk = DESK,
             layer: str | None = None, message: str = "ones") -> EmbedRun:
    """Train-to-embed run; the message is all-ones (``"ones"``) or random bits (``"random"``)."""
    data, test = desk_data(desk)
    model = host(seed, desk, layer)
    layer = layer or model.embed_layer
    key = make_key(kind, 300 + seed, T, target_size(model, layer))
    msg = Message.ones(T) if message == "ones" else Message.random(T, 400 + seed)
    result = train(model, data, desk.train_config(seed, lam, embed_layer=layer), key, msg, test)
    return EmbedRun(result, key, msg, layer, seed)


def ks_to_baseline(run: EmbedRun, desk: Desk = DESK) -> float:
    W = run.model.layer(run.layer).params["W"].ravel()
    W0 = baseline(run.seed, desk).model.layer(run.layer).params["W"].ravel()
    return float(ks_2samp(W, W0).statistic)


def fidelity(seeds, desk: Desk = DESK) -> dict:
    emb = [embedded(s, desk=desk) for s in seeds]
    base = [baseline(s, desk) for s in seeds]
    return {
        "seeds": list(seeds),
        "ber": [r.ber for r in emb],
        "E_R": [r.E_R for r in emb],
        "test_error_embedded": [r.test_error for r in emb],
        "test_error_baseline": [b.history[-1]["test_error"] for b in base],
    }


def key_kinds(seeds, lam: float, desk: Desk = DESK) -> dict:
    out = {}
    for kind in ("direct", "diff", "random"):
        runs = [embedded(s, kind, lam=lam, desk=desk) for s in seeds]
        out[kind] = {"E_R": [r.E_R for r in runs], "ks": [ks_to_baseline(r, desk) for r in runs],
                     "ber": [r.ber for r in runs], "test_error": [r.test_error for r in runs]}
    return out


def capacity(seed: int, bits=(64, 144, 512), desk: Desk = DESK) -> dict:
    return {T: {"E_R": (r := embedded(seed, T=T, desk=desk)).E_R, "ber": r.ber, "test_error": r.test_error}
            for T in bits}


def posthoc_sweep(seeds, lams=(0, 1, 10, 100), T: int = 64, steps: int = 1000, lr: float = 0.01,
                  desk: Desk = DESK) -> dict:
    """Post-hoc embedding of a random message into trained, never-embedded hosts."""
    _, test = desk_data(desk)
    rows = {lam: [] for lam in lams}
    for s in seeds:
        model = baseline(s, desk).model
        key = make_key("random", 300 + s, T, target_size(model))
        msg = Message.random(T, 500 + s)
        for lam in lams:
            r = embed_posthoc(model, key, msg, lam, steps, lr, test)
            rows[lam].append({"distance": r.extra["distance"], "E_R": r.E_R_after, "ber": r.ber_after,
                              "test_error": r.test_error_after})
    return {lam: {k: float(np.mean([r[k] for r in rs])) for k in rs[0]} for lam, rs in rows.items()}


def pruning(seeds, alphas, prune_seeds=(0, 1, 2, 3, 4), desk: Desk = DESK) -> dict:
    """Per-order E_R/BER curves averaged over the embedded runs of ``seeds``."""
    acc = {}
    for s in seeds:
        run = embedded(s, desk=desk)
        rep = prune_sweep(run.model, run.key, run.message, alphas, seeds=prune_seeds)
        for row in rep.curves:
            acc.setdefault((row["alpha"], row["order"]), []).append((row["E_R"], row["BER"]))
    return {k: {"E_R": float(np.mean([v[0] for v in vs])), "ber": float(np.mean([v[1] for v in vs]))}
            for k, vs in sorted(acc.items())}


def finetune(seeds, desk: Desk = DESK) -> list[dict]:
    """Same-domain fine-tuning for as many epochs as the embedding took."""
    data, test = desk_data(desk)
    out = []
    for s in seeds:
        run = embedded(s, desk=desk)
        cfg = desk.train_config(s + 1000, situation="none")
        rep = attack_finetune(run.model, run.key, run.message, data, desk.epochs, cfg, test)
        out.append({"seed": s, "E_R": rep.E_R, "E_R_after": rep.E_R_after, "ber_after": rep.ber_after,
                    "test_error_after": rep.test_error_after})
    return out


def overwrite(seed: int, layer: str | None = None, T: int = 64, lam: float = DEFAULT_LAMBDA,
              desk: Desk = DESK) -> dict:
    """Embed, then fine-tune-to-embed a second independent key into the same layer."""
    data, test = desk_data(desk)
    run = embedded(seed, T=T, lam=lam, desk=desk, layer=layer)
    new_key = make_key("random", 10_000 + seed, T, run.key.M)
    cfg = desk.train_config(seed + 2000, lam, embed_layer=run.layer)
    rep = attack_overwrite(run.model, run.key, run.message, new_key, Message.ones(T), data, cfg, test)
    return {"layer": run.layer, "M": run.key.M, "original_ber_before": run.ber,
            "original_ber": rep.ber_after, "new_ber": rep.extra["new_ber"], "E_R": rep.E_R,
            "E_R_after": rep.E_R_after}
