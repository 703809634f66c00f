"""Command-line front end: ``nnwm {train,extract,attack,report,grad-check}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, core
from .attacks import attack_finetune, attack_overwrite, embed_posthoc, prune_sweep
from .config import ATTACK_CONFIG_SCHEMA, ExperimentConfig, config_hash, load_data, make_message, train_config, validate
from .errors import ConfigError, NNWMError
from .hosts import TrainConfig, train
from .report import build_report
from .watermark import Message, WatermarkKey, attach_regularizer, extract, make_key, target_size

log = logging.getLogger("nnwm")

HISTORY_COLUMNS = ("epoch", "E0", "E_R", "test_error")


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + ["" if row.get(c) is None else repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def run_attacks(model, key, message, attacks: list[dict], data, test, base: TrainConfig, seed: int,
                out: Path, provenance: dict) -> list[Path]:
    written = []
    for i, spec in enumerate(attacks):
        kind = spec["kind"]
        stem = f"attack{i:02d}_{kind}"
        if kind == "prune":
            rep = prune_sweep(model, key, message, spec.get("alphas", [round(0.05 * j, 2) for j in range(21)]),
                              spec.get("orders", ["ascending", "descending", "random"]), spec.get("seeds", [seed]))
        elif kind == "finetune":
            epochs = spec.get("epochs", model.meta.get("epochs_trained", base.epochs))
            rep = attack_finetune(model, key, message, data, epochs, base, test)
        elif kind == "overwrite":
            layer = spec.get("layer") or model.embed_layer
            ks = spec["key"]
            new_key = make_key(ks["kind"], ks.get("seed", seed + 100), ks["bits"], target_size(model, layer))
            new_msg = make_message(spec.get("message"), ks["bits"], seed + 101)
            cfg = TrainConfig(**{**base.__dict__, "lam": spec.get("lam", base.lam),
                                 "epochs": spec.get("epochs", base.epochs), "embed_layer": layer})
            rep = attack_overwrite(model, key, message, new_key, new_msg, data, cfg, test)
            rep.extra["new_key"] = new_key.to_json()
        elif kind == "posthoc":
            pk, pm = key, message
            if "key" in spec:
                ks = spec["key"]
                pk = make_key(ks["kind"], ks.get("seed", seed + 200), ks["bits"], key.M if key else target_size(model))
                pm = make_message(spec.get("message"), ks["bits"], seed + 201)
            if pk is None:
                raise ConfigError(f"attacks/{i}: posthoc needs a key")
            rows, rep = [], None
            for lam in spec.get("lams", [0, 1, 10, 100]):
                r = embed_posthoc(model, pk, pm, lam, spec.get("steps", 1000), spec.get("lr", 0.01), test)
                rows.append({"lam": lam, "distance": r.extra["distance"], "E_R": r.E_R_after,
                             "test_error": r.test_error_after, "BER": r.ber_after})
                rep = r
            rep.kind = "posthoc-sweep"
            rep.extra = {"sweep": rows, "steps": spec.get("steps", 1000), "lr": spec.get("lr", 0.01),
                         "test_error_before": rep.extra.get("test_error_before"), "key": pk.to_json()}
        else:  # schema guarantees one of the above
            raise ConfigError(f"attacks/{i}: unknown kind {kind!r}")
        rep.extra.update(provenance)
        written += rep.save(out, stem)
    return written


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    doc = cfg.doc
    out = Path(args.out or doc.get("out") or f"runs/{doc.get('name', cfg.hash)}")
    out.mkdir(parents=True, exist_ok=True)
    data, test = cfg.load_data()
    tc = cfg.train
    tdoc = doc.get("train") or {}
    if tc.situation in ("fine-tune-to-embed", "distill-to-embed"):
        model = checkpoint.load(tdoc["init_checkpoint"])
    else:
        model = cfg.build_host()
    teacher = checkpoint.load(tdoc["teacher_checkpoint"]) if "teacher_checkpoint" in tdoc else None
    key, message = cfg.make_key(), cfg.make_message()
    log.info("training %s (%d params) situation=%s", doc["host"]["preset"], model.n_params(), tc.situation)
    result = train(model, data, tc, key, message, test, teacher)
    checkpoint.save(result.model, out / "model.ckpt")
    write_history(out / "history.csv", result.history)
    _dump(doc, out / "config.json")
    final = result.history[-1] if result.history else {}
    summary = {
        "name": doc.get("name"),
        "config_hash": cfg.hash,
        "seed": doc.get("seed", 0),
        "preset": doc["host"]["preset"],
        "embed_layer": tc.embed_layer or result.model.embed_layer,
        "situation": tc.situation,
        "epochs": tc.epochs,
        "n_params": result.model.n_params(),
        "E0": final.get("E0"),
        "test_error": final.get("test_error"),
    }
    if key is not None:
        key.save(out / "key.json")
        message.save(out / "message.json")
        summary.update(key_kind=key.kind, T=key.T, M=key.M, lam=tc.lam, ber=result.stats.ber)
        if tc.lam > 0:
            summary["E_R"] = final.get("E_R")
    _dump(summary, out / "summary.json")
    if cfg.attacks:
        provenance = {"config_hash": cfg.hash, "seed": doc.get("seed", 0), "source": "train"}
        run_attacks(result.model, key, message, cfg.attacks, data, test, tc, doc.get("seed", 0),
                    out / "attacks", provenance)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_extract(args) -> int:
    model = checkpoint.load(args.checkpoint)
    key = WatermarkKey.load(args.key)
    ref = Message.load(args.message) if args.message else None
    layer = args.layer or model.embed_layer
    M = target_size(model, layer)
    if key.M != M:
        raise ConfigError(f"key M={key.M} does not match layer {layer!r} with M={M}")
    stats = extract(key, model.layer(layer).params["W"], ref)
    doc = {"layer": layer, **stats.to_json()}
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_attack(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read attack config: {e}") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    validate(doc, ATTACK_CONFIG_SCHEMA)
    model = checkpoint.load(args.checkpoint)
    key = WatermarkKey.load(args.key)
    message = Message.load(args.message)
    seed = doc.get("seed", 0)
    data = test = None
    if "data" in doc:
        data, test = load_data(doc["data"], doc["data"].get("seed", seed + 1), model.input_shape)
    elif any(a["kind"] in ("finetune", "overwrite") for a in doc["attacks"]):
        raise ConfigError("data: required for finetune/overwrite attacks")
    base = train_config({"host": {}, "seed": seed, "train": {**doc.get("train", {}), "situation": "none"}})
    out = Path(args.out or "attack_out")
    provenance = {"config_hash": config_hash(doc), "seed": seed, "source": "attack",
                  "checkpoint": Path(args.checkpoint).name}
    for path in run_attacks(model, key, message, doc["attacks"], data, test, base, seed, out, provenance):
        print(path)
    return 0


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path(args.run_dir)
    text, missing = build_report(Path(args.run_dir), out)
    for m in missing:
        log.warning("missing: %s", m)
    print(out / "report.md")
    return 0


def cmd_grad_check(args) -> int:
    cfg = ExperimentConfig.load(args.config, args.seed)
    model = cfg.build_host()
    data, _ = cfg.load_data()
    n = min(args.batch, len(data))
    if cfg.train.situation != "none":
        attach_regularizer(model, cfg.train.embed_layer, cfg.make_key(), cfg.make_message(), cfg.train.lam)
    rep = core.grad_check(model, data.inputs[:n], data.labels[:n], args.tolerance)
    print(json.dumps({"max_rel_err": rep.max_rel_err, "tolerance": rep.tolerance, "passed": rep.passed,
                      "checked": rep.checked, "worst": list(map(str, rep.worst)) if rep.worst else None},
                     sort_keys=True))
    return 0 if rep.passed else 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nnwm", description="Embed, extract and attack weight watermarks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a host (optionally embedding a watermark)")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="extract a watermark from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--key", required=True)
    e.add_argument("--message")
    e.add_argument("--layer")
    e.add_argument("--out")
    e.set_defaults(func=cmd_extract)

    a = sub.add_parser("attack", help="run attacks against an embedded checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--key", required=True)
    a.add_argument("--message", required=True)
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="consolidate run outputs into tables")
    r.add_argument("run_dir")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("grad-check", help="finite-difference check of the training objective")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except NNWMError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
