"""Collect ``summary.json`` and attack reports under a run directory into
markdown + CSV tables (fidelity, capacity, post-hoc lambda sweep, pruning,
fine-tuning, overwriting). Output is a pure function of the inputs."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

TABLES = ("fidelity", "capacity", "lambda_sweep", "pruning", "finetune", "overwrite")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{v:.4g}"
    return str(v)


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _load(paths):
    out = []
    for p in paths:
        try:
            out.append((p, json.loads(p.read_text())))
        except (OSError, json.JSONDecodeError):
            continue
    return out


def _provenance(docs) -> str:
    tags = sorted({f"seed={d.get('seed')} config={d.get('config_hash')}" for d in docs})
    return "runs: " + "; ".join(tags)


def _collect(run_dir: Path):
    summaries = _load(sorted(run_dir.rglob("summary.json")))
    attacks = defaultdict(list)
    for p, d in _load(sorted(run_dir.rglob("attack*.json"))):
        attacks[d.get("kind")].append(d)
    return [d for _, d in summaries], attacks


def _tables(summaries, attacks) -> dict[str, tuple[list[str], list[list], list[dict]]]:
    tables = {}

    groups = defaultdict(list)
    for s in summaries:
        groups[(s.get("situation"), s.get("key_kind", "none"), s.get("T"))].append(s)
    rows = [[sit, kind, T if T is not None else "-", len(g), _mean(s.get("test_error") for s in g),
             _mean(s.get("E_R") for s in g), _mean(s.get("ber") for s in g)]
            for (sit, kind, T), g in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0])))]
    tables["fidelity"] = (["situation", "key", "T", "runs", "test_error", "E_R", "BER"], rows, summaries)

    groups = defaultdict(list)
    embedded = [s for s in summaries if s.get("key_kind") == "random"]
    for s in embedded:
        groups[(s.get("embed_layer"), s.get("M"), s.get("T"))].append(s)
    rows = [[layer, M, T, len(g), _mean(s.get("test_error") for s in g), _mean(s.get("E_R") for s in g),
             _mean(s.get("ber") for s in g)]
            for (layer, M, T), g in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1] or 0, kv[0][2] or 0))]
    tables["capacity"] = (["layer", "M", "T", "runs", "test_error", "E_R", "BER"], rows, embedded)

    by_lam = defaultdict(list)
    for d in attacks.get("posthoc-sweep", []):
        for r in d.get("sweep", []):
            by_lam[r["lam"]].append(r)
    rows = [[lam, len(g), _mean(r["distance"] for r in g), _mean(r["E_R"] for r in g),
             _mean(r.get("test_error") for r in g), _mean(r["BER"] for r in g)] for lam, g in sorted(by_lam.items())]
    tables["lambda_sweep"] = (["lambda", "runs", "half_sq_dist", "E_R", "test_error", "BER"], rows,
                              attacks.get("posthoc-sweep", []))

    by_point = defaultdict(list)
    for d in attacks.get("prune-sweep", []):
        for r in d.get("curves", []):
            by_point[(r["alpha"], r["order"])].append(r)
    rows = [[a, o, len(g), _mean(r["E_R"] for r in g), _mean(r["BER"] for r in g)]
            for (a, o), g in sorted(by_point.items())]
    tables["pruning"] = (["alpha", "order", "runs", "E_R", "BER"], rows, attacks.get("prune-sweep", []))

    ft = attacks.get("finetune", [])
    rows = [[d.get("epochs"), d.get("E_R"), d.get("E'_R"), d.get("ber_after"), d.get("test_error_after")]
            for d in sorted(ft, key=lambda d: (d.get("config_hash") or "", d.get("seed") or 0))]
    tables["finetune"] = (["epochs", "E_R", "E'_R", "BER", "test_error"], rows, ft)

    ow = attacks.get("overwrite", [])
    rows = [[d.get("new_layer"), d.get("new_lam"), d.get("original_ber"), d.get("new_ber"), d.get("test_error_after")]
            for d in sorted(ow, key=lambda d: (d.get("config_hash") or "", d.get("seed") or 0))]
    tables["overwrite"] = (["layer", "new_lambda", "original_BER", "new_BER", "test_error"], rows, ow)
    return tables


def build_report(run_dir: Path, out: Path) -> tuple[str, list[str]]:
    """Write ``report.md`` and ``tables/*.csv`` into ``out``; returns (markdown, missing tables)."""
    run_dir, out = Path(run_dir), Path(out)
    summaries, attacks = _collect(run_dir) if run_dir.is_dir() else ([], {})
    tables = _tables(summaries, attacks)
    missing = [name for name in TABLES if not tables[name][1]]
    lines = ["# Watermark experiment report", ""]
    if not summaries and not attacks:
        lines += ["No runs found.", ""]
    (out / "tables").mkdir(parents=True, exist_ok=True)
    for name in TABLES:
        header, rows, docs = tables[name]
        if not rows:
            continue
        lines += [f"## {name}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(_fmt(v) for v in r) + " |" for r in rows]
        lines += ["", f"_{_provenance(docs)}_", ""]
        with open(out / "tables" / f"{name}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows([["" if v is None else v for v in r] for r in rows])
    if missing:
        lines += ["## missing", ""] + [f"- {m}: no runs" for m in missing] + [""]
    text = "\n".join(lines)
    (out / "report.md").write_text(text)
    return text, missing
