"""Experiment configuration: a JSON document validated against ``EXPERIMENT_SCHEMA``
(unknown fields are rejected), then resolved into typed specs.

Component seeds left out of the config are derived from the global ``seed``:
host = seed, data = seed + 1, train = seed + 2, key = seed + 3, message = seed + 4.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigError
from .hosts import PRESETS, SITUATIONS, Dataset, TrainConfig, build_host, load_cifar10, make_synthetic
from .watermark import KEY_KINDS, Message, make_key, target_size

SEED_OFFSETS = {"host": 0, "data": 1, "train": 2, "key": 3, "message": 4}

_seed = {"type": "integer", "minimum": 0}
_pos_int = {"type": "integer", "minimum": 1}

KEY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind", "bits"],
    "properties": {
        "kind": {"enum": list(KEY_KINDS)},
        "bits": _pos_int,
        "seed": _seed,
        "M": _pos_int,
    },
}

MESSAGE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["ones", "random", "hex"]},
        "seed": _seed,
        "hex": {"type": "string", "pattern": "^([0-9a-fA-F]{2})*$"},
    },
}

DATA_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["synthetic", "cifar10"]},
        "classes": {"type": "integer", "minimum": 2},
        "dims": {"type": "array", "items": _pos_int, "minItems": 1, "maxItems": 3},
        "n_train": _pos_int,
        "n_test": _pos_int,
        "separation": {"type": "number", "minimum": 0},
        "seed": _seed,
        "dir": {"type": "string"},
    },
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "epochs": {"type": "integer", "minimum": 0},
        "batch_size": _pos_int,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "schedule": {"type": "array", "items": {"type": "array", "prefixItems": [
            {"type": "integer", "minimum": 0}, {"type": "number", "exclusiveMinimum": 0}],
            "minItems": 2, "maxItems": 2}},
        "lam": {"type": "number", "minimum": 0},
        "situation": {"enum": list(SITUATIONS)},
        "seed": _seed,
        "init_checkpoint": {"type": "string"},
        "teacher_checkpoint": {"type": "string"},
    },
}

ATTACK_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "oneOf": [
        {"additionalProperties": False, "properties": {
            "kind": {"const": "prune"},
            "alphas": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
            "orders": {"type": "array", "items": {"enum": ["ascending", "descending", "random"]}, "minItems": 1},
            "seeds": {"type": "array", "items": _seed, "minItems": 1}}},
        {"additionalProperties": False, "properties": {
            "kind": {"const": "finetune"},
            "epochs": {"type": "integer", "minimum": 0}}},
        {"additionalProperties": False, "required": ["key"], "properties": {
            "kind": {"const": "overwrite"},
            "key": KEY_SCHEMA,
            "message": MESSAGE_SCHEMA,
            "lam": {"type": "number", "minimum": 0},
            "epochs": {"type": "integer", "minimum": 0},
            "layer": {"type": "string"}}},
        {"additionalProperties": False, "properties": {
            "kind": {"const": "posthoc"},
            "lams": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            "steps": {"type": "integer", "minimum": 0},
            "lr": {"type": "number", "exclusiveMinimum": 0},
            "key": KEY_SCHEMA,
            "message": MESSAGE_SCHEMA}},
    ],
}

EXPERIMENT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "nnwm experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["host", "data"],
    "properties": {
        "name": {"type": "string"},
        "seed": _seed,
        "out": {"type": "string"},
        "host": {
            "type": "object",
            "additionalProperties": False,
            "required": ["preset"],
            "properties": {
                "preset": {"enum": list(PRESETS)},
                "seed": _seed,
                "width": _pos_int,
                "embed_layer": {"type": "string"},
            },
        },
        "data": DATA_SCHEMA,
        "train": TRAIN_SCHEMA,
        "key": KEY_SCHEMA,
        "message": MESSAGE_SCHEMA,
        "attacks": {"type": "array", "items": ATTACK_SCHEMA},
    },
}

# stand-alone attack config for `nnwm attack`
ATTACK_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["attacks"],
    "properties": {
        "name": {"type": "string"},
        "seed": _seed,
        "data": DATA_SCHEMA,
        "train": TRAIN_SCHEMA,
        "attacks": {"type": "array", "items": ATTACK_SCHEMA, "minItems": 1},
    },
}


def validate(doc: dict, schema: dict = EXPERIMENT_SCHEMA) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))


def config_hash(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def component_seed(doc: dict, section: str) -> int:
    sub = doc.get(section) or {}
    return int(sub["seed"]) if "seed" in sub else int(doc.get("seed", 0)) + SEED_OFFSETS[section]


def load_data(spec: dict, seed: int, input_shape=None) -> tuple[Dataset, Dataset]:
    if spec["kind"] == "cifar10":
        root = spec.get("dir") or os.environ.get("NNWM_DATA_DIR")
        if not root:
            raise ConfigError("data/dir: cifar10 needs 'dir' or NNWM_DATA_DIR")
        return load_cifar10(root, spec.get("n_train"), spec.get("n_test"), seed)
    classes = spec.get("classes", 10)
    dims = tuple(spec.get("dims", input_shape or (8, 8, 3)))
    sep = spec.get("separation", 4.0)
    return (make_synthetic(classes, dims, spec.get("n_train", 2000), seed, sep, "train"),
            make_synthetic(classes, dims, spec.get("n_test", 2000), seed, sep, "test"))


def data_shape(spec: dict) -> tuple[tuple[int, ...], int]:
    if spec["kind"] == "cifar10":
        return (32, 32, 3), 10
    return tuple(spec.get("dims", (8, 8, 3))), spec.get("classes", 10)


def train_config(doc: dict) -> TrainConfig:
    t = {k: v for k, v in (doc.get("train") or {}).items() if k not in ("init_checkpoint", "teacher_checkpoint")}
    t["seed"] = component_seed(doc, "train")
    if "schedule" in t:
        t["schedule"] = [tuple(s) for s in t["schedule"]]
    t.setdefault("situation", "train-to-embed" if doc.get("key") else "none")
    return TrainConfig(**t, embed_layer=(doc["host"].get("embed_layer")))


def make_message(spec: dict | None, T: int, seed: int) -> Message:
    spec = spec or {"kind": "ones"}
    if spec["kind"] == "ones":
        return Message.ones(T)
    if spec["kind"] == "random":
        return Message.random(T, spec.get("seed", seed))
    if len(spec.get("hex", "")) * 4 < T:
        raise ConfigError(f"message/hex: {len(spec.get('hex', '')) * 4} bits given, key needs {T}")
    return Message.from_hex(spec["hex"], T)


@dataclass
class ExperimentConfig:
    """Validated experiment document plus the objects it resolves to."""

    doc: dict
    train: TrainConfig
    input_shape: tuple[int, ...]
    classes: int
    M: int | None = None
    hash: str = ""
    attacks: list[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, doc: dict, seed: int | None = None) -> "ExperimentConfig":
        doc = copy.deepcopy(doc)
        if seed is not None:
            doc["seed"] = seed
        validate(doc)
        tc = train_config(doc)
        embeds = tc.situation != "none"
        if embeds and "key" not in doc:
            raise ConfigError(f"key: required for situation {tc.situation!r}")
        if not embeds and "key" in doc:
            raise ConfigError("key: situation 'none' takes no key")
        if tc.situation in ("fine-tune-to-embed", "distill-to-embed") and \
                "init_checkpoint" not in (doc.get("train") or {}):
            raise ConfigError(f"train/init_checkpoint: required for {tc.situation}")
        input_shape, classes = data_shape(doc["data"])
        # cheap structural build to check the layer sizes before any training
        host = build_host(doc["host"]["preset"], 0, input_shape, classes, doc["host"].get("width", 1),
                          doc["host"].get("embed_layer"))
        M = None
        if embeds:
            if host.embed_layer is None and tc.embed_layer is None:
                raise ConfigError(f"host/preset: {doc['host']['preset']} has no conv layer to embed into")
            M = target_size(host, tc.embed_layer)
            key = doc["key"]
            if "M" in key and key["M"] != M:
                raise ConfigError(f"key/M: {key['M']} does not match embed layer M={M}")
            msg = doc.get("message")
            if msg and msg["kind"] == "hex" and len(msg.get("hex", "")) * 4 < key["bits"]:
                raise ConfigError(f"message/hex: shorter than key/bits={key['bits']}")
        return cls(doc, tc, input_shape, classes, M, config_hash(doc), doc.get("attacks", []))

    @classmethod
    def load(cls, path, seed: int | None = None) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(doc, seed)

    def seed_of(self, section: str) -> int:
        return component_seed(self.doc, section)

    def build_host(self):
        h = self.doc["host"]
        return build_host(h["preset"], self.seed_of("host"), self.input_shape, self.classes,
                          h.get("width", 1), h.get("embed_layer"))

    def load_data(self) -> tuple[Dataset, Dataset]:
        return load_data(self.doc["data"], self.seed_of("data"), self.input_shape)

    def make_key(self):
        if "key" not in self.doc:
            return None
        k = self.doc["key"]
        return make_key(k["kind"], k.get("seed", self.seed_of("key")), k["bits"], self.M)

    def make_message(self):
        if "key" not in self.doc:
            return None
        return make_message(self.doc.get("message"), self.doc["key"]["bits"], self.seed_of("message"))
