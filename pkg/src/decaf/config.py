"""Experiment specification: JSON schema, validation and typed access."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .attack import AttackParams
from .defenses import DefenseConfig
from .fl import FLConfig

_DEFENSE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["none", "dropout", "dp"]},
        "rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "noise_multiplier": {"type": "number", "minimum": 0},
        "clip_norm": {"type": "number", "exclusiveMinimum": 0},
    },
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "decaf experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["users"],
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "idx"]},
                "classes": {"type": "integer", "minimum": 2},
                "dim": {"type": "integer", "minimum": 1},
                "per_class": {"type": "integer", "minimum": 1},
                "spread": {"type": "number", "minimum": 0},
                "test_per_class": {"type": "integer", "minimum": 0},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "test_images": {"type": "string"},
                "test_labels": {"type": "string"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "activation": {"enum": ["relu", "leaky_relu"]},
                "slope": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "users": {
            "type": "object",
            "additionalProperties": False,
            "required": ["compositions"],
            "properties": {
                "total": {"type": "integer", "minimum": 1},
                "compositions": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2},
                },
                "counts": {"type": "boolean"},
            },
        },
        "fl": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": {"type": "integer", "minimum": 1},
                "local_epochs": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "multi_round_k": {"type": "integer", "minimum": 1},
                "threshold": {"type": "number", "minimum": 0},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "aux_per_class": {"type": "integer", "minimum": 1},
                "null_removal": {"type": "boolean"},
                "calibrator": {"type": "boolean"},
                "unified_scale": {"enum": ["sum", "mean"]},
                "guess_trials": {"type": "integer", "minimum": 1},
            },
        },
        "defense": _DEFENSE,
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}},
        },
    },
}

DEFAULTS: dict[str, Any] = {
    "name": "experiment",
    "seed": 0,
    "dataset": {"source": "synthetic", "classes": 10, "dim": 20, "per_class": 2000, "spread": 4.0,
                "test_per_class": 100},
    "model": {"hidden": [128], "activation": "relu", "slope": 0.01},
    "users": {"total": 1200, "counts": False},
    "fl": {"rounds": 5, "local_epochs": 1, "batch_size": 32, "learning_rate": 0.01},
    "attack": {"rounds": None, "multi_round_k": 1, "threshold": 0.0, "beta": 0.05, "epochs": 1000,
               "aux_per_class": 100, "null_removal": True, "calibrator": True, "unified_scale": "sum",
               "guess_trials": 1000},
    "defense": {"kind": "none", "rate": 0.0, "noise_multiplier": 0.0, "clip_norm": 1.0},
    "output": {"dir": None},
}


class SpecError(ValueError):
    """Schema violation; ``errors`` lists ``(field path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in errors))


def _path(error: jsonschema.ValidationError) -> str:
    parts = ["$"]
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class ExperimentSpec:
    raw: dict  # fully merged JSON document

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | Path | None = None) -> ExperimentSpec:
        validator = jsonschema.Draft202012Validator(SCHEMA)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
        if errors:
            raise SpecError([(_path(e), e.message) for e in errors])
        merged = _merge(DEFAULTS, doc)
        problems = []
        n = merged["dataset"]["classes"]
        ds = merged["dataset"]
        if ds["source"] == "idx":
            for key in ("images", "labels"):
                if key not in ds:
                    problems.append((f"$.dataset.{key}", "required when source is 'idx'"))
                    continue
                p = Path(ds[key])
                if not p.is_absolute() and base_dir is not None:
                    p = Path(base_dir) / p
                    ds[key] = str(p)
                if not p.exists():
                    problems.append((f"$.dataset.{key}", f"file not found: {p}"))
            for key in ("test_images", "test_labels"):
                if key in ds and base_dir is not None and not Path(ds[key]).is_absolute():
                    ds[key] = str(Path(base_dir) / ds[key])
        for i, comp in enumerate(merged["users"]["compositions"]):
            if len(comp) != n:
                problems.append((f"$.users.compositions[{i}]", f"has {len(comp)} entries, expected {n}"))
            elif sum(comp) <= 0:
                problems.append((f"$.users.compositions[{i}]", "needs at least one nonzero entry"))
        if problems:
            raise SpecError(problems)
        return cls(merged)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentSpec:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise SpecError([("$", f"invalid JSON: {exc}")]) from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def replace(self, **sections: dict | int | str) -> ExperimentSpec:
        """New spec with the given top-level sections merged in."""
        return ExperimentSpec(_merge(self.raw, sections))

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def class_count(self) -> int:
        return int(self.raw["dataset"]["classes"])

    def fl_config(self, threads: int = 1) -> FLConfig:
        fl = self.raw["fl"]
        return FLConfig(
            rounds=fl["rounds"],
            local_epochs=fl["local_epochs"],
            batch_size=fl["batch_size"],
            learning_rate=fl["learning_rate"],
            seed=self.seed,
            defense=self.defense_config(),
            threads=threads,
        )

    def defense_config(self) -> DefenseConfig:
        return DefenseConfig(**self.raw["defense"])

    def attack_params(self) -> AttackParams:
        a = self.raw["attack"]
        return AttackParams(a["threshold"], a["beta"], a["epochs"], a["null_removal"], a["calibrator"],
                            a["unified_scale"])

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def reference_spec() -> ExperimentSpec:
    """The bundled reference configuration (ten users, table-style compositions)."""
    text = resources.files("decaf").joinpath("configs/reference.json").read_text()
    return ExperimentSpec.from_dict(json.loads(text))
