"""FedAvg simulation that records what an honest-but-curious server observes."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import Dataset
from .defenses import DefenseConfig, apply_dp, dropout_model
from .seeding import stream

HISTORY_FORMAT = "decaf-history"
HISTORY_VERSION = 1


@dataclass(frozen=True)
class FLConfig:
    rounds: int = 5
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.01
    seed: int = 0
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    threads: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("rounds, local_epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("threads")
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RoundRecord:
    """Round ``t``: the broadcast global model and every user's returned local model."""

    round: int
    global_model: nn.Model
    local_models: tuple[nn.Model, ...]
    sizes: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.local_models) != len(self.sizes):
            raise ValueError("one dataset size per local model")
        if any(s <= 0 for s in self.sizes):
            raise ValueError("dataset sizes must be positive")


def _freeze(model: nn.Model) -> nn.Model:
    for layer in model.layers:
        layer.weight.flags.writeable = False
        layer.bias.flags.writeable = False
    return model


def local_train(
    global_model: nn.Model,
    data: Dataset,
    alpha: float,
    epochs: int = 1,
    batch_size: int = 32,
    seed: int | np.random.Generator = 0,
) -> nn.Model:
    """``epochs`` passes of shuffled mini-batch SGD starting from ``global_model``."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    model = global_model
    mask_rng = rng if model.dropout > 0 else None
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            batch = nn.Batch(data.features[idx], data.labels[idx])
            _, grads = nn.loss_and_gradients(model, batch, mask_rng)
            model = nn.sgd_step(model, grads, alpha)
    return model


def fedavg(locals_: Sequence[nn.Model], sizes: Sequence[int]) -> nn.Model:
    """Size-weighted parameter average."""
    if not locals_:
        raise ValueError("fedavg needs at least one local model")
    if len(sizes) != len(locals_) or any(s <= 0 for s in sizes):
        raise ValueError("need one positive size per local model")
    template = locals_[0]
    for m in locals_[1:]:
        if m.specs != template.specs:
            raise nn.ConfigurationError("local models have different shapes")
    weights = np.asarray(sizes, dtype=float)
    weights /= weights.sum()
    stacked = np.stack([nn.flatten(m) for m in locals_])
    return nn.unflatten(template, weights @ stacked)


def _user_update(config: FLConfig, global_model: nn.Model, data: Dataset, user: int, t: int) -> nn.Model:
    start = global_model
    defense = config.defense
    if defense.kind == "dropout":
        start = dropout_model(global_model, defense.rate)
    local = local_train(start, data, config.learning_rate, config.local_epochs, config.batch_size,
                        stream(config.seed, "local", user, t))
    if defense.kind == "dp":
        base = nn.flatten(global_model)
        delta = apply_dp(nn.flatten(local) - base, defense.noise_multiplier, defense.clip_norm,
                         stream(config.seed, "defense", user, t))
        local = nn.unflatten(local, base + delta)
    return local


def run(
    config: FLConfig,
    initial_model: nn.Model,
    users: Sequence[Dataset],
    observer: Callable[[RoundRecord], None] | None = None,
) -> list[RoundRecord]:
    """Run ``config.rounds`` FedAvg rounds; every user takes part in every round.

    ``observer`` sees each round's record as soon as it exists. Records hold
    read-only arrays, so an observer cannot alter the training it watches.
    """
    if not users:
        raise ValueError("need at least one user")
    sizes = tuple(len(u) for u in users)
    global_model = _freeze(nn.unflatten(initial_model, nn.flatten(initial_model)))
    records = []
    with ThreadPoolExecutor(max_workers=max(1, config.threads)) as pool:
        for t in range(1, config.rounds + 1):
            jobs = [pool.submit(_user_update, config, global_model, users[i], i, t) for i in range(len(users))]
            locals_ = tuple(_freeze(j.result()) for j in jobs)
            record = RoundRecord(t, global_model, locals_, sizes)
            records.append(record)
            if observer is not None:
                observer(record)
            global_model = _freeze(fedavg(locals_, sizes))
    return records


def final_global(records: Sequence[RoundRecord]) -> nn.Model:
    last = records[-1]
    return fedavg(last.local_models, last.sizes)


def global_trajectory(records: Sequence[RoundRecord]) -> np.ndarray:
    """Flattened global parameters before every round plus the final aggregate."""
    rows = [nn.flatten(r.global_model) for r in records]
    rows.append(nn.flatten(final_global(records)))
    return np.stack(rows)


def _spec_dicts(model: nn.Model) -> list[dict]:
    return [asdict(s) for s in model.specs]


def save_history(
    path: str | Path,
    records: Sequence[RoundRecord],
    meta: dict | None = None,
    extra: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a versioned ``.npz`` snapshot of the round history.

    Layout: ``header`` (JSON: format, version, layer specs, sizes, ``meta``),
    ``globals`` (rounds x params) and ``locals`` (rounds x users x params),
    plus any ``extra`` arrays the caller wants to keep alongside.
    """
    template = records[0].global_model
    header = {
        "format": HISTORY_FORMAT,
        "version": HISTORY_VERSION,
        "layers": _spec_dicts(template),
        "dropout": template.dropout,
        "rounds": [r.round for r in records],
        "sizes": list(records[0].sizes),
        "meta": meta or {},
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        "globals": np.stack([nn.flatten(r.global_model) for r in records]),
        "locals": np.stack([np.stack([nn.flatten(m) for m in r.local_models]) for r in records]),
    }
    for key, value in (extra or {}).items():
        arrays[f"extra_{key}"] = np.asarray(value)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_history(path: str | Path) -> tuple[list[RoundRecord], dict, dict[str, np.ndarray]]:
    """Inverse of :func:`save_history`: ``(records, meta, extra)``."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("format") != HISTORY_FORMAT:
            raise ValueError(f"{path}: not a history file")
        if header.get("version") != HISTORY_VERSION:
            raise ValueError(f"{path}: unsupported history version {header.get('version')}")
        globals_ = z["globals"]
        locals_ = z["locals"]
        extra = {k[len("extra_"):]: z[k] for k in z.files if k.startswith("extra_")}
    specs = [nn.LayerSpec(**s) for s in header["layers"]]
    template = nn.Model(
        tuple(nn.Layer(np.zeros((s.output_dim, s.input_dim)), np.zeros(s.output_dim), s) for s in specs),
        header["dropout"],
    )
    sizes = tuple(header["sizes"])
    records = []
    for i, t in enumerate(header["rounds"]):
        g = _freeze(nn.unflatten(template, globals_[i]))
        ls = tuple(_freeze(nn.unflatten(template, v)) for v in locals_[i])
        records.append(RoundRecord(t, g, ls, sizes))
    return records, header["meta"], extra
