"""End-to-end experiments: build the federation, train, attack, write reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .attack import AttackParams, AttackReport, attack_history, attack_multi_round
from .config import ExperimentSpec
from .data import AuxiliarySet, CompositionSpec, Dataset, generate_synthetic, load_idx, partition, reserve_auxiliary
from .fl import RoundRecord, final_global, load_history, run, save_history
from .metrics import DistanceTriple, distances, mean_triple, random_guess_baseline
from .seeding import stream

log = logging.getLogger(__name__)

# Auxiliary samples are drawn from a fixed-size reserve so that changing the
# per-class auxiliary count never changes what the users receive.
AUX_RESERVE = 100

CSV_COLUMNS = ("user", "round", "mode", "L1", "L2", "Linf", "c_miss_correct")


@dataclass(frozen=True)
class World:
    users: tuple[Dataset, ...]
    truths: tuple[np.ndarray, ...]
    aux: AuxiliarySet
    initial_model: nn.Model
    test: Dataset | None


@dataclass(frozen=True)
class Outcome:
    """Everything one experiment produced, before it is written to disk."""

    spec: ExperimentSpec
    records: list[RoundRecord]
    reports: list[AttackReport]
    truths: tuple[np.ndarray, ...]
    accuracy: list[float]

    def mean_distances(self, users: Iterable[int] | None = None) -> DistanceTriple:
        chosen = None if users is None else set(users)
        return mean_triple(r.distances for r in self.reports
                           if r.distances is not None and (chosen is None or r.user in chosen))

    def null_accuracy(self) -> float:
        flags = [r.null_correct for r in self.reports if r.null_correct is not None]
        return float(np.mean(flags)) if flags else float("nan")


def fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.6g}"


def take_aux(aux: AuxiliarySet, k: int) -> AuxiliarySet:
    if k > aux.k_aux:
        raise ValueError(f"auxiliary reserve holds {aux.k_aux} per class, {k} requested")
    return AuxiliarySet(tuple(x[:k] for x in aux.per_class), tuple(i[:k] for i in aux.ids))


def user_specs(spec: ExperimentSpec) -> list[CompositionSpec]:
    users = spec.raw["users"]
    if users["counts"]:
        return [CompositionSpec(tuple(int(round(c)) for c in comp)) for comp in users["compositions"]]
    return [CompositionSpec.from_proportions(comp, users["total"]) for comp in users["compositions"]]


def build_world(spec: ExperimentSpec) -> World:
    seed = spec.seed
    ds_cfg = spec.raw["dataset"]
    n = spec.class_count
    test = None
    if ds_cfg["source"] == "idx":
        pool = load_idx(ds_cfg["images"], ds_cfg["labels"], n)
        if "test_images" in ds_cfg and "test_labels" in ds_cfg:
            test = load_idx(ds_cfg["test_images"], ds_cfg["test_labels"], n)
    else:
        pool = generate_synthetic(n, ds_cfg["dim"], ds_cfg["per_class"], ds_cfg["spread"], stream(seed, "data"))
        if ds_cfg["test_per_class"]:
            test = generate_synthetic(n, ds_cfg["dim"], ds_cfg["test_per_class"], ds_cfg["spread"],
                                      stream(seed, "test"))
    k_aux = spec.raw["attack"]["aux_per_class"]
    reserve, remainder = reserve_auxiliary(pool, max(AUX_RESERVE, k_aux), stream(seed, "aux"))
    specs = user_specs(spec)
    users = partition(remainder, specs, stream(seed, "partition"))
    truths = tuple(s.proportions for s in specs)
    m = spec.raw["model"]
    model = nn.init_model([pool.dim, *m["hidden"], n], m["activation"], slope=m["slope"], rng=stream(seed, "init"))
    return World(tuple(users), truths, take_aux(reserve, k_aux), model, test)


def simulate(spec: ExperimentSpec, threads: int = 1, observer=None) -> tuple[World, list[RoundRecord]]:
    world = build_world(spec)
    records = run(spec.fl_config(threads), world.initial_model, world.users, observer)
    return world, records


def global_accuracy(records: Sequence[RoundRecord], test: Dataset | None) -> list[float]:
    """Test accuracy of the aggregated global model after each round."""
    if test is None or len(test) == 0:
        return []
    models = [r.global_model for r in records[1:]] + [final_global(records)]
    return [nn.accuracy(m, test.features, test.labels) for m in models]


def attack(
    spec: ExperimentSpec,
    records: Sequence[RoundRecord],
    aux: AuxiliarySet,
    truths: Sequence[np.ndarray] | None,
    threads: int = 1,
    params: AttackParams | None = None,
    users: Iterable[int] | None = None,
) -> list[AttackReport]:
    rounds = spec.raw["attack"]["rounds"]
    return attack_history(
        records, aux, spec.raw["fl"]["learning_rate"], params or spec.attack_params(), truths,
        rounds=rounds, users=users, threads=threads,
    )


def execute(spec: ExperimentSpec, threads: int = 1) -> Outcome:
    world, records = simulate(spec, threads)
    reports = attack(spec, records, world.aux, world.truths, threads)
    return Outcome(spec, records, reports, world.truths, global_accuracy(records, world.test))


# ----------------------------------------------------------------------------- reports

def multi_round(reports: Sequence[AttackReport], truths: Sequence[np.ndarray], k: int) -> list[dict]:
    """Fuse each user's first ``k`` attacked rounds."""
    out = []
    by_user: dict[int, list[AttackReport]] = {}
    for r in reports:
        by_user.setdefault(r.user, []).append(r)
    for user in sorted(by_user):
        entries = sorted(by_user[user], key=lambda r: r.round)[:k]
        try:
            comp = attack_multi_round(entries)
        except ValueError as exc:
            out.append({"user": user, "rounds": [e.round for e in entries], "anomaly": str(exc)})
            continue
        row = {"user": user, "rounds": [e.round for e in entries], "composition": comp.tolist()}
        row.update(distances(comp, truths[user]).to_dict())
        out.append(row)
    return out


def results_document(outcome: Outcome) -> dict:
    spec = outcome.spec
    trials = spec.raw["attack"]["guess_trials"]
    users = []
    for i, truth in enumerate(outcome.truths):
        guess = random_guess_baseline(truth, trials, stream(spec.seed, "guess", i))
        users.append({
            "user": i,
            "truth": truth.tolist(),
            "null_classes": np.flatnonzero(truth == 0).tolist(),
            "random_guess": guess.to_dict(),
        })
    scored = [r for r in outcome.reports if r.distances is not None]
    doc = {
        "name": spec.raw["name"],
        "seed": spec.seed,
        "spec_digest": hashlib.sha256(spec.to_json().encode()).hexdigest()[:16],
        "spec": spec.raw,
        "global_accuracy": outcome.accuracy,
        "users": users,
        "reports": [r.to_dict() for r in outcome.reports],
        "summary": {
            "attacks": len(outcome.reports),
            "anomalies": sum(r.anomaly is not None for r in outcome.reports),
            "null_accuracy": outcome.null_accuracy(),
            "mean": outcome.mean_distances().to_dict() if scored else None,
        },
    }
    k = spec.raw["attack"]["multi_round_k"]
    if k > 1:
        doc["multi_round"] = {"k": k, "users": multi_round(outcome.reports, outcome.truths, k)}
    return doc


def reports_csv(reports: Sequence[AttackReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        d = r.distances
        writer.writerow([
            r.user, r.round, r.mode,
            fmt(d.l1 if d else None), fmt(d.l2 if d else None), fmt(d.linf if d else None),
            "" if r.null_correct is None else str(r.null_correct).lower(),
        ])
    return buf.getvalue()


def _pct(v: float) -> str:
    return "-" if v == 0 else f"{100 * v:.2f}"


def summary_text(doc: dict) -> str:
    """Per-round tables: ground truth over inferred composition, with Lp and random guess."""
    lines = [f"experiment {doc['name']}  seed {doc['seed']}  spec {doc['spec_digest']}"]
    if doc["global_accuracy"]:
        lines.append("global test accuracy by round: " + " ".join(f"{a:.3f}" for a in doc["global_accuracy"]))
    s = doc["summary"]
    lines.append(f"attacks {s['attacks']}  anomalies {s['anomalies']}  null-class accuracy {s['null_accuracy']:.3f}")
    if s["mean"]:
        lines.append("mean L1/L2/Linf: {L1:.4f}/{L2:.4f}/{Linf:.4f}".format(**s["mean"]))
    users = {u["user"]: u for u in doc["users"]}
    rounds = sorted({r["round"] for r in doc["reports"]})
    for t in rounds:
        lines.append("")
        lines.append(f"round {t}: composition (%), L1/L2/Linf (x1e-2), random guess")
        for r in (r for r in doc["reports"] if r["round"] == t):
            u = users[r["user"]]
            lines.append(f"user {r['user'] + 1:>3} truth    " + " ".join(f"{_pct(v):>6}" for v in u["truth"]))
            if r["composition"] is None:
                lines.append(f"         inferred ANOMALY {r['anomaly']}")
                continue
            g = u["random_guess"]
            tail = ""
            if r["L1"] is not None:
                tail = (f"   {100 * r['L1']:.2f}/{100 * r['L2']:.2f}/{100 * r['Linf']:.2f}"
                        f"   {100 * g['L1']:.2f}/{100 * g['L2']:.2f}/{100 * g['Linf']:.2f}")
            lines.append("         inferred " + " ".join(f"{_pct(v):>6}" for v in r["composition"]) + tail)
    if "multi_round" in doc:
        lines.append("")
        lines.append(f"multi-round fusion (k={doc['multi_round']['k']})")
        for row in doc["multi_round"]["users"]:
            if "composition" in row:
                lines.append(f"user {row['user'] + 1:>3} " + " ".join(f"{_pct(v):>6}" for v in row["composition"])
                             + f"   {100 * row['L1']:.2f}/{100 * row['L2']:.2f}/{100 * row['Linf']:.2f}")
    return "\n".join(lines) + "\n"


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_outcome(outcome: Outcome, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = results_document(outcome)
    (out / "results.json").write_text(dumps(doc))
    (out / "results.csv").write_text(reports_csv(outcome.reports))
    (out / "summary.txt").write_text(summary_text(doc))
    (out / "spec.json").write_text(outcome.spec.to_json() + "\n")
    return doc


def run_experiment(spec: ExperimentSpec, out_dir: str | Path, threads: int = 1) -> tuple[Outcome, dict]:
    outcome = execute(spec, threads)
    return outcome, write_outcome(outcome, out_dir)


# ----------------------------------------------------------------------------- record / attack later

def save_simulation(path: str | Path, spec: ExperimentSpec, world: World, records: Sequence[RoundRecord]) -> None:
    """History plus the server's auxiliary set and the scoring ground truth."""
    save_history(
        path, records,
        meta={"spec": spec.raw, "learning_rate": spec.raw["fl"]["learning_rate"],
              "config_digest": spec.fl_config().digest(),
              "accuracy": global_accuracy(records, world.test)},
        extra={
            "aux_features": np.stack(world.aux.per_class),
            "aux_ids": np.stack(world.aux.ids),
            "truths": np.stack(world.truths),
        },
    )


def attack_saved(
    history_path: str | Path,
    spec: ExperimentSpec | None = None,
    threads: int = 1,
) -> Outcome:
    records, meta, extra = load_history(history_path)
    stored = ExperimentSpec(meta["spec"])
    if spec is None:
        spec = stored
    else:
        # training-side settings always come from the recording
        spec = ExperimentSpec({**spec.raw, **{k: stored.raw[k] for k in ("seed", "dataset", "model", "users", "fl",
                                                                          "defense")}})
    feats = extra["aux_features"]
    aux = AuxiliarySet(tuple(feats), tuple(extra["aux_ids"]))
    truths = tuple(extra["truths"])
    reports = attack(spec, records, aux, truths, threads)
    return Outcome(spec, records, reports, truths, list(meta.get("accuracy", [])))


# ----------------------------------------------------------------------------- ablations and defenses

def _group_rows(label: str, setting: str, outcome: Outcome) -> list[dict]:
    rows = []
    groups = {
        "all": range(len(outcome.truths)),
        "no-null": [i for i, t in enumerate(outcome.truths) if np.all(t > 0)],
        "with-null": [i for i, t in enumerate(outcome.truths) if np.any(t == 0)],
    }
    for name, users in groups.items():
        users = set(users)
        picked = [r for r in outcome.reports if r.user in users]
        if not picked:
            continue
        scored = [r.distances for r in picked if r.distances is not None]
        null_flags = [r.null_correct for r in picked if r.null_correct is not None]
        m = mean_triple(scored) if scored else None
        rows.append({
            "ablation": label,
            "setting": setting,
            "group": name,
            "attacks": len(picked),
            "anomalies": sum(r.anomaly is not None for r in picked),
            "L1": m.l1 if m else None,
            "L2": m.l2 if m else None,
            "Linf": m.linf if m else None,
            "null_accuracy": float(np.mean(null_flags)) if null_flags else None,
            "global_accuracy": outcome.accuracy[-1] if outcome.accuracy else None,
        })
    return rows


def ablate_modes(spec: ExperimentSpec, threads: int = 1) -> tuple[list[dict], dict[str, Outcome]]:
    """Full pipeline versus no-null-removal and no-calibrator on one shared recording."""
    world, records = simulate(spec, threads)
    base = spec.attack_params()
    variants = {
        "baseline": base,
        "no-null-removal": replace(base, null_removal=False),
        "no-calibrator": replace(base, calibrator=False),
    }
    acc = global_accuracy(records, world.test)
    outcomes = {}
    rows = []
    for name, params in variants.items():
        reports = attack(spec, records, world.aux, world.truths, threads, params)
        outcomes[name] = Outcome(spec, records, reports, world.truths, acc)
        rows += _group_rows("mode", name, outcomes[name])
    return rows, outcomes


def ablate_aux_counts(spec: ExperimentSpec, counts: Sequence[int], threads: int = 1) -> tuple[list[dict], dict]:
    outcomes = {}
    rows = []
    for k in counts:
        s = spec.replace(attack={"aux_per_class": int(k)})
        outcomes[k] = execute(s, threads)
        rows += _group_rows("aux_per_class", str(k), outcomes[k])
    return rows, outcomes


def ablate_last_layer(spec: ExperimentSpec, widths: Sequence[int], threads: int = 1) -> tuple[list[dict], dict]:
    """Vary the width of the layer feeding the classifier (the last hidden layer)."""
    outcomes = {}
    rows = []
    hidden = list(spec.raw["model"]["hidden"])
    for w in widths:
        s = spec.replace(model={"hidden": hidden[:-1] + [int(w)]})
        outcomes[w] = execute(s, threads)
        rows += _group_rows("last_layer", f"{w}x{spec.class_count}", outcomes[w])
    return rows, outcomes


def defense_sweep(
    spec: ExperimentSpec,
    dp_sigmas: Sequence[float] = (),
    dropout_rates: Sequence[float] = (),
    clip_norm: float | None = None,
    threads: int = 1,
) -> tuple[list[dict], dict]:
    clip = clip_norm if clip_norm is not None else spec.raw["defense"]["clip_norm"]
    settings = [("none", {"kind": "none"})]
    settings += [(f"dp(sigma={s:g})", {"kind": "dp", "noise_multiplier": float(s), "clip_norm": clip})
                 for s in dp_sigmas]
    settings += [(f"dropout({r:g})", {"kind": "dropout", "rate": float(r)}) for r in dropout_rates]
    outcomes = {}
    rows = []
    for label, defense in settings:
        s = spec.replace(defense={**{"rate": 0.0, "noise_multiplier": 0.0, "clip_norm": clip}, **defense})
        outcomes[label] = execute(s, threads)
        rows += _group_rows("defense", label, outcomes[label])
    return rows, outcomes


ROW_COLUMNS = ("ablation", "setting", "group", "attacks", "anomalies", "L1", "L2", "Linf", "null_accuracy",
               "global_accuracy")


def rows_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(ROW_COLUMNS)
    for row in rows:
        writer.writerow([fmt(row[c]) if isinstance(row[c], float) else row[c] for c in ROW_COLUMNS])
    return buf.getvalue()
