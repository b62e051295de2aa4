"""Command-line runner.

Subcommands::

    decaf run      --spec S [--out DIR]           simulate, attack, report
    decaf simulate --spec S [--out DIR]           FL only; writes history.npz
    decaf attack   --history H [--spec S] [--out DIR]
    decaf ablate   --spec S [--modes] [--aux-counts 2,10,30] [--last-layer 128,256]
    decaf defend   --spec S [--dp-sigmas 0.1,1,16] [--dropout-rates 0.2,0.5]

``--spec`` may be omitted to use the bundled reference configuration. Output
directories default to ``<name>-seed<seed>-<command>`` and never contain
timestamps. ``DECAF_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import experiment as ex
from .config import SCHEMA, ExperimentSpec, SpecError, reference_spec
from .data import CapacityError, IDXFormatError

log = logging.getLogger("decaf")


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="decaf", description="Data-composition inference in simulated FedAvg.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", type=Path, help="experiment JSON (default: bundled reference config)")
    common.add_argument("--out", type=Path, help="artifact directory")
    common.add_argument("--seed", type=int, help="override the spec's top-level seed")
    common.add_argument("--strict", action="store_true", help="exit nonzero if any attack reports an anomaly")
    common.add_argument("--threads", type=int, default=1, help="worker threads for training and attack jobs")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="simulate and attack in one go")
    sub.add_parser("simulate", parents=[common], help="run FL only and save the round history")
    p = sub.add_parser("attack", parents=[common], help="attack a saved round history")
    p.add_argument("--history", type=Path, required=True)
    p = sub.add_parser("ablate", parents=[common], help="ablation sweeps")
    p.add_argument("--modes", action="store_true", help="baseline vs no-null-removal vs no-calibrator")
    p.add_argument("--aux-counts", type=_int_list, default=[], help="comma-separated auxiliary samples per class")
    p.add_argument("--last-layer", type=_int_list, default=[], help="comma-separated last hidden widths")
    p = sub.add_parser("defend", parents=[common], help="defense sweep")
    p.add_argument("--dp-sigmas", type=_float_list, default=[], help="comma-separated DP noise multipliers")
    p.add_argument("--dropout-rates", type=_float_list, default=[], help="comma-separated dropout rates")
    p.add_argument("--clip-norm", type=float, help="DP clipping norm (default: spec value)")
    sub.add_parser("schema", help="print the experiment JSON schema")
    return parser


def _load_spec(args) -> ExperimentSpec | None:
    if args.spec is None:
        return None
    spec = ExperimentSpec.load(args.spec)
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    return spec


def _out_dir(args, spec: ExperimentSpec) -> Path:
    if args.out is not None:
        return args.out
    if spec.raw["output"]["dir"]:
        return Path(spec.raw["output"]["dir"])
    return Path(f"{spec.raw['name']}-seed{spec.seed}-{args.command}")


def _finish(args, anomalies: int) -> int:
    if anomalies:
        log.warning("%d attack(s) reported anomalies", anomalies)
        if args.strict:
            return 3
    return 0


def _write_rows(out: Path, stem: str, rows: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(ex.rows_csv(rows))
    (out / f"{stem}.json").write_text(ex.dumps({"rows": rows}))


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("DECAF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(SCHEMA, indent=2))
        return 0
    try:
        spec = _load_spec(args)
        if args.command == "attack":
            if not args.history.is_file():
                print(f"error: history file not found: {args.history}", file=sys.stderr)
                return 2
            outcome = ex.attack_saved(args.history, spec, args.threads)
            ex.write_outcome(outcome, _out_dir(args, outcome.spec))
            return _finish(args, sum(r.anomaly is not None for r in outcome.reports))

        if spec is None:
            spec = reference_spec()
            if args.seed is not None:
                spec = spec.replace(seed=args.seed)
        out = _out_dir(args, spec)

        if args.command == "run":
            outcome, _ = ex.run_experiment(spec, out, args.threads)
            return _finish(args, sum(r.anomaly is not None for r in outcome.reports))
        if args.command == "simulate":
            world, records = ex.simulate(spec, args.threads)
            out.mkdir(parents=True, exist_ok=True)
            ex.save_simulation(out / "history.npz", spec, world, records)
            (out / "spec.json").write_text(spec.to_json() + "\n")
            return 0
        if args.command == "ablate":
            rows: list[dict] = []
            anomalies = 0
            run_all = not (args.modes or args.aux_counts or args.last_layer)
            if args.modes or run_all:
                r, outcomes = ex.ablate_modes(spec, args.threads)
                rows += r
            if args.aux_counts:
                r, _ = ex.ablate_aux_counts(spec, args.aux_counts, args.threads)
                rows += r
            if args.last_layer:
                r, _ = ex.ablate_last_layer(spec, args.last_layer, args.threads)
                rows += r
            anomalies = sum(row["anomalies"] for row in rows if row["group"] == "all")
            _write_rows(out, "ablation", rows)
            return _finish(args, anomalies)
        if args.command == "defend":
            rows, _ = ex.defense_sweep(spec, args.dp_sigmas, args.dropout_rates, args.clip_norm, args.threads)
            _write_rows(out, "defense", rows)
            # anomalies are expected under heavy noise; only --strict turns them into failures
            return _finish(args, sum(row["anomalies"] for row in rows if row["group"] == "all"))
    except SpecError as exc:
        for path, msg in exc.errors:
            print(f"spec error at {path}: {msg}", file=sys.stderr)
        return 2
    except (CapacityError, IDXFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
