"""``mti`` command line: prepare data, simulate bias fields, run sessions, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import scenarios as sc
from .biasfield import all_fields
from .dataset import list_subjects, load_volume, save_volume, synthetic_volume

log = logging.getLogger("mti")

# Number of subjects assumed for a dry run when no data root is configured.
DEFAULT_SUBJECT_COUNT = 7

FLAG_KEYS = {
    "l1_weight": "train.l1_weight",
    "lr": "train.learning_rate",
    "batch_size": "train.batch_size",
    "max_epochs": "train.max_epochs",
    "slice_size": "net.slice_size",
    "bias_mode": "bias.mode",
    "data_root": "data.root",
    "seed": "train.seed",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--toy", action="store_true", help="desk-scale profile with synthetic subjects")
    p.add_argument("--seed", type=int, help="seed for every random draw")
    p.add_argument("--data-root", help="directory of subject folders")
    p.add_argument("--l1-weight", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--slice-size", type=int)
    p.add_argument("--bias-mode", choices=("multiplicative", "additive"))
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config key")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output root (default: runs)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mti", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("scenarios", help="list the ten built-in scenario specs")

    p = subs.add_parser("prepare", help="validate a data root, or write synthetic subjects with --toy")
    _common(p)

    p = subs.add_parser("bias", help="write the bias fields at the configured slice size")
    _common(p)

    p = subs.add_parser("run", help="train and evaluate one session")
    _common(p)
    p.add_argument("--scenario", required=True, help="e.g. 3A")
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--method", required=True, choices=sc.METHODS)

    p = subs.add_parser("matrix", help="run many sessions")
    _common(p)
    p.add_argument("--all", action="store_true", help="every scenario (default when --scenario is absent)")
    p.add_argument("--scenario", action="append", default=[], help="restrict to these scenarios (repeatable)")
    p.add_argument("--method", action="append", default=[], choices=sc.METHODS)
    p.add_argument("--folds", type=int, help="number of folds (default: one per subject)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true", help="skip sessions with a completed manifest")
    p.add_argument("--dry-run", action="store_true", help="print the session keys and exit")

    p = subs.add_parser("eval", help="re-evaluate a saved generator on its session's test split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--metrics-out", type=Path, required=True)

    p = subs.add_parser("report", help="tables, boxplot data, curves and panels from completed runs")
    p.add_argument("--runs", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    overrides = [cfgmod.parse_override(item) for item in args.set]
    for attr, dotted in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(cfgmod.parse_override(f"{dotted}={json.dumps(value)}"))
    return cfgmod.load_config(args.config, overrides, profile="toy" if args.toy else None)


def cmd_scenarios(args) -> int:
    for s in sc.builtin_scenarios():
        print(f"{s.name}  input={s.input_modality}  contaminated={'yes' if s.contaminated else 'no'}  "
              f"tasks={','.join(s.task_names)}")
    return 0


def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    if cfg["data"]["root"] is None:
        if not args.toy:
            raise SystemExit("prepare: give --data-root to validate data, or --toy to write synthetic subjects")
        for vol in sc.resolve_volumes(cfg):
            print(f"{vol.subject_id}: {vol.shape} -> {save_volume(args.out, vol)}")
        return 0
    for sid in cfg["data"]["subjects"] or list_subjects(cfg["data"]["root"]):
        shape = cfg["data"]["expected_shape"]
        vol = load_volume(cfg["data"]["root"], sid, cfg["data"]["strict_dims"], None if shape is None else tuple(shape))
        counts = np.bincount(vol.labels.ravel(), minlength=4)
        print(f"{sid}: shape {vol.shape}, label voxels bg/gm/wm/csf {counts.tolist()}")
    return 0


def cmd_bias(args) -> int:
    cfg = resolve_config(args)
    n = cfg["net"]["slice_size"]
    fields = all_fields(n, n, cfg["bias"]["amplitude"], cfgmod.coefficient_table(cfg))
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"bias_fields_{n}.npz"
    np.savez_compressed(path, **{f"field{f.field_id}": f.values for f in fields})
    for f in fields:
        print(f"field {f.field_id}: min {f.values.min():.4f} max {f.values.max():.4f}")
    print(f"wrote {path}")
    return 0


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    spec = sc.scenario_by_name(args.scenario)
    key = sc.SessionKey(spec.scenario_id, spec.sub, args.fold, args.method)
    manifest = sc.run_session(key, sc.resolve_volumes(cfg), cfg, args.out)
    for sub in manifest["subruns"]:
        print(f"{key.id} {sub['name']}: {sub['stop_reason']} at epoch {sub['stop_epoch']} (L1 {sub['final_l1']:.4f})")
    print(f"run directory: {key.run_dir(args.out)}")
    return 0


def cmd_matrix(args) -> int:
    cfg = resolve_config(args)
    specs = [sc.scenario_by_name(s) for s in args.scenario] if args.scenario and not args.all else sc.builtin_scenarios()
    methods = args.method or sc.METHODS
    if args.dry_run:
        if args.folds is not None:
            n_folds = args.folds
        elif cfg["data"]["root"] is not None:
            n_folds = len(cfg["data"]["subjects"] or list_subjects(cfg["data"]["root"]))
        else:
            n_folds = cfg["data"]["toy_subjects"] if args.toy else DEFAULT_SUBJECT_COUNT
        for key in sc.enumerate_sessions(specs, n_folds, methods):
            print(key.id)
        return 0
    volumes = sc.resolve_volumes(cfg)
    n_folds = len(volumes) if args.folds is None else min(args.folds, len(volumes))
    keys = sc.enumerate_sessions(specs, n_folds, methods)
    summary = sc.run_matrix(keys, volumes, cfg, args.out, resume=args.resume, workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(json.dumps(summary.as_dict(), indent=2) + "\n")
    print(f"completed {len(summary.completed)}, skipped {len(summary.skipped)}, failed {len(summary.failed)}")
    for reason, n in sorted(summary.stop_reasons.items()):
        print(f"  {reason}: {n}")
    for sid, err in summary.failed.items():
        print(f"  FAILED {sid}: {err}")
    return 0 if summary.ok else 1


def cmd_eval(args) -> int:
    from .metrics import evaluate_session, write_metrics_csv
    from .dataset import TaskView
    from .nets import load_generator

    cfg = resolve_config(args)
    sidecar = json.loads(args.checkpoint.with_suffix(".json").read_text())
    key = sc.SessionKey.parse(sidecar["session"])
    spec = sc.scenario_by_name(key.scenario)
    _, test = sc.split_samples(key, sc.resolve_volumes(cfg), cfg)
    tasks = sidecar["tasks"]
    if len(tasks) != len(spec.tasks):
        test = TaskView(test, spec.task_names.index(tasks[0]))
    records = evaluate_session(load_generator(args.checkpoint), test, session=key.id, batch_size=cfg["eval"]["batch_size"])
    write_metrics_csv(records, args.metrics_out)
    print(f"{len(records)} records -> {args.metrics_out}")
    return 0


def cmd_report(args) -> int:
    from .stats_report import render_report

    bundle = render_report(args.runs, args.out)
    for kind, paths in bundle.items():
        print(f"{kind}: {len(paths)} file(s)")
    return 0


COMMANDS = {
    "scenarios": cmd_scenarios,
    "prepare": cmd_prepare,
    "bias": cmd_bias,
    "run": cmd_run,
    "matrix": cmd_matrix,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints usage itself
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(f"mti {args.command}: {exc.code}", file=sys.stderr)
            return 2
        return int(exc.code or 0)
    except Exception as exc:
        print(f"mti {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
