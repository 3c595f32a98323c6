"""Scenario declarations, leave-one-subject-out folds and the session matrix.

A session is one (scenario, sub, fold, method) cell.  Multitask methods train
one network emitting both targets; single-task methods train one network per
task inside the same session directory.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
import traceback
from collections import Counter
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .biasfield import all_fields
from .dataset import (
    MODALITIES,
    AugmentationParams,
    MultimodalVolume,
    TaskView,
    build_samples,
    list_subjects,
    load_volume,
    synthetic_volume,
)
from .metrics import evaluate_session, write_metrics_csv
from .nets import count_parameters, save_checkpoint
from .trainer import predict, train_session

log = logging.getLogger(__name__)

METHODS = ("unet_st", "cgan_st", "unet_mt", "cgan_mt")
TASK_KINDS = ("convert", "bias_correct", "segment")
MANIFEST = "manifest.json"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    target_modality: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ScenarioError(f"unknown task kind {self.kind!r}")
        if self.kind == "convert" and self.target_modality not in MODALITIES:
            raise ScenarioError(f"conversion needs a target modality, got {self.target_modality!r}")
        if self.kind != "convert" and self.target_modality is not None:
            raise ScenarioError(f"{self.kind} takes no target modality")

    @property
    def name(self) -> str:
        return f"convert_{self.target_modality}" if self.kind == "convert" else self.kind


@dataclass(frozen=True)
class ScenarioSpec:
    scenario_id: int
    sub: str
    input_modality: str
    contaminated: bool
    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        if self.sub not in ("A", "B"):
            raise ScenarioError(f"sub must be A or B, got {self.sub!r}")
        if self.input_modality not in MODALITIES:
            raise ScenarioError(f"unknown input modality {self.input_modality!r}")
        if len(self.tasks) not in (1, 2):
            raise ScenarioError("a scenario has one or two tasks")
        for t in self.tasks:
            if t.kind == "bias_correct" and not self.contaminated:
                raise ScenarioError(f"{self.name}: bias correction needs a contaminated input")
            if t.kind == "convert" and t.target_modality == self.input_modality:
                raise ScenarioError(f"{self.name}: conversion target equals the input modality")

    @property
    def name(self) -> str:
        return f"{self.scenario_id}{self.sub}"

    @property
    def task_names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.tasks)


def _convert(mod: str) -> TaskSpec:
    return TaskSpec("convert", mod)


SEGMENT = TaskSpec("segment")
BIAS_CORRECT = TaskSpec("bias_correct")


def builtin_scenarios() -> list[ScenarioSpec]:
    """The ten (scenario, sub) definitions: A feeds T2-FLAIR, B feeds T1."""
    out = []
    for sub, inp, other in (("A", "T2-FLAIR", "T1"), ("B", "T1", "T2-FLAIR")):
        out += [
            ScenarioSpec(1, sub, inp, False, (_convert(other), _convert("T1-IR"))),
            ScenarioSpec(2, sub, inp, True, (BIAS_CORRECT, _convert(other))),
            ScenarioSpec(3, sub, inp, False, (SEGMENT, _convert(other))),
            ScenarioSpec(4, sub, inp, True, (SEGMENT, BIAS_CORRECT)),
            ScenarioSpec(5, sub, inp, True, (SEGMENT, _convert(other))),
        ]
    return sorted(out, key=lambda s: (s.scenario_id, s.sub))


def scenario_by_name(name: str) -> ScenarioSpec:
    for spec in builtin_scenarios():
        if spec.name == name.upper():
            return spec
    raise ScenarioError(f"unknown scenario {name!r}; expected one of 1A..5B")


def loso_folds(subject_ids: Sequence[str]) -> list[tuple[list[str], str]]:
    """One (train subjects, held-out subject) pair per subject, in input order."""
    ids = [str(s) for s in subject_ids]
    if len(set(ids)) != len(ids):
        dupes = sorted(k for k, v in Counter(ids).items() if v > 1)
        raise ScenarioError(f"duplicate subject ids {dupes}")
    if len(ids) < 2:
        raise ScenarioError("leave-one-subject-out needs at least 2 subjects")
    return [([s for s in ids if s != test], test) for test in ids]


@dataclass(frozen=True, order=True)
class SessionKey:
    scenario_id: int
    sub: str
    fold: int
    method: str

    def __post_init__(self):
        if self.method not in METHODS:
            raise ScenarioError(f"unknown method {self.method!r}")

    @property
    def scenario(self) -> str:
        return f"{self.scenario_id}{self.sub}"

    @property
    def id(self) -> str:
        return f"{self.scenario}/{self.method}/fold{self.fold}"

    @property
    def arch(self) -> str:
        return self.method.split("_")[0]

    @property
    def multitask(self) -> bool:
        return self.method.endswith("_mt")

    def run_dir(self, out_root: str | Path) -> Path:
        return Path(out_root) / self.id

    @classmethod
    def parse(cls, text: str) -> "SessionKey":
        try:
            scen, method, fold = text.strip().split("/")
            if not fold.startswith("fold"):
                raise ValueError
            return cls(int(scen[:-1]), scen[-1].upper(), int(fold[4:]), method)
        except (ValueError, IndexError) as exc:
            raise ScenarioError(f"cannot parse session key {text!r}; expected e.g. 3A/unet_mt/fold2") from exc


def enumerate_sessions(
    scenarios: Sequence[ScenarioSpec], folds: Sequence | int, methods: Sequence[str] = METHODS
) -> list[SessionKey]:
    """Cross product ordered by (scenario, sub, fold, method)."""
    n_folds = folds if isinstance(folds, int) else len(folds)
    if not scenarios or n_folds < 1 or not methods:
        raise ScenarioError("enumerate_sessions needs at least one scenario, fold and method")
    order = {m: i for i, m in enumerate(METHODS)}
    specs = sorted(scenarios, key=lambda s: (s.scenario_id, s.sub))
    methods = sorted(methods, key=order.__getitem__)
    return [SessionKey(s.scenario_id, s.sub, k, m) for s in specs for k in range(n_folds) for m in methods]


# -- data ----------------------------------------------------------------------


def resolve_volumes(cfg: dict) -> list[MultimodalVolume]:
    """Subjects from ``data.root``, or synthetic phantoms when no root is set."""
    data = cfg["data"]
    if data["root"] is None:
        n = data["toy_subjects"]
        seed = cfg["train"]["seed"]
        return [synthetic_volume(f"s{i}", tuple(data["toy_shape"]), seed=seed) for i in range(n)]
    ids = data["subjects"] or list_subjects(data["root"])
    shape = None if data["expected_shape"] is None else tuple(data["expected_shape"])
    return [load_volume(data["root"], s, strict=data["strict_dims"], expected_shape=shape) for s in ids]


def split_samples(key: SessionKey, volumes: Sequence[MultimodalVolume], cfg: dict):
    """Lazy (train, test) sample sets for ``key``.

    Training samples cover every augmentation; test samples use the
    unaugmented slices, under all bias fields for contaminated scenarios.
    """
    spec = scenario_by_name(key.scenario)
    folds = loso_folds([v.subject_id for v in volumes])
    if not 0 <= key.fold < len(folds):
        raise ScenarioError(f"fold {key.fold} out of range for {len(folds)} subjects")
    train_ids, test_id = folds[key.fold]
    by_id = {v.subject_id: v for v in volumes}
    size = cfg["net"]["slice_size"]
    fields = all_fields(size, size, cfg["bias"]["amplitude"], cfgmod.coefficient_table(cfg)) if spec.contaminated else None
    common = dict(scenario=spec, bias_fields=fields, slice_size=size, bias_mode=cfg["bias"]["mode"], lazy=True)
    train = build_samples([by_id[s] for s in train_ids], augmentations=cfgmod.augmentations(cfg), **common)
    test = build_samples([by_id[test_id]], augmentations=[AugmentationParams()], **common)
    leaked = {m.subject_id for m in train.metas()} & {m.subject_id for m in test.metas()}
    if leaked:
        raise ScenarioError(f"{key.id}: subjects {sorted(leaked)} appear in both train and test samples")
    return train, test


def data_fingerprint(volumes: Sequence[MultimodalVolume], train, test) -> str:
    """SHA-256 over the voxel content of every subject and the sample list."""
    h = hashlib.sha256()
    for v in sorted(volumes, key=lambda v: v.subject_id):
        h.update(v.subject_id.encode())
        for name in sorted(v.modalities):
            h.update(np.ascontiguousarray(v.modalities[name]).tobytes())
        h.update(np.ascontiguousarray(v.labels).tobytes())
    for part in (train, test):
        h.update(json.dumps([asdict(m) for m in part.metas()], sort_keys=True).encode())
    return h.hexdigest()


def _write_json_atomic(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_manifest(run_dir: str | Path) -> dict | None:
    path = Path(run_dir) / MANIFEST
    return json.loads(path.read_text()) if path.exists() else None


# -- sessions ------------------------------------------------------------------


def _panel_index(test) -> int:
    metas = test.metas()
    depths = sorted({m.slice_index for m in metas})
    mid = depths[len(depths) // 2]
    return next(i for i, m in enumerate(metas) if m.slice_index == mid)


def run_session(key: SessionKey, volumes: Sequence[MultimodalVolume], cfg: dict, out_root: str | Path) -> dict:
    """Train and evaluate one session; writes checkpoints, curves, metrics and the manifest."""
    started = time.time()
    run_dir = key.run_dir(out_root)
    run_dir.mkdir(parents=True, exist_ok=True)
    spec = scenario_by_name(key.scenario)
    train, test = split_samples(key, volumes, cfg)
    fingerprint = data_fingerprint(volumes, train, test)

    if key.multitask:
        runs = [("mt", list(range(len(spec.tasks))))]
    else:
        runs = [(f"st_{t.name}", [k]) for k, t in enumerate(spec.tasks)]

    records = []
    subruns = []
    epoch_seconds = {}
    panel: dict[str, np.ndarray] = {}
    pi = _panel_index(test)
    for name, task_ids in runs:
        tr = train if len(task_ids) == len(spec.tasks) else TaskView(train, task_ids[0])
        te = test if len(task_ids) == len(spec.tasks) else TaskView(test, task_ids[0])
        task_names = [spec.tasks[k].name for k in task_ids]
        curve_rel = f"curves/{name}.csv"
        ckpt_rel = f"checkpoints/generator_{name}.pt"
        net_cfg = cfgmod.network_config(cfg, len(task_ids))
        result = train_session(tr, net_cfg, cfgmod.train_config(cfg, key.arch), curve_path=run_dir / curve_rel)
        save_checkpoint(result.generator, run_dir / ckpt_rel, session=key.id, tasks=task_names)
        records += evaluate_session(result.generator, te, session=key.id, batch_size=cfg["eval"]["batch_size"])
        sample = te[pi]
        out = predict(result.generator, [sample])[0]
        panel["input"] = sample.input
        for j, tname in enumerate(task_names):
            panel[f"target_{tname}"] = sample.targets[j]
            panel[f"pred_{tname}"] = out[..., 3 * j : 3 * j + 3]
        subruns.append({
            "name": name,
            "tasks": task_names,
            "stop_reason": result.stop.reason,
            "stop_epoch": result.stop.epoch,
            "final_l1": result.curve[-1].gen_l1,
            "param_count": count_parameters(result.generator),
            "checkpoint": ckpt_rel,
            "curve": curve_rel,
        })
        epoch_seconds[name] = [r.seconds for r in result.curve.records]

    write_metrics_csv(records, run_dir / "metrics.csv")
    np.savez_compressed(run_dir / "panel.npz", **panel)
    artifacts = ["metrics.csv", "panel.npz"]
    for sub in subruns:
        artifacts += [sub["checkpoint"], sub["checkpoint"].replace(".pt", ".json"), sub["curve"]]
    manifest = {
        "status": "completed",
        "session": key.id,
        "key": asdict(key),
        "scenario": {"input": spec.input_modality, "contaminated": spec.contaminated, "tasks": list(spec.task_names)},
        "config": cfg,
        "fingerprint": fingerprint,
        "n_train": len(train),
        "n_test": len(test),
        "subruns": subruns,
        "artifacts": sorted(artifacts),
        # everything wall-clock dependent lives here
        "timestamps": {"started": started, "finished": time.time(), "epoch_seconds": epoch_seconds},
    }
    _write_json_atomic(run_dir / MANIFEST, manifest)
    return manifest


def expected_fingerprint(key: SessionKey, volumes: Sequence[MultimodalVolume], cfg: dict) -> str:
    train, test = split_samples(key, volumes, cfg)
    return data_fingerprint(volumes, train, test)


@dataclass
class MatrixSummary:
    completed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    stop_reasons: Counter = field(default_factory=Counter)
    metric_files: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failed

    def as_dict(self) -> dict:
        return {
            "completed": self.completed,
            "skipped": self.skipped,
            "failed": self.failed,
            "stop_reasons": dict(sorted(self.stop_reasons.items())),
            "metric_files": self.metric_files,
        }


def _guarded(session_fn, key, volumes, cfg, out_root) -> tuple[str, dict | None, str | None]:
    try:
        return key.id, session_fn(key, volumes, cfg, out_root), None
    except Exception as exc:  # fail-soft: record and keep going
        detail = f"{type(exc).__name__}: {exc}"
        log.error("session %s failed: %s", key.id, detail)
        _write_json_atomic(key.run_dir(out_root) / MANIFEST, {
            "status": "failed",
            "session": key.id,
            "key": asdict(key),
            "config": cfg,
            "error": detail,
            "traceback": traceback.format_exc(),
            "timestamps": {"finished": time.time()},
        })
        return key.id, None, detail


def run_matrix(
    keys: Sequence[SessionKey],
    volumes: Sequence[MultimodalVolume],
    cfg: dict,
    out_root: str | Path,
    resume: bool = True,
    workers: int = 1,
    session_fn: Callable = run_session,
) -> MatrixSummary:
    """Run every session in ``keys`` and summarise.

    With ``resume`` a session whose manifest says completed is skipped, after
    checking that its recorded data fingerprint matches the current data; a
    mismatch is recorded as a failure rather than silently reusing stale
    results.  Failures never stop the rest of the matrix.
    """
    summary = MatrixSummary()
    todo = []
    for key in keys:
        manifest = read_manifest(key.run_dir(out_root)) if resume else None
        if manifest and manifest.get("status") == "completed":
            if manifest.get("fingerprint") != expected_fingerprint(key, volumes, cfg):
                summary.failed[key.id] = "fingerprint mismatch with existing completed run"
                continue
            summary.skipped.append(key.id)
            _tally(summary, manifest, key, out_root)
            continue
        todo.append(key)

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_guarded, *zip(*[(session_fn, k, volumes, cfg, out_root) for k in todo])))
    else:
        results = [_guarded(session_fn, k, volumes, cfg, out_root) for k in todo]

    for key, (sid, manifest, error) in zip(todo, results):
        if error is not None:
            summary.failed[sid] = error
        else:
            summary.completed.append(sid)
            _tally(summary, manifest, key, out_root)
    return summary


def _tally(summary: MatrixSummary, manifest: dict, key: SessionKey, out_root) -> None:
    for sub in manifest.get("subruns", []):
        summary.stop_reasons[sub["stop_reason"]] += 1
    metrics = key.run_dir(out_root) / "metrics.csv"
    if metrics.exists():
        summary.metric_files.append(str(metrics))
