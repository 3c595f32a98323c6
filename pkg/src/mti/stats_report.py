"""Aggregation, paired t-tests, boxplot summaries and the report bundle.

Report layout: ``table1.csv`` (mean/std/n per scenario, task, method and
metric, plus stop epochs), ``table3.csv`` (paired t-test p-values),
``tables.md`` (human-readable tables), ``boxplots/*.csv``, ``curves/*.png``
and ``panels/*.png``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .metrics import MetricRecord, read_metrics_csv
from .scenarios import MANIFEST, METHODS, ScenarioSpec, SessionKey, scenario_by_name
from .trainer import LossCurve

log = logging.getLogger(__name__)

ALPHA = 0.05
METHOD_LABELS = {"unet_st": "Unet-ST", "cgan_st": "cGAN-ST", "unet_mt": "Unet-MT", "cgan_mt": "cGAN-MT"}
COMPARISONS = (("unet_st", "cgan_st"), ("unet_mt", "cgan_mt"), ("unet_st", "unet_mt"), ("cgan_st", "cgan_mt"))
STOP_MARKERS = {"early_stop": "", "discriminator_force": "*", "max_epoch_force": "-"}
FOOTNOTES = (
    "*: force stop, the discriminator won 10 consecutive epochs",
    "-: force stop at the epoch cap",
    "no mark: early stop on the L1 threshold",
)


class ZeroVarianceError(ValueError):
    """All paired differences are equal, so the t statistic is undefined."""


def is_segmentation(task: str) -> bool:
    return task.startswith("segment")


def comparison_metric(task: str) -> str:
    return "dice_mean" if is_segmentation(task) else "ncc"


# -- records -----------------------------------------------------------------------


@dataclass(frozen=True)
class Row:
    scenario: str
    method: str
    fold: int
    task: str
    subject_id: str
    slice_index: int
    bias_field_id: int | None
    metric: str
    value: float

    @property
    def pair_key(self) -> tuple:
        return (self.subject_id, self.slice_index, self.bias_field_id)


def flatten(records: Iterable[MetricRecord]) -> list[Row]:
    rows = []
    for r in records:
        key = SessionKey.parse(r.session)
        for metric, value in r.values.items():
            rows.append(Row(key.scenario, key.method, key.fold, r.task, r.subject_id, r.slice_index,
                            r.bias_field_id, metric, float(value)))
    return rows


def _rows(records) -> list[Row]:
    records = list(records)
    if records and isinstance(records[0], MetricRecord):
        return flatten(records)
    return records


# -- aggregation --------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    mean: float
    std: float
    n: int


@dataclass(frozen=True)
class EpochCell:
    value: float
    stop_reason: str
    n_folds: int

    @property
    def marker(self) -> str:
        return STOP_MARKERS[self.stop_reason]


@dataclass
class StatsTable:
    cells: dict[tuple[str, str, str], dict[str, Cell]] = field(default_factory=dict)
    epochs: dict[tuple[str, str, str], EpochCell] = field(default_factory=dict)

    def get(self, scenario: str, task: str, method: str, metric: str) -> Cell | None:
        return self.cells.get((scenario, task, method), {}).get(metric)


def mean_std(values: Sequence[float]) -> Cell:
    """Mean and sample standard deviation (two-pass); std is 0 for a single value."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no values")
    mean = math.fsum(x) / x.size
    std = math.sqrt(math.fsum((x - mean) ** 2) / (x.size - 1)) if x.size > 1 else 0.0
    return Cell(mean, std, int(x.size))


def aggregate(records, manifests: Sequence[dict] = ()) -> StatsTable:
    """Per (scenario, task, method, metric): mean and sample std over every test slice of every fold.

    NaN values (undefined metrics) are excluded from their cell.  Stop epochs
    come from ``manifests``: the mean over folds, flagged with the most common
    stop reason.
    """
    rows = _rows(records)
    if not rows:
        raise ValueError("no metric records to aggregate")
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        groups[(r.scenario, r.task, r.method, r.metric)].append(r.value)
    table = StatsTable()
    for (scen, task, method, metric), values in sorted(groups.items()):
        finite = [v for v in values if math.isfinite(v)]
        if not finite:
            log.warning("no finite %s values for %s/%s/%s; cell omitted", metric, scen, task, method)
            continue
        table.cells.setdefault((scen, task, method), {})[metric] = mean_std(finite)

    stops: dict[tuple, list[tuple[int, str]]] = defaultdict(list)
    for m in manifests:
        if m.get("status") != "completed":
            continue
        key = SessionKey.parse(m["session"])
        for sub in m["subruns"]:
            for task in sub["tasks"]:
                stops[(key.scenario, task, key.method)].append((sub["stop_epoch"], sub["stop_reason"]))
    for k, items in sorted(stops.items()):
        reasons = Counter(reason for _, reason in items)
        top = max(reasons.items(), key=lambda kv: (kv[1], -list(STOP_MARKERS).index(kv[0])))[0]
        table.epochs[k] = EpochCell(math.fsum(e for e, _ in items) / len(items), top, len(items))
    return table


# -- paired t-test -----------------------------------------------------------------


def t_statistic(x: Sequence[float], y: Sequence[float]) -> tuple[float, int]:
    """Paired-differences t statistic and its degrees of freedom."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = x - y
    cell = mean_std(d)
    scale = max(float(np.abs(x).max()), float(np.abs(y).max()), 1e-300)
    # differences that agree up to rounding count as constant
    if cell.std <= 64 * np.finfo(float).eps * scale:
        raise ZeroVarianceError("all paired differences are identical")
    return cell.mean / (cell.std / math.sqrt(d.size)), d.size - 1


def t_sf_two_sided(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(x: Sequence[float], y: Sequence[float]) -> float:
    """Two-sided p-value of the paired t-test."""
    t, df = t_statistic(x, y)
    return t_sf_two_sided(t, df)


@dataclass(frozen=True)
class PValueCell:
    comparison: tuple[str, str]
    p_value: float | None
    status: str  # "p", "identical" or "missing"
    n: int

    @property
    def bold(self) -> bool:
        """Not significantly different at ALPHA."""
        return self.p_value is not None and self.p_value > ALPHA

    def text(self) -> str:
        if self.status != "p":
            return self.status
        s = f"{self.p_value:.5g}"
        return f"**{s}**" if self.bold else s


def pvalue_matrix(records) -> dict[tuple[str, str], list[PValueCell]]:
    """Four method comparisons per (scenario, task), paired by (subject, slice, bias field).

    Segmentation tasks compare mean Dice, the others NCC.  A (scenario, task)
    missing any of the four methods is omitted with a warning.
    """
    rows = _rows(records)
    values: dict[tuple, dict[str, dict[tuple, float]]] = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        if r.metric == comparison_metric(r.task):
            values[(r.scenario, r.task)][r.method][r.pair_key] = r.value

    out = {}
    for group in sorted(values):
        by_method = values[group]
        missing = [m for m in METHODS if m not in by_method]
        if missing:
            log.warning("%s/%s: methods %s missing; p-value row omitted", *group, missing)
            continue
        cells = []
        for a, b in COMPARISONS:
            keys = sorted(set(by_method[a]) & set(by_method[b]), key=repr)
            if len(keys) != len(by_method[a]) or len(keys) != len(by_method[b]):
                log.warning("%s/%s %s vs %s: pairing on %d shared slices", *group, a, b, len(keys))
            pairs = [(by_method[a][k], by_method[b][k]) for k in keys]
            pairs = [p for p in pairs if math.isfinite(p[0]) and math.isfinite(p[1])]
            if len(pairs) < 2:
                cells.append(PValueCell((a, b), None, "missing", len(pairs)))
                continue
            x, y = map(list, zip(*pairs))
            try:
                cells.append(PValueCell((a, b), paired_ttest(x, y), "p", len(pairs)))
            except ZeroVarianceError:
                cells.append(PValueCell((a, b), None, "identical", len(pairs)))
        out[group] = cells
    return out


# -- boxplots -----------------------------------------------------------------------


@dataclass(frozen=True)
class BoxStats:
    group: tuple
    n: int
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: tuple[float, ...]


def box_stats(values: Sequence[float], group: tuple = ()) -> BoxStats:
    """Quartiles by linear interpolation; whiskers at the extreme data within 1.5 IQR of the box."""
    x = np.sort(np.asarray(values, dtype=np.float64))
    if x.size == 0:
        raise ValueError("empty group")
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = x[(x >= lo) & (x <= hi)]
    outliers = tuple(float(v) for v in x[(x < lo) | (x > hi)])
    return BoxStats(group, int(x.size), float(med), float(q1), float(q3), float(inside.min()), float(inside.max()), outliers)


def export_boxplot_data(records, group_keys: Sequence[str] = ("scenario", "task", "method", "metric")) -> list[BoxStats]:
    rows = _rows(records)
    groups: dict[tuple, list[float]] = defaultdict(list)
    for r in rows:
        if math.isfinite(r.value):
            groups[tuple(getattr(r, k) for k in group_keys)].append(r.value)
    return [box_stats(v, g) for g, v in sorted(groups.items(), key=lambda kv: repr(kv[0]))]


# -- report bundle ------------------------------------------------------------------


def collect_runs(runs_dir: str | Path) -> tuple[list[dict], list[MetricRecord], dict[str, Path]]:
    """Completed manifests, their metric records and run directories under ``runs_dir``."""
    manifests, records, dirs = [], [], {}
    for path in sorted(Path(runs_dir).rglob(MANIFEST)):
        m = json.loads(path.read_text())
        if m.get("status") != "completed":
            continue
        metrics = path.parent / "metrics.csv"
        if not metrics.exists():
            log.warning("%s: completed manifest without metrics.csv; skipped", path.parent)
            continue
        manifests.append(m)
        records += read_metrics_csv(metrics)
        dirs[m["session"]] = path.parent
    return manifests, records, dirs


def _fmt(x: float) -> str:
    return repr(float(x))


def write_table1_csv(table: StatsTable, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "task", "method", "metric", "mean", "std", "n", "stop_marker"])
        for (scen, task, method), metrics in sorted(table.cells.items()):
            for metric, c in sorted(metrics.items()):
                w.writerow([scen, task, method, metric, _fmt(c.mean), _fmt(c.std), c.n, ""])
        for (scen, task, method), e in sorted(table.epochs.items()):
            w.writerow([scen, task, method, "epochs", _fmt(e.value), "", e.n_folds, e.marker])


def write_table3_csv(matrix: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "task", "metric", "comparison", "p_value", "status", "n", "bold"])
        for (scen, task), cells in sorted(matrix.items()):
            for c in cells:
                p = "" if c.p_value is None else _fmt(c.p_value)
                w.writerow([scen, task, comparison_metric(task), f"{c.comparison[0]}_vs_{c.comparison[1]}", p,
                            c.status, c.n, int(c.bold)])


def task_title(spec: ScenarioSpec, index: int) -> str:
    task = spec.tasks[index]
    inp = ("biased " if spec.contaminated else "") + spec.input_modality
    if task.kind == "segment":
        text = f"Segmentation on {inp}"
    elif task.kind == "bias_correct":
        text = f"Bias correction on {spec.input_modality}"
    else:
        text = f"Convert {inp} to {task.target_modality}"
    return f"Task {index + 1}: {text}"


_METRIC_ROWS = {True: (("dice_mean", "Dice"), ("fpr", "FPR")), False: (("ssim", "SSIM"), ("ncc", "NCC"))}


def _stats_lines(table: StatsTable, scenario_ids: Sequence[int]) -> list[str]:
    methods = [METHOD_LABELS[m] for m in METHODS]
    head = "| Scen. | Sub | Metric | " + " | ".join(methods) + " | Metric | " + " | ".join(methods) + " |"
    lines = [head, "|" + "---|" * (3 + 1 + 2 * len(methods))]
    for sid in scenario_ids:
        for sub in ("A", "B"):
            spec = scenario_by_name(f"{sid}{sub}")
            titles = [task_title(spec, k) for k in range(len(spec.tasks))]
            lines.append(f"| {sid} | {sub} | {titles[0]} |" + " |" * len(methods)
                         + f" {titles[1] if len(titles) > 1 else ''} |" + " |" * len(methods))
            for i in range(3):
                cells = []
                for task in spec.task_names:
                    if i < 2:
                        metric, label = _METRIC_ROWS[is_segmentation(task)][i]
                        vals = []
                        for m in METHODS:
                            c = table.get(spec.name, task, m, metric)
                            vals.append("n/a" if c is None else f"{c.mean:.3f} ± {c.std:.3f}")
                    else:
                        label = "Epochs"
                        vals = []
                        for m in METHODS:
                            e = table.epochs.get((spec.name, task, m))
                            vals.append("n/a" if e is None else f"{e.value:.0f}{e.marker}")
                    cells.append(f" {label} | " + " | ".join(vals) + " |")
                lines.append("| | |" + "".join(cells))
    lines += [""] + [f"{f}  " for f in FOOTNOTES]
    return lines


def _pvalue_lines(matrix: dict) -> list[str]:
    labels = [f"{METHOD_LABELS[a]} vs. {METHOD_LABELS[b]}" for a, b in COMPARISONS]
    lines = [
        "| Scen. | Sub | " + " | ".join(f"Task 1: {x}" for x in labels) + " | " + " | ".join(f"Task 2: {x}" for x in labels) + " |",
        "|" + "---|" * (2 + 2 * len(labels)),
    ]
    for sid in range(1, 6):
        for sub in ("A", "B"):
            spec = scenario_by_name(f"{sid}{sub}")
            cells = []
            for task in spec.task_names:
                row = matrix.get((spec.name, task))
                cells += ["n/a"] * len(COMPARISONS) if row is None else [c.text() for c in row]
            lines.append(f"| {sid} | {sub} | " + " | ".join(cells) + " |")
    lines += ["", "Segmentation tasks compare mean Dice, all other tasks NCC; bold marks p > 0.05."]
    return lines


def render_tables_markdown(table: StatsTable, matrix: dict) -> str:
    parts = ["# Table 1: conversion and bias correction (scenarios 1-2)", ""]
    parts += _stats_lines(table, (1, 2))
    parts += ["", "# Table 2: segmentation scenarios (3-5)", ""]
    parts += _stats_lines(table, (3, 4, 5))
    parts += ["", "# Table 3: paired t-test p-values", ""]
    parts += _pvalue_lines(matrix)
    return "\n".join(parts) + "\n"


def write_boxplots(boxes: Sequence[BoxStats], out_dir: Path, group_keys: Sequence[str]) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    by_file: dict[str, list[BoxStats]] = defaultdict(list)
    for b in boxes:
        g = dict(zip(group_keys, b.group))
        by_file[f"{g.get('scenario', 'all')}_{g.get('task', 'all')}_{g.get('metric', 'all')}"].append(b)
    paths = []
    for stem, items in sorted(by_file.items()):
        path = out_dir / f"{stem}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*group_keys, "n", "median", "q1", "q3", "whisker_low", "whisker_high", "outliers"])
            for b in items:
                w.writerow([*b.group, b.n, _fmt(b.median), _fmt(b.q1), _fmt(b.q3), _fmt(b.whisker_low),
                            _fmt(b.whisker_high), " ".join(_fmt(v) for v in b.outliers)])
        paths.append(path)
    return paths


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curves(manifests: Sequence[dict], dirs: dict[str, Path], out_dir: Path) -> list[Path]:
    """One figure per (scenario, method): training L1 of every fold and sub-run overlaid."""
    plt = _plt()
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str], list[tuple[str, Path]]] = defaultdict(list)
    for m in manifests:
        key = SessionKey.parse(m["session"])
        for sub in m["subruns"]:
            path = dirs[m["session"]] / sub["curve"]
            if not path.exists():
                log.warning("missing curve %s; skipped", path)
                continue
            groups[(key.scenario, key.method)].append((f"fold{key.fold} {sub['name']}", path))
    paths = []
    for (scen, method), items in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for label, path in sorted(items):
            curve = LossCurve.from_csv(path)
            ax.plot(curve.column("epoch"), curve.column("gen_l1"), lw=1, label=label)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training L1")
        ax.set_title(f"{scen} {METHOD_LABELS[method]}")
        ax.legend(fontsize=6)
        fig.tight_layout()
        path = out_dir / f"{scen}_{method}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def overlay_mask(gray_rgb: np.ndarray, mask_rgb: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a red/blue/green class mask over a grayscale slice (both [0, 255])."""
    fg = mask_rgb.max(axis=-1, keepdims=True) >= 128
    out = np.where(fg, (1 - alpha) * gray_rgb + alpha * mask_rgb, gray_rgb)
    return np.clip(out, 0, 255).astype(np.uint8)


def plot_panels(manifests: Sequence[dict], dirs: dict[str, Path], out_dir: Path) -> list[Path]:
    """Input, targets and outputs of one test slice, for the lowest fold of each (scenario, method)."""
    plt = _plt()
    out_dir.mkdir(parents=True, exist_ok=True)
    chosen: dict[tuple[str, str], SessionKey] = {}
    for m in manifests:
        key = SessionKey.parse(m["session"])
        k = (key.scenario, key.method)
        if k not in chosen or key.fold < chosen[k].fold:
            chosen[k] = key
    paths = []
    for (scen, method), key in sorted(chosen.items()):
        npz = dirs[key.id] / "panel.npz"
        if not npz.exists():
            log.warning("missing panel data %s; skipped", npz)
            continue
        data = np.load(npz)
        spec = scenario_by_name(scen)
        gray = data["input"]
        tiles = [("input", gray.astype(np.uint8))]
        for task in spec.task_names:
            for kind in ("target", "pred"):
                name = f"{kind}_{task}"
                if name not in data:
                    continue
                img = data[name]
                tiles.append((f"{kind} {task}", overlay_mask(gray, img) if is_segmentation(task) else img.astype(np.uint8)))
        fig, axes = plt.subplots(1, len(tiles), figsize=(2.2 * len(tiles), 2.5))
        for ax, (title, img) in zip(np.atleast_1d(axes), tiles):
            ax.imshow(img)
            ax.set_title(title, fontsize=7)
            ax.axis("off")
        fig.suptitle(f"{key.id}", fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{scen}_{method}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def render_report(runs_dir: str | Path, out_dir: str | Path) -> dict[str, list[Path]]:
    """Write the full report bundle for the completed sessions under ``runs_dir``."""
    manifests, records, dirs = collect_runs(runs_dir)
    if not manifests:
        raise FileNotFoundError(f"no completed sessions under {runs_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = flatten(records)
    table = aggregate(rows, manifests)
    matrix = pvalue_matrix(rows)
    write_table1_csv(table, out / "table1.csv")
    write_table3_csv(matrix, out / "table3.csv")
    (out / "tables.md").write_text(render_tables_markdown(table, matrix))
    keys = ("scenario", "task", "method", "metric")
    return {
        "tables": [out / "table1.csv", out / "table3.csv", out / "tables.md"],
        "boxplots": write_boxplots(export_boxplot_data(rows, keys), out / "boxplots", keys),
        "curves": plot_curves(manifests, dirs, out / "curves"),
        "panels": plot_panels(manifests, dirs, out / "panels"),
    }
