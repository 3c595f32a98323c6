"""Per-slice similarity and segmentation metrics."""
from __future__ import annotations

import csv
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import BACKGROUND, CLASS_NAMES, CSF, GRAY_MATTER, WHITE_MATTER

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0

IMAGE_METRICS = ("ssim", "ncc")
SEGMENTATION_METRICS = ("dice_gm", "dice_wm", "dice_csf", "dice_mean", "fpr")


class DegenerateInputError(ValueError):
    pass


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalised 1D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _valid_filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    out = ndimage.correlate1d(img, taps, axis=0, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant")
    return out[r:-r or None, r:-r or None]


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = DATA_RANGE) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian (sigma 1.5) windows.

    Multi-channel (H, W, C) inputs are averaged over channels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range) for c in range(a.shape[2])]))
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images of shape {a.shape} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _valid_filter(a, taps), _valid_filter(b, taps)
    var_a = _valid_filter(a * a, taps) - mu_a**2
    var_b = _valid_filter(b * b, taps) - mu_b**2
    cov = _valid_filter(a * b, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalised cross-correlation over the whole image."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0:
        raise DegenerateInputError("ncc is undefined for a zero-variance image")
    return float(np.clip(np.dot(da, db) / denom, -1.0, 1.0))


def decode_mask(image: np.ndarray) -> np.ndarray:
    """RGB mask image -> label map.

    Background where the brightest channel is below 128, otherwise the class
    of the brightest channel; ties resolve gm > wm > csf.
    """
    image = np.asarray(image)
    by_class = image[..., [0, 2, 1]]  # gm red, wm blue, csf green
    labels = np.argmax(by_class, axis=-1).astype(np.uint8) + 1
    labels[by_class.max(axis=-1) < 128] = BACKGROUND
    return labels


def dice(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """Per-class Dice for gm/wm/csf and their mean; a class absent from both maps scores 1."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    out = {}
    for cls in (GRAY_MATTER, WHITE_MATTER, CSF):
        p, g = pred == cls, gt == cls
        total = int(p.sum()) + int(g.sum())
        out[CLASS_NAMES[cls]] = 1.0 if total == 0 else 2.0 * int((p & g).sum()) / total
    out["mean"] = float(np.mean([out["gm"], out["wm"], out["csf"]]))
    return out


def fpr(pred: np.ndarray, gt: np.ndarray) -> float:
    """Foreground false-positive rate FP / (FP + TN); 0 when there are no negatives."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    negatives = gt == BACKGROUND
    fp = int((pred[negatives] != BACKGROUND).sum())
    n = int(negatives.sum())
    return 0.0 if n == 0 else fp / n


@dataclass
class MetricRecord:
    session: str
    task: str
    subject_id: str
    slice_index: int
    bias_field_id: int | None
    values: dict[str, float] = field(default_factory=dict)

    @property
    def key(self) -> tuple[str, int, int | None]:
        return (self.subject_id, self.slice_index, self.bias_field_id)


def image_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    pred_gray, target_gray = pred.mean(axis=-1), target.mean(axis=-1)
    values = {"ssim": ssim(pred_gray, target_gray)}
    try:
        values["ncc"] = ncc(pred_gray, target_gray)
    except DegenerateInputError:
        log.warning("constant image; ncc recorded as NaN")
        values["ncc"] = float("nan")
    return values


def segmentation_metrics(pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    p, g = decode_mask(pred), decode_mask(target)
    d = dice(p, g)
    return {"dice_gm": d["gm"], "dice_wm": d["wm"], "dice_csf": d["csf"], "dice_mean": d["mean"], "fpr": fpr(p, g)}


def metrics_for_task(task: str, pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    return segmentation_metrics(pred, target) if task.startswith("segment") else image_metrics(pred, target)


def evaluate_session(generator, test_samples: Sequence, session: str = "", batch_size: int = 20) -> list[MetricRecord]:
    """Run ``generator`` over ``test_samples`` and score every task output.

    The generator's output channels are split into consecutive RGB triples,
    one per entry of each sample's ``targets``.
    """
    from .trainer import predict

    if not len(test_samples):
        return []
    n_targets = len(test_samples[0].targets)
    if generator.config.out_channels != 3 * n_targets:
        raise ValueError(
            f"generator emits {generator.config.out_channels} channels but samples carry {n_targets} targets"
        )
    outputs = predict(generator, test_samples, batch_size)
    records = []
    for sample, out in zip(test_samples, outputs):
        m = sample.meta
        for k, (task, target) in enumerate(zip(m.task_names, sample.targets)):
            pred = out[..., 3 * k : 3 * k + 3]
            records.append(
                MetricRecord(session, task, m.subject_id, m.slice_index, m.bias_field_id, metrics_for_task(task, pred, target))
            )
    return records


CSV_FIELDS = ("session", "task", "subject", "slice", "bias_field", "metric", "value")


def write_metrics_csv(records: Sequence[MetricRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in records:
            for metric, value in r.values.items():
                bias = "" if r.bias_field_id is None else r.bias_field_id
                writer.writerow([r.session, r.task, r.subject_id, r.slice_index, bias, metric, repr(float(value))])
    return path


def read_metrics_csv(path: str | Path) -> list[MetricRecord]:
    records: dict[tuple, MetricRecord] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            bias = int(row["bias_field"]) if row["bias_field"] else None
            key = (row["session"], row["task"], row["subject"], int(row["slice"]), bias)
            rec = records.get(key)
            if rec is None:
                rec = records[key] = MetricRecord(row["session"], row["task"], row["subject"], int(row["slice"]), bias)
            rec.values[row["metric"]] = float(row["value"])
    return list(records.values())
