"""Training sessions for the U-Net and the pix2pix-style cGAN.

Both methods optimise with Adam and stop on the first of: epoch-mean training
L1 at or below ``early_stop_l1`` (early stop); the discriminator "winning"
for ``disc_win_patience`` consecutive epoch transitions, cGAN only (force
stop); or the epoch cap (force stop).
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nets import NetworkConfig, PatchDiscriminator, UNet, build_discriminator, build_unet

log = logging.getLogger(__name__)

METHODS = ("unet", "cgan")
STOP_REASONS = ("early_stop", "max_epoch_force", "discriminator_force")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 20
    max_epochs: int = 500
    early_stop_l1: float = 0.01
    l1_weight: float = 10.0
    disc_win_patience: int = 10
    method: str = "unet"
    seed: int = 0
    beta1_unet: float = 0.9
    beta1_cgan: float = 0.5
    beta2: float = 0.999

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("learning_rate", "early_stop_l1", "l1_weight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.disc_win_patience < 1:
            raise ValueError("batch_size, max_epochs and disc_win_patience must be >= 1")

    @property
    def adam_betas(self) -> tuple[float, float]:
        return (self.beta1_cgan if self.method == "cgan" else self.beta1_unet, self.beta2)


@dataclass
class EpochRecord:
    epoch: int
    gen_l1: float
    gen_adv: float | None = None
    disc_loss: float | None = None
    seconds: float = 0.0

    def gen_total(self, l1_weight: float) -> float:
        return (self.gen_adv or 0.0) + l1_weight * self.gen_l1


@dataclass
class LossCurve:
    records: list[EpochRecord] = field(default_factory=list)

    CSV_FIELDS = ("epoch", "gen_l1", "gen_adv", "disc_loss")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        if not self.records and record.epoch != 1:
            raise ValueError("loss curves start at epoch 1")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_FIELDS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.gen_l1), "" if r.gen_adv is None else repr(r.gen_adv),
                                 "" if r.disc_loss is None else repr(r.disc_loss)])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossCurve":
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append(EpochRecord(
                    int(row["epoch"]),
                    float(row["gen_l1"]),
                    float(row["gen_adv"]) if row["gen_adv"] else None,
                    float(row["disc_loss"]) if row["disc_loss"] else None,
                ))
        return curve


@dataclass(frozen=True)
class StopDecision:
    reason: str
    epoch: int


def l1_loss(pred, target):
    """Mean absolute difference; works on torch tensors and numpy arrays."""
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return abs(pred - target).mean()


def cgan_generator_loss(adv_scores: torch.Tensor, pred: torch.Tensor, target: torch.Tensor, beta: float) -> torch.Tensor:
    """BCE of the discriminator's scores on fakes against "real", plus beta * L1."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    if not torch.isfinite(adv_scores).all():
        raise ValueError("non-finite discriminator scores")
    adv = F.binary_cross_entropy(adv_scores, torch.ones_like(adv_scores))
    return adv + beta * l1_loss(pred, target)


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy(real_scores, torch.ones_like(real_scores)) + F.binary_cross_entropy(
        fake_scores, torch.zeros_like(fake_scores)
    )


def check_stop(curve: LossCurve, config: TrainConfig) -> StopDecision | None:
    """Stop decision after the latest epoch of ``curve``; None means keep training.

    Priority: early stop, then discriminator force stop, then the epoch cap.
    """
    if not len(curve):
        raise ValueError("empty loss curve")
    last = curve[-1]
    if last.gen_l1 <= config.early_stop_l1:
        return StopDecision("early_stop", last.epoch)
    n = config.disc_win_patience
    if config.method == "cgan" and len(curve) > n:
        window = curve.records[-(n + 1):]
        if all(
            b.disc_loss < a.disc_loss and b.gen_total(config.l1_weight) > a.gen_total(config.l1_weight)
            for a, b in zip(window[:-1], window[1:])
        ):
            return StopDecision("discriminator_force", last.epoch)
    if last.epoch >= config.max_epochs:
        return StopDecision("max_epoch_force", last.epoch)
    return None


def to_network_range(images: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1]."""
    return images.astype(np.float32) / 127.5 - 1.0


def from_network_range(images: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255]."""
    return np.clip((np.asarray(images, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)


def batch_tensors(samples: Sequence, indices, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack samples into NCHW network-range tensors (inputs, stacked targets)."""
    batch = [samples[int(i)] for i in indices]
    x = np.stack([to_network_range(s.input) for s in batch])
    y = np.stack([to_network_range(s.stacked_targets()) for s in batch])
    x = torch.from_numpy(x).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(y).permute(0, 3, 1, 2).contiguous()
    return (x.to(device), y.to(device)) if device is not None else (x, y)


def default_device() -> torch.device:
    return torch.device(os.environ.get("MTI_DEVICE", "cpu"))


@dataclass
class TrainResult:
    generator: UNet
    curve: LossCurve
    stop: StopDecision
    discriminator: PatchDiscriminator | None = None


def train_session(
    samples: Sequence,
    net_config: NetworkConfig,
    config: TrainConfig,
    curve_path: str | Path | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    device: torch.device | None = None,
) -> TrainResult:
    """Train one generator (and discriminator for cGAN) on ``samples``.

    Every epoch visits all samples once in a seeded shuffled order; the last
    batch may be smaller than ``batch_size``.  ``net_config.out_channels``
    must equal the stacked target channels.
    """
    if len(samples) == 0:
        raise TrainingError("no training samples")
    n_target_channels = samples[0].stacked_targets().shape[-1]
    if n_target_channels != net_config.out_channels:
        raise TrainingError(f"samples carry {n_target_channels} target channels, network emits {net_config.out_channels}")
    device = device or default_device()
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)

    gen = build_unet(net_config).to(device)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate, betas=config.adam_betas)
    disc = opt_d = None
    if config.method == "cgan":
        disc = build_discriminator(net_config).to(device)
        opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate, betas=config.adam_betas)

    curve = LossCurve()
    stop = None
    n = len(samples)
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        gen.train()
        if disc is not None:
            disc.train()
        sums = {"l1": 0.0, "adv": 0.0, "disc": 0.0}
        order = rng.permutation(n)
        for b0 in range(0, n, config.batch_size):
            x, y = batch_tensors(samples, order[b0 : b0 + config.batch_size], device)
            if disc is None:
                fake = gen(x)
                loss = l1_loss(fake, y)
                opt_g.zero_grad()
                loss.backward()
                opt_g.step()
                terms = {"l1": loss.item()}
            else:
                fake = gen(x)
                d_loss = discriminator_loss(disc(x, y), disc(x, fake.detach()))
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()

                scores = disc(x, fake)
                l1 = l1_loss(fake, y)
                g_loss = cgan_generator_loss(scores, fake, y, config.l1_weight)
                opt_g.zero_grad()
                g_loss.backward()
                opt_g.step()
                terms = {"l1": l1.item(), "adv": g_loss.item() - config.l1_weight * l1.item(), "disc": d_loss.item()}
            if not all(math.isfinite(v) for v in terms.values()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {b0}: {terms}")
            for k, v in terms.items():
                sums[k] += v * len(x)

        record = EpochRecord(
            epoch,
            sums["l1"] / n,
            None if disc is None else sums["adv"] / n,
            None if disc is None else sums["disc"] / n,
            time.perf_counter() - start,
        )
        curve.append(record)
        if curve_path is not None:
            curve.to_csv(curve_path)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("epoch %d: %s", epoch, record)
        stop = check_stop(curve, config)
        if stop is not None:
            break

    gen.eval()
    if disc is not None:
        disc.eval()
    return TrainResult(gen, curve, stop, disc)


@torch.no_grad()
def predict(generator: nn.Module, samples: Sequence, batch_size: int = 20, device=None) -> np.ndarray:
    """Generator outputs for ``samples`` as (N, H, W, C) arrays in [0, 255]."""
    device = device or next(generator.parameters()).device
    generator.eval()
    outs = []
    for b0 in range(0, len(samples), batch_size):
        x, _ = batch_tensors(samples, range(b0, min(b0 + batch_size, len(samples))), device)
        outs.append(generator(x).permute(0, 2, 3, 1).cpu().numpy())
    return from_network_range(np.concatenate(outs))


def finite_difference_check(
    model: nn.Module,
    inputs: torch.Tensor,
    target: torch.Tensor,
    n_params: int = 5,
    eps: float = 1e-6,
    seed: int = 0,
) -> list[tuple[float, float]]:
    """(analytic, central-difference) gradient pairs of the L1 loss at random scalar parameters.

    Runs in float64 with the model in eval mode so the loss is a deterministic
    function of the parameters.
    """
    model = model.double().eval()
    inputs, target = inputs.double(), target.double()
    model.zero_grad()
    l1_loss(model(inputs), target).backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    picks = rng.choice(sizes.sum(), size=n_params, replace=False)
    bounds = np.cumsum(sizes)
    pairs = []
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(bounds, flat, side="right"))
            idx = int(flat - (bounds[k - 1] if k else 0))
            p = params[k].view(-1)
            analytic = params[k].grad.view(-1)[idx].item()
            orig = p[idx].item()
            p[idx] = orig + eps
            up = l1_loss(model(inputs), target).item()
            p[idx] = orig - eps
            down = l1_loss(model(inputs), target).item()
            p[idx] = orig
            pairs.append((analytic, (up - down) / (2 * eps)))
    return pairs
