"""U-Net generator and PatchGAN discriminator for image-to-images translation.

The generator is a pix2pix-style U-Net: ``depth`` stride-2 convolution stages
down, mirrored stride-2 transposed convolutions up, with the encoder output of
each level concatenated onto the decoder input at the same resolution.  The
same module serves as the plain U-Net and as the cGAN generator.  Multitask
models differ from single-task ones only in the number of output channels
(3 per task, targets stacked along the channel axis).

Tensors are NCHW inside torch; numpy samples elsewhere in the package are HWC.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch
from torch import nn

ACTIVATIONS = ("tanh", "sigmoid")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_filters: int = 100
    depth: int = 8
    kernel_size: int = 3
    slice_size: int = 512
    output_activation: str = "tanh"
    disc_filters: int = 64
    disc_layers: int = 3
    dropout: float = 0.5
    dropout_stages: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.slice_size <= 0 or self.slice_size % (2 ** self.depth):
            raise ValueError(
                f"slice_size {self.slice_size} is not divisible by 2**depth = {2 ** self.depth}"
            )
        if self.out_channels <= 0 or self.out_channels % 3:
            raise ValueError(f"out_channels must be a positive multiple of 3, got {self.out_channels}")
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"output_activation must be one of {ACTIVATIONS}")
        if self.in_channels <= 0 or self.base_filters <= 0 or self.disc_filters <= 0:
            raise ValueError("channel counts must be positive")

    @property
    def n_tasks(self) -> int:
        return self.out_channels // 3

    def with_tasks(self, n_tasks: int) -> "NetworkConfig":
        return replace(self, out_channels=3 * n_tasks)

    def encoder_widths(self) -> list[int]:
        return [self.base_filters * min(2**i, 8) for i in range(self.depth)]


def _padding(k: int) -> tuple[int, int]:
    # (padding, output_padding) so stride-2 conv halves and stride-2 deconv doubles even sizes
    p = (k - 1) // 2
    return p, 2 + 2 * p - k


class UNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        k = config.kernel_size
        pad, out_pad = _padding(k)
        widths = config.encoder_widths()

        encoders = [nn.Conv2d(config.in_channels, widths[0], k, stride=2, padding=pad)]
        for prev, cur in zip(widths[:-1], widths[1:]):
            encoders.append(
                nn.Sequential(
                    nn.LeakyReLU(0.2),
                    nn.Conv2d(prev, cur, k, stride=2, padding=pad),
                    nn.BatchNorm2d(cur),
                )
            )
        self.encoders = nn.ModuleList(encoders)

        # decoders[j] upsamples encoder level (depth - 1 - j) to level (depth - 2 - j)
        decoders = []
        for j, level in enumerate(range(config.depth - 1, 0, -1)):
            in_ch = widths[level] if j == 0 else 2 * widths[level]
            layers = [
                nn.ReLU(),
                nn.ConvTranspose2d(in_ch, widths[level - 1], k, stride=2, padding=pad, output_padding=out_pad),
                nn.BatchNorm2d(widths[level - 1]),
            ]
            if j < config.dropout_stages and config.dropout > 0:
                layers.append(nn.Dropout(config.dropout))
            decoders.append(nn.Sequential(*layers))
        self.decoders = nn.ModuleList(decoders)

        final_in = widths[0] if config.depth == 1 else 2 * widths[0]
        self.final = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(final_in, config.out_channels, k, stride=2, padding=pad, output_padding=out_pad),
            nn.Tanh() if config.output_activation == "tanh" else nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        for j, dec in enumerate(self.decoders):
            if j > 0:
                x = torch.cat([x, skips[-1 - j]], dim=1)
            x = dec(x)
        if self.config.depth > 1:
            x = torch.cat([x, skips[0]], dim=1)
        return self.final(x)


class PatchDiscriminator(nn.Module):
    """Patch classifier over the channel concatenation of (input, candidate targets).

    Returns per-patch probabilities of "real" on a coarse grid.
    """

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        k = config.kernel_size
        pad, _ = _padding(k)
        nf = config.disc_filters
        layers: list[nn.Module] = [
            nn.Conv2d(config.in_channels + config.out_channels, nf, k, stride=2, padding=pad),
            nn.LeakyReLU(0.2),
        ]
        prev = nf
        for i in range(config.disc_layers):
            cur = nf * min(2 ** (i + 1), 8)
            stride = 1 if i == config.disc_layers - 1 else 2
            layers += [
                nn.Conv2d(prev, cur, k, stride=stride, padding=pad),
                nn.BatchNorm2d(cur),
                nn.LeakyReLU(0.2),
            ]
            prev = cur
        layers += [nn.Conv2d(prev, 1, k, stride=1, padding=pad), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    @property
    def in_channels(self) -> int:
        return self.config.in_channels + self.config.out_channels

    def forward(self, inputs: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([inputs, candidates], dim=1))


def init_weights(model: nn.Module) -> nn.Module:
    """pix2pix initialisation: conv weights N(0, 0.02), zero biases, BN gamma N(1, 0.02)."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)
    return model


def build_unet(config: NetworkConfig) -> UNet:
    torch.manual_seed(config.seed)
    return init_weights(UNet(config))


def build_discriminator(config: NetworkConfig) -> PatchDiscriminator:
    torch.manual_seed(config.seed + 1)
    return init_weights(PatchDiscriminator(config))


def count_parameters(model: nn.Module, include_statistics: bool = False) -> int:
    """Number of trainable scalars in ``model``.

    With ``include_statistics`` the batch-norm running mean and variance are
    added as well; Keras-style summaries report that larger total.
    """
    n = sum(p.numel() for p in model.parameters() if p.requires_grad)
    if include_statistics:
        n += sum(
            m.running_mean.numel() + m.running_var.numel()
            for m in model.modules()
            if isinstance(m, nn.modules.batchnorm._BatchNorm) and m.track_running_stats
        )
    return n


def save_checkpoint(model: nn.Module, path: str | Path, **extra) -> Path:
    """Write ``state_dict`` to ``path`` and a JSON sidecar with config and size."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "network": asdict(model.config),
        "kind": type(model).__name__,
        "param_count": count_parameters(model),
        **extra,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_generator(path: str | Path) -> UNet:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    model = UNet(NetworkConfig(**sidecar["network"]))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return model


# Totals for the full-scale configuration (in_channels=3, base_filters=100,
# depth=8, kernel 3, discriminator 64 filters x 3 layers).  The U-Net figures
# include batch-norm running statistics; the cGAN figures are generator plus
# discriminator trainable parameters only.
REFERENCE_TOTALS = {
    "unet_st": 74_750_703,
    "cgan_st": 76_292_808,
    "unet_mt": 74_756_106,
    "cgan_mt": 76_299_939,
}


def method_parameter_total(method: str, config: NetworkConfig | None = None) -> int:
    """Parameter total of ``method`` under the convention of ``REFERENCE_TOTALS``."""
    arch, mode = method.split("_")
    config = (config or NetworkConfig()).with_tasks(2 if mode == "mt" else 1)
    gen = build_unet(config)
    if arch == "unet":
        return count_parameters(gen, include_statistics=True)
    if arch == "cgan":
        return count_parameters(gen) + count_parameters(build_discriminator(config))
    raise ValueError(f"unknown method {method!r}")
