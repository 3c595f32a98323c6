"""Low-frequency multiplicative bias fields for contaminating MRI slices.

Each field is a fixed combination of 2D Legendre polynomials of total order
<= 2 over [-1, 1]^2.  The constant term is dropped (all other terms have zero
mean over the square) and the remainder is scaled by the sum of absolute
coefficients, which bounds it by 1 because |P_n| <= 1 on [-1, 1].  The field
is therefore ``1 + amplitude * p(x, y) / sum|c|`` and always lies in
``[1 - amplitude, 1 + amplitude]`` regardless of shape.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_FIELDS = 8
DEFAULT_AMPLITUDE = 0.3
MODES = ("multiplicative", "additive")

BASIS_NAMES = ("1", "x", "y", "P2(x)", "xy", "P2(y)")

# rows: field 1..8; columns follow BASIS_NAMES
COEFFICIENTS = np.array(
    [
        [1.0, 0.60, 0.00, -0.30, 0.10, 0.00],
        [1.0, 0.00, 0.60, 0.00, 0.10, -0.30],
        [1.0, -0.50, 0.40, 0.20, 0.00, 0.20],
        [1.0, 0.30, -0.50, -0.20, 0.30, 0.10],
        [1.0, 0.00, 0.00, 0.50, 0.00, 0.50],
        [1.0, 0.20, 0.20, -0.40, 0.00, -0.40],
        [1.0, -0.40, -0.40, 0.00, 0.50, 0.00],
        [1.0, 0.50, -0.20, 0.10, -0.40, -0.30],
    ]
)


@dataclass(frozen=True)
class BiasField:
    field_id: int
    values: np.ndarray
    coeffs: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def load_coefficient_table(path: str | Path) -> np.ndarray:
    """Read an 8x6 coefficient table from JSON (nested lists) or whitespace/CSV text."""
    path = Path(path)
    if path.suffix == ".json":
        table = np.asarray(json.loads(path.read_text()), dtype=float)
    else:
        table = np.loadtxt(path, delimiter="," if path.suffix == ".csv" else None, ndmin=2)
    if table.shape != COEFFICIENTS.shape:
        raise ValueError(f"coefficient table must have shape {COEFFICIENTS.shape}, got {table.shape}")
    return table


def legendre_basis(height: int, width: int) -> np.ndarray:
    """Stack of the six basis images, shape (6, height, width)."""
    y = np.linspace(-1.0, 1.0, height)[:, None] * np.ones((1, width))
    x = np.linspace(-1.0, 1.0, width)[None, :] * np.ones((height, 1))
    return np.stack(
        [np.ones_like(x), x, y, 0.5 * (3 * x**2 - 1), x * y, 0.5 * (3 * y**2 - 1)]
    )


def generate_bias_field(
    field_id: int,
    height: int,
    width: int,
    amplitude: float = DEFAULT_AMPLITUDE,
    table: np.ndarray | None = None,
) -> BiasField:
    table = COEFFICIENTS if table is None else np.asarray(table, dtype=float)
    if not 1 <= field_id <= len(table):
        raise ValueError(f"field_id must be in 1..{len(table)}, got {field_id}")
    if height <= 0 or width <= 0:
        raise ValueError(f"field dimensions must be positive, got {height}x{width}")
    if not 0 <= amplitude < 1:
        raise ValueError(f"amplitude must be in [0, 1), got {amplitude}")
    coeffs = table[field_id - 1].copy()
    varying = coeffs[1:]
    scale = np.abs(varying).sum()
    if scale == 0:
        values = np.ones((height, width))
    else:
        poly = np.tensordot(varying, legendre_basis(height, width)[1:], axes=1)
        values = 1.0 + amplitude * poly / scale
    return BiasField(field_id, values, coeffs)


def all_fields(height: int, width: int, amplitude: float = DEFAULT_AMPLITUDE, table=None) -> list[BiasField]:
    n = N_FIELDS if table is None else len(table)
    return [generate_bias_field(i, height, width, amplitude, table) for i in range(1, n + 1)]


def contaminate(slice_: np.ndarray, field: BiasField, mode: str = "multiplicative") -> np.ndarray:
    """Apply ``field`` to a (H, W) or (H, W, C) slice with intensities in [0, 255]."""
    if slice_.shape[:2] != field.values.shape:
        raise ValueError(f"slice shape {slice_.shape[:2]} does not match field shape {field.values.shape}")
    gain = field.values if slice_.ndim == 2 else field.values[..., None]
    if mode == "multiplicative":
        out = slice_ * gain
    elif mode == "additive":
        out = slice_ + 255.0 * (gain - 1.0)
    else:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return np.clip(out, 0.0, 255.0)
