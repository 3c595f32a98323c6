"""Multimodal MRI volumes, slice preprocessing and sample assembly.

On-disk layout is ``<root>/<subject_id>/{t1,flair,ir,labels}.<ext>`` where
``<ext>`` is ``mtr`` (the raster stack format below) or ``nii``/``nii.gz``
(needs nibabel).

Raster stack format (``.mtr``), all integers little-endian::

    8 bytes   magic  b"MTISTK01"
    uint32    ndim
    uint32    dims[ndim]          C order, e.g. (depth, height, width)
    8 bytes   dtype  numpy dtype string ("<f4", "|u1", ...), NUL padded
    ...       payload, C order, little-endian
"""
from __future__ import annotations

import logging
import struct
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from .biasfield import BiasField, all_fields, contaminate

if TYPE_CHECKING:
    from .scenarios import ScenarioSpec

log = logging.getLogger(__name__)

MODALITIES = ("T1", "T2-FLAIR", "T1-IR")
FILE_STEMS = {"T1": "t1", "T2-FLAIR": "flair", "T1-IR": "ir", "labels": "labels"}
EXPECTED_SHAPE = (40, 240, 240)

BACKGROUND, GRAY_MATTER, WHITE_MATTER, CSF = 0, 1, 2, 3
CLASS_NAMES = {GRAY_MATTER: "gm", WHITE_MATTER: "wm", CSF: "csf"}
# gm red, wm blue, csf green
CLASS_COLORS = {GRAY_MATTER: (255, 0, 0), WHITE_MATTER: (0, 0, 255), CSF: (0, 255, 0)}

# MRBrainS18 label ids -> canonical ids
MRBRAINS18_LABELS = {
    0: BACKGROUND,  # background
    1: GRAY_MATTER,  # cortical gray matter
    2: GRAY_MATTER,  # basal ganglia
    3: WHITE_MATTER,  # white matter
    4: WHITE_MATTER,  # white matter lesions
    5: CSF,  # cerebrospinal fluid in the extracerebral space
    6: CSF,  # ventricles
    7: BACKGROUND,  # cerebellum
    8: BACKGROUND,  # brain stem
    9: BACKGROUND,  # infarction
    10: BACKGROUND,  # other
}
CANONICAL_LABELS = {i: i for i in range(4)}

RASTER_MAGIC = b"MTISTK01"
RASTER_EXT = ".mtr"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


# -- raster stacks -----------------------------------------------------------


def write_raster(path: str | Path, array: np.ndarray) -> Path:
    path = Path(path)
    array = np.ascontiguousarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    array = array.astype(dtype, copy=False)
    code = dtype.str.encode("ascii")
    if len(code) > 8:
        raise DataError(f"unsupported dtype {dtype}")
    header = RASTER_MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape) + code.ljust(8, b"\0")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(array.tobytes(order="C"))
    return path


def read_raster(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != RASTER_MAGIC:
        raise DataError(f"{path}: not a raster stack (bad magic)")
    (ndim,) = struct.unpack_from("<I", data, 8)
    shape = struct.unpack_from(f"<{ndim}I", data, 12)
    offset = 12 + 4 * ndim
    dtype = np.dtype(data[offset : offset + 8].rstrip(b"\0").decode("ascii"))
    offset += 8
    count = int(np.prod(shape))
    if len(data) - offset != count * dtype.itemsize:
        raise DataError(f"{path}: payload size does not match header")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


def _read_nifti(path: Path) -> np.ndarray:
    try:
        import nibabel as nib
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise DataError("reading NIfTI volumes requires nibabel (pip install 'artifact[nifti]')") from exc
    arr = np.asanyarray(nib.load(str(path)).dataobj)
    # (x, y, z) -> (z, y, x): axial slices first
    return np.ascontiguousarray(np.transpose(arr, (2, 1, 0)))


def _find_stack(folder: Path, stem: str) -> Path:
    for ext in (RASTER_EXT, ".nii.gz", ".nii"):
        candidate = folder / f"{stem}{ext}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"missing {stem} stack in {folder}")


def read_stack(path: Path) -> np.ndarray:
    if path.name.endswith(RASTER_EXT):
        return read_raster(path)
    return _read_nifti(path)


# -- volumes -----------------------------------------------------------------


@dataclass
class MultimodalVolume:
    subject_id: str
    modalities: dict[str, np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        for name, stack in self.modalities.items():
            if name not in MODALITIES:
                raise DataError(f"unknown modality {name!r}")
            if stack.shape != self.labels.shape:
                raise DataError(
                    f"subject {self.subject_id}: {name} shape {stack.shape} != labels shape {self.labels.shape}"
                )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def depth(self) -> int:
        return self.labels.shape[0]


def remap_labels(labels: np.ndarray, label_map: dict[int, int]) -> np.ndarray:
    ids = np.unique(labels)
    unknown = [int(i) for i in ids if int(i) not in label_map]
    if unknown:
        raise DataError(f"unknown label ids {unknown}")
    lut = np.zeros(int(ids.max()) + 1, dtype=np.uint8)
    for raw, canon in label_map.items():
        if raw < len(lut):
            lut[raw] = canon
    return lut[labels.astype(np.int64)]


def load_volume(
    root: str | Path,
    subject_id: str,
    strict: bool = True,
    expected_shape: tuple[int, int, int] | None = EXPECTED_SHAPE,
    label_map: dict[int, int] | None = None,
) -> MultimodalVolume:
    """Load one subject.

    In strict mode every stack must match ``expected_shape`` (when given) and
    each other.  Otherwise mismatching stacks are cropped to their common
    extent with a warning.  ``label_map`` defaults to identity for raster
    stacks and the MRBrainS18 scheme for NIfTI files.
    """
    folder = Path(root) / str(subject_id)
    paths = {name: _find_stack(folder, FILE_STEMS[name]) for name in (*MODALITIES, "labels")}
    stacks = {name: read_stack(p) for name, p in paths.items()}

    shapes = {name: s.shape for name, s in stacks.items()}
    if any(len(s) != 3 for s in shapes.values()):
        raise DataError(f"subject {subject_id}: stacks must be 3D, got {shapes}")
    if len(set(shapes.values())) > 1 or (expected_shape is not None and shapes["labels"] != tuple(expected_shape)):
        if strict:
            raise DataError(f"subject {subject_id}: dimension mismatch {shapes} (expected {expected_shape})")
        common = tuple(min(s[i] for s in shapes.values()) for i in range(3))
        log.warning("subject %s: cropping stacks %s to %s", subject_id, shapes, common)
        stacks = {name: s[: common[0], : common[1], : common[2]] for name, s in stacks.items()}

    if label_map is None:
        label_map = CANONICAL_LABELS if paths["labels"].name.endswith(RASTER_EXT) else MRBRAINS18_LABELS
    labels = remap_labels(stacks.pop("labels"), label_map)
    return MultimodalVolume(str(subject_id), {m: stacks[m] for m in MODALITIES}, labels)


def save_volume(root: str | Path, volume: MultimodalVolume) -> Path:
    folder = Path(root) / volume.subject_id
    for name, stack in volume.modalities.items():
        write_raster(folder / f"{FILE_STEMS[name]}{RASTER_EXT}", stack)
    write_raster(folder / f"labels{RASTER_EXT}", volume.labels)
    return folder


def list_subjects(root: str | Path) -> list[str]:
    root = Path(root)
    subjects = [p.name for p in root.iterdir() if p.is_dir() and any(p.glob("labels.*"))]
    return sorted(subjects, key=lambda s: (len(s), s))


def stretch_intensity(volume: MultimodalVolume) -> MultimodalVolume:
    """Affinely map each modality's [min, max] onto [0, 255] over the whole volume."""
    out = {}
    for name, stack in volume.modalities.items():
        lo, hi = float(stack.min()), float(stack.max())
        if hi <= lo:
            raise DataError(f"subject {volume.subject_id}: {name} has a constant intensity {lo}")
        out[name] = ((stack.astype(np.float64) - lo) * (255.0 / (hi - lo))).astype(np.float32)
    return MultimodalVolume(volume.subject_id, out, volume.labels.copy())


# -- slice operations ----------------------------------------------------------


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-centre alignment
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_slice(slice_: np.ndarray, out_h: int, out_w: int, kind: str = "image") -> np.ndarray:
    """Bilinear resize for images, nearest-neighbour for label maps.

    Accepts (H, W) or (H, W, C) arrays.
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if kind not in ("image", "label"):
        raise ValueError(f"kind must be 'image' or 'label', got {kind!r}")
    in_h, in_w = slice_.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return slice_.copy()
    if slice_.ndim == 3:
        return np.stack([resize_slice(slice_[..., c], out_h, out_w, kind) for c in range(slice_.shape[2])], -1)

    if kind == "label":
        rows = np.clip(np.floor((np.arange(out_h) + 0.5) * in_h / out_h).astype(int), 0, in_h - 1)
        cols = np.clip(np.floor((np.arange(out_w) + 0.5) * in_w / out_w).astype(int), 0, in_w - 1)
        return slice_[np.ix_(rows, cols)]

    rows = np.clip(_source_coords(out_h, in_h), 0, in_h - 1)
    cols = np.clip(_source_coords(out_w, in_w), 0, in_w - 1)
    grid = np.meshgrid(rows, cols, indexing="ij")
    out = ndimage.map_coordinates(slice_.astype(np.float64), grid, order=1, mode="nearest")
    return out.astype(slice_.dtype if np.issubdtype(slice_.dtype, np.floating) else np.float32)


@dataclass(frozen=True)
class AugmentationParams:
    rotation_deg: float = 0.0
    zoom_factor: float = 1.0
    translate_xy: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    @property
    def is_identity(self) -> bool:
        return self.rotation_deg == 0 and self.zoom_factor == 1 and tuple(self.translate_xy) == (0, 0)


DEFAULT_AUGMENTATIONS = (
    AugmentationParams(),
    AugmentationParams(rotation_deg=5.0, zoom_factor=1.0, seed=1),
    AugmentationParams(rotation_deg=-5.0, zoom_factor=1.05, seed=2),
    AugmentationParams(zoom_factor=0.95, translate_xy=(0.03, 0.03), seed=3),
)


def random_augmentations(
    n: int,
    seed: int,
    max_rotation_deg: float = 10.0,
    zoom_range: tuple[float, float] = (0.9, 1.1),
    max_translate: float = 0.05,
) -> list[AugmentationParams]:
    """``n`` augmentations drawn from the given bounds; the first is always the identity."""
    rng = np.random.default_rng(seed)
    out = [AugmentationParams(seed=seed)]
    for i in range(1, n):
        out.append(
            AugmentationParams(
                rotation_deg=float(rng.uniform(-max_rotation_deg, max_rotation_deg)),
                zoom_factor=float(rng.uniform(*zoom_range)),
                translate_xy=(float(rng.uniform(-max_translate, max_translate)), float(rng.uniform(-max_translate, max_translate))),
                seed=seed + i,
            )
        )
    return out


def augment_slice(slice_: np.ndarray, params: AugmentationParams, kind: str = "image") -> np.ndarray:
    """Rotate (counter-clockwise as displayed), zoom, then translate about the centre.

    Translation is a fraction of width (x, to the right) and height (y, down).
    Pixels mapped from outside the frame are 0.
    """
    if params.zoom_factor <= 0:
        raise ValueError(f"zoom_factor must be positive, got {params.zoom_factor}")
    if params.is_identity:
        return slice_.copy()
    if slice_.ndim == 3:
        return np.stack([augment_slice(slice_[..., c], params, kind) for c in range(slice_.shape[2])], -1)

    h, w = slice_.shape
    theta = np.deg2rad(params.rotation_deg)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])  # (row, col) coordinates
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    shift = np.array([params.translate_xy[1] * h, params.translate_xy[0] * w])
    inverse = rot.T / params.zoom_factor
    offset = centre - inverse @ (centre + shift)
    order = 0 if kind == "label" else 1
    out = ndimage.affine_transform(
        slice_.astype(np.float64), inverse, offset=offset, order=order, mode="constant", cval=0.0
    )
    return out.astype(slice_.dtype) if kind == "label" else out.astype(np.float32)


def encode_segmentation(label_slice: np.ndarray) -> np.ndarray:
    """Label map -> RGB mask image (uint8, H x W x 3)."""
    unknown = np.setdiff1d(np.unique(label_slice), [BACKGROUND, *CLASS_COLORS])
    if unknown.size:
        raise DataError(f"unknown label ids {unknown.tolist()}")
    out = np.zeros((*label_slice.shape, 3), dtype=np.uint8)
    for cls, color in CLASS_COLORS.items():
        out[label_slice == cls] = color
    return out


def gray_to_rgb(slice_: np.ndarray) -> np.ndarray:
    return np.repeat(slice_[..., None], 3, axis=-1).astype(np.float32)


# -- samples -----------------------------------------------------------------


@dataclass(frozen=True)
class SampleMeta:
    subject_id: str
    slice_index: int
    augmentation_id: int
    bias_field_id: int | None
    scenario_id: str
    task_names: tuple[str, ...]

    @property
    def key(self) -> tuple[str, int, int | None]:
        """Pairing key across methods: (subject, slice, bias field)."""
        return (self.subject_id, self.slice_index, self.bias_field_id)


@dataclass
class SliceSample:
    input: np.ndarray
    targets: list[np.ndarray]
    meta: SampleMeta
    labels: np.ndarray | None = field(default=None, repr=False)

    def stacked_targets(self) -> np.ndarray:
        return np.concatenate(self.targets, axis=-1)


class SampleSet(Sequence):
    """Lazily materialised samples for one scenario.

    Indexing computes the sample on demand; the resized slices of the most
    recently touched (subject, slice) are cached so sequential access is cheap.
    """

    def __init__(
        self,
        volumes: Sequence[MultimodalVolume],
        scenario: "ScenarioSpec",
        bias_fields: Sequence[BiasField] | None = None,
        augmentations: Sequence[AugmentationParams] = DEFAULT_AUGMENTATIONS,
        slice_size: int = 512,
        bias_mode: str = "multiplicative",
        slices: Iterable[int] | None = None,
    ):
        needed = {scenario.input_modality} | {t.target_modality for t in scenario.tasks if t.target_modality}
        for vol in volumes:
            missing = needed - set(vol.modalities)
            if missing:
                raise DataError(f"scenario {scenario.name} needs {sorted(missing)} missing from subject {vol.subject_id}")
        self.volumes = [stretch_intensity(v) for v in volumes]
        self.scenario = scenario
        self.slice_size = slice_size
        self.bias_mode = bias_mode
        self.augmentations = list(augmentations)
        if scenario.contaminated:
            fields = list(bias_fields) if bias_fields is not None else all_fields(slice_size, slice_size)
            for f in fields:
                if f.shape != (slice_size, slice_size):
                    raise DataError(f"bias field {f.field_id} has shape {f.shape}, expected {slice_size}x{slice_size}")
            self.fields: list[BiasField | None] = fields
        else:
            self.fields = [None]
        self._needed = sorted(needed)
        wanted = None if slices is None else list(slices)
        self._index = [
            (vi, z, ai, fi)
            for vi, vol in enumerate(self.volumes)
            for z in (range(vol.depth) if wanted is None else wanted)
            for ai in range(len(self.augmentations))
            for fi in range(len(self.fields))
        ]
        self._cache_key = None
        self._cache = None

    def __len__(self) -> int:
        return len(self._index)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return self._make(*self._index[i])

    def metas(self) -> list[SampleMeta]:
        """Metadata for every sample without computing any pixels."""
        names = self.scenario.task_names
        return [
            SampleMeta(
                self.volumes[vi].subject_id, z, ai,
                None if self.fields[fi] is None else self.fields[fi].field_id,
                self.scenario.name, names,
            )
            for vi, z, ai, fi in self._index
        ]

    def _resized(self, vi: int, z: int) -> dict[str, np.ndarray]:
        if self._cache_key != (vi, z):
            vol, n = self.volumes[vi], self.slice_size
            cache = {m: resize_slice(vol.modalities[m][z], n, n, "image") for m in self._needed}
            cache["labels"] = resize_slice(vol.labels[z], n, n, "label")
            self._cache_key, self._cache = (vi, z), cache
        return self._cache

    def _make(self, vi: int, z: int, ai: int, fi: int) -> SliceSample:
        base = self._resized(vi, z)
        aug = self.augmentations[ai]
        mods = {m: np.clip(augment_slice(base[m], aug, "image"), 0, 255) for m in self._needed}
        labels = augment_slice(base["labels"], aug, "label")
        clean_input = mods[self.scenario.input_modality]
        bias = self.fields[fi]
        inp = clean_input if bias is None else contaminate(clean_input, bias, self.bias_mode)

        targets = []
        for task in self.scenario.tasks:
            if task.kind == "segment":
                targets.append(encode_segmentation(labels).astype(np.float32))
            elif task.kind == "bias_correct":
                targets.append(gray_to_rgb(clean_input))
            else:
                targets.append(gray_to_rgb(mods[task.target_modality]))
        meta = SampleMeta(
            self.volumes[vi].subject_id,
            z,
            ai,
            None if bias is None else bias.field_id,
            self.scenario.name,
            self.scenario.task_names,
        )
        return SliceSample(gray_to_rgb(inp), targets, meta, labels)


class TaskView(Sequence):
    """Single-task view of multi-target samples, keeping only target ``index``."""

    def __init__(self, samples: Sequence[SliceSample], index: int):
        self.samples = samples
        self.index = index

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        s = self.samples[i]
        meta = replace(s.meta, task_names=(s.meta.task_names[self.index],))
        return SliceSample(s.input, [s.targets[self.index]], meta, s.labels)


def build_samples(
    volumes: Sequence[MultimodalVolume],
    scenario: "ScenarioSpec",
    bias_fields: Sequence[BiasField] | None = None,
    augmentations: Sequence[AugmentationParams] = DEFAULT_AUGMENTATIONS,
    slice_size: int = 512,
    bias_mode: str = "multiplicative",
    slices: Iterable[int] | None = None,
    lazy: bool = False,
) -> list[SliceSample] | SampleSet:
    """One sample per (subject, slice, augmentation[, bias field]).

    Volumes are intensity-stretched here (idempotent if already stretched).
    Contaminated scenarios use all 8 default fields unless ``bias_fields`` is
    given.  ``lazy=True`` returns a :class:`SampleSet` that computes samples on
    access, which is what full-resolution runs need.
    """
    samples = SampleSet(volumes, scenario, bias_fields, augmentations, slice_size, bias_mode, slices)
    return samples if lazy else list(samples)


# -- synthetic phantoms --------------------------------------------------------

# intensity per tissue: background, other (scalp/skull), csf, gm, wm
_TISSUE_INTENSITY = {
    "T1": (0.0, 350.0, 120.0, 420.0, 600.0),
    "T2-FLAIR": (0.0, 300.0, 40.0, 520.0, 380.0),
    "T1-IR": (0.0, 500.0, 60.0, 300.0, 700.0),
}


def synthetic_volume(subject_id: str, shape: tuple[int, int, int] = (12, 30, 30), seed: int = 0) -> MultimodalVolume:
    """Deterministic head phantom with GM/WM/CSF structure in all three modalities.

    Geometry (head ellipse, gyral ripple, ventricles) varies per subject; tissue
    boundaries are softened to mimic partial-volume effects.  Intended for tests,
    demos and the toy profile; not a model of real anatomy.
    """
    rng = np.random.default_rng([seed, sum(map(ord, str(subject_id))), len(str(subject_id))])
    depth, h, w = shape
    a, b = rng.uniform(0.78, 0.92), rng.uniform(0.82, 0.95)
    phase, tilt = rng.uniform(0, 2 * np.pi), rng.uniform(-0.2, 0.2)
    vent = rng.uniform(0.12, 0.2)
    yy, xx = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    xr = xx * np.cos(tilt) - yy * np.sin(tilt)
    yr = xx * np.sin(tilt) + yy * np.cos(tilt)
    angle = np.arctan2(yr, xr)

    tissue = np.zeros(shape, dtype=np.uint8)  # 0 bg, 1 other, 2 csf, 3 gm, 4 wm
    for z in range(depth):
        zn = -0.6 + 1.2 * z / max(depth - 1, 1)
        scale = np.sqrt(max(1.0 - zn**2, 0.2))
        r = np.sqrt((xr / a) ** 2 + (yr / b) ** 2) / scale
        rg = r * (1 + 0.05 * np.sin(6 * angle + phase + 2 * zn))
        t = np.zeros((h, w), dtype=np.uint8)
        t[r <= 1.0] = 1
        t[rg <= 0.9] = 2
        t[rg <= 0.82] = 3
        t[rg <= 0.6] = 4
        v = np.sqrt(((np.abs(xr) - 0.12) / (vent * scale)) ** 2 + (yr / (2.2 * vent * scale)) ** 2)
        t[(v <= 1.0) & (rg <= 0.6)] = 2
        tissue[z] = t

    smooth = 1 + 0.04 * (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1))
    modalities = {}
    for name, levels in _TISSUE_INTENSITY.items():
        img = np.asarray(levels)[tissue] * smooth[None]
        img = ndimage.gaussian_filter(img, sigma=(0, 0.6, 0.6))
        modalities[name] = np.clip(img, 0, None).astype(np.float32)
    labels = np.choose(tissue, [BACKGROUND, BACKGROUND, CSF, GRAY_MATTER, WHITE_MATTER]).astype(np.uint8)
    return MultimodalVolume(str(subject_id), modalities, labels)


INTENSITY_TRANSFORMS = {
    "identity": lambda s: s,
    "invert": lambda s: 255.0 - s,
}


def transform_samples(
    volumes: Sequence[MultimodalVolume],
    modality: str = "T1",
    transforms: Sequence[str] = ("identity",),
    slice_size: int = 64,
    augmentations: Sequence[AugmentationParams] = (AugmentationParams(),),
    slices: Iterable[int] | None = None,
) -> list[SliceSample]:
    """Samples whose targets are pointwise intensity transforms of the input slice.

    A sanity task with a known exact solution: ``identity`` reproduces the
    input and ``invert`` maps s to 255 - s.
    """
    unknown = [t for t in transforms if t not in INTENSITY_TRANSFORMS]
    if unknown:
        raise ValueError(f"unknown transforms {unknown}; choose from {sorted(INTENSITY_TRANSFORMS)}")
    out = []
    for vol in (stretch_intensity(v) for v in volumes):
        for z in range(vol.depth) if slices is None else slices:
            base = resize_slice(vol.modalities[modality][z], slice_size, slice_size, "image")
            for ai, aug in enumerate(augmentations):
                s = np.clip(augment_slice(base, aug, "image"), 0, 255)
                targets = [gray_to_rgb(INTENSITY_TRANSFORMS[t](s)) for t in transforms]
                meta = SampleMeta(vol.subject_id, z, ai, None, "transform", tuple(transforms))
                out.append(SliceSample(gray_to_rgb(s), targets, meta))
    return out
