"""CT volumes, label maps and the intensity/geometry conditioning pipeline.

The pipeline order is fixed: clip HU to a window, z-score normalize per
volume, then resample to a cube (trilinear for intensities, nearest for
labels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, get_default_dtype

# Class order; index is the stored label value.
VOCABULARY: tuple[str, ...] = (
    "background",
    "LR",
    "MR",
    "UR",
    "LL",
    "UL",
    "trachea",
    "bronchi",
)
LOBES = ("LR", "MR", "UR", "LL", "UL")
RIGHT_LOBES = ("LR", "MR", "UR")
LEFT_LOBES = ("LL", "UL")

MAIN_CLASSES: tuple[str, ...] = ("background",) + LOBES
AUX_CLASSES: tuple[str, ...] = ("background", "trachea", "bronchi")

# label value -> class index in each task; airways are background for lobes
MAIN_MAPPING = {0: 0, 1: 1, 2: 2, 3: 3, 4: 4, 5: 5, 6: 0, 7: 0}
AUX_MAPPING = {0: 0, 1: 0, 2: 0, 3: 0, 4: 0, 5: 0, 6: 1, 7: 2}


class DataError(ValueError):
    """Raised for malformed volume or label content."""


class ContractViolation(ValueError):
    """Raised when an operation is used against its stated contract."""


@dataclass
class Volume:
    """HU voxel grid (D, H, W) with spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise DataError(f"volume must be 3-d with positive dims, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing components must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LabelMap:
    """Integer class-index grid with its ordered vocabulary."""

    voxels: np.ndarray
    vocabulary: tuple[str, ...] = VOCABULARY
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise DataError(f"label map must be 3-d, got shape {v.shape}")
        if v.size and (v.min() < 0 or v.max() >= len(self.vocabulary)):
            bad = int(v.max()) if v.max() >= len(self.vocabulary) else int(v.min())
            raise DataError(f"label index {bad} outside vocabulary of size {len(self.vocabulary)}")
        self.voxels = v.astype(np.uint8)
        self.vocabulary = tuple(self.vocabulary)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def mask(self, *names: str) -> np.ndarray:
        ids = [self.vocabulary.index(n) for n in names]
        return np.isin(self.voxels, ids)


@dataclass
class PreprocessConfig:
    hu_lo: float = -1000.0
    hu_hi: float = 400.0
    target_size: int = 32
    eps: float = 1e-8

    def __post_init__(self):
        if not self.hu_lo < self.hu_hi:
            raise ValueError(f"hu_lo must be below hu_hi, got {self.hu_lo} >= {self.hu_hi}")
        if self.target_size < 8:
            raise ValueError(f"target_size must be >= 8, got {self.target_size}")


def clip_hu(vol: Volume, cfg: PreprocessConfig | None = None) -> Volume:
    cfg = cfg or PreprocessConfig()
    return Volume(np.clip(vol.voxels, cfg.hu_lo, cfg.hu_hi), vol.spacing)


def zscore(vol: Volume, eps: float = 1e-8) -> Volume:
    """Per-volume standardization using the population standard deviation.

    A (near-)constant volume maps to zeros rather than dividing by ~0.
    """
    v = vol.voxels.astype(np.float64)
    mean = v.mean()
    std = v.std()
    if std < eps:
        out = np.zeros_like(v)
    else:
        out = (v - mean) / std
    return Volume(out, vol.spacing)


def _source_coords(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False: output voxel centres map onto input voxel centres
    scale = n_in / n_out
    return np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0.0, n_in - 1)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64), n_in - 1)


def _linear_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    x = _source_coords(n_in, n_out)
    i0 = np.floor(x).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = x - i0
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def resample(obj, target, interp: str = "trilinear"):
    """Resize a :class:`Volume` or :class:`LabelMap` to ``target`` dims.

    Spacing is rescaled so that the physical extent is preserved.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target dims must be three positive ints, got {target}")
    src = obj.dims
    spacing = tuple(sp * s / t for sp, s, t in zip(obj.spacing, src, target))
    if isinstance(obj, LabelMap):
        if interp != "nearest":
            raise ContractViolation("label maps can only be resampled with interp='nearest'")
    if interp == "nearest":
        idx = [_nearest_index(s, t) for s, t in zip(src, target)]
        out = obj.voxels[np.ix_(*idx)]
        if isinstance(obj, LabelMap):
            return LabelMap(out, obj.vocabulary, spacing)
        return Volume(out, spacing)
    if interp != "trilinear":
        raise ValueError(f"interp must be 'trilinear' or 'nearest', got {interp!r}")
    a = obj.voxels.astype(np.float64)
    for axis, t in enumerate(target):
        a = _linear_axis(a, axis, t)
    return Volume(a, spacing)


def one_hot(indices: np.ndarray, n_classes: int, dtype=None) -> np.ndarray:
    """``(D,H,W)`` int grid -> ``(n_classes, D, H, W)`` 0/1 array."""
    dtype = dtype or get_default_dtype()
    return (np.arange(n_classes).reshape(-1, 1, 1, 1) == indices[None]).astype(dtype)


def map_labels(labels: np.ndarray, mapping: dict[int, int]) -> np.ndarray:
    present = np.unique(labels)
    unknown = [int(v) for v in present if int(v) not in mapping]
    if unknown:
        raise DataError(f"unknown label index {unknown[0]}")
    lut = np.zeros(max(max(mapping), int(present.max(initial=0))) + 1, dtype=np.int64)
    for k, v in mapping.items():
        lut[k] = v
    return lut[labels]


@dataclass
class PreparedCase:
    image: Tensor
    main_onehot: Tensor
    aux_onehot: Tensor
    case_id: str = ""

    def __iter__(self):
        return iter((self.image, self.main_onehot, self.aux_onehot))


def preprocess_case(
    vol: Volume,
    labels: LabelMap | None,
    cfg: PreprocessConfig | None = None,
    main_mapping: dict[int, int] = MAIN_MAPPING,
    aux_mapping: dict[int, int] = AUX_MAPPING,
    case_id: str = "",
) -> PreparedCase:
    """clip -> zscore -> resample, plus per-task one-hot targets.

    Returns tensors shaped ``(1,1,S,S,S)``, ``(1,M,S,S,S)``, ``(1,A,S,S,S)``.
    ``labels`` may be ``None`` for inference, in which case both one-hot
    outputs are ``None``.
    """
    cfg = cfg or PreprocessConfig()
    s = cfg.target_size
    v = resample(zscore(clip_hu(vol, cfg), cfg.eps), (s, s, s), "trilinear")
    image = Tensor(v.voxels[None, None])
    if labels is None:
        return PreparedCase(image, None, None, case_id)
    if labels.dims != vol.dims:
        raise DataError(f"labels dims {labels.dims} differ from volume dims {vol.dims}")
    lab = resample(labels, (s, s, s), "nearest").voxels
    return prepared_from_cube(v.voxels, lab, case_id, main_mapping, aux_mapping)


def prepared_from_cube(
    image: np.ndarray,
    labels: np.ndarray | None,
    case_id: str = "",
    main_mapping: dict[int, int] = MAIN_MAPPING,
    aux_mapping: dict[int, int] = AUX_MAPPING,
) -> PreparedCase:
    """Wrap an already normalized cube and its vocabulary labels as tensors."""
    img = Tensor(np.asarray(image)[None, None])
    if labels is None:
        return PreparedCase(img, None, None, case_id)
    if labels.shape != image.shape:
        raise DataError(f"labels shape {labels.shape} differs from image shape {image.shape}")
    main = one_hot(map_labels(labels, main_mapping), max(main_mapping.values()) + 1)
    aux = one_hot(map_labels(labels, aux_mapping), max(aux_mapping.values()) + 1)
    return PreparedCase(img, Tensor(main[None]), Tensor(aux[None]), case_id)
