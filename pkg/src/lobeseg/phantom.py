"""Procedural lung phantoms with exact lobe and airway ground truth.

Geometry lives in normalized coordinates ``(z, y, x)`` in [0, 1]^3: ``z``
runs superior -> inferior, ``y`` anterior -> posterior and ``x`` from the
patient's right to left. Each lung is an ellipsoid cut into lobes by
fissure planes (two on the right, one on the left). A trachea descends to
the carina, splits into two primary bronchi that end at each hilum, and one
lobar bronchus leaves the hilum towards every lobe, so airway position
carries information about lobe identity.

Default parameters are calibrated so that class fractions at S=64 sit close
to typical normal-lung class fractions.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .preprocess import LOBES, VOCABULARY, LabelMap, Volume

DISEASES = ("none", "cancer", "covid", "copd", "collapse")

BG, LR, MR, UR, LL, UL, TRACHEA, BRONCHI = range(8)
LOBE_IDS = {name: VOCABULARY.index(name) for name in LOBES}

# reference class fractions (%) for normal lungs
NORMAL_FRACTIONS = {
    "background": 88.3,
    "LR": 2.69,
    "MR": 1.07,
    "UR": 2.43,
    "LL": 2.48,
    "UL": 2.86,
    "trachea": 0.14,
    "bronchi": 0.03,
}


class SpecError(ValueError):
    """Raised for invalid phantom specifications."""


@dataclass
class Plane:
    point: tuple[float, float, float]
    normal: tuple[float, float, float]

    def signed_distance(self, zz, yy, xx) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm < 1e-9:
            raise SpecError(f"degenerate fissure plane normal {self.normal}")
        n = n / norm
        p = self.point
        return (zz - p[0]) * n[0] + (yy - p[1]) * n[1] + (xx - p[2]) * n[2]


@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def inside(self, zz, yy, xx) -> np.ndarray:
        c, r = self.center, self.radii
        return ((zz - c[0]) / r[0]) ** 2 + ((yy - c[1]) / r[1]) ** 2 + ((xx - c[2]) / r[2]) ** 2 <= 1.0


def _plane(point, normal) -> Plane:
    return Plane(tuple(point), tuple(normal))


@dataclass
class PhantomSpec:
    size: int = 64
    right_lung: Ellipsoid = field(default_factory=lambda: Ellipsoid((0.52, 0.50, 0.295), (0.36, 0.22, 0.185)))
    left_lung: Ellipsoid = field(default_factory=lambda: Ellipsoid((0.53, 0.50, 0.705), (0.35, 0.21, 0.175)))
    # positive side of each plane: lower lobe (oblique) / middle lobe (horizontal)
    right_oblique: Plane = field(default_factory=lambda: _plane((0.54, 0.50, 0.295), (1.0, 1.1, 0.0)))
    right_horizontal: Plane = field(default_factory=lambda: _plane((0.46, 0.50, 0.295), (1.0, -0.15, 0.0)))
    left_oblique: Plane = field(default_factory=lambda: _plane((0.52, 0.50, 0.705), (1.0, 1.0, 0.0)))
    fissure_amplitude: float = 0.012
    fissure_frequency: float = 9.0
    trachea_top: tuple[float, float, float] = (0.0, 0.45, 0.5)
    carina: tuple[float, float, float] = (0.36, 0.47, 0.5)
    right_hilum: tuple[float, float, float] = (0.47, 0.56, 0.40)
    left_hilum: tuple[float, float, float] = (0.48, 0.50, 0.60)
    trachea_radius: float = 0.030
    bronchus_radius: float = 0.020
    lobar_radius: float = 0.010
    lobar_length: float = 0.16
    branch_depth: int = 1
    lobar_targets: dict | None = None
    background_hu: float = 40.0
    lung_hu: float = -850.0
    airway_hu: float = -990.0
    fissure_hu: float = -650.0
    fissure_visibility: float = 0.6
    noise_sigma: float = 20.0
    disease: str = "none"
    severity: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.size < 16:
            raise SpecError(f"grid size must be >= 16, got {self.size}")
        if not 0.0 <= self.severity <= 1.0:
            raise SpecError(f"severity must lie in [0, 1], got {self.severity}")
        if self.disease not in DISEASES:
            raise SpecError(f"unknown disease mode {self.disease!r}; expected one of {DISEASES}")
        if self.branch_depth < 1:
            raise SpecError("branch_depth must be >= 1")
        for name in ("right_oblique", "right_horizontal", "left_oblique"):
            n = np.asarray(getattr(self, name).normal, dtype=float)
            if np.linalg.norm(n) < 1e-9:
                raise SpecError(f"degenerate fissure plane {name}: normal {tuple(n)}")
        for lung in (self.right_lung, self.left_lung):
            if min(lung.radii) <= 0:
                raise SpecError(f"lung radii must be positive, got {lung.radii}")
            for c, r in zip(lung.center, lung.radii):
                if c - r < 0.0 or c + r > 1.0:
                    raise SpecError(f"lung ellipsoid {lung} leaves the grid")
        if self.right_lung.center[2] + self.right_lung.radii[2] >= self.left_lung.center[2] - self.left_lung.radii[2]:
            raise SpecError("lung ellipsoids overlap")
        for r in (self.trachea_radius, self.bronchus_radius, self.lobar_radius):
            if r <= 0:
                raise SpecError("airway radii must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecError(f"unknown phantom spec keys: {sorted(unknown)}")
        for key in ("right_lung", "left_lung"):
            if key in d and isinstance(d[key], dict):
                d[key] = Ellipsoid(tuple(d[key]["center"]), tuple(d[key]["radii"]))
        for key in ("right_oblique", "right_horizontal", "left_oblique"):
            if key in d and isinstance(d[key], dict):
                d[key] = Plane(tuple(d[key]["point"]), tuple(d[key]["normal"]))
        for key in ("trachea_top", "carina", "right_hilum", "left_hilum"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class PhantomGeometry:
    """Rasterized anatomy before intensities: labels plus per-branch masks."""

    labels: np.ndarray
    lung_mask: np.ndarray
    lobes: np.ndarray  # lobe id per voxel of the lungs, ignoring airways
    branches: dict[str, np.ndarray]
    fissure: np.ndarray


def _grid(s: int):
    c = (np.arange(s) + 0.5) / s
    return np.meshgrid(c, c, c, indexing="ij")


def _segment_distance(zz, yy, xx, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    pz, py, px = zz - a[0], yy - a[1], xx - a[2]
    t = np.zeros_like(zz) if denom == 0 else np.clip((pz * ab[0] + py * ab[1] + px * ab[2]) / denom, 0.0, 1.0)
    return np.sqrt((pz - t * ab[0]) ** 2 + (py - t * ab[1]) ** 2 + (px - t * ab[2]) ** 2)


def _tube(zz, yy, xx, a, b, radius: float, s: int) -> np.ndarray:
    # never thinner than a voxel-wide centreline
    r = max(radius, 0.75 / s)
    return _segment_distance(zz, yy, xx, a, b) <= r


def _wavy(plane: Plane, zz, yy, xx, amp: float, freq: float, phase: float) -> np.ndarray:
    d = plane.signed_distance(zz, yy, xx)
    return d + amp * np.sin(freq * 2 * np.pi * (xx + 0.7 * yy) + phase) * np.cos(freq * np.pi * zz + phase)


def lobe_partition(spec: PhantomSpec, zz, yy, xx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (lobe id grid, lung mask, fissure proximity in normalized units)."""
    right = spec.right_lung.inside(zz, yy, xx)
    left = spec.left_lung.inside(zz, yy, xx)
    amp, freq = spec.fissure_amplitude, spec.fissure_frequency
    d_ro = _wavy(spec.right_oblique, zz, yy, xx, amp, freq, 0.3)
    d_rh = _wavy(spec.right_horizontal, zz, yy, xx, amp, freq, 1.1)
    d_lo = _wavy(spec.left_oblique, zz, yy, xx, amp, freq, 2.3)
    lobes = np.zeros(zz.shape, dtype=np.uint8)
    lobes[right & (d_ro > 0)] = LR
    lobes[right & (d_ro <= 0) & (d_rh > 0)] = MR
    lobes[right & (d_ro <= 0) & (d_rh <= 0)] = UR
    lobes[left & (d_lo > 0)] = LL
    lobes[left & (d_lo <= 0)] = UL
    fissure = np.full(zz.shape, np.inf)
    fissure[right] = np.minimum(np.abs(d_ro[right]), np.where(d_ro[right] <= 0, np.abs(d_rh[right]), np.inf))
    fissure[left] = np.abs(d_lo[left])
    return lobes, right | left, fissure


def _lobe_targets(spec: PhantomSpec, lobes: np.ndarray, zz, yy, xx) -> dict[str, tuple]:
    if spec.lobar_targets:
        return {k: tuple(v) for k, v in spec.lobar_targets.items()}
    out = {}
    for name, lid in LOBE_IDS.items():
        m = lobes == lid
        hilum = np.asarray(spec.right_hilum if name in ("LR", "MR", "UR") else spec.left_hilum)
        if not m.any():
            out[name] = tuple(hilum)
            continue
        c = np.array([zz[m].mean(), yy[m].mean(), xx[m].mean()])
        v = c - hilum
        dist = float(np.linalg.norm(v))
        length = min(spec.lobar_length, dist)
        out[name] = tuple(hilum + v / max(dist, 1e-9) * length)
    return out


def phantom_geometry(spec: PhantomSpec) -> PhantomGeometry:
    spec.validate()
    s = spec.size
    zz, yy, xx = _grid(s)
    lobes, lung, fissure = lobe_partition(spec, zz, yy, xx)
    labels = lobes.copy()

    trachea = _tube(zz, yy, xx, spec.trachea_top, spec.carina, spec.trachea_radius, s)
    trachea |= _tube(zz, yy, xx, spec.carina, spec.right_hilum, spec.bronchus_radius, s)
    trachea |= _tube(zz, yy, xx, spec.carina, spec.left_hilum, spec.bronchus_radius, s)

    targets = _lobe_targets(spec, lobes, zz, yy, xx)
    branches: dict[str, np.ndarray] = {}
    dist_to = {}
    for name in LOBES:
        hilum = spec.right_hilum if name in ("LR", "MR", "UR") else spec.left_hilum
        tgt = targets[name]
        segs = [(hilum, tgt)]
        # segmental generations: split each tip into two shorter children
        tips = [(np.asarray(hilum, float), np.asarray(tgt, float))]
        for gen in range(1, spec.branch_depth):
            new_tips = []
            for a, b in tips:
                v = b - a
                ortho = np.cross(v, [0.0, 0.0, 1.0] if abs(v[2]) < 0.9 * np.linalg.norm(v) else [1.0, 0.0, 0.0])
                ortho /= max(np.linalg.norm(ortho), 1e-9)
                for sign in (-1, 1):
                    c = b + 0.5 * v + sign * 0.35 * np.linalg.norm(v) * ortho
                    segs.append((tuple(b), tuple(c)))
                    new_tips.append((b, c))
            tips = new_tips
        d = np.min([_segment_distance(zz, yy, xx, a, b) for a, b in segs], axis=0)
        dist_to[name] = d
        r = max(spec.lobar_radius, 0.75 / s)
        lid = LOBE_IDS[name]
        # keep each branch inside its lung so it cannot leak across the mediastinum
        lung_side = lung & ((lobes == LR) | (lobes == MR) | (lobes == UR)) if lid in (LR, MR, UR) else lung & (
            (lobes == LL) | (lobes == UL)
        )
        branches[name] = (d <= r) & lung_side & ~trachea

    # overlapping branches are attributed to the nearest centreline
    names = list(LOBES)
    stack = np.stack([np.where(branches[n], dist_to[n], np.inf) for n in names])
    owner = np.argmin(stack, axis=0)
    any_branch = np.isfinite(stack).any(axis=0)
    for i, n in enumerate(names):
        branches[n] = any_branch & (owner == i)

    labels[any_branch] = BRONCHI
    labels[trachea] = TRACHEA
    return PhantomGeometry(labels, lung, lobes, branches, fissure)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Rasterize ``spec`` into an HU volume and a 8-class vocabulary label map."""
    geo = phantom_geometry(spec)
    s = spec.size
    rng = np.random.default_rng([spec.seed, 0x5EED])
    hu = np.full((s, s, s), spec.background_hu, dtype=np.float64)
    hu[geo.lung_mask] = spec.lung_hu
    if spec.fissure_visibility > 0:
        # incomplete fissures: a smooth random field decides where the line shows
        field_ = ndimage.gaussian_filter(rng.standard_normal((s, s, s)), sigma=max(1.0, s / 16))
        field_ /= max(field_.std(), 1e-12)
        visible = field_ > _norm_ppf(1.0 - spec.fissure_visibility)
        line = geo.lung_mask & (geo.fissure <= 0.75 / s) & visible
        hu[line] = spec.fissure_hu
    airway = (geo.labels == TRACHEA) | (geo.labels == BRONCHI)
    hu[airway] = spec.airway_hu
    hu += rng.standard_normal((s, s, s)) * spec.noise_sigma
    vol = Volume(hu.astype(np.float32), (1.0, 1.0, 1.0))
    labels = LabelMap(geo.labels, VOCABULARY)
    if spec.disease != "none" and spec.severity > 0:
        vol, labels = apply_disease(vol, labels, spec.disease, spec.severity, spec.seed, spec)
    return vol, labels


def _norm_ppf(q: float) -> float:
    from scipy.stats import norm

    return float(norm.ppf(min(max(q, 1e-12), 1 - 1e-12)))


def class_fractions(labels: LabelMap) -> dict[str, float]:
    counts = np.bincount(labels.voxels.ravel(), minlength=len(labels.vocabulary))
    total = labels.voxels.size
    return {name: 100.0 * counts[i] / total for i, name in enumerate(labels.vocabulary)}


def _ball(shape, center, radius) -> np.ndarray:
    idx = np.indices(shape, dtype=np.float64)
    d2 = sum((idx[i] - center[i]) ** 2 for i in range(3))
    return d2 <= radius * radius


def _fissure_points(labels: np.ndarray) -> np.ndarray:
    """Lobe voxels with a 6-neighbour in a different lobe of the same lung."""
    lab = labels
    lobe = np.isin(lab, list(LOBE_IDS.values()))
    out = np.zeros(lab.shape, dtype=bool)
    for axis in range(3):
        for shift in (1, -1):
            nb = np.roll(lab, shift, axis=axis)
            nb_lobe = np.isin(nb, list(LOBE_IDS.values()))
            out |= lobe & nb_lobe & (nb != lab)
    return out


def apply_disease(
    vol: Volume,
    labels: LabelMap,
    mode: str,
    severity: float,
    seed: int = 0,
    spec: PhantomSpec | None = None,
) -> tuple[Volume, LabelMap]:
    """Perturb a phantom with one of the disease models.

    ``severity == 0`` returns unchanged copies. Grid size and vocabulary are
    never altered.
    """
    if mode not in DISEASES:
        raise ValueError(f"unknown disease mode {mode!r}; expected one of {DISEASES}")
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    hu = vol.voxels.astype(np.float64).copy()
    lab = labels.voxels.copy()
    if mode == "none" or severity == 0:
        return Volume(hu.astype(np.float32), vol.spacing), LabelMap(lab, labels.vocabulary, labels.spacing)
    rng = np.random.default_rng([seed, DISEASES.index(mode), 0xD15])
    s = lab.shape[0]
    lung = np.isin(lab, list(LOBE_IDS.values()))

    if mode == "cancer":
        cand = np.argwhere(_fissure_points(lab))
        if len(cand) == 0:
            cand = np.argwhere(lung)
        center = cand[rng.integers(len(cand))]
        radius = (0.04 + 0.08 * severity) * s
        blob = _ball(lab.shape, center, radius) & lung
        hu[blob] += 600.0
    elif mode == "covid":
        cand = np.argwhere(lung)
        n_patches = 1 + int(round(5 * severity))
        for _ in range(n_patches):
            center = cand[rng.integers(len(cand))]
            radius = (0.03 + 0.05 * severity * rng.random()) * s + 1.0
            patch = _ball(lab.shape, center, radius) & lung
            # patchy: only part of each ball consolidates
            patch &= rng.random(lab.shape) < 0.75
            hu[patch] += 400.0
    elif mode == "copd":
        frac = 0.26 * severity
        field_ = ndimage.gaussian_filter(rng.standard_normal(lab.shape), sigma=max(0.8, s / 48))
        vals = field_[lung]
        cut = np.quantile(vals, 1.0 - frac)
        pockets = lung & (field_ > cut)
        hu[pockets] = -985.0 + rng.standard_normal(int(pockets.sum())) * 10.0
    elif mode == "collapse":
        hu, lab = _collapse(hu, lab, severity, rng, spec)
    return Volume(hu.astype(np.float32), vol.spacing), LabelMap(lab, labels.vocabulary, labels.spacing)


def _collapse(hu, lab, severity, rng, spec):
    lobe_ids = [lid for lid in LOBE_IDS.values() if (lab == lid).any()]
    target = lobe_ids[rng.integers(len(lobe_ids))]
    right = target in (LR, MR, UR)
    s = lab.shape[0]
    if spec is not None:
        hilum_n = np.asarray(spec.right_hilum if right else spec.left_hilum)
        hilum = hilum_n * s - 0.5
    else:
        # nearest lobe voxel to the airway root of this side
        air = np.argwhere(lab == TRACHEA)
        hilum = air.mean(axis=0) if len(air) else np.argwhere(lab == target).mean(axis=0)
    old = lab == target
    f = 1.0 - 0.5 * severity
    idx = np.indices(lab.shape, dtype=np.float64)
    src = [hilum[i] + (idx[i] - hilum[i]) / f for i in range(3)]
    src_i = [np.clip(np.rint(c), 0, s - 1).astype(np.int64) for c in src]
    new = old & (lab[src_i[0], src_i[1], src_i[2]] == target)
    freed = old & ~new
    side = (LR, MR, UR) if right else (LL, UL)
    others = np.isin(lab, [l for l in side if l != target])
    if others.any():
        _, inds = ndimage.distance_transform_edt(~others, return_indices=True)
        fill = lab[inds[0], inds[1], inds[2]]
        lab = lab.copy()
        lab[freed] = fill[freed]
    else:
        lab = lab.copy()
        lab[freed] = BG
    hu[new] += 500.0 * severity
    return hu, lab


# -- datasets -----------------------------------------------------------------


@dataclass
class Jitter:
    """Relative/absolute ranges for per-case randomization."""

    radius_rel: float = 0.08
    center_abs: float = 0.015
    tilt_abs: float = 0.25
    airway_rel: float = 0.1
    hilum_abs: float = 0.01


def _jittered(template: PhantomSpec, rng: np.random.Generator, jit: Jitter) -> PhantomSpec:
    spec = copy.deepcopy(template)

    def u(a):
        return float(rng.uniform(-a, a))

    for name in ("right_lung", "left_lung"):
        e = getattr(spec, name)
        setattr(
            spec,
            name,
            Ellipsoid(
                tuple(c + u(jit.center_abs) for c in e.center),
                tuple(r * (1 + u(jit.radius_rel)) for r in e.radii),
            ),
        )
    spec.right_hilum = tuple(c + u(jit.hilum_abs) for c in spec.right_hilum)
    spec.left_hilum = tuple(c + u(jit.hilum_abs) for c in spec.left_hilum)
    for name in ("right_oblique", "right_horizontal", "left_oblique"):
        p = getattr(spec, name)
        old_h = np.asarray(template.right_hilum if name.startswith("right") else template.left_hilum)
        new_h = np.asarray(spec.right_hilum if name.startswith("right") else spec.left_hilum)
        offset = float(p.signed_distance(*old_h))
        n = np.asarray(p.normal, dtype=float)
        n[1] += u(jit.tilt_abs)
        n[2] += u(jit.tilt_abs) * 0.3
        # keep the fissure at the same offset from the hilum so lobar bronchi stay in their lobe
        unit = n / np.linalg.norm(n)
        point = new_h - offset * unit
        setattr(spec, name, Plane(tuple(float(c) for c in point), tuple(float(c) for c in n)))
    spec.trachea_radius *= 1 + u(jit.airway_rel)
    spec.bronchus_radius *= 1 + u(jit.airway_rel)
    spec.lobar_radius *= 1 + u(jit.airway_rel)
    return spec


@dataclass
class PhantomCase:
    case_id: str
    spec: PhantomSpec
    volume: Volume
    labels: LabelMap

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.volume.voxels.tobytes())
        h.update(self.labels.voxels.tobytes())
        return h.hexdigest()

    def manifest_entry(self) -> dict:
        return {
            "case_id": self.case_id,
            "seed": self.spec.seed,
            "disease": self.spec.disease,
            "severity": self.spec.severity,
            "sha256": self.digest(),
            "spec": self.spec.to_dict(),
        }


def make_case(template: PhantomSpec, index: int, seed: int, jitter: Jitter | None = None,
              prefix: str = "case") -> PhantomCase:
    jit = jitter or Jitter()
    last_err = None
    for attempt in range(10):
        rng = np.random.default_rng([seed, index, attempt])
        spec = _jittered(template, rng, jit)
        spec.seed = int(np.random.default_rng([seed, index]).integers(2**31))
        try:
            spec.validate()
        except SpecError as err:
            last_err = err
            continue
        vol, labels = generate_phantom(spec)
        return PhantomCase(f"{prefix}{index:03d}", spec, vol, labels)
    raise SpecError(f"could not draw a valid spec for case {index} after 10 attempts: {last_err}")


def make_dataset(
    n_cases: int,
    template: PhantomSpec | None = None,
    jitter: Jitter | None = None,
    seed: int = 0,
    prefix: str = "case",
) -> list[PhantomCase]:
    """``n_cases`` jittered phantoms, each determined by ``(seed, index)`` alone."""
    if n_cases < 1:
        raise ValueError(f"n_cases must be >= 1, got {n_cases}")
    template = template or PhantomSpec()
    return [make_case(template, i, seed, jitter, prefix) for i in range(n_cases)]


def manifest(cases: Sequence[PhantomCase]) -> str:
    return json.dumps({"cases": [c.manifest_entry() for c in cases]}, indent=2, sort_keys=True)
