"""Dice objectives, evaluation metrics and significance testing.

Soft Dice for class ``c`` over voxels ``i`` is

    (2 * sum_i p_ic g_ic + delta) / (sum_i p_ic^2 + sum_i g_ic^2 + delta)

and the training loss is ``1 - mean_c dice_c``. Setting
``DiceConfig.numerator_factor = 1`` gives the un-doubled numerator some
descriptions of the method print.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy import stats as _stats

from .functional import DimensionError
from .preprocess import LabelMap, Volume
from .tensor import Tensor


@dataclass
class DiceConfig:
    delta: float = 1e-5
    include_background: bool = True
    numerator_factor: float = 2.0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass
class LossWeights:
    lambda_main: float = 0.5
    lambda_aux: float = 0.5

    def __post_init__(self):
        if self.lambda_main < 0 or self.lambda_aux < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.lambda_main + self.lambda_aux > 0:
            raise ValueError("at least one loss weight must be positive")


def dice_per_class(probs: Tensor, onehot: Tensor, cfg: DiceConfig | None = None) -> Tensor:
    """Soft Dice for every channel, pooled over batch and space. Returns shape ``(C,)``."""
    cfg = cfg or DiceConfig()
    if probs.shape != onehot.shape:
        raise DimensionError(f"probs shape {probs.shape} != one-hot shape {onehot.shape}")
    p = probs.data
    g = onehot.data.astype(p.dtype, copy=False)
    axes = (0,) + tuple(range(2, p.ndim))
    delta = p.dtype.type(cfg.delta)
    k = p.dtype.type(cfg.numerator_factor)
    inter = (p * g).sum(axis=axes)
    den = (p * p).sum(axis=axes) + (g * g).sum(axis=axes) + delta
    num = k * inter + delta
    dice = num / den

    def backward(gd):
        shape = (1, -1) + (1,) * (p.ndim - 2)
        a = (gd * k / den).reshape(shape)
        b = (gd * 2 * num / (den * den)).reshape(shape)
        return (a * g - b * p, None)

    return Tensor._from_op(dice, "dice_per_class", (probs, onehot), backward)


def dice_loss(probs: Tensor, onehot: Tensor, cfg: DiceConfig | None = None) -> Tensor:
    """``1 - mean`` of per-class soft Dice (scalar tensor)."""
    cfg = cfg or DiceConfig()
    d = dice_per_class(probs, onehot, cfg)
    c = d.shape[0]
    if cfg.include_background:
        weights = np.full(c, 1.0 / c, dtype=d.dtype)
    else:
        if c < 2:
            raise ValueError("excluding background needs at least two classes")
        weights = np.full(c, 1.0 / (c - 1), dtype=d.dtype)
        weights[0] = 0
    dd = d.data
    used = dd if cfg.include_background else dd[1:]
    loss = np.asarray(1.0 - used.sum() / used.size, dtype=d.dtype)
    return Tensor._from_op(loss, "dice_loss", (d,), lambda g: (-g * weights,))


def combined_loss(l_main, l_aux, w: LossWeights | None = None):
    """Weighted task sum ``lambda_main * l_main + lambda_aux * l_aux``.

    Works for plain floats or scalar tensors. A zero auxiliary weight drops
    the auxiliary term entirely, cutting its gradient path.
    """
    w = w or LossWeights()
    if w.lambda_aux == 0 or l_aux is None:
        return l_main * w.lambda_main
    if w.lambda_main == 0:
        return l_aux * w.lambda_aux
    return l_main * w.lambda_main + l_aux * w.lambda_aux


def _label_array(x) -> np.ndarray:
    if isinstance(x, (LabelMap, Volume)):
        return x.voxels
    return np.asarray(x)


def hard_dice(pred, gt, class_id: int) -> float:
    """Binary Dice of one class between two label grids; 1.0 when both are empty."""
    a = _label_array(pred)
    b = _label_array(gt)
    if a.shape != b.shape:
        raise DimensionError(f"label grids differ in shape: {a.shape} vs {b.shape}")
    ma = a == class_id
    mb = b == class_id
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / (na + nb)


def hard_dice_all(pred, gt, n_classes: int) -> np.ndarray:
    return np.array([hard_dice(pred, gt, c) for c in range(n_classes)])


class TTestResult(NamedTuple):
    t: float
    p: float
    degenerate: bool = False


def t_test(sample_a: Sequence[float], sample_b: Sequence[float], paired: bool = False) -> TTestResult:
    """Two-sided t-test: paired (one-sample on differences) or Welch.

    Zero variance is handled explicitly: equal means give ``t=0, p=1``;
    unequal means give ``p=0`` with ``degenerate=True``.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("t_test needs at least two observations per sample")
    if paired:
        if a.size != b.size:
            raise ValueError(f"paired t_test needs equal lengths, got {a.size} and {b.size}")
        d = a - b
        n = d.size
        diff = d.mean()
        se = math.sqrt(d.var(ddof=1) / n)
        dof = n - 1
    else:
        va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
        diff = a.mean() - b.mean()
        se = math.sqrt(va + vb)
        dof = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1)) if se > 0 else 1.0
    # relative guard: rounding noise in a constant difference is not variance
    scale = max(np.abs(a).max(), np.abs(b).max(), 1.0)
    if se <= 1e-12 * scale:
        if abs(diff) <= 1e-12 * scale:
            return TTestResult(0.0, 1.0, True)
        return TTestResult(math.copysign(math.inf, diff), 0.0, True)
    t = diff / se
    p = float(2.0 * _stats.t.sf(abs(t), dof))
    return TTestResult(float(t), min(p, 1.0), False)


@dataclass
class DiceRow:
    name: str
    mean: float
    std: float
    p_value: float | None = None
    degenerate: bool = False

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value < 0.05


@dataclass
class DiceReport:
    """Per-class Dice summary with an optional comparison p-value column."""

    rows: list[DiceRow]
    case_ids: list[str]
    per_case: dict[str, list[float]] = field(default_factory=dict)

    def row(self, name: str) -> DiceRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "mean", "std", "p_value", "significant"])
        for r in self.rows:
            p = "" if r.p_value is None else f"{r.p_value:.6g}"
            w.writerow([r.name, f"{r.mean:.6f}", f"{r.std:.6f}", p, "*" if r.significant else ""])
        return buf.getvalue()

    def per_case_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "class", "dice"])
        for i, cid in enumerate(self.case_ids):
            for name, vals in self.per_case.items():
                w.writerow([cid, name, f"{vals[i]:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        """Human-readable ``mean ± std`` table, asterisk for p < 0.05."""
        lines = []
        for r in self.rows:
            mark = "*" if r.significant else ""
            lines.append(f"{r.name:<12s} {r.mean:.3f} ± {r.std:.3f}{mark}")
        return "\n".join(lines)


def build_dice_report(
    scores: Mapping[str, Sequence[float]],
    case_ids: Sequence[str],
    compare: Mapping[str, Sequence[float]] | None = None,
    paired: bool = True,
) -> DiceReport:
    rows = []
    for name, vals in scores.items():
        v = np.asarray(vals, dtype=np.float64)
        std = float(v.std(ddof=1)) if v.size > 1 else 0.0
        row = DiceRow(name, float(v.mean()), std)
        if compare is not None and name in compare:
            res = t_test(v, compare[name], paired=paired)
            row.p_value, row.degenerate = res.p, res.degenerate
        rows.append(row)
    return DiceReport(rows, list(case_ids), {k: list(map(float, v)) for k, v in scores.items()})


@dataclass
class EmphysemaStats:
    region: str
    percent_laa: float
    percentile_density: float

    def row(self) -> str:
        return f"{self.region}, {self.percent_laa:.3f}, {self.percentile_density:.0f}"


def nearest_rank(values: np.ndarray, percentile: float) -> float:
    """Nearest-rank percentile: the ``ceil(P/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(percentile / 100.0 * v.size))
    return float(v[min(rank, v.size) - 1])


def emphysema_stats(
    vol,
    region,
    threshold_hu: float = -950.0,
    percentile: float = 15.0,
    name: str = "region",
) -> EmphysemaStats:
    """%LAA (voxels at or below ``threshold_hu``) and percentile density of a region."""
    hu = _label_array(vol)
    mask = _label_array(region).astype(bool)
    if hu.shape != mask.shape:
        raise DimensionError(f"volume {hu.shape} and region mask {mask.shape} differ")
    vals = hu[mask]
    if vals.size == 0:
        raise ValueError(f"region {name!r} is empty")
    pct = 100.0 * np.count_nonzero(vals <= threshold_hu) / vals.size
    return EmphysemaStats(name, float(pct), nearest_rank(vals, percentile))


REGIONS: dict[str, tuple[str, ...]] = {
    "Both lungs": ("LR", "MR", "UR", "LL", "UL"),
    "Right lung": ("LR", "MR", "UR"),
    "Left lung": ("LL", "UL"),
    "RU Lobes": ("UR",),
    "RM Lobes": ("MR",),
    "RL Lobes": ("LR",),
    "LU Lobes": ("UL",),
    "LL Lobes": ("LL",),
}


def regional_emphysema(
    vol: Volume, labels: LabelMap, threshold_hu: float = -950.0, percentile: float = 15.0
) -> list[EmphysemaStats]:
    """Whole-lung, per-side and per-lobe rows; empty regions are skipped."""
    out = []
    for name, lobes in REGIONS.items():
        mask = labels.mask(*lobes)
        if mask.any():
            out.append(emphysema_stats(vol, mask, threshold_hu, percentile, name))
    return out


def emphysema_csv(rows: Sequence[EmphysemaStats]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["region", "percent_laa", "percentile_density_hu"])
    for r in rows:
        w.writerow([r.region, f"{r.percent_laa:.3f}", f"{r.percentile_density:.0f}"])
    return buf.getvalue()
