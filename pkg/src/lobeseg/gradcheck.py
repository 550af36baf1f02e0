"""Central finite-difference checks for every differentiable op.

Each case builds random float64 inputs from a seed, reduces the op output to a
scalar with a fixed random projection, and compares the tape gradient with
``(f(x+h) - f(x-h)) / 2h`` per checked coordinate.

The error of one coordinate is ``|analytic - numeric| / max(1e-8, |analytic|)``;
the reported figure for an op is the worst over its coordinates, inputs and
seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .losses import DiceConfig, LossWeights, combined_loss, dice_loss, dice_per_class
from .tensor import Tensor, precision
from .vnet import ModelConfig, VNet

H = 1e-5
TOLERANCE = 1e-4
N_SEEDS = 5
MAX_COORDS = 24  # coordinates probed per input tensor

Builder = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


@dataclass
class OpResult:
    op: str
    max_rel_error: float
    seeds: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(out.shape))
    return lambda y: F.sum(F.mul(y, r))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + margin, x - margin)


def _reduced(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    out = fn()
    if out.ndim == 0:
        return fn
    proj = _project(out, rng)
    return lambda: proj(fn())


def _case_add(rng):
    a, b = _leaf(rng.standard_normal((2, 3, 4))), _leaf(rng.standard_normal((2, 3, 4)))
    return [a, b], _reduced(lambda: F.add(a, b), rng)


def _case_scale(rng):
    a = _leaf(rng.standard_normal((3, 5)))
    c = float(rng.uniform(-2, 2))
    return [a], _reduced(lambda: F.scale(a, c), rng)


def _case_mul(rng):
    a, b = _leaf(rng.standard_normal((2, 3, 3, 3, 3))), _leaf(rng.standard_normal((2, 1, 3, 3, 3)))
    return [a, b], _reduced(lambda: F.mul(a, b), rng)


def _case_sum(rng):
    a = _leaf(rng.standard_normal((2, 3, 4)))
    return [a], _reduced(lambda: F.sum(a, axis=1), rng)


def _case_concat(rng):
    a, b = _leaf(rng.standard_normal((1, 2, 3, 3, 3))), _leaf(rng.standard_normal((1, 3, 3, 3, 3)))
    return [a, b], _reduced(lambda: F.concat([a, b], axis=1), rng)


def _case_conv3d(rng):
    stride = int(rng.integers(1, 3))
    k = int(rng.choice([1, 2, 3]))
    pad = int(rng.integers(0, k))
    x = _leaf(rng.standard_normal((2, 2, 5, 5, 5)))
    w = _leaf(rng.standard_normal((3, 2, k, k, k)) * 0.5)
    b = _leaf(rng.standard_normal(3))
    return [x, w, b], _reduced(lambda: F.conv3d(x, w, b, stride, pad), rng)


def _case_conv_transpose3d(rng):
    stride = int(rng.integers(1, 3))
    k = int(rng.choice([2, 3]))
    pad = int(rng.integers(0, k))
    x = _leaf(rng.standard_normal((1, 3, 3, 3, 3)))
    w = _leaf(rng.standard_normal((3, 2, k, k, k)) * 0.5)
    b = _leaf(rng.standard_normal(2))
    return [x, w, b], _reduced(lambda: F.conv_transpose3d(x, w, b, stride, pad), rng)


def _case_prelu(rng):
    x = _leaf(_away_from_zero(rng, (2, 3, 3, 3, 3)))
    a = _leaf(rng.uniform(0.05, 0.5, 3))
    return [x, a], _reduced(lambda: F.prelu(x, a), rng)


def _case_relu(rng):
    x = _leaf(_away_from_zero(rng, (2, 3, 4)))
    return [x], _reduced(lambda: F.relu(x), rng)


def _case_sigmoid(rng):
    x = _leaf(rng.standard_normal((2, 1, 3, 3, 3)) * 3)
    return [x], _reduced(lambda: F.sigmoid(x), rng)


def _case_softmax(rng):
    x = _leaf(rng.standard_normal((2, 4, 3, 3, 3)) * 2)
    return [x], _reduced(lambda: F.softmax_channels(x), rng)


def _case_batch_norm(rng):
    x = _leaf(rng.standard_normal((2, 3, 3, 3, 3)) * 2 + 1)
    g, b = _leaf(rng.uniform(0.5, 1.5, 3)), _leaf(rng.standard_normal(3))
    state = F.BatchNormState.create(3, dtype=np.float64)
    return [x, g, b], _reduced(lambda: F.batch_norm(x, g, b, state, "train"), rng)


def _case_dropout(rng):
    x = _leaf(rng.standard_normal((2, 3, 3, 3, 3)))
    seed = int(rng.integers(1 << 30))
    return [x], _reduced(lambda: F.dropout(x, 0.5, "train", seed), rng)


def _softmax_target(rng, n, c, s):
    logits = _leaf(rng.standard_normal((n, c, s, s, s)))
    labels = rng.integers(0, c, (n, s, s, s))
    onehot = Tensor(np.moveaxis(np.eye(c)[labels], -1, 1))
    return logits, onehot


def _case_dice_per_class(rng):
    p = _leaf(rng.uniform(0.05, 1.0, (2, 3, 3, 3, 3)))
    _, onehot = _softmax_target(rng, 2, 3, 3)
    return [p], _reduced(lambda: dice_per_class(p, onehot), rng)


def _case_dice_loss(rng):
    logits, onehot = _softmax_target(rng, 1, 4, 4)
    cfg = DiceConfig(include_background=bool(rng.integers(2)))
    return [logits], lambda: dice_loss(F.softmax_channels(logits), onehot, cfg)


def _case_combined_loss(rng):
    a, b = _leaf(rng.uniform(0, 1)), _leaf(rng.uniform(0, 1))
    w = LossWeights(float(rng.uniform(0.1, 1)), float(rng.uniform(0.1, 1)))
    return [a, b], lambda: combined_loss(a, b, w)


def _case_composite(rng):
    x = _leaf(rng.standard_normal((1, 2, 4, 4, 4)))
    w = _leaf(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3)
    b = _leaf(rng.standard_normal(3) * 0.1)
    a = _leaf(rng.uniform(0.1, 0.4, 3))
    labels = rng.integers(0, 3, (1, 4, 4, 4))
    onehot = Tensor(np.moveaxis(np.eye(3)[labels], -1, 1))
    return [x, w, b, a], lambda: dice_loss(F.softmax_channels(F.prelu(F.conv3d(x, w, b, 1, 1), a)), onehot)


def _tiny_model(rng, attention: bool) -> VNet:
    cfg = ModelConfig(input_size=4, depth=2, base_channels=2, dropout_p=0.5, attention=attention,
                      seed=int(rng.integers(1 << 20)))
    model = VNet(cfg)
    for name, p in model.params.items():
        if name.endswith(".slope"):
            p.data[...] = rng.uniform(0.1, 0.4, p.shape)
        p.requires_grad = True
    return model


def _case_vnet(rng, attention=False):
    model = _tiny_model(rng, attention)
    x = _leaf(rng.standard_normal((2, 1, 4, 4, 4)))
    labels = rng.integers(0, 6, (2, 4, 4, 4))
    main_t = Tensor(np.moveaxis(np.eye(6)[labels], -1, 1))
    aux_t = Tensor(np.moveaxis(np.eye(3)[labels % 3], -1, 1))
    seed = int(rng.integers(1 << 30))

    def fn():
        main, aux = model.forward(x, "train", dropout_seed=seed)
        return combined_loss(dice_loss(main, main_t), dice_loss(aux, aux_t))

    picks = [x] + [model.params[n] for n in sorted(model.params) if n.startswith(("in.", "head_", "att", "up0."))]
    return picks, fn


def _case_attention_vnet(rng):
    return _case_vnet(rng, attention=True)


OPS: dict[str, Builder] = {
    "add": _case_add,
    "scale": _case_scale,
    "mul": _case_mul,
    "sum": _case_sum,
    "concat": _case_concat,
    "conv3d": _case_conv3d,
    "conv_transpose3d": _case_conv_transpose3d,
    "prelu": _case_prelu,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "softmax_channels": _case_softmax,
    "batch_norm": _case_batch_norm,
    "dropout": _case_dropout,
    "dice_per_class": _case_dice_per_class,
    "dice_loss": _case_dice_loss,
    "combined_loss": _case_combined_loss,
    "conv_prelu_softmax_dice": _case_composite,
    "vnet_mtl": _case_vnet,
    "vnet_attention": _case_attention_vnet,
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_case(inputs: list[Tensor], fn: Callable[[], Tensor], rng, h: float = H,
               max_coords: int = MAX_COORDS) -> float:
    """Worst relative error over ``inputs`` for scalar function ``fn``."""
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num = np.empty(coords.size)
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(analytic.reshape(-1)[coords], num))
    return worst


def run_op(name: str, seeds: int = N_SEEDS) -> OpResult:
    t0 = time.perf_counter()
    worst = 0.0
    with precision(np.float64):
        for seed in range(seeds):
            rng = np.random.default_rng([seed, len(name)])
            inputs, fn = OPS[name](rng)
            worst = max(worst, check_case(inputs, fn, rng))
    return OpResult(name, worst, seeds, time.perf_counter() - t0)


def run_suite(ops=None, seeds: int = N_SEEDS) -> list[OpResult]:
    return [run_op(name, seeds) for name in (ops or OPS)]


def format_results(results: list[OpResult]) -> str:
    lines = [f"{'op':<26}{'max_rel_error':>15}  seeds  status"]
    for r in results:
        lines.append(f"{r.op:<26}{r.max_rel_error:>15.3e}  {r.seeds:>5}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
