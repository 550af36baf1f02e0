"""Training loop: augmentation, combined Dice objective, plateau LR decay.

All randomness is keyed on ``(seed, epoch, step)`` so a run restarted from a
checkpoint replays exactly the same shuffles, augmentations and dropout
masks as an uninterrupted run.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .io_formats import Checkpoint, load_checkpoint, save_checkpoint
from .losses import DiceConfig, LossWeights, combined_loss, dice_loss, hard_dice
from .preprocess import PreparedCase, one_hot
from .tensor import ContractError, Tensor, no_grad
from .vnet import ModelConfig, VNet

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "loss_total", "loss_main", "loss_aux", "lr", "val_dice_mean")


class TrainingError(RuntimeError):
    """Raised when optimization diverges."""


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip_axes: tuple[int, ...] = (0, 1)  # axis 2 (left-right) off: lobes are side-specific
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    intensity_jitter: float = 0.1


@dataclass
class TrainConfig:
    lr0: float = 0.01
    plateau_patience: int = 50
    plateau_factor: float = 10.0
    dropout_p: float | None = 0.5
    lambda_main: float = 0.5
    lambda_aux: float = 0.5
    epochs: int = 100
    batch_size: int = 1
    optimizer: str = "adam"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dice_delta: float = 1e-5
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            if "flip_axes" in aug:
                aug["flip_axes"] = tuple(aug["flip_axes"])
            self.augment = AugmentConfig(**aug)
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if not self.plateau_factor > 1:
            raise ValueError(f"plateau_factor must be > 1, got {self.plateau_factor}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.dropout_p is not None and not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        LossWeights(self.lambda_main, self.lambda_aux)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_main, self.lambda_aux)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"]["flip_axes"] = list(d["augment"]["flip_axes"])
        return d


# -- learning-rate schedule ----------------------------------------------------------


@dataclass
class LRScheduleState:
    lr: float
    best: float = -math.inf
    epochs_since_improvement: int = 0

    def to_dict(self) -> dict:
        return {"lr": self.lr, "best": None if self.best == -math.inf else self.best,
                "epochs_since_improvement": self.epochs_since_improvement}

    @classmethod
    def from_dict(cls, d: dict) -> "LRScheduleState":
        best = -math.inf if d.get("best") is None else d["best"]
        return cls(d["lr"], best, d["epochs_since_improvement"])


def lr_on_plateau(
    state: LRScheduleState,
    new_val_metric: float,
    patience: int = 50,
    factor: float = 10.0,
    threshold: float = 1e-6,
) -> LRScheduleState:
    """Divide the LR by ``factor`` after ``patience`` epochs without improvement.

    The metric is higher-is-better; an improvement must exceed the best value
    by more than ``threshold``.
    """
    if new_val_metric > state.best + threshold:
        return LRScheduleState(state.lr, float(new_val_metric), 0)
    count = state.epochs_since_improvement + 1
    lr = state.lr
    if count >= patience:
        lr, count = lr / factor, 0
    return LRScheduleState(lr, state.best, count)


# -- augmentation ----------------------------------------------------------------------


@dataclass
class AugmentParams:
    flips: tuple[int, ...]
    angle_deg: float
    intensity_shift: float


def draw_augment_params(cfg: AugmentConfig, seed) -> AugmentParams:
    rng = np.random.default_rng(seed)
    flips = tuple(ax for ax in cfg.flip_axes if rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)) if cfg.max_rotation_deg > 0 else 0.0
    shift = float(rng.uniform(-cfg.intensity_jitter, cfg.intensity_jitter)) if cfg.intensity_jitter > 0 else 0.0
    return AugmentParams(flips, angle, shift)


def apply_augment(image: np.ndarray, main: np.ndarray, aux: np.ndarray | None, params: AugmentParams):
    """Apply one geometric transform to image and one-hot targets.

    Arrays are ``(N, C, D, H, W)``. Labels are rotated as class indices with
    nearest-neighbour sampling and re-encoded, so one-hot sums stay 1.
    """
    def geo(a: np.ndarray, order: int) -> np.ndarray:
        for ax in params.flips:
            a = np.flip(a, axis=ax + 2)
        if params.angle_deg:
            # rotation about the axial (z) axis acts in the (y, x) plane
            a = ndimage.rotate(a, params.angle_deg, axes=(3, 4), reshape=False, order=order, mode="nearest")
        return np.ascontiguousarray(a)

    def geo_labels(onehot: np.ndarray) -> np.ndarray:
        idx = onehot.argmax(axis=1)
        idx = geo(idx[:, None], 0)[:, 0]
        return np.stack([one_hot(i, onehot.shape[1], onehot.dtype) for i in idx])

    img = geo(image, 1) + image.dtype.type(params.intensity_shift)
    out_main = geo_labels(main)
    out_aux = geo_labels(aux) if aux is not None else None
    return img.astype(image.dtype), out_main, out_aux


def augment(image, main, aux, switches: AugmentConfig, seed):
    """Draw transform parameters from ``seed`` and apply them to the triple."""
    params = draw_augment_params(switches, seed)
    unwrap = lambda t: t.data if isinstance(t, Tensor) else t  # noqa: E731
    img, m, a = apply_augment(unwrap(image), unwrap(main), None if aux is None else unwrap(aux), params)
    if isinstance(image, Tensor):
        return Tensor(img), Tensor(m), (None if a is None else Tensor(a))
    return img, m, a


# -- optimizers ----------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    step: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
    kind: str,
    lr: float,
    momentum: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    """Update ``params`` in place. ``sgd``: p -= lr*g (with optional momentum);
    ``adam``: bias-corrected first/second moment update."""
    for name in params:
        if grads.get(name) is None:
            raise ContractError(f"missing gradient for parameter {name}")
    if kind not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    state.kind = kind
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if kind == "sgd":
            if momentum:
                buf = state.buffers.get(f"{name}.momentum")
                buf = g.copy() if buf is None else momentum * buf + g
                state.buffers[f"{name}.momentum"] = buf.astype(p.dtype)
                g = buf
            p -= p.dtype.type(lr) * g
            continue
        m = state.buffers.get(f"{name}.m")
        v = state.buffers.get(f"{name}.v")
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = (beta1 * m + (1 - beta1) * g).astype(p.dtype)
        v = (beta2 * v + (1 - beta2) * g * g).astype(p.dtype)
        state.buffers[f"{name}.m"] = m
        state.buffers[f"{name}.v"] = v
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return state


# -- evaluation helpers ------------------------------------------------------------------


def predict_labels(model: VNet, image: Tensor) -> tuple[np.ndarray, np.ndarray | None]:
    """Argmax label grids ``(N, D, H, W)`` for both heads, eval mode."""
    with no_grad():
        main, aux = model.forward(image, "eval")
    return main.data.argmax(axis=1), None if aux is None else aux.data.argmax(axis=1)


def foreground_dice(model: VNet, cases: Sequence[PreparedCase]) -> float:
    """Mean hard Dice over main-head foreground classes and cases."""
    scores = []
    for case in cases:
        pred, _ = predict_labels(model, case.image)
        gt = case.main_onehot.data.argmax(axis=1)
        n = case.main_onehot.shape[1]
        scores.append(np.mean([hard_dice(pred, gt, c) for c in range(1, n)]))
    return float(np.mean(scores))


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainState:
    epoch: int
    lr_state: LRScheduleState
    optimizer: OptimizerState
    history: list[dict]


def _step_seed(seed: int, epoch: int, batch: int) -> int:
    return int(np.random.default_rng([seed, epoch, batch, 2]).integers(2**31))


def _stack(cases: Sequence[PreparedCase], attr: str):
    arrays = [getattr(c, attr) for c in cases]
    if arrays[0] is None:
        return None
    return np.concatenate([a.data for a in arrays], axis=0)


def make_checkpoint(model: VNet, state: TrainState, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        model_config=model.config.to_dict(),
        arrays={k: v.copy() for k, v in model.state_arrays().items()},
        epoch=state.epoch,
        lr_state=state.lr_state.to_dict(),
        optimizer_arrays={k: v.copy() for k, v in state.optimizer.buffers.items()},
        meta={
            "optimizer_kind": state.optimizer.kind,
            "optimizer_step": state.optimizer.step,
            "history": state.history,
            "train_config": cfg.to_dict(),
        },
    )


def restore(model: VNet, ckpt: Checkpoint) -> TrainState:
    """Load a checkpoint into ``model`` and return the training state it carried."""
    model.load_state_arrays(ckpt.arrays)
    opt = OptimizerState(
        ckpt.meta.get("optimizer_kind", "adam"),
        int(ckpt.meta.get("optimizer_step", 0)),
        {k: v.copy() for k, v in ckpt.optimizer_arrays.items()},
    )
    return TrainState(ckpt.epoch, LRScheduleState.from_dict(ckpt.lr_state), opt, list(ckpt.meta.get("history", [])))


def train(
    model: VNet,
    dataset: Sequence[PreparedCase],
    val_set: Sequence[PreparedCase] | None,
    cfg: TrainConfig,
    resume: Checkpoint | TrainState | None = None,
    stop_after: int | None = None,
) -> tuple[VNet, list[dict]]:
    """Optimize ``model`` on ``dataset``; returns the model and per-epoch history.

    ``resume`` continues from a checkpoint; ``stop_after`` ends the run after
    that many total epochs (used to produce resumable partial runs).
    """
    if not dataset:
        raise ValueError("training set is empty")
    s = model.config.input_size
    for c in dataset:
        if c.image.shape[2:] != (s, s, s):
            raise ValueError(f"case {c.case_id!r} has spatial shape {c.image.shape[2:]}, model expects {(s, s, s)}")
    if cfg.dropout_p is not None:
        model.config.dropout_p = cfg.dropout_p
    weights = cfg.loss_weights
    use_aux = model.config.aux_head and weights.lambda_aux > 0
    dcfg = DiceConfig(delta=cfg.dice_delta)
    val_set = val_set if val_set else dataset

    if isinstance(resume, Checkpoint):
        state = restore(model, resume)
    elif isinstance(resume, TrainState):
        state = resume
    else:
        state = TrainState(0, LRScheduleState(cfg.lr0), OptimizerState(cfg.optimizer), [])

    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    n = len(dataset)
    best_val = max((h["val_dice_mean"] for h in state.history), default=-math.inf)
    names = list(model.params)
    for epoch in range(state.epoch + 1, last + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        tot = main_sum = aux_sum = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            image, main_t, aux_t = _stack(batch, "image"), _stack(batch, "main_onehot"), _stack(batch, "aux_onehot")
            if cfg.augment.enabled:
                image, main_t, aux_t = augment(image, main_t, aux_t if use_aux else None, cfg.augment,
                                               [cfg.seed, epoch, b, 1])
            model.zero_grad()
            main_p, aux_p = model.forward(Tensor(image), "train", dropout_seed=_step_seed(cfg.seed, epoch, b))
            l_main = dice_loss(main_p, Tensor(main_t), dcfg)
            l_aux = dice_loss(aux_p, Tensor(aux_t), dcfg) if use_aux else None
            loss = combined_loss(l_main, l_aux, weights)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            loss.backward()
            grads = {}
            for name in names:
                g = model.params[name].grad
                if g is None and name.startswith("head_aux") and not use_aux:
                    g = np.zeros_like(model.params[name].data)
                grads[name] = g
            optimizer_step(
                {k: p.data for k, p in model.params.items()}, grads, state.optimizer, cfg.optimizer,
                state.lr_state.lr, cfg.momentum, cfg.beta1, cfg.beta2, cfg.adam_eps,
            )
            tot += loss.item()
            main_sum += l_main.item()
            aux_sum += l_aux.item() if l_aux is not None else 0.0
            n_batches += 1
        val = foreground_dice(model, val_set)
        lr_used = state.lr_state.lr
        state.lr_state = lr_on_plateau(state.lr_state, val, cfg.plateau_patience, cfg.plateau_factor)
        row = {
            "epoch": epoch,
            "loss_total": tot / n_batches,
            "loss_main": main_sum / n_batches,
            "loss_aux": aux_sum / n_batches,
            "lr": lr_used,
            "val_dice_mean": val,
        }
        state.history.append(row)
        state.epoch = epoch
        logger.info("epoch %d loss %.4f val %.4f lr %.2g", epoch, row["loss_total"], val, lr_used)
        if cfg.checkpoint_dir:
            out = Path(cfg.checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch{epoch:04d}.ckpt", make_checkpoint(model, state, cfg))
            if val > best_val:
                best_val = val
                save_checkpoint(out / "best.ckpt", make_checkpoint(model, state, cfg))
            save_checkpoint(out / "last.ckpt", make_checkpoint(model, state, cfg))
    model.train_state = state
    return model, state.history


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()
