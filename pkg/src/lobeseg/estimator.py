"""scikit-learn style wrappers around preprocessing and the segmentation model.

Arrays follow the layout ``(n_cases, D, H, W)``. Label arrays hold indices in
the 8-class vocabulary (background, five lobes, trachea, bronchi).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.pipeline import Pipeline
from sklearn.utils.validation import check_is_fitted

from .io_formats import Checkpoint
from .losses import hard_dice
from .preprocess import (
    LabelMap,
    PreparedCase,
    PreprocessConfig,
    Volume,
    clip_hu,
    prepared_from_cube,
    resample,
    zscore,
)
from .tensor import Tensor, no_grad
from .trainer import AugmentConfig, TrainConfig, restore, train
from .vnet import ModelConfig, VNet


def _check_volumes(X, name="X") -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"{name} must have shape (n_cases, D, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if np.issubdtype(X.dtype, np.floating) and not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


class HUClipper(TransformerMixin, BaseEstimator):
    def __init__(self, hu_lo: float = -1000.0, hu_hi: float = 400.0):
        self.hu_lo = hu_lo
        self.hu_hi = hu_hi

    def fit(self, X, y=None):
        _check_volumes(X)
        if not self.hu_lo < self.hu_hi:
            raise ValueError(f"hu_lo ({self.hu_lo}) must be below hu_hi ({self.hu_hi})")
        self.n_features_in_ = int(np.prod(np.asarray(X).shape[-3:]))
        return self

    def transform(self, X):
        X = _check_volumes(X).astype(np.float32)
        cfg = PreprocessConfig(hu_lo=self.hu_lo, hu_hi=self.hu_hi)
        return np.stack([clip_hu(Volume(v), cfg).voxels for v in X])


class ZScoreNormalizer(TransformerMixin, BaseEstimator):
    """Per-volume standardization; fitting learns nothing."""

    def __init__(self, eps: float = 1e-8):
        self.eps = eps

    def fit(self, X, y=None):
        _check_volumes(X)
        self.n_features_in_ = int(np.prod(np.asarray(X).shape[-3:]))
        return self

    def transform(self, X):
        X = _check_volumes(X).astype(np.float32)
        return np.stack([zscore(Volume(v), self.eps).voxels for v in X])


class CubeResampler(TransformerMixin, BaseEstimator):
    def __init__(self, size: int = 32, interp: str = "trilinear"):
        self.size = size
        self.interp = interp

    def fit(self, X, y=None):
        _check_volumes(X)
        if self.interp not in ("trilinear", "nearest"):
            raise ValueError(f"interp must be 'trilinear' or 'nearest', got {self.interp!r}")
        self.n_features_in_ = int(np.prod(np.asarray(X).shape[-3:]))
        return self

    def transform(self, X):
        X = _check_volumes(X)
        s = (self.size,) * 3
        if self.interp == "nearest":
            return np.stack([resample(LabelMap(v.astype(np.uint8)), s, "nearest").voxels for v in X])
        return np.stack([resample(Volume(v.astype(np.float32)), s, "trilinear").voxels for v in X])


class VNetMTLSegmenter(BaseEstimator):
    """Lobe segmenter with an optional auxiliary airway head.

    ``fit(X, y)`` takes normalized cubes ``X`` and vocabulary label maps ``y``.
    Labels at a different resolution than the model input are resampled with
    nearest-neighbour sampling. ``lambda_aux=0`` or ``aux_head=False`` gives
    the single-task baseline.
    """

    def __init__(
        self,
        input_size: int = 32,
        depth: int = 3,
        base_channels: int = 8,
        aux_head: bool = True,
        attention: bool = False,
        batch_norm: bool = True,
        lambda_main: float = 0.5,
        lambda_aux: float = 0.5,
        lr0: float = 0.01,
        epochs: int = 100,
        batch_size: int = 1,
        optimizer: str = "adam",
        dropout_p: float = 0.5,
        plateau_patience: int = 50,
        augment: bool = True,
        seed: int = 0,
    ):
        self.input_size = input_size
        self.depth = depth
        self.base_channels = base_channels
        self.aux_head = aux_head
        self.attention = attention
        self.batch_norm = batch_norm
        self.lambda_main = lambda_main
        self.lambda_aux = lambda_aux
        self.lr0 = lr0
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.dropout_p = dropout_p
        self.plateau_patience = plateau_patience
        self.augment = augment
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            input_size=self.input_size, depth=self.depth, base_channels=self.base_channels,
            aux_head=self.aux_head, attention=self.attention, batch_norm=self.batch_norm,
            dropout_p=self.dropout_p, seed=self.seed,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr0=self.lr0, plateau_patience=self.plateau_patience, dropout_p=self.dropout_p,
            lambda_main=self.lambda_main, lambda_aux=self.lambda_aux if self.aux_head else 0.0,
            epochs=self.epochs, batch_size=self.batch_size, optimizer=self.optimizer,
            augment=AugmentConfig(enabled=bool(self.augment)), seed=self.seed,
        )

    def _cases(self, X, y) -> list[PreparedCase]:
        X = _check_volumes(X).astype(np.float32)
        y = _check_volumes(y, "y")
        if len(X) != len(y):
            raise ValueError(f"X has {len(X)} cases but y has {len(y)}")
        s = (self.input_size,) * 3
        cases = []
        for i, (img, lab) in enumerate(zip(X, y)):
            if img.shape != s:
                raise ValueError(f"X[{i}] has shape {img.shape}, expected {s}; resample first")
            lab = lab.astype(np.uint8)
            if lab.shape != s:
                lab = resample(LabelMap(lab), s, "nearest").voxels
            cases.append(prepared_from_cube(img, lab, f"case{i}"))
        return cases

    def fit(self, X, y, X_val=None, y_val=None):
        cases = self._cases(X, y)
        val = self._cases(X_val, y_val) if X_val is not None else None
        model = VNet(self._model_config())
        self.model_, self.history_ = train(model, cases, val, self._train_config())
        self.n_features_in_ = self.input_size**3
        return self

    def _forward(self, X):
        check_is_fitted(self, "model_")
        X = _check_volumes(X).astype(np.float32)
        s = (self.input_size,) * 3
        if X.shape[1:] != s:
            raise ValueError(f"X has spatial shape {X.shape[1:]}, expected {s}")
        mains, auxs = [], []
        with no_grad():
            for img in X:
                main, aux = self.model_.forward(Tensor(img[None, None]), "eval")
                mains.append(main.data[0])
                auxs.append(None if aux is None else aux.data[0])
        return np.stack(mains), (None if auxs[0] is None else np.stack(auxs))

    def predict_proba(self, X) -> np.ndarray:
        """Main-head class probabilities ``(n, C, D, H, W)``."""
        return self._forward(X)[0]

    def predict(self, X) -> np.ndarray:
        """Main-head labels ``(n, D, H, W)`` in the main-task class order."""
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)

    def predict_aux(self, X) -> np.ndarray:
        aux = self._forward(X)[1]
        if aux is None:
            raise ValueError("model was fitted without an auxiliary head")
        return aux.argmax(axis=1).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean foreground hard Dice of the main head."""
        cases = self._cases(X, y)
        pred = self.predict(np.stack([c.image.data[0, 0] for c in cases]))
        scores = []
        for p, c in zip(pred, cases):
            gt = c.main_onehot.data[0].argmax(axis=0)
            n = c.main_onehot.shape[1]
            scores.append(np.mean([hard_dice(p, gt, k) for k in range(1, n)]))
        return float(np.mean(scores))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "VNetMTLSegmenter":
        mc = ModelConfig.from_dict(ckpt.model_config)
        est = cls(input_size=mc.input_size, depth=mc.depth, base_channels=mc.base_channels,
                  aux_head=mc.aux_head, attention=mc.attention, batch_norm=mc.batch_norm,
                  dropout_p=mc.dropout_p, seed=mc.seed)
        model = VNet(mc)
        state = restore(model, ckpt)
        est.model_, est.history_ = model, state.history
        est.n_features_in_ = mc.input_size**3
        return est


def make_pipeline(size: int = 32, **segmenter_params) -> Pipeline:
    """clip -> zscore -> resample -> segmenter."""
    return Pipeline([
        ("clip", HUClipper()),
        ("zscore", ZScoreNormalizer()),
        ("resample", CubeResampler(size)),
        ("segmenter", VNetMTLSegmenter(input_size=size, **segmenter_params)),
    ])
