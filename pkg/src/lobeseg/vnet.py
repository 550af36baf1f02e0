"""Volumetric encoder-decoder with a lobe head and an auxiliary airway head.

Layout for ``depth`` levels and ``base`` channels (level ``l`` has
``base * 2**l`` channels):

* ``in``: k^3 conv 1 -> base
* ``enc{l}``: residual block of ``convs_per_block`` k^3 convs
* ``down{l}``: 2^3 stride-2 conv, halves the grid (no pooling)
* ``up{l}``: 2^3 stride-2 transposed conv back to level ``l``
* ``att{l}`` (optional): additive attention gate on the skip from ``enc{l}``
* ``dec{l}``: residual block over ``concat(up, skip)``
* ``head_main`` / ``head_aux``: sibling 1x1x1 convs + channel softmax on the
  same trunk activation

Dropout is applied to the bottleneck output in training mode.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .functional import BatchNormState, DimensionError
from .tensor import Tensor, get_default_dtype


class ConfigError(ValueError):
    """Raised for inconsistent model configurations."""


@dataclass
class ModelConfig:
    input_size: int = 32
    depth: int = 3
    base_channels: int = 8
    main_classes: int = 6
    aux_classes: int = 3
    aux_head: bool = True
    kernel_size: int = 3
    convs_per_block: int = 2
    prelu_init: float = 0.25
    dropout_p: float = 0.5
    batch_norm: bool = True
    bn_momentum: float = 0.1
    attention: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        div = 2 ** (self.depth - 1)
        if self.input_size < 1 or self.input_size % div:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**(depth-1) = {div} (depth {self.depth})"
            )
        if self.main_classes < 2:
            raise ConfigError(f"main_classes must be >= 2, got {self.main_classes}")
        if self.aux_head and self.aux_classes < 2:
            raise ConfigError(f"aux_classes must be >= 2, got {self.aux_classes}")
        if self.base_channels < 1 or self.convs_per_block < 1:
            raise ConfigError("base_channels and convs_per_block must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so adding a layer never shifts another layer's init
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class VNet:
    """Parameter container plus forward pass."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self._calls = 0
        self._build()

    # construction ---------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _conv(self, name: str, cin: int, cout: int, k: int, transposed: bool = False, bias: bool = True,
              stride: int = 1):
        cfg = self.config
        a = cfg.prelu_init
        fan_in = cin * k**3 / (stride**3 if transposed else 1)
        std = np.sqrt(2.0 / ((1.0 + a * a) * fan_in))
        shape = (cin, cout, k, k, k) if transposed else (cout, cin, k, k, k)
        dtype = get_default_dtype()
        self._add(f"{name}.weight", (_param_rng(cfg.seed, name).standard_normal(shape) * std).astype(dtype))
        if bias:
            self._add(f"{name}.bias", np.zeros(cout, dtype=dtype))

    def _norm(self, name: str, c: int):
        if not self.config.batch_norm:
            return
        dtype = get_default_dtype()
        self._add(f"{name}.gamma", np.ones(c, dtype=dtype))
        self._add(f"{name}.beta", np.zeros(c, dtype=dtype))
        self.bn_states[name] = BatchNormState.create(c, momentum=self.config.bn_momentum, dtype=dtype)

    def _act(self, name: str, c: int):
        self._add(f"{name}.slope", np.full(c, self.config.prelu_init, dtype=get_default_dtype()))

    def _unit(self, name: str, cin: int, cout: int, k: int, transposed=False, stride=1):
        """conv -> [bn] -> prelu, with the conv bias dropped when bn follows."""
        self._conv(f"{name}.conv", cin, cout, k, transposed, bias=not self.config.batch_norm, stride=stride)
        self._norm(f"{name}.bn", cout)
        self._act(f"{name}.act", cout)

    def _block(self, name: str, cin: int, c: int):
        k = self.config.kernel_size
        for j in range(self.config.convs_per_block):
            last = j == self.config.convs_per_block - 1
            self._conv(f"{name}.{j}.conv", cin if j == 0 else c, c, k, bias=not self.config.batch_norm)
            self._norm(f"{name}.{j}.bn", c)
            if not last:
                self._act(f"{name}.{j}.act", c)
        self._act(f"{name}.res_act", c)

    def _gate(self, name: str, c: int):
        inter = max(1, c // 2)
        self._conv(f"{name}.skip", c, inter, 1, bias=False)
        self._conv(f"{name}.gating", c, inter, 1, bias=True)
        self._conv(f"{name}.psi", inter, 1, 1, bias=True)

    def _build(self):
        cfg = self.config
        self._unit("in", 1, cfg.channels(0), cfg.kernel_size)
        for l in range(cfg.depth):
            self._block(f"enc{l}", cfg.channels(l), cfg.channels(l))
            if l < cfg.depth - 1:
                self._unit(f"down{l}", cfg.channels(l), cfg.channels(l + 1), 2, stride=2)
        for l in reversed(range(cfg.depth - 1)):
            self._unit(f"up{l}", cfg.channels(l + 1), cfg.channels(l), 2, transposed=True, stride=2)
            if cfg.attention:
                self._gate(f"att{l}", cfg.channels(l))
            self._block(f"dec{l}", 2 * cfg.channels(l), cfg.channels(l))
        self._conv("head_main", cfg.channels(0), cfg.main_classes, 1)
        if cfg.aux_head:
            self._conv("head_aux", cfg.channels(0), cfg.aux_classes, 1)

    # introspection --------------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus batch-norm running statistics, by name."""
        out = {n: p.data for n, p in self.params.items()}
        for n, st in self.bn_states.items():
            out[f"{n}.running_mean"] = st.running_mean
            out[f"{n}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.state_arrays()
        missing = set(expected) - set(arrays)
        if missing:
            raise DimensionError(f"state is missing parameter {sorted(missing)[0]}")
        extra = set(arrays) - set(expected)
        if extra:
            raise DimensionError(f"state has unknown parameter {sorted(extra)[0]}")
        for name, ref in expected.items():
            a = np.asarray(arrays[name])
            if a.shape != ref.shape:
                raise DimensionError(f"parameter {name}: shape {a.shape} does not match model shape {ref.shape}")
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=p.dtype)
        for name, st in self.bn_states.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=st.running_mean.dtype)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=st.running_var.dtype)

    # forward --------------------------------------------------------------
    def _apply_conv(self, name, x, stride=1, padding=0, transposed=False):
        w = self.params[f"{name}.weight"]
        b = self.params.get(f"{name}.bias")
        if transposed:
            return F.conv_transpose3d(x, w, b, stride, padding)
        return F.conv3d(x, w, b, stride, padding)

    def _apply_norm(self, name, x, mode):
        if not self.config.batch_norm:
            return x
        return F.batch_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"], self.bn_states[name], mode)

    def _apply_unit(self, name, x, mode, stride=1, padding=0, transposed=False):
        x = self._apply_conv(f"{name}.conv", x, stride, padding, transposed)
        x = self._apply_norm(f"{name}.bn", x, mode)
        return F.prelu(x, self.params[f"{name}.act.slope"])

    def _apply_block(self, name, x, residual, mode):
        pad = self.config.kernel_size // 2
        h = x
        for j in range(self.config.convs_per_block):
            h = self._apply_conv(f"{name}.{j}.conv", h, 1, pad)
            h = self._apply_norm(f"{name}.{j}.bn", h, mode)
            if j < self.config.convs_per_block - 1:
                h = F.prelu(h, self.params[f"{name}.{j}.act.slope"])
        return F.prelu(F.add(h, residual), self.params[f"{name}.res_act.slope"])

    def attention_gate(self, name: str, skip: Tensor, gating: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(skip * alpha, alpha)`` with ``alpha`` in [0, 1], one value per voxel."""
        if skip.shape[0] != gating.shape[0] or skip.shape[2:] != gating.shape[2:]:
            raise DimensionError(f"gating shape {gating.shape} does not match skip shape {skip.shape}")
        q = F.add(self._apply_conv(f"{name}.skip", skip), self._apply_conv(f"{name}.gating", gating))
        q = F.relu(q)
        alpha = F.sigmoid(self._apply_conv(f"{name}.psi", q))
        return F.mul(skip, alpha), alpha

    def forward(self, batch, mode: str = "eval", dropout_seed: int | None = None):
        """Run both heads. Returns ``(main_probs, aux_probs)``; ``aux_probs`` is
        ``None`` when the model was built without the auxiliary head."""
        cfg = self.config
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        s = cfg.input_size
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (s, s, s):
            raise DimensionError(f"expected input of shape (N,1,{s},{s},{s}), got {x.shape}")
        if dropout_seed is None:
            dropout_seed = cfg.seed * 1_000_003 + self._calls
        self._calls += 1

        pad = cfg.kernel_size // 2
        h = self._apply_unit("in", x, mode, 1, pad)
        skips = []
        for l in range(cfg.depth):
            h = self._apply_block(f"enc{l}", h, h, mode)
            if l < cfg.depth - 1:
                skips.append(h)
                h = self._apply_unit(f"down{l}", h, mode, stride=2)
        h = F.dropout(h, cfg.dropout_p, mode, dropout_seed)
        for l in reversed(range(cfg.depth - 1)):
            up = self._apply_unit(f"up{l}", h, mode, stride=2, transposed=True)
            skip = skips[l]
            if cfg.attention:
                skip, _ = self.attention_gate(f"att{l}", skip, up)
            h = self._apply_block(f"dec{l}", F.concat([up, skip], axis=1), up, mode)
        main = F.softmax_channels(self._apply_conv("head_main", h))
        aux = F.softmax_channels(self._apply_conv("head_aux", h)) if cfg.aux_head else None
        return main, aux

    __call__ = forward

    def saturate_gates(self, value: float = 1000.0) -> None:
        """Force every attention gate fully open (alpha == 1); a test hook."""
        for name in list(self.params):
            if name.startswith("att") and name.endswith(".psi.weight"):
                self.params[name].data[...] = 0
            if name.startswith("att") and name.endswith(".psi.bias"):
                self.params[name].data[...] = value


def build_model(config: ModelConfig) -> VNet:
    return VNet(config)
