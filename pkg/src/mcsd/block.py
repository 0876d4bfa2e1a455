"""Parallel (training-time) form of the multi-channel slope/decay block.

Input ``X[..., N, D]`` is split into ``C`` channels of width ``D_c``. Each
section projects the channels twice, mixes one projection over past
positions with a fixed per-channel mask, and gates the pair:

* slope:  ``silu(W_s @ V) * U`` with a softmax-normalized recency mask;
* decay:  ``rms_norm(W_d @ E) * sigmoid(F)`` with a geometric alpha-power mask.

Sections are combined by concatenation plus an output projection
(``combine_mode="concat"``) or by summation (``combine_mode="sum"``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

VARIANTS: dict[str, tuple[str, ...]] = {
    "slope_decay": ("slope", "decay"),
    "slope_only": ("slope",),
    "decay_only": ("decay",),
    "slope_slope": ("slope", "slope"),
    "decay_decay": ("decay", "decay"),
}
COMBINE_MODES = ("concat", "sum")
RMS_EPS = 1e-6
INIT_STD = 0.02


def dtype_for(precision: int):
    if precision == 64:
        return np.float64
    if precision == 32:
        return np.float32
    raise ConfigError(f"precision must be 32 or 64, got {precision}")


@dataclass(frozen=True)
class MCSDConfig:
    model_dim: int
    channels: int
    seq_len: int
    combine_mode: str = "concat"
    variant: str = "slope_decay"
    precision: int = 64

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.model_dim < 1 or self.model_dim % self.channels:
            raise ConfigError(
                f"model_dim {self.model_dim} must be a positive multiple of channels {self.channels}"
            )
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be positive, got {self.seq_len}")
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigError(f"unknown combine_mode {self.combine_mode!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        dtype_for(self.precision)

    @property
    def per_channel_dim(self) -> int:
        return self.model_dim // self.channels

    @property
    def sections(self) -> tuple[str, ...]:
        return VARIANTS[self.variant]

    @property
    def dtype(self):
        return dtype_for(self.precision)

    @property
    def has_output_proj(self) -> bool:
        return self.combine_mode == "concat"


# ------------------------------------------------------------------- masks

def channel_betas(channels: int) -> np.ndarray:
    """Slope rates ``(2**(-8/C))**(i+1)``; strictly decreasing, last one is 2**-8."""
    if channels < 1:
        raise ConfigError(f"channels must be positive, got {channels}")
    # one power per channel keeps the last rate exactly 2**-8
    return np.array([2.0 ** (-8.0 * (i + 1) / channels) for i in range(channels)])


def channel_alphas(channels: int) -> np.ndarray:
    """Decay rates ``1 - 2**(-5-i)``; strictly increasing toward 1."""
    if channels < 1:
        raise ConfigError(f"channels must be positive, got {channels}")
    return np.array([1.0 - 2.0 ** (-5 - i) for i in range(channels)])


def build_slope_mask(n: int, beta: float) -> np.ndarray:
    """Row-stochastic ``n x n`` mask weighting strictly-past positions by ``exp(-j*beta)``.

    Row 0 has no past, so its only finite logit sits on the diagonal and the
    row becomes ``[1, 0, ...]``.
    """
    if n < 1:
        raise ConfigError(f"sequence length must be positive, got {n}")
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    r = np.arange(n)[:, None]
    c = np.arange(n)[None, :]
    logits = np.where(c < r, -(r - c) * beta, -np.inf)
    logits[0, 0] = 1.0
    return T.row_softmax(Tensor(logits)).data


def build_decay_mask(n: int, alpha: float) -> np.ndarray:
    """Strictly lower-triangular ``alpha**(r-c)`` mask with a unit top-left entry."""
    if n < 1:
        raise ConfigError(f"sequence length must be positive, got {n}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    r = np.arange(n)[:, None]
    c = np.arange(n)[None, :]
    out = np.where(c < r, np.power(alpha, np.maximum(r - c, 0).astype(np.float64)), 0.0)
    out[0, 0] = 1.0
    return out


@dataclass
class ChannelMasks:
    betas: np.ndarray
    alphas: np.ndarray
    slope: np.ndarray  # (C, N, N)
    decay: np.ndarray  # (C, N, N)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def seq_len(self) -> int:
        return self.slope.shape[-1]

    def for_length(self, n: int, dtype=np.float64) -> tuple[Tensor, Tensor]:
        """Top-left ``n x n`` blocks; rows do not depend on the full length."""
        if n > self.seq_len:
            raise ShapeError(f"sequence of length {n} exceeds mask length {self.seq_len}")
        key = (n, np.dtype(dtype).str)
        if key not in self._cache:
            self._cache[key] = (
                Tensor(np.ascontiguousarray(self.slope[:, :n, :n], dtype=dtype)),
                Tensor(np.ascontiguousarray(self.decay[:, :n, :n], dtype=dtype)),
            )
        return self._cache[key]


def build_channel_masks(cfg: MCSDConfig, betas=None, alphas=None) -> ChannelMasks:
    betas = channel_betas(cfg.channels) if betas is None else np.asarray(betas, dtype=np.float64)
    alphas = channel_alphas(cfg.channels) if alphas is None else np.asarray(alphas, dtype=np.float64)
    slope = np.stack([build_slope_mask(cfg.seq_len, b) for b in betas])
    decay = np.stack([build_decay_mask(cfg.seq_len, a) for a in alphas])
    return ChannelMasks(betas, alphas, slope, decay)


# ------------------------------------------------------------------ params

@dataclass
class SectionParams:
    """Weights of one section.

    ``linear`` is the ungated projection (U for slope, F for decay) and
    ``history`` the one mixed over past positions (V for slope, E for decay).
    Both have shape ``(C, D_c, D_c)``. ``norm_gain`` (``(C, D_c)``) scales the
    decay branch's RMSNorm and is None for slope sections.
    """

    kind: str
    linear: Tensor
    history: Tensor
    norm_gain: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out = {"linear": self.linear, "history": self.history}
        if self.norm_gain is not None:
            out["norm_gain"] = self.norm_gain
        return out


@dataclass
class BlockParams:
    sections: list[SectionParams]
    w_out: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, sec in enumerate(self.sections):
            for k, v in sec.named().items():
                out[f"sec{i}.{k}"] = v
        if self.w_out is not None:
            out["w_out"] = self.w_out
        return out


def init_block_params(cfg: MCSDConfig, rng: np.random.Generator, std: float = INIT_STD) -> BlockParams:
    C, Dc, D = cfg.channels, cfg.per_channel_dim, cfg.model_dim
    dt = cfg.dtype

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    sections = []
    for kind in cfg.sections:
        gain = Tensor(np.ones((C, Dc), dtype=dt), requires_grad=True) if kind == "decay" else None
        sections.append(SectionParams(kind, w(C, Dc, Dc), w(C, Dc, Dc), gain))
    w_out = w(len(sections) * D, D) if cfg.has_output_proj else None
    return BlockParams(sections, w_out)


def block_param_count(cfg: MCSDConfig) -> int:
    C, Dc, D = cfg.channels, cfg.per_channel_dim, cfg.model_dim
    n = 0
    for kind in cfg.sections:
        n += 2 * C * Dc * Dc + (C * Dc if kind == "decay" else 0)
    if cfg.has_output_proj:
        n += len(cfg.sections) * D * D
    return n


# ----------------------------------------------------------------- forward

def _section_forward(kind: str, xc: Tensor, sec: SectionParams, slope_m: Tensor, decay_m: Tensor) -> Tensor:
    """One section on channel-major input ``(..., C, N, D_c)``; returns ``(..., N, C, D_c)``."""
    lin = xc @ sec.linear
    hist = xc @ sec.history
    if kind == "slope":
        mixed = T.swapaxes(slope_m @ hist, -3, -2)
        return T.silu(mixed) * T.swapaxes(lin, -3, -2)
    mixed = T.swapaxes(decay_m @ hist, -3, -2)
    return T.rms_norm(mixed, sec.norm_gain, RMS_EPS) * T.sigmoid(T.swapaxes(lin, -3, -2))


def mcsd_forward(x: Tensor, params: BlockParams, masks: ChannelMasks, cfg: MCSDConfig) -> Tensor:
    """Block output for ``x[..., N, D]``; shape is preserved."""
    if x.ndim < 2 or x.shape[-1] != cfg.model_dim:
        raise ShapeError(f"block input {x.shape} does not end in model_dim {cfg.model_dim}")
    if len(params.sections) != len(cfg.sections):
        raise ConfigError("block params do not match the configured variant")
    n = x.shape[-2]
    lead = x.shape[:-2]
    C, Dc, D = cfg.channels, cfg.per_channel_dim, cfg.model_dim
    slope_m, decay_m = masks.for_length(n, x.dtype)

    xc = T.swapaxes(x.reshape(*lead, n, C, Dc), -3, -2)
    outs = [
        _section_forward(kind, xc, sec, slope_m, decay_m)
        for kind, sec in zip(cfg.sections, params.sections)
    ]
    if cfg.combine_mode == "sum":
        theta = outs[0]
        for o in outs[1:]:
            theta = theta + o
        return theta.reshape(*lead, n, D)
    theta = outs[0] if len(outs) == 1 else T.concat_last_axis(outs)
    return theta.reshape(*lead, n, len(outs) * D) @ params.w_out

