"""Constant-state streaming form of the MCSD block.

Every section keeps one ``D_c`` vector per channel. At position ``n`` the
section emits the feature the parallel mask row ``n`` would produce, then
folds token ``n`` into its state:

* slope:  ``G <- 1 + exp(-beta) * G``;  ``S <- (1 - 1/G) * S + V_n / G``
* decay:  ``S <- alpha * (S + E_n)``

Position 0 emits the token's own projection, mirroring the unit top-left
entry of both masks; from position 1 on the emitted value is the state,
which never includes the current token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import RMS_EPS, BlockParams, MCSDConfig, channel_alphas, channel_betas
from .errors import ContractError, ShapeError
from .flops import matmul_flops, tally
from .tensor import _sigmoid_np


@dataclass
class RecurrentState:
    """Decode state for ``layers`` stacked blocks and ``batch`` sequences.

    ``sections`` holds the per-section state vectors, shape
    ``(layers, n_sections, batch, C, D_c)``; ``denominators`` the running slope
    normalizers ``G`` per layer and channel; ``position`` the number of tokens
    consumed per layer.
    """

    sections: np.ndarray
    denominators: np.ndarray
    position: np.ndarray

    @property
    def layers(self) -> int:
        return self.sections.shape[0]

    @property
    def batch(self) -> int:
        return self.sections.shape[2]

    @property
    def nbytes(self) -> int:
        return int(self.sections.nbytes + self.denominators.nbytes + self.position.nbytes)

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.sections.copy(), self.denominators.copy(), self.position.copy())


def init_state(cfg: MCSDConfig, layers: int = 1, batch: int = 1) -> RecurrentState:
    shape = (layers, len(cfg.sections), batch, cfg.channels, cfg.per_channel_dim)
    return RecurrentState(
        sections=np.zeros(shape, dtype=cfg.dtype),
        denominators=np.zeros((layers, cfg.channels), dtype=cfg.dtype),
        position=np.zeros(layers, dtype=np.int64),
    )


# --------------------------------------------------------- channel updates

def slope_step(state: np.ndarray, denom: np.ndarray, v: np.ndarray, rate: np.ndarray, position: int):
    """One slope update; returns ``(feature, new_state, new_denom)``.

    ``state`` and ``v`` are ``(..., C, D_c)``; ``denom`` and ``rate``
    (``exp(-beta)``) are per channel.
    """
    new_denom = 1.0 + rate * denom
    inv = (1.0 / new_denom)[:, None]
    new_state = (1.0 - inv) * state + inv * v
    tally(4 * v.size + 2 * denom.size)
    feature = v if position == 0 else state
    return feature, new_state, new_denom


def decay_step(state: np.ndarray, e: np.ndarray, alpha: np.ndarray, position: int):
    """One decay update; returns ``(feature, new_state)`` with the feature pre-RMSNorm."""
    new_state = alpha[:, None] * (state + e)
    tally(2 * e.size)
    feature = e if position == 0 else state
    return feature, new_state


# ------------------------------------------------------------ block level

@dataclass
class BlockKernel:
    """Plain-array view of one block's weights for the streaming path."""

    cfg: MCSDConfig
    kinds: tuple[str, ...]
    linear: list[np.ndarray]
    history: list[np.ndarray]
    gains: list[np.ndarray | None]
    w_out: np.ndarray | None
    rates: np.ndarray
    alphas: np.ndarray

    @classmethod
    def from_params(cls, params: BlockParams, cfg: MCSDConfig, betas=None, alphas=None) -> "BlockKernel":
        dt = cfg.dtype
        betas = channel_betas(cfg.channels) if betas is None else np.asarray(betas)
        alphas = channel_alphas(cfg.channels) if alphas is None else np.asarray(alphas)
        return cls(
            cfg=cfg,
            kinds=tuple(s.kind for s in params.sections),
            linear=[s.linear.data.astype(dt, copy=False) for s in params.sections],
            history=[s.history.data.astype(dt, copy=False) for s in params.sections],
            gains=[None if s.norm_gain is None else s.norm_gain.data.astype(dt, copy=False)
                   for s in params.sections],
            w_out=None if params.w_out is None else params.w_out.data.astype(dt, copy=False),
            rates=np.exp(-betas).astype(dt),
            alphas=alphas.astype(dt),
        )


def _rms_norm(x: np.ndarray, gain: np.ndarray | None) -> np.ndarray:
    out = x * (1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS))
    tally(4 * x.size)
    return out if gain is None else out * gain


def _gate(kind: str, feature: np.ndarray, lin: np.ndarray, gain) -> np.ndarray:
    if kind == "slope":
        tally(4 * lin.size)
        return feature * _sigmoid_np(feature) * lin
    tally(3 * lin.size)
    return _rms_norm(feature, gain) * _sigmoid_np(lin)


def _combine(kernel: BlockKernel, thetas: list[np.ndarray]) -> np.ndarray:
    """Merge per-section ``(..., C, D_c)`` outputs into ``(..., D)``."""
    cfg = kernel.cfg
    lead = thetas[0].shape[:-2]
    if cfg.combine_mode == "sum":
        out = thetas[0]
        for t in thetas[1:]:
            out = out + t
        tally(out.size * (len(thetas) - 1))
        return out.reshape(*lead, cfg.model_dim)
    merged = thetas[0] if len(thetas) == 1 else np.concatenate(thetas, axis=-1)
    merged = merged.reshape(*lead, len(thetas) * cfg.model_dim)
    tally(matmul_flops(merged.shape if merged.ndim > 1 else (1,) + merged.shape, kernel.w_out.shape))
    return merged @ kernel.w_out


def _project(xc: np.ndarray, w: np.ndarray) -> np.ndarray:
    # xc: (..., C, 1, D_c) against per-channel (C, D_c, D_c)
    tally(matmul_flops(xc.shape, w.shape))
    return xc @ w


def block_step(state: RecurrentState, layer: int, x: np.ndarray, kernel: BlockKernel) -> np.ndarray:
    """Consume one token per sequence (``x`` is ``(batch, D)``) and return ``(batch, D)``.

    Advances ``state`` for ``layer`` in place.
    """
    cfg = kernel.cfg
    if x.ndim != 2 or x.shape != (state.batch, cfg.model_dim):
        raise ContractError(f"step input {x.shape} does not match state batch {state.batch} / D {cfg.model_dim}")
    if state.sections.shape[1] != len(kernel.kinds) or state.sections.shape[3:] != (cfg.channels, cfg.per_channel_dim):
        raise ContractError("recurrent state does not match the block configuration")
    pos = int(state.position[layer])
    b = x.shape[0]
    xc = x.reshape(b, cfg.channels, 1, cfg.per_channel_dim)
    thetas = []
    denom = state.denominators[layer]
    new_denom = denom
    for i, kind in enumerate(kernel.kinds):
        lin = _project(xc, kernel.linear[i])[:, :, 0, :]
        hist = _project(xc, kernel.history[i])[:, :, 0, :]
        s = state.sections[layer, i]
        if kind == "slope":
            feat, s_new, new_denom = slope_step(s, denom, hist, kernel.rates, pos)
        else:
            feat, s_new = decay_step(s, hist, kernel.alphas, pos)
        thetas.append(_gate(kind, feat, lin, kernel.gains[i]))
        state.sections[layer, i] = s_new
    if "slope" in kernel.kinds:
        state.denominators[layer] = new_denom
    else:
        state.denominators[layer] = 1.0 + kernel.rates * denom
    state.position[layer] = pos + 1
    return _combine(kernel, thetas)


def prefill(state: RecurrentState, layer: int, x: np.ndarray, kernel: BlockKernel) -> np.ndarray:
    """Ingest ``x`` (``(batch, N, D)``) for ``layer``; equivalent to N ``block_step`` calls.

    Projections and gating are batched over positions; only the state scan
    runs token by token.
    """
    cfg = kernel.cfg
    if x.ndim != 3 or x.shape[0] != state.batch or x.shape[2] != cfg.model_dim:
        raise ContractError(f"prefill input {x.shape} does not match state batch {state.batch} / D {cfg.model_dim}")
    b, n, _ = x.shape
    if n == 0:
        return np.zeros((b, 0, cfg.model_dim), dtype=x.dtype)
    C, Dc = cfg.channels, cfg.per_channel_dim
    # (B, C, N, Dc)
    xc = np.swapaxes(x.reshape(b, n, C, Dc), 1, 2)
    start = int(state.position[layer])
    thetas = []
    denom0 = state.denominators[layer].copy()
    for i, kind in enumerate(kernel.kinds):
        lin = np.swapaxes(xc @ kernel.linear[i], 1, 2)  # (B, N, C, Dc)
        hist = np.swapaxes(xc @ kernel.history[i], 1, 2)
        feats = np.empty_like(hist)
        s = state.sections[layer, i]
        denom = denom0
        for t in range(n):
            if kind == "slope":
                feats[:, t], s, denom = slope_step(s, denom, hist[:, t], kernel.rates, start + t)
            else:
                feats[:, t], s = decay_step(s, hist[:, t], kernel.alphas, start + t)
        state.sections[layer, i] = s
        thetas.append(_gate(kind, feats, lin, kernel.gains[i]))
    denom = denom0
    for _ in range(n):
        denom = 1.0 + kernel.rates * denom
    state.denominators[layer] = denom
    state.position[layer] = start + n
    return _combine(kernel, thetas)


def step_sequence(kernel: BlockKernel, x: np.ndarray) -> np.ndarray:
    """Run a fresh single-layer state over ``x`` (``(N, D)`` or ``(B, N, D)``) token by token."""
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    if xb.ndim != 3:
        raise ShapeError(f"expected (N, D) or (B, N, D) input, got {x.shape}")
    state = init_state(kernel.cfg, layers=1, batch=xb.shape[0])
    out = np.stack([block_step(state, 0, xb[:, t], kernel) for t in range(xb.shape[1])], axis=1)
    return out[0] if squeeze else out
