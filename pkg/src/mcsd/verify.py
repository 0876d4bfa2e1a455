"""Property suite behind ``mcsd verify``.

Each check reports its tolerance and the observed error, so the report is
machine-readable and a failure says by how much it failed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .block import (
    VARIANTS,
    MCSDConfig,
    build_channel_masks,
    build_decay_mask,
    build_slope_mask,
    channel_alphas,
    channel_betas,
    init_block_params,
    mcsd_forward,
)
from .flops import FlopCounter
from .model import Decoder, ModelConfig, ModelParams, cross_entropy, forward_parallel, init_params
from .recurrent import BlockKernel, RecurrentState, block_step, decay_step, init_state, slope_step
from .tensor import Tensor, grad_check


@dataclass
class CheckResult:
    name: str
    tolerance: float
    observed: float
    passed: bool

    def as_row(self) -> str:
        return f"{self.name},{self.tolerance:.3g},{self.observed:.3e},{'pass' if self.passed else 'FAIL'}"


def rel_err(a: np.ndarray, ref: np.ndarray) -> float:
    """Max absolute deviation scaled by the reference's largest magnitude."""
    a, ref = np.asarray(a, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    scale = float(np.max(np.abs(ref))) if ref.size else 0.0
    return float(np.max(np.abs(a - ref))) / max(scale, 1e-300) if ref.size else 0.0


def _check(name: str, tol: float, observed: float) -> CheckResult:
    return CheckResult(name, tol, observed, bool(observed <= tol))


# ------------------------------------------------------------------ masks

def check_masks() -> list[CheckResult]:
    worst_sum = 0.0
    worst_future = 0.0
    for C in (1, 2, 4, 8, 10):
        for b in channel_betas(C):
            m = build_slope_mask(64, b)
            worst_sum = max(worst_sum, float(np.max(np.abs(m.sum(axis=1) - 1.0))))
            worst_future = max(worst_future, float(np.max(np.abs(np.triu(m[1:], k=1)))),
                               float(np.max(np.abs(np.diag(m)[1:]))))
    s3 = build_slope_mask(3, math.log(2))
    golden = max(
        float(np.max(np.abs(s3[2] - [1 / 3, 2 / 3, 0]))),
        float(np.max(np.abs(build_decay_mask(3, 0.5) - [[1, 0, 0], [0.5, 0, 0], [0.25, 0.5, 0]]))),
        abs(channel_betas(10)[9] - 2.0**-8),
        abs(channel_betas(1)[0] - 2.0**-8),
        abs(channel_alphas(4)[0] - 0.96875),
    )
    return [
        _check("slope_mask_row_sums", 1e-12, worst_sum),
        _check("slope_mask_strict_past", 0.0, worst_future),
        _check("mask_golden_values", 1e-12, golden),
    ]


# ------------------------------------------------------------ recurrences

def check_derivation(draws: int = 20, n: int = 512, seed: int = 0) -> list[CheckResult]:
    """Brute-force weighted sums against the O(1) recurrences at every position up to ``n``."""
    rng = np.random.default_rng(seed)
    slope_worst = decay_worst = 0.0
    for _ in range(draws):
        beta = float(rng.uniform(2.0**-8, 1.0))
        alpha = float(rng.uniform(0.9, 1.0 - 2.0**-14))
        v = rng.normal(size=(n, 1, 4))
        rate = np.array([math.exp(-beta)])
        s = np.zeros((1, 4))
        d = np.zeros((1, 4))
        g = np.zeros(1)
        for pos in range(n):
            feat_s, s, g = slope_step(s, g, v[pos], rate, pos)
            feat_d, d = decay_step(d, v[pos], np.array([alpha]), pos)
            if pos == 0:
                ref_s = ref_d = v[0]
            else:
                j = np.arange(1, pos + 1)
                ws = np.exp(-j * beta)
                ref_s = np.tensordot(ws, v[pos - j], axes=1) / ws.sum()
                ref_d = np.tensordot(alpha ** j.astype(float), v[pos - j], axes=1)
            slope_worst = max(slope_worst, rel_err(feat_s, ref_s))
            decay_worst = max(decay_worst, rel_err(feat_d, ref_d))
    return [
        _check("slope_recurrence_vs_bruteforce", 1e-12, slope_worst),
        _check("decay_recurrence_vs_bruteforce", 1e-12, decay_worst),
    ]


def check_denominator(n_max: int = 100_000) -> CheckResult:
    rate = np.exp(-channel_betas(10))
    g = np.zeros_like(rate)
    worst = 0.0
    for n in range(1, n_max + 1):
        g = 1.0 + rate * g
        if n % 97 == 0 or n == n_max or n < 64:
            closed = (1.0 - rate**n) / (1.0 - rate)
            worst = max(worst, float(np.max(np.abs(g - closed) / closed)))
    return _check("slope_denominator_closed_form", 1e-12, worst)


# ------------------------------------------------------------ equivalence

def block_equivalence(cfg: MCSDConfig, n: int, seed: int = 0, batch: int = 1,
                      corrupt: Callable[[RecurrentState, int], None] | None = None, std: float | None = None) -> float:
    """Relative error between stepped outputs and ``mcsd_forward`` on random data.

    ``corrupt(state, position)`` runs before every step and may tamper with the state.
    """
    rng = np.random.default_rng(seed)
    params = init_block_params(cfg, rng, std if std is not None else 1.0 / math.sqrt(cfg.per_channel_dim))
    masks = build_channel_masks(_with_len(cfg, n))
    x = rng.normal(size=(batch, n, cfg.model_dim)).astype(cfg.dtype)
    parallel = mcsd_forward(Tensor(x), params, masks, _with_len(cfg, n)).data
    kernel = BlockKernel.from_params(params, cfg)
    state = init_state(cfg, 1, batch)
    outs = []
    for t in range(n):
        if corrupt is not None:
            corrupt(state, t)
        outs.append(block_step(state, 0, x[:, t], kernel))
    return rel_err(np.stack(outs, axis=1), parallel)


def decay_state_fault(cfg: MCSDConfig, at: int, delta: float = 1.0) -> Callable[[RecurrentState, int], None]:
    """A ``corrupt`` hook that adds ``delta`` to every decay-section state right before step ``at``."""
    decay_idx = [i for i, kind in enumerate(cfg.sections) if kind == "decay"]
    if not decay_idx:
        raise ValueError(f"variant {cfg.variant} has no decay section to corrupt")

    def corrupt(state: RecurrentState, position: int) -> None:
        if position == at:
            state.sections[:, decay_idx] += delta

    return corrupt


def _with_len(cfg: MCSDConfig, n: int) -> MCSDConfig:
    return MCSDConfig(cfg.model_dim, cfg.channels, max(n, 1), cfg.combine_mode, cfg.variant, cfg.precision)


def model_equivalence(params: ModelParams, cfg: ModelConfig, n: int, seed: int = 0, prefill_len: int = 0) -> float:
    """Decoder logits (optional prefill, then steps) against ``forward_parallel`` on ``n`` random tokens."""
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=n)
    parallel = forward_parallel(tokens, params, cfg).data
    dec = Decoder(params, cfg, batch=1)
    parts = []
    if prefill_len:
        parts.append(dec.prefill(tokens[None, :prefill_len], all_logits=True)[0])
    for t in range(prefill_len, n):
        parts.append(dec.step(tokens[t:t + 1]))
    return rel_err(np.concatenate(parts, axis=0), parallel)


def check_block_equivalence(seed: int = 0, n: int = 32) -> list[CheckResult]:
    out = []
    for variant in VARIANTS:
        for mode in ("concat", "sum"):
            cfg = MCSDConfig(16, 4, n, mode, variant, 64)
            out.append(_check(f"equivalence_{variant}_{mode}", 1e-9, block_equivalence(cfg, n, seed)))
    return out


# --------------------------------------------------------------- causality

def causality_max_change(params: ModelParams, cfg: ModelConfig, n: int, trials: int, seed: int = 0) -> float:
    """Largest change in logits before a perturbed position; 0.0 means bitwise identical."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        tokens = rng.integers(0, cfg.vocab_size, size=n)
        k = int(rng.integers(0, n))
        other = tokens.copy()
        other[k:] = rng.integers(0, cfg.vocab_size, size=n - k)
        a = forward_parallel(tokens, params, cfg).data[:k]
        b = forward_parallel(other, params, cfg).data[:k]
        if not np.array_equal(a.view(np.uint8), b.view(np.uint8)):
            worst = max(worst, float(np.max(np.abs(a - b))) or np.finfo(float).tiny)
    return worst


# --------------------------------------------------------------- gradients

def primitive_grad_errors(seed: int = 0) -> dict[str, float]:
    """Relative gradient error of each autodiff primitive against central differences."""
    rng = np.random.default_rng(seed)

    def leaf(*shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)

    w3 = rng.uniform(0.5, 1.5, size=(2, 3, 4))
    w4 = rng.uniform(0.5, 1.5, size=(2, 3, 5))
    b = leaf(4, 5)
    a = leaf(2, 3, 4)
    gain = leaf(4, lo=0.5, hi=1.5)
    other = leaf(2, 3, 4)
    ids = rng.integers(0, 6, size=(2, 3))
    targets = rng.integers(0, 4, size=(2, 3))

    def weighted(t, w):
        return T.sum_all(t * Tensor(w))

    checks = {
        "matmul": (lambda xs: weighted(xs[0] @ xs[1], w4), [a, b]),
        "add": (lambda xs: weighted(xs[0] + xs[1], w3), [a, other]),
        "sub": (lambda xs: weighted(xs[0] - xs[1], w3), [a, other]),
        "mul": (lambda xs: weighted(xs[0] * xs[1], w3), [a, other]),
        "scale": (lambda x: weighted(x * 1.7, w3), a),
        "sigmoid": (lambda x: weighted(T.sigmoid(x), w3), a),
        "silu": (lambda x: weighted(T.silu(x), w3), leaf(2, 3, 4, lo=-0.5, hi=2.0)),
        "gelu": (lambda x: weighted(T.gelu(x), w3), leaf(2, 3, 4, lo=-0.3, hi=2.0)),
        "row_softmax": (lambda x: weighted(T.row_softmax(x), w3), a),
        "rms_norm": (lambda xs: weighted(T.rms_norm(xs[0], xs[1]), w3), [a, gain]),
        "concat_last_axis": (lambda xs: weighted(T.concat_last_axis(xs), rng_w(2, 3, 8)), [a, other]),
        "reshape_swapaxes": (lambda x: weighted(T.swapaxes(x.reshape(3, 2, 4), 0, 1), w3), a),
        "mean": (lambda x: T.mean(x * x), a),
        "embedding": (lambda x: weighted(T.embedding(x, ids), w3), leaf(6, 4)),
        "softmax_cross_entropy": (lambda x: T.softmax_cross_entropy(x, targets), a),
    }
    return {name: grad_check(f, x) for name, (f, x) in checks.items()}


def rng_w(*shape) -> np.ndarray:
    return np.random.default_rng(123).uniform(0.5, 1.5, size=shape)


GRAD_TOY = ModelConfig(vocab_size=16, model_dim=8, channels=2, layers=2, seq_len=8)


def model_grad_error(seed: int = 0, cfg: ModelConfig = GRAD_TOY, std: float = 0.5) -> float:
    """Gradient check of the full model loss w.r.t. every parameter (64-bit, N=seq_len)."""
    params = init_params(cfg, seed=seed, std=std)
    rng = np.random.default_rng(seed + 1)
    tokens = rng.integers(0, cfg.vocab_size, size=cfg.seq_len + 1)
    x, y = tokens[:-1], tokens[1:]

    def loss(_):
        return cross_entropy(forward_parallel(x, params, cfg), y)

    return grad_check(loss, params.parameters(), h=1e-5)


def check_gradients(seed: int = 0) -> list[CheckResult]:
    out = [_check(f"grad_{k}", 1e-6, v) for k, v in primitive_grad_errors(seed).items()]
    out.append(_check("grad_full_model", 1e-4, model_grad_error(seed)))
    return out


# ---------------------------------------------------------- constant state

def decode_footprint(params: ModelParams, cfg: ModelConfig, n_tokens: int, seed: int = 0) -> tuple[int, int]:
    """``(state bytes, flops of the final step)`` after decoding ``n_tokens`` tokens."""
    rng = np.random.default_rng(seed)
    dec = Decoder(params, cfg)
    dec.prefill(rng.integers(0, cfg.vocab_size, size=(1, 1)))
    for _ in range(n_tokens - 2):
        dec.step(rng.integers(0, cfg.vocab_size, size=1))
    with FlopCounter() as fc:
        dec.step(rng.integers(0, cfg.vocab_size, size=1))
    return dec.nbytes, fc.flops


def check_constant_state(seed: int = 0, long: int = 10_000) -> list[CheckResult]:
    cfg = ModelConfig(vocab_size=32, model_dim=8, channels=2, layers=2, seq_len=16)
    params = init_params(cfg, seed=seed)
    b10, f10 = decode_footprint(params, cfg, 10, seed)
    b_long, f_long = decode_footprint(params, cfg, long, seed)
    return [
        _check("state_bytes_constant", 0.0, float(abs(b_long - b10))),
        _check("step_flops_constant", 0.0, float(abs(f_long - f10))),
    ]


# ------------------------------------------------------------------ driver

def run_verify(seed: int = 0, params: ModelParams | None = None, cfg: ModelConfig | None = None,
               quick: bool = False) -> list[CheckResult]:
    """Full suite; with ``params`` the model-level checks use that model."""
    results = []
    results += check_masks()
    results += check_derivation(draws=5 if quick else 20)
    results.append(check_denominator(10_000 if quick else 100_000))
    results += check_block_equivalence(seed)
    if params is None:
        cfg = ModelConfig(vocab_size=64, model_dim=16, channels=4, layers=2, seq_len=64)
        params = init_params(cfg, seed=seed, std=0.3)
    n = min(cfg.seq_len, 48)
    tol = 1e-9 if cfg.precision == 64 else 1e-3
    results.append(_check("model_logits_equivalence", tol, model_equivalence(params, cfg, n, seed, prefill_len=n // 3)))
    results.append(_check("causality_bitwise", 0.0, causality_max_change(params, cfg, n, 10 if quick else 50, seed)))
    results += check_gradients(seed)
    results += check_constant_state(seed, 1_000 if quick else 10_000)
    return results
