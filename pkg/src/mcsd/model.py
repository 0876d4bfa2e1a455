"""The MCSD language model: embedding, stacked blocks with gated MLPs, head.

Each layer is ``x += block(rms_norm(x)); x += mlp(rms_norm(x))`` with a GeGLU
MLP ``(gelu(x W1) * x W2) W3``. A final RMSNorm precedes the vocabulary head.
``forward_parallel`` is the differentiable training path; :class:`Decoder`
runs the same weights through the constant-state streaming path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .block import (
    INIT_STD,
    RMS_EPS,
    BlockParams,
    ChannelMasks,
    MCSDConfig,
    SectionParams,
    block_param_count,
    build_channel_masks,
    init_block_params,
    mcsd_forward,
)
from .errors import ConfigError, ContractError, VocabularyError
from .flops import matmul_flops, tally
from .recurrent import BlockKernel, RecurrentState, block_step, init_state, prefill
from .tensor import Tensor, _sigmoid_np


def default_mlp_hidden(model_dim: int, channels: int) -> int:
    h = math.ceil(8 * model_dim / 3)
    return -(-h // channels) * channels


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    model_dim: int = 128
    channels: int = 4
    layers: int = 4
    seq_len: int = 256
    mlp_hidden: int = 0  # 0 selects default_mlp_hidden
    combine_mode: str = "concat"
    variant: str = "slope_decay"
    precision: int = 64
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError(f"layers must be positive, got {self.layers}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if self.mlp_hidden < 0:
            raise ConfigError(f"mlp_hidden must be positive, got {self.mlp_hidden}")
        self.block  # validates the block fields
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", default_mlp_hidden(self.model_dim, self.channels))

    @property
    def block(self) -> MCSDConfig:
        return MCSDConfig(
            model_dim=self.model_dim,
            channels=self.channels,
            seq_len=self.seq_len,
            combine_mode=self.combine_mode,
            variant=self.variant,
            precision=self.precision,
        )

    @property
    def dtype(self):
        return self.block.dtype

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k].type, v) for k, v in d.items()})

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _coerce(type_name, value):
    if not isinstance(value, str):
        return value
    t = type_name if isinstance(type_name, str) else type_name.__name__
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    if t == "bool":
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    return value


@dataclass
class LayerParams:
    norm1: Tensor
    block: BlockParams
    norm2: Tensor
    w1: Tensor
    w2: Tensor
    w3: Tensor


@dataclass
class ModelParams:
    embedding: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    head: Tensor | None = None

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            out[p + "norm1"] = layer.norm1
            for k, v in layer.block.named().items():
                out[p + "block." + k] = v
            out[p + "norm2"] = layer.norm2
            out[p + "mlp.w1"] = layer.w1
            out[p + "mlp.w2"] = layer.w2
            out[p + "mlp.w3"] = layer.w3
        out["final_norm"] = self.final_norm
        if self.head is not None:
            out["head"] = self.head
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.parameters())

    @classmethod
    def from_named(cls, cfg: ModelConfig, named: dict[str, np.ndarray]) -> "ModelParams":
        """Rebuild from ``named_tensors``-style arrays, cast to ``cfg.precision``."""
        dt = cfg.dtype
        expected = init_params(cfg, seed=0).named_tensors()
        missing = set(expected) - set(named)
        extra = set(named) - set(expected)
        if missing or extra:
            raise ConfigError(f"tensor names mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, t in expected.items():
            arr = np.asarray(named[k])
            if arr.shape != t.shape:
                raise ConfigError(f"tensor {k} has shape {arr.shape}, expected {t.shape}")
            t.data = arr.astype(dt)
        return _params_from_flat(cfg, expected)


def _params_from_flat(cfg: ModelConfig, named: dict[str, Tensor]) -> ModelParams:
    layers = []
    for i in range(cfg.layers):
        p = f"layers.{i}."
        sections = []
        for j, kind in enumerate(cfg.block.sections):
            s = f"{p}block.sec{j}."
            sections.append(SectionParams(kind, named[s + "linear"], named[s + "history"],
                                          named.get(s + "norm_gain")))
        block = BlockParams(sections, named.get(p + "block.w_out"))
        layers.append(LayerParams(named[p + "norm1"], block, named[p + "norm2"],
                                  named[p + "mlp.w1"], named[p + "mlp.w2"], named[p + "mlp.w3"]))
    return ModelParams(named["embedding"], layers, named["final_norm"], named.get("head"))


def init_params(cfg: ModelConfig, seed: int = 0, std: float = INIT_STD) -> ModelParams:
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    D, H, V = cfg.model_dim, cfg.mlp_hidden, cfg.vocab_size

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dt), requires_grad=True)

    embedding = w(V, D)
    layers = [
        LayerParams(ones(D), init_block_params(cfg.block, rng, std), ones(D), w(D, H), w(D, H), w(H, D))
        for _ in range(cfg.layers)
    ]
    head = None if cfg.tie_embeddings else w(D, V)
    return ModelParams(embedding, layers, ones(D), head)


def param_count(cfg: ModelConfig) -> int:
    """Closed-form element count of :func:`init_params`."""
    D, H, V, L = cfg.model_dim, cfg.mlp_hidden, cfg.vocab_size, cfg.layers
    per_layer = 2 * D + block_param_count(cfg.block) + 3 * D * H
    return V * D + L * per_layer + D + (0 if cfg.tie_embeddings else D * V)


# ----------------------------------------------------------- parallel path

def _check_tokens(tokens: np.ndarray, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise VocabularyError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise VocabularyError(f"token id out of range for vocabulary of {vocab}")
    return tokens


def geglu_mlp(x: Tensor, layer: LayerParams) -> Tensor:
    return (T.gelu(x @ layer.w1) * (x @ layer.w2)) @ layer.w3


def forward_parallel(tokens, params: ModelParams, cfg: ModelConfig, masks: ChannelMasks | None = None) -> Tensor:
    """Logits ``(..., N, vocab)`` for token ids ``(N,)`` or ``(B, N)``."""
    tokens = _check_tokens(tokens, cfg.vocab_size)
    if tokens.shape[-1] > cfg.seq_len:
        raise ContractError(f"sequence length {tokens.shape[-1]} exceeds seq_len {cfg.seq_len}")
    bcfg = cfg.block
    masks = masks or build_channel_masks(bcfg)
    x = T.embedding(params.embedding, tokens)
    for layer in params.layers:
        x = x + mcsd_forward(T.rms_norm(x, layer.norm1, RMS_EPS), layer.block, masks, bcfg)
        x = x + geglu_mlp(T.rms_norm(x, layer.norm2, RMS_EPS), layer)
    h = T.rms_norm(x, params.final_norm, RMS_EPS)
    head = params.head if params.head is not None else T.swapaxes(params.embedding, 0, 1)
    return h @ head


def cross_entropy(logits: Tensor, targets) -> Tensor:
    targets = _check_tokens(targets, logits.shape[-1])
    return T.softmax_cross_entropy(logits, targets)


# ---------------------------------------------------------- streaming path

def _rms_np(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    tally(5 * x.size)
    return x * (1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)) * gain


def _gelu_np(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(T._GELU_C)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * (x * x) * x)))


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    tally(matmul_flops(a.shape if a.ndim > 1 else (1,) + a.shape, b.shape))
    return a @ b


class Decoder:
    """Streaming decoder holding one :class:`RecurrentState` for ``batch`` sequences."""

    def __init__(self, params: ModelParams, cfg: ModelConfig, batch: int = 1, masks: ChannelMasks | None = None):
        self.cfg = cfg
        dt = cfg.dtype
        bcfg = cfg.block
        betas = masks.betas if masks is not None else None
        alphas = masks.alphas if masks is not None else None
        self.kernels = [BlockKernel.from_params(l.block, bcfg, betas, alphas) for l in params.layers]
        self.norm1 = [l.norm1.data.astype(dt) for l in params.layers]
        self.norm2 = [l.norm2.data.astype(dt) for l in params.layers]
        self.mlp = [(l.w1.data.astype(dt), l.w2.data.astype(dt), l.w3.data.astype(dt)) for l in params.layers]
        self.embedding = params.embedding.data.astype(dt)
        self.final_norm = params.final_norm.data.astype(dt)
        self.head = (params.head.data if params.head is not None else params.embedding.data.T).astype(dt)
        self.state: RecurrentState = init_state(bcfg, cfg.layers, batch)

    @property
    def batch(self) -> int:
        return self.state.batch

    @property
    def nbytes(self) -> int:
        return self.state.nbytes

    def _mlp(self, i: int, h: np.ndarray) -> np.ndarray:
        w1, w2, w3 = self.mlp[i]
        a = _mm(h, w1)
        tally(8 * a.size)
        return _mm(_gelu_np(a) * _mm(h, w2), w3)

    def prefill(self, tokens, all_logits: bool = False) -> np.ndarray:
        """Consume ``(B, N)`` token ids; returns last-position logits ``(B, V)``.

        With ``all_logits`` the result is ``(B, N, V)``.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        tokens = _check_tokens(tokens, self.cfg.vocab_size)
        if tokens.shape[0] != self.batch:
            raise ContractError(f"prefill batch {tokens.shape[0]} does not match decoder batch {self.batch}")
        x = self.embedding[tokens]
        for i, kernel in enumerate(self.kernels):
            x = x + prefill(self.state, i, _rms_np(x, self.norm1[i]), kernel)
            x = x + self._mlp(i, _rms_np(x, self.norm2[i]))
        h = x if all_logits else x[:, -1]
        return _mm(_rms_np(h, self.final_norm), self.head)

    def step(self, tokens) -> np.ndarray:
        """Consume one token per sequence (``(B,)``); returns logits ``(B, V)``."""
        tokens = _check_tokens(np.asarray(tokens).reshape(-1), self.cfg.vocab_size)
        if tokens.shape[0] != self.batch:
            raise ContractError(f"step batch {tokens.shape[0]} does not match decoder batch {self.batch}")
        x = self.embedding[tokens]
        for i, kernel in enumerate(self.kernels):
            x = x + block_step(self.state, i, _rms_np(x, self.norm1[i]), kernel)
            x = x + self._mlp(i, _rms_np(x, self.norm2[i]))
        return _mm(_rms_np(x, self.final_norm), self.head)


# ----------------------------------------------------------------- sampling

class Sampler:
    def __call__(self, logits: np.ndarray, rng: np.random.Generator) -> int:
        raise NotImplementedError


@dataclass
class Greedy(Sampler):
    def __call__(self, logits, rng):
        return int(np.argmax(logits))


@dataclass
class Temperature(Sampler):
    temperature: float = 1.0

    def __call__(self, logits, rng):
        if self.temperature <= 0:
            return int(np.argmax(logits))
        z = (logits - logits.max()) / self.temperature
        p = np.exp(z)
        p /= p.sum()
        return int(rng.choice(len(p), p=p))


@dataclass
class TopK(Sampler):
    k: int = 10
    temperature: float = 1.0

    def __call__(self, logits, rng):
        k = min(self.k, len(logits))
        idx = np.argpartition(logits, -k)[-k:]
        sub = Temperature(self.temperature)(logits[idx], rng)
        return int(idx[sub])


def parse_sampler(text: str) -> Sampler:
    """``greedy``, ``temp:<t>`` or ``topk:<k>``."""
    if text == "greedy":
        return Greedy()
    kind, _, arg = text.partition(":")
    try:
        if kind == "temp":
            return Temperature(float(arg))
        if kind == "topk":
            k = int(arg)
            if k < 1:
                raise ValueError
            return TopK(k)
    except ValueError:
        pass
    raise ConfigError(f"unknown sampler {text!r}; expected greedy, temp:<t> or topk:<k>")


def generate(
    prompt,
    max_new: int,
    params: ModelParams,
    cfg: ModelConfig,
    sampler: Sampler | str = "greedy",
    seed: int = 0,
    on_logits: Callable[[np.ndarray], None] | None = None,
) -> list[int]:
    """Prefill ``prompt`` then decode ``max_new`` tokens with constant state.

    ``on_logits`` receives each next-token logit vector before sampling.
    """
    if max_new < 0:
        raise ConfigError(f"max_new must be non-negative, got {max_new}")
    prompt = _check_tokens(np.asarray(prompt).reshape(-1), cfg.vocab_size)
    if prompt.size == 0:
        raise ContractError("prompt must be non-empty")
    if isinstance(sampler, str):
        sampler = parse_sampler(sampler)
    rng = np.random.default_rng(seed)
    dec = Decoder(params, cfg, batch=1)
    logits = dec.prefill(prompt[None])[0]
    out: list[int] = []
    for i in range(max_new):
        if on_logits is not None:
            on_logits(logits)
        tok = sampler(logits, rng)
        out.append(tok)
        if i + 1 < max_new:
            logits = dec.step([tok])[0]
    return out
