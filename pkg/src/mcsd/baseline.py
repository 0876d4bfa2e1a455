"""Plain causal multi-head attention model with a KV cache, used as the benchmark baseline.

It shares the embedding, RMSNorm and GeGLU MLP stack with the MCSD model and
swaps the block for softmax attention. Positions enter through fixed
sinusoidal encodings added to the embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .block import INIT_STD, RMS_EPS, block_param_count, dtype_for
from .errors import ConfigError, ContractError, ShapeError
from .flops import matmul_flops, tally
from .model import ModelConfig, _check_tokens, _gelu_np, _mm, _rms_np
from .tensor import Tensor


@dataclass(frozen=True)
class BaselineConfig:
    vocab_size: int = 256
    model_dim: int = 128
    heads: int = 4
    layers: int = 4
    seq_len: int = 256
    mlp_hidden: int = 344
    precision: int = 64

    def __post_init__(self):
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} must be divisible by heads {self.heads}")
        if self.layers < 1 or self.mlp_hidden < 1 or self.vocab_size < 2:
            raise ConfigError("layers, mlp_hidden must be positive and vocab_size >= 2")
        dtype_for(self.precision)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def dtype(self):
        return dtype_for(self.precision)

    def with_(self, **changes) -> "BaselineConfig":
        return replace(self, **changes)


def baseline_param_count(cfg: BaselineConfig) -> int:
    D, H, V = cfg.model_dim, cfg.mlp_hidden, cfg.vocab_size
    return 2 * V * D + cfg.layers * (2 * D + 4 * D * D + 3 * D * H) + D


def matched_baseline_config(mcfg: ModelConfig) -> BaselineConfig:
    """Baseline with ``heads = channels`` whose MLP width absorbs the mixer size difference."""
    D = mcfg.model_dim
    mixer_gap = 4 * D * D - block_param_count(mcfg.block)
    hidden = max(1, mcfg.mlp_hidden - round(mixer_gap / (3 * D)))
    return BaselineConfig(
        vocab_size=mcfg.vocab_size,
        model_dim=D,
        heads=mcfg.channels,
        layers=mcfg.layers,
        seq_len=mcfg.seq_len,
        mlp_hidden=hidden,
        precision=mcfg.precision,
    )


def sinusoidal_positions(start: int, n: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(start, start + n, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)[:, : dim - dim // 2]
    return out.astype(dtype)


@dataclass
class AttentionLayer:
    norm1: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2: Tensor
    w1: Tensor
    w2: Tensor
    w3: Tensor


@dataclass
class BaselineParams:
    embedding: Tensor
    layers: list[AttentionLayer]
    final_norm: Tensor
    head: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                out[f"layers.{i}.{f.name}"] = getattr(layer, f.name)
        out["final_norm"] = self.final_norm
        out["head"] = self.head
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_tensors().values())

    def num_elements(self) -> int:
        return sum(t.data.size for t in self.parameters())


def init_baseline_params(cfg: BaselineConfig, seed: int = 0, std: float = INIT_STD) -> BaselineParams:
    rng = np.random.default_rng(seed)
    dt = cfg.dtype
    D, H, V = cfg.model_dim, cfg.mlp_hidden, cfg.vocab_size

    def w(*shape):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    def ones():
        return Tensor(np.ones(D, dtype=dt), requires_grad=True)

    layers = [
        AttentionLayer(ones(), w(D, D), w(D, D), w(D, D), w(D, D), ones(), w(D, H), w(D, H), w(H, D))
        for _ in range(cfg.layers)
    ]
    return BaselineParams(w(V, D), layers, ones(), w(D, V))


# ----------------------------------------------------------- parallel path

def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1).astype(dtype)


def attention_forward(x: Tensor, layer: AttentionLayer, cfg: BaselineConfig) -> Tensor:
    """Causal softmax attention over ``x[..., N, D]``."""
    if x.ndim < 2 or x.shape[-1] != cfg.model_dim:
        raise ShapeError(f"attention input {x.shape} does not end in model_dim {cfg.model_dim}")
    n = x.shape[-2]
    lead = x.shape[:-2]
    H, dh = cfg.heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return T.swapaxes(t.reshape(*lead, n, H, dh), -3, -2)

    q, k, v = heads(x @ layer.wq), heads(x @ layer.wk), heads(x @ layer.wv)
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    probs = T.row_softmax(scores + Tensor(causal_mask(n, x.dtype)))
    out = T.swapaxes(probs @ v, -3, -2).reshape(*lead, n, cfg.model_dim)
    return out @ layer.wo


def baseline_forward(tokens, params: BaselineParams, cfg: BaselineConfig) -> Tensor:
    tokens = _check_tokens(tokens, cfg.vocab_size)
    n = tokens.shape[-1]
    x = T.embedding(params.embedding, tokens) + Tensor(sinusoidal_positions(0, n, cfg.model_dim, cfg.dtype))
    for layer in params.layers:
        x = x + attention_forward(T.rms_norm(x, layer.norm1, RMS_EPS), layer, cfg)
        h = T.rms_norm(x, layer.norm2, RMS_EPS)
        x = x + (T.gelu(h @ layer.w1) * (h @ layer.w2)) @ layer.w3
    return T.rms_norm(x, params.final_norm, RMS_EPS) @ params.head


# ---------------------------------------------------------------- KV cache

class KVCache:
    """Per-layer key/value store of shape ``(layers, batch, heads, length, head_dim)``.

    Storage grows geometrically; ``nbytes`` reports the live entries only,
    ``allocated_bytes`` the backing buffers. ``max_bytes`` caps the live size
    and raises MemoryError when exceeded.
    """

    def __init__(self, cfg: BaselineConfig, batch: int = 1, capacity: int = 64, max_bytes: int | None = None):
        self.cfg = cfg
        self.batch = batch
        self.max_bytes = max_bytes
        shape = (cfg.layers, batch, cfg.heads, max(1, capacity), cfg.head_dim)
        self.k = np.zeros(shape, dtype=cfg.dtype)
        self.v = np.zeros(shape, dtype=cfg.dtype)
        self.lengths = np.zeros(cfg.layers, dtype=np.int64)

    @property
    def length(self) -> int:
        return int(self.lengths[-1])

    @property
    def capacity(self) -> int:
        return self.k.shape[3]

    @staticmethod
    def bytes_for(cfg: BaselineConfig, length: int, batch: int = 1) -> int:
        return 2 * cfg.layers * batch * cfg.heads * cfg.head_dim * length * np.dtype(cfg.dtype).itemsize

    @property
    def nbytes(self) -> int:
        return self.bytes_for(self.cfg, self.length, self.batch)

    @property
    def allocated_bytes(self) -> int:
        return int(self.k.nbytes + self.v.nbytes)

    def reserve(self, length: int) -> None:
        if self.max_bytes is not None and self.bytes_for(self.cfg, length, self.batch) > self.max_bytes:
            raise MemoryError(f"KV cache of {length} positions exceeds budget of {self.max_bytes} bytes")
        if length <= self.capacity:
            return
        cap = self.capacity
        while cap < length:
            cap *= 2
        shape = self.k.shape[:3] + (cap,) + self.k.shape[4:]
        for name in ("k", "v"):
            old = getattr(self, name)
            new = np.zeros(shape, dtype=old.dtype)
            new[:, :, :, : old.shape[3]] = old
            setattr(self, name, new)

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> int:
        """Store ``(batch, heads, m, head_dim)`` keys/values; returns the new length."""
        start = int(self.lengths[layer])
        m = k.shape[2]
        self.reserve(start + m)
        self.k[layer, :, :, start:start + m] = k
        self.v[layer, :, :, start:start + m] = v
        self.lengths[layer] = start + m
        return start + m


@dataclass
class AttentionKernel:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def from_layer(cls, layer: AttentionLayer, dtype) -> "AttentionKernel":
        return cls(*(getattr(layer, n).data.astype(dtype) for n in ("wq", "wk", "wv", "wo")))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_step(cache: KVCache, layer: int, x: np.ndarray, kernel: AttentionKernel) -> np.ndarray:
    """Attend one new token per sequence (``x`` is ``(batch, D)``) over the cached prefix plus itself."""
    cfg = cache.cfg
    if x.shape != (cache.batch, cfg.model_dim):
        raise ContractError(f"decode input {x.shape} does not match cache batch {cache.batch} / D {cfg.model_dim}")
    b, H, dh = cache.batch, cfg.heads, cfg.head_dim
    q = _mm(x, kernel.wq).reshape(b, H, 1, dh)
    k = _mm(x, kernel.wk).reshape(b, H, 1, dh)
    v = _mm(x, kernel.wv).reshape(b, H, 1, dh)
    n = cache.append(layer, k, v)
    keys = cache.k[layer, :, :, :n]
    vals = cache.v[layer, :, :, :n]
    scores = (q @ np.swapaxes(keys, -1, -2)) * (1.0 / math.sqrt(dh))
    probs = _softmax_np(scores)
    tally(2 * matmul_flops(q.shape, (b, H, dh, n)) + 5 * probs.size)
    out = (probs @ vals).reshape(b, cfg.model_dim)
    return _mm(out, kernel.wo)


def _prefill_attention(cache: KVCache, layer: int, x: np.ndarray, kernel: AttentionKernel) -> np.ndarray:
    cfg = cache.cfg
    b, n, _ = x.shape
    H, dh = cfg.heads, cfg.head_dim

    def heads(t):
        return np.swapaxes(t.reshape(b, n, H, dh), 1, 2)

    q, k, v = heads(x @ kernel.wq), heads(x @ kernel.wk), heads(x @ kernel.wv)
    start = int(cache.lengths[layer])
    total = cache.append(layer, k, v)
    keys = cache.k[layer, :, :, :total]
    vals = cache.v[layer, :, :, :total]
    scores = (q @ np.swapaxes(keys, -1, -2)) * (1.0 / math.sqrt(dh))
    mask = np.triu(np.full((n, total), -np.inf), k=start + 1)
    probs = _softmax_np(scores + mask)
    out = np.swapaxes(probs @ vals, 1, 2).reshape(b, n, cfg.model_dim)
    return out @ kernel.wo


class BaselineDecoder:
    """KV-cached decoder mirroring :class:`mcsd.model.Decoder`'s interface."""

    def __init__(self, params: BaselineParams, cfg: BaselineConfig, batch: int = 1,
                 capacity: int = 64, max_bytes: int | None = None):
        self.cfg = cfg
        dt = cfg.dtype
        self.kernels = [AttentionKernel.from_layer(l, dt) for l in params.layers]
        self.norm1 = [l.norm1.data.astype(dt) for l in params.layers]
        self.norm2 = [l.norm2.data.astype(dt) for l in params.layers]
        self.mlp = [(l.w1.data.astype(dt), l.w2.data.astype(dt), l.w3.data.astype(dt)) for l in params.layers]
        self.embedding = params.embedding.data.astype(dt)
        self.final_norm = params.final_norm.data.astype(dt)
        self.head = params.head.data.astype(dt)
        self.cache = KVCache(cfg, batch, capacity, max_bytes)

    @property
    def batch(self) -> int:
        return self.cache.batch

    @property
    def nbytes(self) -> int:
        return self.cache.nbytes

    def _mlp(self, i: int, h: np.ndarray) -> np.ndarray:
        w1, w2, w3 = self.mlp[i]
        a = _mm(h, w1)
        tally(8 * a.size)
        return _mm(_gelu_np(a) * _mm(h, w2), w3)

    def prefill(self, tokens, all_logits: bool = False) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        tokens = _check_tokens(tokens, self.cfg.vocab_size)
        if tokens.shape[0] != self.batch:
            raise ContractError(f"prefill batch {tokens.shape[0]} does not match decoder batch {self.batch}")
        start = self.cache.length
        n = tokens.shape[1]
        x = self.embedding[tokens] + sinusoidal_positions(start, n, self.cfg.model_dim, self.cfg.dtype)
        for i, kernel in enumerate(self.kernels):
            x = x + _prefill_attention(self.cache, i, _rms_np(x, self.norm1[i]), kernel)
            x = x + self._mlp(i, _rms_np(x, self.norm2[i]))
        h = x if all_logits else x[:, -1]
        return _mm(_rms_np(h, self.final_norm), self.head)

    def step(self, tokens) -> np.ndarray:
        tokens = _check_tokens(np.asarray(tokens).reshape(-1), self.cfg.vocab_size)
        if tokens.shape[0] != self.batch:
            raise ContractError(f"step batch {tokens.shape[0]} does not match decoder batch {self.batch}")
        pos = self.cache.length
        x = self.embedding[tokens] + sinusoidal_positions(pos, 1, self.cfg.model_dim, self.cfg.dtype)[0]
        for i, kernel in enumerate(self.kernels):
            x = x + decode_step(self.cache, i, _rms_np(x, self.norm1[i]), kernel)
            x = x + self._mlp(i, _rms_np(x, self.norm2[i]))
        return _mm(_rms_np(x, self.final_norm), self.head)
