"""Decode benchmark harness: state/cache bytes, per-token latency, throughput.

Memory is the model-managed decode footprint (recurrent state or KV cache),
not process RSS. Timings use ``time.perf_counter`` and report the median of
repetitions after discarded warmup runs.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .baseline import BaselineDecoder, init_baseline_params, matched_baseline_config
from .checkpoint import load_checkpoint
from .errors import ConfigError
from .kvtext import read_kv
from .model import Decoder, ModelConfig, ModelParams, _coerce, init_params

BENCH_CSV_HEADER = (
    "kind",
    "seq_len",
    "batch",
    "status",
    "state_or_cache_bytes",
    "peak_alloc_bytes",
    "latency_ms_per_token",
    "latency_ms_min",
    "latency_ms_max",
    "throughput_tok_per_s",
    "throughput_per_stream_tok_per_s",
)
KINDS = ("mcsd", "baseline")


def _int_list(text) -> tuple[int, ...]:
    if isinstance(text, str):
        return tuple(int(t) for t in text.split(",") if t.strip())
    return tuple(int(t) for t in text)


@dataclass(frozen=True)
class BenchSpec:
    kinds: tuple[str, ...] = KINDS
    prompt_len: int = 128
    seq_lens: tuple[int, ...] = (256, 512, 1024, 2048, 4096)
    batch_sizes: tuple[int, ...] = (1, 4, 16)
    repetitions: int = 3
    warmup: int = 1
    memory_budget_bytes: int = 0  # 0 means unlimited
    seed: int = 0
    checkpoint: str = ""
    # model used when no checkpoint is given
    model_dim: int = 256
    channels: int = 4
    layers: int = 12
    vocab_size: int = 256
    precision: int = 32
    variant: str = "slope_decay"
    combine_mode: str = "concat"

    def __post_init__(self):
        if self.repetitions < 3:
            raise ConfigError(f"repetitions must be at least 3, got {self.repetitions}")
        if self.prompt_len < 1 or any(n < 1 for n in self.seq_lens) or any(b < 1 for b in self.batch_sizes):
            raise ConfigError("prompt_len, seq_lens and batch_sizes must all be >= 1")
        unknown = set(self.kinds) - set(KINDS)
        if unknown:
            raise ConfigError(f"unknown model kinds {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "BenchSpec":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown bench spec keys: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            if k in ("seq_lens", "batch_sizes"):
                out[k] = _int_list(v)
            elif k == "kinds":
                out[k] = tuple(s.strip() for s in v.split(",")) if isinstance(v, str) else tuple(v)
            else:
                out[k] = _coerce(known[k].type, v)
        return cls(**out)

    @classmethod
    def from_file(cls, path: str | Path) -> "BenchSpec":
        return cls.from_dict(read_kv(path))

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            model_dim=self.model_dim,
            channels=self.channels,
            layers=self.layers,
            precision=self.precision,
            variant=self.variant,
            combine_mode=self.combine_mode,
        )


@dataclass
class BenchRow:
    kind: str
    seq_len: int
    batch: int
    status: str = "ok"
    state_or_cache_bytes: int = 0
    peak_alloc_bytes: int = 0
    latency_ms_per_token: float = math.nan
    latency_ms_min: float = math.nan
    latency_ms_max: float = math.nan
    throughput_tok_per_s: float = math.nan
    throughput_per_stream_tok_per_s: float = math.nan

    def as_csv(self) -> list[str]:
        out = []
        for name in BENCH_CSV_HEADER:
            v = getattr(self, name)
            out.append(f"{v:.6g}" if isinstance(v, float) else str(v))
        return out


DecoderFactory = Callable[[int], object]


def make_factories(spec: BenchSpec, params: ModelParams | None = None,
                   cfg: ModelConfig | None = None) -> dict[str, DecoderFactory]:
    """Decoder constructors per kind, keyed by batch size; the baseline is parameter-matched."""
    if cfg is None:
        cfg = spec.model_config()
    if params is None:
        params = init_params(cfg, seed=spec.seed)
    bcfg = matched_baseline_config(cfg)
    bparams = init_baseline_params(bcfg, seed=spec.seed)
    budget = spec.memory_budget_bytes or None
    capacity = spec.prompt_len + max(spec.seq_lens)
    return {
        "mcsd": lambda batch: Decoder(params, cfg, batch=batch),
        "baseline": lambda batch: BaselineDecoder(bparams, bcfg, batch=batch, capacity=capacity, max_bytes=budget),
    }


def _peak_bytes(dec) -> int:
    cache = getattr(dec, "cache", None)
    return cache.allocated_bytes if cache is not None else dec.nbytes


def _decode_once(factory: DecoderFactory, batch: int, prompt: np.ndarray, stream: np.ndarray):
    dec = factory(batch)
    dec.prefill(prompt)
    t0 = time.perf_counter()
    for t in range(stream.shape[1]):
        dec.step(stream[:, t])
    elapsed = time.perf_counter() - t0
    return elapsed, dec.nbytes, _peak_bytes(dec)


def bench_run(spec: BenchSpec, checkpoint: str | Path | None = None,
              factories: dict[str, DecoderFactory] | None = None,
              vocab_size: int | None = None) -> list[BenchRow]:
    """One row per (kind, seq_len, batch); budget overruns become ``status=oom`` rows."""
    ckpt = checkpoint or spec.checkpoint
    if factories is None:
        if ckpt:
            params, cfg, _ = load_checkpoint(ckpt)
            factories = make_factories(spec, params, cfg)
            vocab_size = cfg.vocab_size
        else:
            factories = make_factories(spec)
            vocab_size = spec.vocab_size
    vocab_size = vocab_size or spec.vocab_size
    rng = np.random.default_rng(spec.seed)
    rows = []
    for kind in spec.kinds:
        factory = factories[kind]
        for seq_len in spec.seq_lens:
            for batch in spec.batch_sizes:
                prompt = rng.integers(0, vocab_size, size=(batch, spec.prompt_len))
                stream = rng.integers(0, vocab_size, size=(batch, seq_len))
                row = BenchRow(kind, seq_len, batch)
                try:
                    for _ in range(spec.warmup):
                        _decode_once(factory, batch, prompt, stream[:, : min(seq_len, 32)])
                    runs = [_decode_once(factory, batch, prompt, stream) for _ in range(spec.repetitions)]
                except MemoryError:
                    row.status = "oom"
                    rows.append(row)
                    continue
                per_token = np.array([r[0] for r in runs]) * 1000.0 / seq_len
                med = float(np.median([r[0] for r in runs]))
                row.state_or_cache_bytes = int(runs[-1][1])
                row.peak_alloc_bytes = int(max(r[2] for r in runs))
                row.latency_ms_per_token = float(np.median(per_token))
                row.latency_ms_min = float(per_token.min())
                row.latency_ms_max = float(per_token.max())
                row.throughput_tok_per_s = batch * seq_len / med
                row.throughput_per_stream_tok_per_s = seq_len / med
                rows.append(row)
    return rows


def write_bench_csv(rows: Iterable[BenchRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_CSV_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


@dataclass
class LatencyTrend:
    kind: str
    early_ms: float
    late_ms: float

    @property
    def ratio(self) -> float:
        return self.late_ms / self.early_ms


def _advance(dec, tokens: np.ndarray) -> None:
    for t in tokens:
        dec.step(t)


def latency_trend(factory: DecoderFactory, kind: str, prompt_len: int = 128, early: int = 100,
                  late: int = 2000, window: int = 50, trials: int = 3, seed: int = 0) -> LatencyTrend:
    """Per-token latency around decode steps ``early`` and ``late`` (1-based).

    Two decoders are advanced (untimed) to the start of each window, then
    their timed steps alternate so both windows see the same machine
    conditions. Each point is the median over its window, and the minimum of
    those medians over ``trials`` is reported.
    """
    if not 0 < early < late:
        raise ConfigError("need 0 < early < late")
    rng = np.random.default_rng(seed)
    start_early = max(0, early - 1 - window // 2)
    start_late = late - 1 - window // 2
    early_ms, late_ms = [], []
    for _ in range(trials):
        a, b = factory(1), factory(1)
        vocab = a.embedding.shape[0]
        prompt = rng.integers(0, vocab, size=(1, prompt_len))
        stream = rng.integers(0, vocab, size=(start_late + window, 1))
        a.prefill(prompt)
        b.prefill(prompt)
        _advance(a, stream[:start_early])
        _advance(b, stream[:start_late])
        ta, tb = np.empty(window), np.empty(window)
        for i in range(window):
            t0 = time.perf_counter()
            a.step(stream[start_early + i])
            t1 = time.perf_counter()
            b.step(stream[start_late + i])
            t2 = time.perf_counter()
            ta[i], tb[i] = t1 - t0, t2 - t1
        early_ms.append(float(np.median(ta)) * 1000.0)
        late_ms.append(float(np.median(tb)) * 1000.0)
    return LatencyTrend(kind, min(early_ms), min(late_ms))
