"""Desk-scale byte-level training: AdamW, warmup + cosine schedule, clipping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .errors import ConfigError, DataError, TrainingError
from .model import ModelConfig, ModelParams, cross_entropy, forward_parallel, init_params, _coerce
from .block import build_channel_masks
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = ("step", "tokens", "loss", "lr", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    seq_len: int = 256
    lr: float = 8e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    warmup_steps: int = 50
    total_steps: int = 500
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables periodic checkpoints

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.warmup_steps < 0 or self.total_steps < self.warmup_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.batch_size < 1 or self.seq_len < 1:
            raise ConfigError("batch_size and seq_len must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(known[k].type, v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


def split_config(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Split one key-value mapping into model and training configs.

    ``seq_len`` feeds both; the model's mask length follows the training window.
    """
    model_keys = set(ModelConfig.__dataclass_fields__)
    train_keys = set(TrainConfig.__dataclass_fields__)
    unknown = set(values) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    mcfg = ModelConfig.from_dict({k: v for k, v in values.items() if k in model_keys})
    tcfg = TrainConfig.from_dict({k: v for k, v in values.items() if k in train_keys})
    if "seq_len" not in values:
        tcfg = tcfg.with_(seq_len=mcfg.seq_len)
    return mcfg, tcfg


# ---------------------------------------------------------------- data

class ByteTokenizer:
    vocab_size = 256

    @staticmethod
    def encode(text: str | bytes) -> np.ndarray:
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    @staticmethod
    def decode(ids) -> str:
        return bytes(int(i) for i in ids).decode("utf-8", errors="replace")


def reference_corpus_path() -> Path:
    """Bundled ~1 MB of public-domain Shakespeare plays."""
    return Path(str(resources.files("mcsd") / "data" / "shakespeare.txt"))


def load_corpus(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def sample_batch(corpus: np.ndarray, batch: int, seq_len: int, rng: np.random.Generator):
    """Contiguous windows; targets are the inputs shifted by one byte."""
    hi = len(corpus) - seq_len - 1
    if hi < 0:
        raise DataError(f"corpus of {len(corpus)} bytes is shorter than seq_len + 1 = {seq_len + 1}")
    starts = rng.integers(0, hi + 1, size=batch)
    idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
    window = corpus[idx]
    return window[:, :-1], window[:, 1:]


# ------------------------------------------------------------ optimizer

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr``, then cosine decay to ``lr / 10`` at ``total_steps``."""
    floor = cfg.lr / 10
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return floor
    span = cfg.total_steps - cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / span
    return floor + (cfg.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    loss: float = float("nan")
    best_loss: float = float("inf")


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        s = max_norm / total
        for g in grads:
            g *= s
    return total


def adamw_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: TrainState,
    cfg: TrainConfig,
    lr: float | None = None,
    names: list[str] | None = None,
) -> None:
    """Decoupled-weight-decay Adam with bias correction; updates in place.

    Weight decay applies to matrices only (``ndim >= 2``), not to norm gains.
    """
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise TrainingError(f"non-finite gradient in parameter {label}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    lr = lr_schedule(state.step, cfg) if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and p.data.ndim >= 2:
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


# ------------------------------------------------------------------ loop

def loss_and_grads(params: ModelParams, cfg: ModelConfig, x, y, masks=None):
    plist = params.parameters()
    for p in plist:
        p.grad = None
    with Tape() as tape:
        loss = cross_entropy(forward_parallel(x, params, cfg, masks), y)
    tape.backward(loss)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in plist]
    return float(loss.data), grads


def train(
    corpus_path: str | Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    progress: bool = False,
) -> tuple[ModelParams, list[dict]]:
    """Run the loop, writing ``loss.csv`` and ``model.mcsd`` (plus periodic checkpoints) to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(corpus_path)
    if len(corpus) < train_cfg.batch_size * train_cfg.seq_len + 1:
        raise DataError(
            f"corpus has {len(corpus)} bytes; need at least batch_size * seq_len + 1 = "
            f"{train_cfg.batch_size * train_cfg.seq_len + 1}"
        )
    if model_cfg.vocab_size < ByteTokenizer.vocab_size:
        raise ConfigError("byte-level training needs vocab_size >= 256")
    if train_cfg.seq_len > model_cfg.seq_len:
        model_cfg = model_cfg.with_(seq_len=train_cfg.seq_len)

    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, seed=train_cfg.seed)
    masks = build_channel_masks(model_cfg.block)
    names = list(params.named_tensors())
    plist = params.parameters()
    state = TrainState()
    rows: list[dict] = []
    last_ckpt: Path | None = None
    t0 = time.perf_counter()
    tokens_per_step = train_cfg.batch_size * train_cfg.seq_len

    with open(out_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_HEADER)
        for step in range(train_cfg.total_steps):
            x, y = sample_batch(corpus, train_cfg.batch_size, train_cfg.seq_len, rng)
            loss, grads = loss_and_grads(params, model_cfg, x, y, masks)
            if not math.isfinite(loss):
                kept = f"; last checkpoint {last_ckpt}" if last_ckpt else ""
                raise TrainingError(f"non-finite loss at step {step}{kept}")
            clip_grad_norm(grads, train_cfg.grad_clip)
            lr = lr_schedule(step + 1, train_cfg)
            adamw_step(plist, grads, state, train_cfg, lr=lr, names=names)
            state.loss = loss
            state.best_loss = min(state.best_loss, loss)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            row = {"step": step, "tokens": (step + 1) * tokens_per_step, "loss": loss, "lr": lr, "wall_ms": wall_ms}
            rows.append(row)
            writer.writerow([step, row["tokens"], repr(loss), repr(lr), f"{wall_ms:.1f}"])
            fh.flush()
            if progress and step % 10 == 0:
                log.info("step %d loss %.4f lr %.2e", step, loss, lr)
            every = train_cfg.checkpoint_every
            if every and (step + 1) % every == 0:
                last_ckpt = out_dir / f"ckpt_{step + 1:06d}.mcsd"
                save_checkpoint(last_ckpt, params, model_cfg, {"step": step + 1})
    save_checkpoint(out_dir / "model.mcsd", params, model_cfg, {"step": train_cfg.total_steps})
    return params, rows


def read_loss_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            {"step": int(r["step"]), "tokens": int(r["tokens"]), "loss": float(r["loss"]),
             "lr": float(r["lr"]), "wall_ms": float(r["wall_ms"])}
            for r in reader
        ]
