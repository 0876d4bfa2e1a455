"""Block-variant ablation: identical training runs that differ only in the block's sections."""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .block import VARIANTS
from .model import ModelConfig, param_count
from .train import TrainConfig, train

SINGLE_SECTION = ("slope_only", "decay_only")
SUMMARY_HEADER = ("variant", "params", "steps", "final_loss")


@dataclass
class AblationResult:
    variant: str
    params: int
    steps: int
    final_loss: float
    loss_csv: Path


def final_loss(losses: list[float], frac: float = 0.1) -> float:
    """Median of the last ``frac`` of the curve; single-batch losses are too noisy to compare."""
    k = max(1, int(round(len(losses) * frac)))
    return float(statistics.median(losses[-k:]))


def ablation_run(
    corpus: str | Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    variants: Iterable[str] = VARIANTS,
) -> list[AblationResult]:
    """Train each variant with the same settings and seed into ``out_dir/<variant>/``.

    Also writes ``out_dir/summary.csv``. Every run samples the same batches,
    so the CSVs share one step grid.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for variant in variants:
        cfg = model_cfg.with_(variant=variant)
        run_dir = out_dir / variant
        _, rows = train(corpus, cfg, train_cfg, run_dir)
        results.append(AblationResult(
            variant=variant,
            params=param_count(cfg),
            steps=len(rows),
            final_loss=final_loss([r["loss"] for r in rows]),
            loss_csv=run_dir / "loss.csv",
        ))
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for r in results:
            w.writerow([r.variant, r.params, r.steps, f"{r.final_loss:.6f}"])
    return results
