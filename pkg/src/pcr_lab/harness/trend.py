"""Grad-norm stability comparison between resolution modes across seeds."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .train import train


@dataclass(frozen=True)
class SeedOutcome:
    seed: int
    mode: str
    grad_norm_std: float
    grad_norm_mean: float
    conflict_fraction: float
    final_reward: float
    final_kl: float


def run_seed(cfg: RunConfig, seed: int, mode: str) -> SeedOutcome:
    res = train(cfg.replace(run={"seed": seed}, conflict={"mode": mode}))
    norms = np.array([s.grad_norm_total for s in res.steps])
    return SeedOutcome(
        seed=seed,
        mode=mode,
        grad_norm_std=float(norms.std()),
        grad_norm_mean=float(norms.mean()),
        conflict_fraction=float(np.mean([s.conflict_fraction for s in res.steps])),
        final_reward=res.steps[-1].mean_reward,
        final_kl=res.metrics[-1].kl_to_initial,
    )


def compare(cfg: RunConfig, seeds, modes=("pcr", "sum")) -> list[SeedOutcome]:
    return [run_seed(cfg, s, m) for s in seeds for m in modes]


def wins(outcomes: list[SeedOutcome], mode: str = "pcr", baseline: str = "sum") -> tuple[int, int]:
    """Number of seeds where ``mode`` has grad-norm std <= ``baseline``, and the seed count."""
    by = {(o.seed, o.mode): o for o in outcomes}
    seeds = sorted({o.seed for o in outcomes})
    won = sum(by[s, mode].grad_norm_std <= by[s, baseline].grad_norm_std for s in seeds)
    return won, len(seeds)


def write_outcomes_csv(outcomes: list[SeedOutcome], path) -> None:
    cols = list(SeedOutcome.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for o in outcomes:
            w.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(o, c) for c in cols)])
