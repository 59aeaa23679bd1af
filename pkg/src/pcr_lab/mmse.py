"""Scalar shrinkage along the conflict axis: analytic and simulated risk of (1 - alpha) * z_obs.

Model: z* ~ N(0, var_sta), z_obs = z* + eps with eps ~ N(0, var_pla) independent.
Expanding E[((1 - a) z_obs - z*)^2] = E[(-a z* + (1 - a) eps)^2] gives

    R(a) = a^2 var_sta + (1 - a)^2 var_pla,

minimised at a* = var_pla / (var_pla + var_sta) with R(a*) = 1 / (1/var_pla + 1/var_sta).

Gaussian draws use numpy's PCG64 bit generator with ``standard_normal``
(ziggurat), seeded through ``SeedSequence`` so every cell is reproducible
regardless of evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_CHUNK = 1 << 16


@dataclass(frozen=True)
class ScalarChannel:
    var_pla: float
    var_sta: float

    def __post_init__(self):
        for name in ("var_pla", "var_sta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")


@dataclass(frozen=True)
class RiskCurve:
    alphas: np.ndarray
    risks: np.ndarray
    std_errs: np.ndarray
    analytic: np.ndarray
    argmin_alpha: float


@dataclass(frozen=True)
class Dominance:
    r_pcr: float
    r_pcgrad: float
    r_sum: float
    strict: bool


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def risk_analytic(alpha: float, ch: ScalarChannel) -> float:
    a = _check_alpha(alpha)
    return a * a * ch.var_sta + (1.0 - a) * (1.0 - a) * ch.var_pla


def optimal_alpha(ch: ScalarChannel) -> float:
    return ch.var_pla / (ch.var_pla + ch.var_sta)


def minimum_risk(ch: ScalarChannel) -> float:
    return 1.0 / (1.0 / ch.var_pla + 1.0 / ch.var_sta)


def _draws(ch: ScalarChannel, n: int, rng: np.random.Generator):
    """Yield (z*, eps) chunks; the order of draws is fixed (z* chunk, then eps chunk)."""
    sd_sta, sd_pla = math.sqrt(ch.var_sta), math.sqrt(ch.var_pla)
    done = 0
    while done < n:
        m = min(_CHUNK, n - done)
        z = sd_sta * rng.standard_normal(m)
        eps = sd_pla * rng.standard_normal(m)
        yield z, eps
        done += m


def _moments(errs_sq_chunks, n):
    # running sum / sum of squares in chunk order; shifted by the first chunk mean for stability
    total, total_sq, shift = 0.0, 0.0, None
    for e2 in errs_sq_chunks:
        if shift is None:
            shift = float(e2.mean())
        c = e2 - shift
        total += float(c.sum())
        total_sq += float((c * c).sum())
    mean_c = total / n
    var = max(total_sq / n - mean_c * mean_c, 0.0) * n / (n - 1)
    return shift + mean_c, math.sqrt(var / n)


def risk_monte_carlo(alpha: float, ch: ScalarChannel, n_samples: int, seed: int) -> tuple[float, float]:
    """Sample mean of ((1 - alpha) z_obs - z*)^2 and its standard error."""
    a = _check_alpha(alpha)
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    errs = ((((1.0 - a) * (z + e)) - z) ** 2 for z, e in _draws(ch, n_samples, rng))
    return _moments(errs, n_samples)


def cell_seed(seed: int, cell: int) -> int:
    """Derived seed for cell ``cell``; independent of evaluation order."""
    return int(np.random.SeedSequence([seed, cell]).generate_state(1, np.uint64)[0])


def risk_sweep(
    ch: ScalarChannel,
    grid_size: int = 101,
    n_samples: int = 1_000_000,
    seed: int = 0,
    common_random_numbers: bool = True,
) -> RiskCurve:
    """Monte Carlo risk over a uniform alpha grid on [0, 1].

    With common random numbers (default) every alpha is scored on the same
    draws, so the curve differences are not swamped by independent noise and
    the argmin is meaningful at modest n. Otherwise cell i uses
    ``cell_seed(seed, i)``.
    """
    if grid_size < 11:
        raise ValueError("grid_size must be >= 11")
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    alphas = np.linspace(0.0, 1.0, grid_size)
    if common_random_numbers:
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        sums = np.zeros(grid_size)
        sums_sq = np.zeros(grid_size)
        shift = None
        for z, e in _draws(ch, n_samples, rng):
            obs = z + e
            err2 = ((1.0 - alphas)[:, None] * obs[None, :] - z[None, :]) ** 2
            if shift is None:
                shift = err2.mean(axis=1)
            c = err2 - shift[:, None]
            sums += c.sum(axis=1)
            sums_sq += (c * c).sum(axis=1)
        mean_c = sums / n_samples
        var = np.maximum(sums_sq / n_samples - mean_c ** 2, 0.0) * n_samples / (n_samples - 1)
        risks = shift + mean_c
        std_errs = np.sqrt(var / n_samples)
    else:
        pairs = [risk_monte_carlo(a, ch, n_samples, cell_seed(seed, i)) for i, a in enumerate(alphas)]
        risks = np.array([p[0] for p in pairs])
        std_errs = np.array([p[1] for p in pairs])
    analytic = np.array([risk_analytic(a, ch) for a in alphas])
    return RiskCurve(alphas, risks, std_errs, analytic, float(alphas[int(np.argmin(risks))]))


def dominance_check(ch: ScalarChannel) -> Dominance:
    r_pcr = risk_analytic(optimal_alpha(ch), ch)
    r_pcgrad = risk_analytic(1.0, ch)
    r_sum = risk_analytic(0.0, ch)
    return Dominance(r_pcr, r_pcgrad, r_sum, r_pcr < r_pcgrad and r_pcr < r_sum)


def write_curve_csv(curve: RiskCurve, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "risk_mc", "std_err", "risk_analytic"])
        for a, r, s, ra in zip(curve.alphas, curve.risks, curve.std_errs, curve.analytic):
            w.writerow([repr(float(a)), repr(float(r)), repr(float(s)), repr(float(ra))])
