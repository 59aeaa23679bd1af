"""Conflicting-quadratic testbed with known ground truth along the conflict axis.

The parameter point sits at ``theta0`` (distance ``anchor_norm`` from the
stability anchor at the origin), so the stability gradient is ``theta0``.
At every step the plasticity target moves along the conflict axis
``u = -theta0 / |theta0|``: the true plasticity gradient is

    mu_pla = perp + (axis_offset + z*) u,      z* ~ N(0, noise_sta^2 / N)

i.e. the stability side acts as a zero-centred prior on the axis move. Both
streams are observed through N noisy per-query samples (per-coordinate noise
``noise_pla`` / ``noise_sta``), resolved by the chosen mode, and the update's
component along the observed axis is scored against the true plasticity
component on that axis. Only conflict steps are scored: elsewhere every mode
reduces to the same sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..conflict import ConflictConfig, Mode, resolve_batch
from ..tensor import Entry, GradSet, LayerTag, dot, norm


@dataclass(frozen=True)
class QuadTestbedSpec:
    dim: int = 16
    anchor_norm: float = 20.0
    perp_norm: float = 0.0
    axis_offset: float = 0.0
    noise_pla: float = 1.0
    noise_sta: float = 1.0
    steps: int = 10_000
    samples: int = 8

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.samples < 2:
            raise ValueError("samples must be >= 2")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.noise_pla < 0 or self.noise_sta < 0:
            raise ValueError("noise levels must be >= 0")
        if not self.anchor_norm > 0:
            raise ValueError("anchor_norm must be > 0")


@dataclass
class QuadTrace:
    conflict: np.ndarray       # bool per step
    axis_update: np.ndarray    # update component along the observed axis
    axis_truth: np.ndarray     # true plasticity component along the observed axis
    axis_obs: np.ndarray       # observed plasticity component along the observed axis
    alpha: np.ndarray          # applied projection strength (nan when not projecting)
    alpha_true: float          # MMSE-optimal strength from the true variances
    updates: np.ndarray        # full resolved update per step, shape (steps, dim)

    @property
    def axis_error(self) -> np.ndarray:
        return (self.axis_update - self.axis_truth) ** 2

    def mse(self) -> float:
        """Mean squared axis error over conflict steps."""
        return float(self.axis_error[self.conflict].mean())

    def mmse_deviation(self) -> float:
        """Mean squared distance of the axis update from the true-variance MMSE update (conflict steps)."""
        target = (1.0 - self.alpha_true) * self.axis_obs
        return float(((self.axis_update - target)[self.conflict] ** 2).mean())


def _as_gradset(v: np.ndarray) -> GradSet:
    return GradSet([Entry("w", LayerTag.MLP, v)])


def quad_testbed(spec: QuadTestbedSpec, mode: Mode | str, seed: int = 0) -> QuadTrace:
    """Run ``spec.steps`` independent resolution steps; draws depend only on ``seed``.

    ``mode`` is one of pcr / pcgrad / sum (fixed_alpha is accepted too and uses 0.5).
    Using the same seed for different modes gives common random numbers.
    """
    mode = Mode(mode)
    cfg = ConflictConfig(mode=mode, pcr_scope="all_layers")
    rng = np.random.default_rng(np.random.SeedSequence([seed, spec.dim]))
    d, N = spec.dim, spec.samples
    theta0 = rng.standard_normal(d)
    theta0 *= spec.anchor_norm / norm(theta0)
    u = -theta0 / norm(theta0)
    perp = rng.standard_normal(d)
    perp -= dot(perp, u) * u
    n_perp = norm(perp)
    perp = perp * (spec.perp_norm / n_perp) if n_perp > 0 else perp * 0.0
    var_sta = spec.noise_sta ** 2 / N
    var_pla = spec.noise_pla ** 2 / N
    alpha_true = var_pla / (var_pla + var_sta) if var_pla + var_sta > 0 else 0.5

    conflict = np.zeros(spec.steps, dtype=bool)
    axis_update = np.zeros(spec.steps)
    axis_truth = np.zeros(spec.steps)
    axis_obs = np.zeros(spec.steps)
    alpha = np.full(spec.steps, np.nan)
    updates = np.zeros((spec.steps, d))
    for t in range(spec.steps):
        z_star = np.sqrt(var_sta) * rng.standard_normal()
        mu_pla = perp + (spec.axis_offset + z_star) * u
        mu_sta = theta0
        xi = rng.standard_normal((N, d))
        zeta = rng.standard_normal((N, d))
        pla = [_as_gradset(mu_pla + spec.noise_pla * xi[i]) for i in range(N)]
        sta = [_as_gradset(mu_sta + spec.noise_sta * zeta[i]) for i in range(N)]
        g, report = resolve_batch(pla, sta, 0.0, cfg)
        rep = report.layers[0]
        out = g.flat()
        s_hat = np.mean([s.flat() for s in sta], axis=0)
        p_hat = np.mean([p.flat() for p in pla], axis=0)
        n_s = norm(s_hat)
        u_hat = -s_hat / n_s if n_s > 0 else u
        conflict[t] = rep.conflict
        axis_update[t] = dot(out, u_hat)
        axis_truth[t] = dot(mu_pla, u_hat)
        axis_obs[t] = dot(p_hat, u_hat)
        if rep.arbitration is not None:
            alpha[t] = rep.arbitration.alpha
        updates[t] = out
    return QuadTrace(conflict, axis_update, axis_truth, axis_obs, alpha, alpha_true, updates)


def compare_modes(spec: QuadTestbedSpec, seed: int = 0) -> dict[str, float]:
    """Conflict-axis MSE per mode on common random numbers."""
    return {m.value: quad_testbed(spec, m, seed).mse() for m in (Mode.PCR, Mode.PCGRAD, Mode.NAIVE_SUM)}
