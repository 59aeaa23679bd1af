"""GRPO losses split into a plasticity part (clipped surrogate) and a stability part (token KL).

Both gradients are assembled by building per-position ``dlogits`` and pushing
them through :func:`pcr_lab.model.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import model as M
from .tensor import GradSet, ParamSet, StructureError, mean_of, saxpy_into


@dataclass(frozen=True)
class GrpoConfig:
    clip_eps: float = 0.2
    beta: float = 0.04
    adv_eps: float = 1e-8
    group_size: int = 8
    batch_size: int = 8
    inner_epochs: int = 1
    freeze_reference: bool = False

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.adv_eps > 0:
            raise ValueError("adv_eps must be > 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")


@dataclass
class RolloutGroup:
    query: tuple[int, ...]
    responses: list[tuple[int, ...]]
    rewards: np.ndarray
    old_log_probs: list[np.ndarray]
    advantages: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.query = tuple(int(x) for x in self.query)
        self.responses = [tuple(int(x) for x in r) for r in self.responses]
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.old_log_probs = [np.asarray(lp, dtype=np.float64) for lp in self.old_log_probs]
        if self.n < 2:
            raise ValueError("a rollout group needs n >= 2 responses")
        if self.rewards.shape != (self.n,) or len(self.old_log_probs) != self.n:
            raise StructureError("rewards / old_log_probs do not match the number of responses")
        for r, lp in zip(self.responses, self.old_log_probs):
            if len(r) < 1:
                raise ValueError("every response needs at least one token")
            if lp.shape != (len(r),):
                raise StructureError("old_log_probs shape does not match response")

    @property
    def n(self) -> int:
        return len(self.responses)


@dataclass(frozen=True)
class LossBreakdown:
    l_pla: float
    l_sta: float
    l_total: float


def compute_advantages(rewards, adv_eps: float = 1e-8) -> np.ndarray:
    """Group-standardised rewards with population std; all zeros if the std is below adv_eps."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("advantages need at least two rewards")
    mu = r.mean()
    sd = np.sqrt(((r - mu) ** 2).mean())
    if sd < adv_eps:
        return np.zeros_like(r)
    return (r - mu) / sd


def importance_ratios(new_log_probs, old_log_probs) -> np.ndarray:
    new = np.asarray(new_log_probs, dtype=np.float64)
    old = np.asarray(old_log_probs, dtype=np.float64)
    if new.shape != old.shape:
        raise StructureError(f"shape mismatch {new.shape} vs {old.shape}")
    return np.exp(new - old)


def surrogate_gain(R, A, clip_eps: float):
    """``min(R*A, clip(R)*A)`` and its derivative in R; ties take the unclipped branch.

    Works elementwise on arrays as well as on scalars.
    """
    R = np.asarray(R, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    unclipped = R * A
    clipped = np.clip(R, 1.0 - clip_eps, 1.0 + clip_eps) * A
    take_unclipped = unclipped <= clipped
    value = np.where(take_unclipped, unclipped, clipped)
    deriv = np.where(take_unclipped, A, 0.0) * np.ones_like(R)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def _positions(group: RolloutGroup, i: int) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Input sequence for response i, the positions predicting its tokens, and the targets."""
    y = group.responses[i]
    seq = list(group.query) + list(y[:-1])
    start = len(group.query) - 1
    pos = np.arange(start, start + len(y))
    return seq, pos, np.asarray(y, dtype=np.int64)


def group_advantages(group: RolloutGroup, cfg: GrpoConfig) -> np.ndarray:
    if group.advantages is not None:
        return group.advantages
    return compute_advantages(group.rewards, cfg.adv_eps)


def _plasticity_group(params, group, cfg: GrpoConfig, mcfg, weight: float, acc: GradSet | None):
    A = group_advantages(group, cfg)
    n = group.n
    loss = 0.0
    for i in range(n):
        seq, pos, y = _positions(group, i)
        logp, cache = M.forward(params, seq, mcfg)
        T = y.size
        new_lp = logp[pos, y]
        R = importance_ratios(new_lp, group.old_log_probs[i])
        S, dS = surrogate_gain(R, np.full(T, A[i]), cfg.clip_eps)
        loss -= weight * S.sum() / (n * T)
        coef = -weight * dS * R / (n * T)
        if acc is None or not np.any(coef):
            continue
        dlogits = np.zeros_like(logp)
        probs = np.exp(logp[pos])
        onehot = np.zeros_like(probs)
        onehot[np.arange(T), y] = 1.0
        dlogits[pos] = coef[:, None] * (onehot - probs)
        saxpy_into(acc, 1.0, M.backward(params, cache, dlogits, mcfg))
    return loss


def _stability_group(params, ref_params, group, mcfg, weight: float, acc: GradSet | None):
    n = group.n
    loss = 0.0
    for i in range(n):
        seq, pos, y = _positions(group, i)
        logp, cache = M.forward(params, seq, mcfg)
        logq, _ = M.forward(ref_params, seq, mcfg)
        lp, lq = logp[pos], logq[pos]
        p = np.exp(lp)
        diff = lp - lq
        kl = (p * diff).sum(axis=-1)
        T = y.size
        loss += weight * kl.sum() / (n * T)
        if acc is None:
            continue
        dlogits = np.zeros_like(logp)
        dlogits[pos] = (weight / (n * T)) * p * (diff - kl[:, None])
        saxpy_into(acc, 1.0, M.backward(params, cache, dlogits, mcfg))
    return loss


def token_kl(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """Exact KL(p || q) per row over the full vocabulary."""
    p = np.exp(log_p)
    return (p * (log_p - log_q)).sum(axis=-1)


def plasticity_loss_and_grad(
    params: ParamSet, groups: Sequence[RolloutGroup], cfg: GrpoConfig, mcfg: M.ModelConfig
) -> tuple[float, GradSet]:
    if not groups:
        raise ValueError("need at least one rollout group")
    acc = GradSet.zeros_for(params)
    w = 1.0 / len(groups)
    loss = 0.0
    for g in groups:
        loss += _plasticity_group(params, g, cfg, mcfg, w, acc)
    return float(loss), acc


def stability_loss_and_grad(
    params: ParamSet,
    ref_params: ParamSet,
    groups: Sequence[RolloutGroup],
    cfg: GrpoConfig,
    mcfg: M.ModelConfig,
) -> tuple[float, GradSet]:
    params.check_congruent(ref_params)
    if not groups:
        raise ValueError("need at least one rollout group")
    acc = GradSet.zeros_for(params)
    w = 1.0 / len(groups)
    loss = 0.0
    for g in groups:
        loss += _stability_group(params, ref_params, g, mcfg, w, acc)
    return float(loss), acc


def losses(params, ref_params, groups, cfg: GrpoConfig, mcfg) -> LossBreakdown:
    """Scalar plasticity/stability/total losses (no gradients)."""
    w = 1.0 / len(groups)
    l_pla = sum(_plasticity_group(params, g, cfg, mcfg, w, None) for g in groups)
    l_sta = sum(_stability_group(params, ref_params, g, mcfg, w, None) for g in groups)
    return LossBreakdown(float(l_pla), float(l_sta), float(l_pla + cfg.beta * l_sta))


def total_grad_naive(g_pla: GradSet, g_sta: GradSet, beta: float) -> GradSet:
    g_pla.check_congruent(g_sta)
    out = g_pla.map(np.copy, cls=GradSet)
    return saxpy_into(out, beta, g_sta)


def per_query_terms(
    params: ParamSet,
    ref_params: ParamSet,
    groups: Sequence[RolloutGroup],
    cfg: GrpoConfig,
    mcfg: M.ModelConfig,
) -> tuple[list[GradSet], list[GradSet], list[float], list[float]]:
    """Per-query gradients of both streams plus the per-query losses."""
    if len(groups) < 2:
        raise ValueError("per-query gradients need at least two groups")
    params.check_congruent(ref_params)
    pla, sta, l_pla, l_sta = [], [], [], []
    for g in groups:
        acc = GradSet.zeros_for(params)
        l_pla.append(float(_plasticity_group(params, g, cfg, mcfg, 1.0, acc)))
        pla.append(acc)
        acc = GradSet.zeros_for(params)
        l_sta.append(float(_stability_group(params, ref_params, g, mcfg, 1.0, acc)))
        sta.append(acc)
    return pla, sta, l_pla, l_sta


def per_query_grads(
    params: ParamSet,
    ref_params: ParamSet,
    groups: Sequence[RolloutGroup],
    cfg: GrpoConfig,
    mcfg: M.ModelConfig,
) -> tuple[list[GradSet], list[GradSet]]:
    """Single-query plasticity and stability gradients; their means are the batch gradients."""
    pla, sta, _, _ = per_query_terms(params, ref_params, groups, cfg, mcfg)
    return pla, sta


def batch_from_per_query(per_query: Sequence[GradSet]) -> GradSet:
    return mean_of(per_query)
