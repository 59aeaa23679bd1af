"""Probabilistic conflict resolution between a plasticity and a stability gradient.

Each gradient stream is summarised per layer by its batch mean and an isotropic
variance of that mean. Under conflict (negative inner product) the part of the
plasticity mean that points against the stability mean is removed with strength

    alpha = lambda_sta / (lambda_pla + lambda_sta),   lambda = 1 / variance

which interpolates between keeping it (alpha = 0) and the hard PCGrad
projection (alpha = 1). Layers outside the configured scope, or without
conflict, get the plain sum ``g_pla + beta * g_sta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .tensor import (
    Entry,
    GradSet,
    LayerTag,
    ParamSet,
    StructureError,
    as_vec,
    dot,
    mean_of,
    norm_sq,
)


class Mode(str, Enum):
    PCR = "pcr"
    PCGRAD = "pcgrad"
    NAIVE_SUM = "sum"
    FIXED_ALPHA = "fixed_alpha"


class Scope(str, Enum):
    MLP_ONLY = "mlp_only"
    ALL_LAYERS = "all_layers"


class Granularity(str, Enum):
    PER_LAYER = "per_layer"
    GLOBAL = "global"


class VarianceNorm(str, Enum):
    PER_COORD_MEAN = "per_coord_mean"
    RAW_TRACE = "raw_trace"


class Method(str, Enum):
    PCR_SOFT = "pcr_soft"
    PCGRAD_HARD = "pcgrad_hard"
    FIXED_SOFT = "fixed_soft"
    NAIVE_SUM = "naive_sum"
    SKIPPED_ZERO_STA = "skipped_zero_sta"
    NO_CONFLICT_FALLBACK = "no_conflict_fallback"


class NoStabilityDirection(ValueError):
    """The stability mean is too small to define a reference axis."""


@dataclass(frozen=True)
class ConflictConfig:
    mode: Mode = Mode.PCR
    fixed_alpha: float = 0.5
    pcr_scope: Scope = Scope.MLP_ONLY
    granularity: Granularity = Granularity.PER_LAYER
    variance_floor: float = 1e-12
    variance_cap: float = 1e12
    sta_norm_floor: float = 1e-10
    variance_norm: VarianceNorm = VarianceNorm.PER_COORD_MEAN
    add_beta_sta_in_pcr: bool = False

    def __post_init__(self):
        for name, enum in (("mode", Mode), ("pcr_scope", Scope), ("granularity", Granularity),
                           ("variance_norm", VarianceNorm)):
            object.__setattr__(self, name, enum(getattr(self, name)))
        if not (self.variance_floor > 0 and self.sta_norm_floor > 0):
            raise ValueError("floors must be > 0")
        if not self.variance_cap > self.variance_floor:
            raise ValueError("variance_cap must exceed variance_floor")
        if not 0.0 <= self.fixed_alpha <= 1.0:
            raise ValueError("fixed_alpha must lie in [0, 1]")

    def in_scope(self, tag: LayerTag) -> bool:
        return self.pcr_scope == Scope.ALL_LAYERS or LayerTag(tag) == LayerTag.MLP


# -- Gaussian summary -------------------------------------------------------------


@dataclass(frozen=True)
class LayerEstimate:
    name: str
    tag: Optional[LayerTag]
    mean: np.ndarray
    variance: float
    degenerate: bool


@dataclass(frozen=True)
class GaussianGradEstimate:
    layers: tuple[LayerEstimate, ...]
    n_samples: int

    def __getitem__(self, name: str) -> LayerEstimate:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)


def _spread(samples: Sequence[np.ndarray], mean: np.ndarray) -> float:
    total = 0.0
    for s in samples:
        total += norm_sq(s - mean)
    return total


def isotropic_variance(samples: Sequence[np.ndarray], norm: VarianceNorm = VarianceNorm.PER_COORD_MEAN):
    """Mean of the samples and the isotropic variance of that mean.

    ``per_coord_mean``: trace of the unbiased sample covariance / (d * N).
    ``raw_trace``: the trace itself.
    """
    N = len(samples)
    if N < 2:
        raise ValueError("variance estimation needs at least two samples")
    xs = [as_vec(s) for s in samples]
    d = xs[0].size
    if any(x.size != d for x in xs):
        raise StructureError("samples have different lengths")
    acc = xs[0].copy()
    for x in xs[1:]:
        acc = acc + x
    mean = acc * (1.0 / N)
    trace = _spread(xs, mean) / (N - 1)
    if VarianceNorm(norm) == VarianceNorm.RAW_TRACE:
        return mean, trace
    return mean, trace / (d * N)


def estimate_gaussian(
    per_query: Sequence[GradSet],
    granularity: Granularity = Granularity.PER_LAYER,
    variance_norm: VarianceNorm = VarianceNorm.PER_COORD_MEAN,
    names: Optional[Sequence[str]] = None,
) -> GaussianGradEstimate:
    """Per-layer (or one global) mean and isotropic variance from per-query gradients.

    ``names`` restricts the global block to a subset of layers.
    """
    if len(per_query) < 2:
        raise ValueError("need at least two per-query gradients")
    first = per_query[0]
    for g in per_query[1:]:
        first.check_congruent(g)
    N = len(per_query)
    if Granularity(granularity) == Granularity.GLOBAL:
        keep = set(first.names() if names is None else names)
        blocks = [
            np.concatenate([e.value.reshape(-1) for e in g.entries if e.name in keep]) for g in per_query
        ]
        mean, var = isotropic_variance(blocks, variance_norm)
        return GaussianGradEstimate((LayerEstimate("global", None, mean, var, var == 0.0),), N)
    layers = []
    for idx, e in enumerate(first.entries):
        if names is not None and e.name not in names:
            continue
        mean, var = isotropic_variance([g.entries[idx].value.reshape(-1) for g in per_query], variance_norm)
        layers.append(LayerEstimate(e.name, e.tag, mean, var, var == 0.0))
    return GaussianGradEstimate(tuple(layers), N)


# -- geometry ---------------------------------------------------------------------


def detect_conflict(mu_pla, mu_sta) -> bool:
    return dot(mu_pla, mu_sta) < 0.0


def decompose(mu_pla, mu_sta, sta_norm_floor: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Split mu_pla into (perpendicular, parallel) parts relative to mu_sta.

    The perpendicular part is defined as the difference, so the two sum back
    to mu_pla exactly.
    """
    p, s = as_vec(mu_pla), as_vec(mu_sta)
    ns = norm_sq(s)
    if ns < sta_norm_floor:
        raise NoStabilityDirection(f"|mu_sta|^2 = {ns:.3g} below floor {sta_norm_floor:.3g}")
    par = (dot(p, s) / ns) * s
    return p - par, par


@dataclass(frozen=True)
class ArbitrationResult:
    k: float
    alpha: float
    lambda_pla: float
    lambda_sta: float


def retention_coefficient(
    var_pla: float, var_sta: float, floor: float = 1e-12, cap: float = 1e12
) -> ArbitrationResult:
    """Precision-weighted share of the conflicting component to keep (k) and remove (alpha)."""
    lam_pla = 1.0 / min(max(float(var_pla), floor), cap)
    lam_sta = 1.0 / min(max(float(var_sta), floor), cap)
    k = lam_pla / (lam_pla + lam_sta)
    return ArbitrationResult(k=k, alpha=1.0 - k, lambda_pla=lam_pla, lambda_sta=lam_sta)


def soft_project(mu_pla, mu_sta, alpha: float) -> np.ndarray:
    """``mu_pla - alpha * (mu_pla . mu_sta / |mu_sta|^2) * mu_sta``."""
    p, s = as_vec(mu_pla), as_vec(mu_sta)
    par = (dot(p, s) / norm_sq(s)) * s
    return p - alpha * par


# -- per layer --------------------------------------------------------------------


@dataclass
class LayerReport:
    name: str
    tag: Optional[LayerTag]
    dot: float
    cosine: float
    conflict: bool
    arbitration: Optional[ArbitrationResult]
    norm_pla: float
    norm_sta: float
    norm_parallel: float
    method: Method
    var_pla: Optional[float] = None
    var_sta: Optional[float] = None

    @property
    def zero_norm(self) -> bool:
        return self.norm_pla == 0.0 or self.norm_sta == 0.0

    def record(self, step: Optional[int] = None) -> dict:
        arb = self.arbitration
        return {
            "step": step,
            "layer": self.name,
            "tag": self.tag.value if self.tag is not None else None,
            "dot": self.dot,
            "cosine": self.cosine,
            "conflict": self.conflict,
            "k": arb.k if arb else None,
            "alpha": arb.alpha if arb else None,
            "method": self.method.value,
            "norm_pla": self.norm_pla,
            "norm_sta": self.norm_sta,
            "var_pla": self.var_pla,
            "var_sta": self.var_sta,
        }


def cosine(a, b) -> float:
    na, nb = math.sqrt(norm_sq(a)), math.sqrt(norm_sq(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return max(-1.0, min(1.0, dot(a, b) / (na * nb)))


def _resolve(mu_pla, mu_sta, beta, cfg, alpha_source, var_pla=None, var_sta=None, name="", tag=None):
    """Shared path for every projecting mode.

    ``alpha_source`` is ``("pcr", None)``, ``("pcgrad", None)`` or ``("fixed", value)``.
    """
    p, s = as_vec(mu_pla), as_vec(mu_sta)
    if p.shape != s.shape:
        raise StructureError("plasticity and stability layers differ in length")
    d = dot(p, s)
    ns = norm_sq(s)
    npl = math.sqrt(norm_sq(p))
    nst = math.sqrt(ns)
    rep = LayerReport(
        name=name, tag=tag, dot=d, cosine=cosine(p, s), conflict=d < 0.0, arbitration=None,
        norm_pla=npl, norm_sta=nst, norm_parallel=0.0, method=Method.NAIVE_SUM,
        var_pla=var_pla, var_sta=var_sta,
    )
    if ns < cfg.sta_norm_floor:
        rep.method = Method.SKIPPED_ZERO_STA
        return p + beta * s, rep
    rep.norm_parallel = abs(d) / nst
    if not d < 0.0:
        rep.method = Method.NO_CONFLICT_FALLBACK
        return p + beta * s, rep
    kind, value = alpha_source
    if kind == "pcr":
        arb = retention_coefficient(var_pla, var_sta, cfg.variance_floor, cfg.variance_cap)
        rep.method = Method.PCR_SOFT
    elif kind == "pcgrad":
        arb = ArbitrationResult(k=0.0, alpha=1.0, lambda_pla=math.nan, lambda_sta=math.nan)
        rep.method = Method.PCGRAD_HARD
    else:
        arb = ArbitrationResult(k=1.0 - value, alpha=value, lambda_pla=math.nan, lambda_sta=math.nan)
        rep.method = Method.FIXED_SOFT
    rep.arbitration = arb
    out = soft_project(p, s, arb.alpha)
    if kind == "pcr" and cfg.add_beta_sta_in_pcr:
        out = out + beta * s
    return out, rep


def pcr_layer(mu_pla, mu_sta, var_pla, var_sta, beta, cfg: ConflictConfig = ConflictConfig(), name="", tag=None):
    """Soft projection with data-derived strength; falls back to the plain sum without conflict."""
    return _resolve(mu_pla, mu_sta, beta, cfg, ("pcr", None), var_pla, var_sta, name, tag)


def pcgrad_layer(mu_pla, mu_sta, beta, cfg: ConflictConfig = ConflictConfig()) -> np.ndarray:
    return _resolve(mu_pla, mu_sta, beta, cfg, ("pcgrad", None))[0]


def fixed_alpha_layer(mu_pla, mu_sta, alpha, beta, cfg: ConflictConfig = ConflictConfig()) -> np.ndarray:
    return _resolve(mu_pla, mu_sta, beta, cfg, ("fixed", float(alpha)))[0]


def naive_layer(mu_pla, mu_sta, beta, name="", tag=None):
    p, s = as_vec(mu_pla), as_vec(mu_sta)
    d = dot(p, s)
    rep = LayerReport(
        name=name, tag=tag, dot=d, cosine=cosine(p, s), conflict=d < 0.0, arbitration=None,
        norm_pla=math.sqrt(norm_sq(p)), norm_sta=math.sqrt(norm_sq(s)), norm_parallel=0.0,
        method=Method.NAIVE_SUM,
    )
    return p + beta * s, rep


# -- whole model ------------------------------------------------------------------


@dataclass
class ResolutionReport:
    layers: list[LayerReport] = field(default_factory=list)

    def records(self, step: Optional[int] = None) -> list[dict]:
        return [r.record(step) for r in self.layers]

    def to_jsonl(self, step: Optional[int] = None) -> str:
        return "".join(json.dumps(r, allow_nan=False) + "\n" for r in self.records(step))

    def alphas(self) -> list[float]:
        return [r.arbitration.alpha for r in self.layers if r.arbitration is not None]

    def conflict_fraction(self) -> float:
        if not self.layers:
            return 0.0
        return sum(r.conflict for r in self.layers) / len(self.layers)


def _alpha_source(cfg: ConflictConfig):
    if cfg.mode == Mode.PCR:
        return ("pcr", None)
    if cfg.mode == Mode.PCGRAD:
        return ("pcgrad", None)
    return ("fixed", cfg.fixed_alpha)


def resolve_batch(
    per_query_pla: Sequence[GradSet],
    per_query_sta: Sequence[GradSet],
    beta: float,
    cfg: ConflictConfig = ConflictConfig(),
) -> tuple[GradSet, ResolutionReport]:
    """Combine the two gradient streams layer by layer according to ``cfg``.

    Projecting modes apply to layers selected by ``cfg.pcr_scope``; every
    other layer (and every layer in ``sum`` mode) gets ``g_pla + beta * g_sta``.
    """
    if len(per_query_pla) < 2 or len(per_query_sta) < 2:
        raise ValueError("need at least two per-query samples per stream")
    ref = per_query_pla[0]
    for g in list(per_query_pla[1:]) + list(per_query_sta):
        ref.check_congruent(g)
    est_pla = estimate_gaussian(per_query_pla, variance_norm=cfg.variance_norm)
    est_sta = estimate_gaussian(per_query_sta, variance_norm=cfg.variance_norm)
    projecting = cfg.mode != Mode.NAIVE_SUM
    source = _alpha_source(cfg)
    out: dict[str, np.ndarray] = {}
    reports: dict[str, LayerReport] = {}

    scoped = [e.name for e in ref.entries if projecting and cfg.in_scope(e.tag)]
    if projecting and cfg.granularity == Granularity.GLOBAL and scoped:
        gp = estimate_gaussian(per_query_pla, Granularity.GLOBAL, cfg.variance_norm, names=scoped).layers[0]
        gs = estimate_gaussian(per_query_sta, Granularity.GLOBAL, cfg.variance_norm, names=scoped).layers[0]
        g_out, grep = _resolve(gp.mean, gs.mean, beta, cfg, source, gp.variance, gs.variance, "global", None)
        off = 0
        for e in ref.entries:
            if e.name not in scoped:
                continue
            out[e.name] = g_out[off:off + e.size]
            off += e.size
            lp, ls = est_pla[e.name], est_sta[e.name]
            _, lrep = naive_layer(lp.mean, ls.mean, beta, e.name, e.tag)
            lrep.method, lrep.arbitration = grep.method, grep.arbitration
            lrep.var_pla, lrep.var_sta = gp.variance, gs.variance
            reports[e.name] = lrep
        scoped = []

    for e in ref.entries:
        if e.name in out:
            continue
        lp, ls = est_pla[e.name], est_sta[e.name]
        if e.name in scoped:
            g, rep = _resolve(lp.mean, ls.mean, beta, cfg, source, lp.variance, ls.variance, e.name, e.tag)
        else:
            g, rep = naive_layer(lp.mean, ls.mean, beta, e.name, e.tag)
            rep.var_pla, rep.var_sta = lp.variance, ls.variance
        out[e.name] = g
        reports[e.name] = rep

    grads = GradSet(Entry(e.name, e.tag, out[e.name].reshape(e.shape)) for e in ref.entries)
    return grads, ResolutionReport([reports[e.name] for e in ref.entries])
