"""GRPO training loop with pluggable gradient-conflict resolution."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .. import __version__
from .. import model as M
from ..conflict import ResolutionReport, resolve_batch
from ..grpo import RolloutGroup, per_query_terms, token_kl
from ..tensor import GradSet, ParamSet, norm
from .config import Optimizer, RunConfig, dump_config, response_length
from .tasks import anchor_for, make_task, sample_query

# stream domains for seed derivation
_INIT, _QUERY, _ROLLOUT, _HELDOUT, _PRETRAIN = 1, 2, 3, 4, 5


class NumericalError(RuntimeError):
    """A non-finite value appeared in a gradient, parameter or metric."""


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream (seed, path...); independent of evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(p) for p in path)]))


# -- optimisers -------------------------------------------------------------------


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamSet, grads: GradSet) -> ParamSet:
        return params.with_flat(params.flat() - self.lr * grads.flat())


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: ParamSet, grads: GradSet) -> ParamSet:
        g = grads.flat()
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params.with_flat(params.flat() - self.lr * mhat / (np.sqrt(vhat) + self.eps))


def make_optimizer(cfg: RunConfig):
    r = cfg.run
    if r.optimizer == Optimizer.SGD:
        return Sgd(r.learning_rate)
    return Adam(r.learning_rate, r.adam_beta1, r.adam_beta2, r.adam_eps)


# -- rollouts ---------------------------------------------------------------------


def collect_groups(params: ParamSet, cfg: RunConfig, step: int) -> tuple[list[RolloutGroup], float]:
    """Sample N_batch queries and n responses each from ``params``; returns groups and mean reward."""
    mcfg, g = cfg.model, cfg.grpo
    max_new = response_length(cfg)
    groups, rewards_all = [], []
    for qi in range(g.batch_size):
        task = make_task(cfg.task.kind, rng_for(cfg.run.seed, _QUERY, step, qi),
                         cfg.task.query_len, mcfg.vocab_size)
        responses, old_lps, rewards = [], [], []
        for ri in range(g.group_size):
            rng = rng_for(cfg.run.seed, _ROLLOUT, step, qi, ri)
            toks, lps = M.sample_response(params, task.query, max_new, rng, mcfg)
            r = task.reward(toks)
            if cfg.run.reward_flip_prob > 0 and rng.random() < cfg.run.reward_flip_prob:
                r = 1.0 - r
            responses.append(toks)
            old_lps.append(lps)
            rewards.append(r)
        rewards_all.extend(rewards)
        groups.append(RolloutGroup(task.query, responses, rewards, old_lps))
    return groups, float(np.mean(rewards_all))


def heldout_sequences(cfg: RunConfig) -> list[tuple[list[int], int]]:
    """Fixed (prompt + anchor response) sequences and the prompt length of each."""
    rng = rng_for(cfg.run.seed, _HELDOUT)
    out = []
    for _ in range(cfg.run.heldout_prompts):
        q = sample_query(rng, cfg.task.query_len, cfg.model.vocab_size)
        out.append((list(q) + list(anchor_for(cfg.task.kind, q, cfg.model.vocab_size)), len(q)))
    return out


def heldout_metrics(params: ParamSet, initial: ParamSet, seqs, mcfg) -> tuple[float, float]:
    """Mean NLL of the anchor responses and mean token KL(current || initial) on the same positions.

    Query tokens are uniform noise, so only response positions are scored.
    """
    nlls, kls = [], []
    for s, qlen in seqs:
        logp, _ = M.forward(params, s, mcfg)
        logq, _ = M.forward(initial, s, mcfg)
        idx = np.arange(qlen - 1, len(s) - 1)
        nlls.append(float(-logp[idx, np.asarray(s[qlen:])].mean()))
        kls.append(float(token_kl(logp[idx], logq[idx]).mean()))
    return float(np.mean(nlls)), float(np.mean(kls))


def pretrain(params: ParamSet, cfg: RunConfig) -> ParamSet:
    """Brief supervised fit of the anchor mapping (query -> anchor response).

    Used to build a reference policy whose behaviour opposes the task, so the
    stability gradient genuinely conflicts with the plasticity gradient.
    """
    r, mcfg = cfg.run, cfg.model
    opt = Adam(r.pretrain_lr)
    for step in range(r.pretrain_steps):
        rng = rng_for(r.seed, _PRETRAIN, step)
        acc = GradSet.zeros_for(params)
        for _ in range(r.pretrain_batch):
            q = sample_query(rng, cfg.task.query_len, mcfg.vocab_size)
            y = anchor_for(cfg.task.kind, q, mcfg.vocab_size)
            seq = list(q) + list(y[:-1])
            logp, cache = M.forward(params, seq, mcfg)
            pos = np.arange(len(q) - 1, len(q) - 1 + len(y))
            dl = np.zeros_like(logp)
            dl[pos] = np.exp(logp[pos])
            dl[pos, np.asarray(y)] -= 1.0
            dl /= len(y) * r.pretrain_batch
            grads = M.backward(params, cache, dl, mcfg)
            acc = acc.with_flat(acc.flat() + grads.flat())
        params = opt.step(params, acc)
    return params


# -- metrics ----------------------------------------------------------------------


@dataclass
class MetricsRecord:
    step: int
    mean_reward: float
    plasticity_loss: float
    stability_loss: float
    heldout_nll: float
    kl_to_initial: float
    grad_norm_total: float
    layer_cosine: dict = field(default_factory=dict)
    alpha_min: Optional[float] = None
    alpha_median: Optional[float] = None
    alpha_max: Optional[float] = None
    alpha_count: int = 0
    conflict_fraction: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), allow_nan=False, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        data = json.loads(line)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown metrics fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class StepStats:
    step: int
    mean_reward: float
    plasticity_loss: float
    stability_loss: float
    grad_norm_total: float
    conflict_fraction: float
    alpha_mean: Optional[float]


@dataclass
class TrainResult:
    params: ParamSet
    reference: ParamSet
    metrics: list[MetricsRecord]
    steps: list[StepStats]
    reports: list[ResolutionReport]


def _check_finite(*values, what: str):
    for v in values:
        if v is not None and not math.isfinite(v):
            raise NumericalError(f"non-finite {what}")


def _summary_alpha(report: ResolutionReport):
    a = report.alphas()
    if not a:
        return None, None, None, 0
    return float(min(a)), float(np.median(a)), float(max(a)), len(a)


def train(cfg: RunConfig, out_dir: Optional[str | Path] = None, keep_reports: bool = False) -> TrainResult:
    """Run ``cfg.run.steps`` GRPO updates with the configured conflict resolution.

    Each step samples from the current policy (the old policy), computes
    per-query plasticity and stability gradients, resolves them layer by layer
    and applies one optimiser step per inner epoch.
    """
    mcfg, g = cfg.model, cfg.grpo
    params = M.init_params(mcfg, rng_for(cfg.run.seed, _INIT), cfg.run.init_std)
    if cfg.run.pretrain_steps:
        params = pretrain(params, cfg)
    initial = params
    opt = make_optimizer(cfg)
    heldout = heldout_sequences(cfg)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.ini").write_text(dump_config(cfg))
        M.save_checkpoint(out / "reference.ckpt", initial, mcfg)
        metrics_fh = open(out / "metrics.jsonl", "w")
        reports_fh = open(out / "reports.jsonl", "w")
    metrics, steps, reports = [], [], []
    try:
        for step in range(cfg.run.steps):
            old = params
            ref = initial if g.freeze_reference else old
            groups, mean_reward = collect_groups(old, cfg, step)
            for _ in range(g.inner_epochs):
                pla, sta, l_pla, l_sta = per_query_terms(params, ref, groups, g, mcfg)
                update, report = resolve_batch(pla, sta, g.beta, cfg.conflict)
                gnorm = norm(update.flat())
                _check_finite(gnorm, what="gradient")
                params = opt.step(params, update)
                if not params.all_finite():
                    raise NumericalError("non-finite parameters")
            lp, ls = float(np.mean(l_pla)), float(np.mean(l_sta))
            _check_finite(lp, ls, what="loss")
            amin, amed, amax, acount = _summary_alpha(report)
            stats = StepStats(step, mean_reward, lp, ls, gnorm, report.conflict_fraction(),
                              None if not acount else float(np.mean(report.alphas())))
            steps.append(stats)
            if keep_reports:
                reports.append(report)
            if out is not None:
                reports_fh.write(report.to_jsonl(step))
            if step % cfg.run.eval_every == 0 or step == cfg.run.steps - 1:
                nll_h, kl_h = heldout_metrics(params, initial, heldout, mcfg)
                _check_finite(nll_h, kl_h, what="held-out metric")
                rec = MetricsRecord(
                    step=step, mean_reward=mean_reward, plasticity_loss=lp, stability_loss=ls,
                    heldout_nll=nll_h, kl_to_initial=kl_h, grad_norm_total=gnorm,
                    layer_cosine={r.name: r.cosine for r in report.layers},
                    alpha_min=amin, alpha_median=amed, alpha_max=amax, alpha_count=acount,
                    conflict_fraction=report.conflict_fraction(),
                )
                metrics.append(rec)
                if out is not None:
                    metrics_fh.write(rec.to_json() + "\n")
    finally:
        if out is not None:
            metrics_fh.close()
            reports_fh.close()

    if out is not None:
        M.save_checkpoint(out / "final.ckpt", params, mcfg)
        with open(out / "steps.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            cols = [f.name for f in fields(StepStats)]
            w.writerow(cols)
            for s in steps:
                w.writerow(["" if getattr(s, c) is None else repr(getattr(s, c)) for c in cols])
        manifest = {
            "config_sha256": cfg.digest(),
            "seed": cfg.run.seed,
            "versions": {"pcr_lab": __version__, "numpy": np.__version__},
            "artifacts": ["config.ini", "reference.ckpt", "metrics.jsonl", "reports.jsonl",
                          "steps.csv", "final.ckpt"],
        }
        (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return TrainResult(params, initial, metrics, steps, reports)
