"""Command line entry point: ``pcr-lab {train,mmse,quad,diagnose}``.

Exit codes: 0 success, 2 configuration/validation error, 3 non-finite numbers.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import mmse
from .conflict import Mode
from .harness.config import ConfigError, RunConfig, load_config
from .harness.diagnose import diagnose, write_cosine_csv
from .harness.testbed import QuadTestbedSpec, quad_testbed
from .harness.train import NumericalError, collect_groups, train
from .model import load_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    res = train(cfg, args.out)
    last = res.metrics[-1]
    print(f"trained {cfg.run.steps} steps; final reward {last.mean_reward:.4f}, "
          f"held-out nll {last.heldout_nll:.4f}; outputs in {args.out}")
    return EXIT_OK


def cmd_mmse(args) -> int:
    try:
        ch = mmse.ScalarChannel(args.var_pla, args.var_sta)
    except ValueError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    if args.grid < 11 or args.samples < 100:
        return _fail("--grid must be >= 11 and --samples >= 100", EXIT_CONFIG)
    curve = mmse.risk_sweep(ch, args.grid, args.samples, args.seed)
    if not np.isfinite(curve.risks).all():
        return _fail("non-finite risk estimate", EXIT_NUMERIC)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mmse.write_curve_csv(curve, out)
    dom = mmse.dominance_check(ch)
    line = (f"r_pcr={dom.r_pcr!r},r_pcgrad={dom.r_pcgrad!r},r_sum={dom.r_sum!r},strict={dom.strict},"
            f"alpha_star={mmse.optimal_alpha(ch)!r},argmin_alpha={curve.argmin_alpha!r}")
    out.with_name(out.name + ".summary").write_text(line + "\n")
    print(line)
    return EXIT_OK


def cmd_quad(args) -> int:
    try:
        spec = QuadTestbedSpec(dim=args.dim, anchor_norm=args.anchor_norm, perp_norm=args.perp_norm,
                               axis_offset=args.axis_offset, noise_pla=args.noise_pla,
                               noise_sta=args.noise_sta, steps=args.steps, samples=args.samples)
    except ValueError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    trace = quad_testbed(spec, args.mode, args.seed)
    if not np.isfinite(trace.axis_update).all():
        return _fail("non-finite update", EXIT_NUMERIC)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "conflict", "alpha", "axis_obs", "axis_update", "axis_truth", "axis_error"])
        for t in range(spec.steps):
            w.writerow([t, int(trace.conflict[t]), repr(float(trace.alpha[t])), repr(float(trace.axis_obs[t])),
                        repr(float(trace.axis_update[t])), repr(float(trace.axis_truth[t])),
                        repr(float(trace.axis_error[t]))])
    n_conf = int(trace.conflict.sum())
    mse = trace.mse() if n_conf else float("nan")
    print(f"mode={args.mode} conflict_steps={n_conf} axis_mse={mse!r} alpha_true={trace.alpha_true!r}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    params, mcfg = load_checkpoint(args.ckpt)
    ref = params
    if args.ref_ckpt:
        ref, ref_cfg = load_checkpoint(args.ref_ckpt)
        if ref_cfg != mcfg:
            return _fail("reference checkpoint has a different model configuration", EXIT_CONFIG)
    cfg = load_config(args.config) if args.config else RunConfig()
    if cfg.model != mcfg:
        cfg = RunConfig(run=cfg.run, model=mcfg, grpo=cfg.grpo, conflict=cfg.conflict, task=cfg.task)
    groups, _ = collect_groups(params, cfg, args.step)
    rows = diagnose(params, ref, groups, cfg.grpo, mcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cosine_csv(rows, out)
    for r in rows:
        print(f"{r.layer:10s} {r.tag:10s} cos={r.cosine:+.4f}{' (zero norm)' if r.zero_norm else ''}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcr-lab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run GRPO training with conflict resolution")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("mmse", help="risk curve of the scalar shrinkage estimator")
    m.add_argument("--var-pla", type=float, required=True)
    m.add_argument("--var-sta", type=float, required=True)
    m.add_argument("--grid", type=int, default=101)
    m.add_argument("--samples", type=int, default=1_000_000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mmse)

    q = sub.add_parser("quad", help="conflicting-quadratic testbed")
    q.add_argument("--mode", choices=["pcr", "pcgrad", "sum"], required=True)
    q.add_argument("--dim", type=int, default=16)
    q.add_argument("--noise-pla", type=float, default=1.0)
    q.add_argument("--noise-sta", type=float, default=1.0)
    q.add_argument("--steps", type=int, default=10_000)
    q.add_argument("--samples", type=int, default=8)
    q.add_argument("--anchor-norm", type=float, default=20.0)
    q.add_argument("--perp-norm", type=float, default=0.0)
    q.add_argument("--axis-offset", type=float, default=0.0)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quad)

    d = sub.add_parser("diagnose", help="layer-wise cosine between plasticity and stability gradients")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--ref-ckpt")
    d.add_argument("--config")
    d.add_argument("--step", type=int, default=0, help="rollout stream index")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except NumericalError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except (OSError, ValueError) as exc:
        return _fail(str(exc), EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
