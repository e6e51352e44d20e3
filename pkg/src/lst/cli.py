"""Command-line harness: `lst verify|bench|train|gen-data`.

Environment: LST_LOG sets the logging level (DEBUG/INFO/WARNING/...).
All commands are deterministic given --seed, timing values excepted.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import harness
from .minibatch import SOLVE_EACH_BATCH, WOODBURY
from .stabilization import StabilizationConfig

log = logging.getLogger(__name__)


def _add_stab_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma-low", type=float, default=0.001, help="safe range lower edge")
    p.add_argument("--sigma-high", type=float, default=100.0, help="safe range upper edge")
    p.add_argument("--n-check", type=int, default=100, help="steps between conditioning checks")
    p.add_argument("--power-iters", type=int, default=100, help="power-iteration budget")
    p.add_argument(
        "--detector", choices=("auto", "full_svd", "power_iteration"), default="auto"
    )


def _stab_from_args(args) -> StabilizationConfig:
    return StabilizationConfig(
        sigma_low=args.sigma_low,
        sigma_high=args.sigma_high,
        n_check=args.n_check,
        power_iters=args.power_iters,
        detector=args.detector,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lst", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    pv = sub.add_parser("verify", help="lockstep factored-vs-naive equivalence check")
    pv.add_argument("--D", type=int, default=1000)
    pv.add_argument("--d", type=int, default=32)
    pv.add_argument("--K", type=int, default=8)
    pv.add_argument("--m", type=int, default=16, help="minibatch size for the batched sub-runs")
    pv.add_argument("--eta", type=float, default=0.01)
    pv.add_argument("--steps", type=int, default=500)
    pv.add_argument("--seed", type=int, default=0)
    pv.set_defaults(func=cmd_verify)

    pb = sub.add_parser("bench", help="time naive vs factored, write CSV")
    pb.add_argument("--D", type=str, default="10000,100000", help="comma-separated D sweep")
    pb.add_argument("--d", type=int, default=128)
    pb.add_argument("--K", type=int, default=16)
    pb.add_argument("--m", type=int, default=128)
    pb.add_argument("--eta", type=float, default=0.01)
    pb.add_argument("--reps", type=int, default=20, help="timed repetitions per point")
    pb.add_argument("--warmup", type=int, default=3)
    pb.add_argument("--seed", type=int, default=0)
    pb.add_argument("--threads", type=int, default=1, help="BLAS workers while timing")
    pb.add_argument("--out", type=str, default="bench.csv")
    pb.set_defaults(func=cmd_bench)

    pt = sub.add_parser("train", help="demo trainer: sparse input -> tanh -> output layer")
    pt.add_argument("--data", type=str, default=None, help="dataset path (see gen-data)")
    pt.add_argument("--synthetic", action="store_true", help="plant a synthetic dataset")
    pt.add_argument("--Din", type=int, default=1000)
    pt.add_argument("--D", type=int, default=1000)
    pt.add_argument("--d", type=int, default=32)
    pt.add_argument("--Kin", type=int, default=8)
    pt.add_argument("--K", type=int, default=8)
    pt.add_argument("--m", type=int, default=1)
    pt.add_argument("--eta", type=float, default=0.01)
    pt.add_argument("--steps", type=int, default=500)
    pt.add_argument("--seed", type=int, default=0)
    pt.add_argument("--impl", choices=("naive", "factored", "both"), default="factored")
    pt.add_argument("--nonlinearity", choices=("none", "tanh"), default="tanh")
    pt.add_argument("--no-stabilize", action="store_true", help="disable conditioning checks")
    _add_stab_flags(pt)
    pt.add_argument("--out", type=str, default="loss.csv")
    pt.set_defaults(func=cmd_train)

    pg = sub.add_parser("gen-data", help="write a synthetic sparse dataset")
    pg.add_argument("--Din", type=int, default=1000)
    pg.add_argument("--D", type=int, default=1000)
    pg.add_argument("--Kin", type=int, default=8)
    pg.add_argument("--K", type=int, default=8)
    pg.add_argument("--n-examples", type=int, default=1000)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--no-planted", action="store_true", help="random targets instead of planted")
    pg.add_argument("--out", type=str, required=True)
    pg.set_defaults(func=cmd_gen_data)

    return parser


def cmd_verify(args) -> int:
    report = harness.run_verify(
        D=args.D, d=args.d, K=args.K, eta=args.eta, steps=args.steps, seed=args.seed, m=args.m
    )
    for r in report.runs:
        status = "PASS" if r.passed else "FAIL"
        extra = "" if r.first_bad_step is None else f" first_bad_step={r.first_bad_step}"
        print(
            f"{status} {r.name}: steps={r.steps} max_loss_rel={r.max_loss_rel:.3e} "
            f"final_weight_rel={r.final_weight_rel:.3e}{extra}"
        )
    print(
        f"{'PASS' if report.passed else 'FAIL'} overall "
        f"(loss tol {report.loss_tol:g}, weight tol {report.weight_tol:g})"
    )
    return 0 if report.passed else 1


def cmd_bench(args) -> int:
    sweep = [int(tok) for tok in args.D.split(",") if tok.strip()]
    records = harness.run_bench(
        sweep,
        d=args.d,
        K=args.K,
        m=args.m,
        eta=args.eta,
        reps=args.reps,
        warmup=args.warmup,
        seed=args.seed,
        threads=args.threads,
        out_path=args.out,
    )
    for r in records:
        print(
            f"{r.impl:8s} D={r.D:<8d} {r.seconds_per_batch:.6f} s/batch "
            f"speedup={r.speedup_vs_naive:8.2f} theoretical={r.theoretical_speedup:.2f}"
        )
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.data is None and not args.synthetic:
        print("train: need --data PATH or --synthetic", file=sys.stderr)
        return 2
    config = harness.TrainConfig(
        D_in=args.Din,
        D=args.D,
        d=args.d,
        K_in=args.Kin,
        K=args.K,
        m=args.m,
        eta=args.eta,
        steps=args.steps,
        seed=args.seed,
        impl=args.impl,
        stabilization=None if args.no_stabilize else _stab_from_args(args),
        nonlinearity=args.nonlinearity,
    )
    try:
        examples = harness.load_examples_or_synthetic(config, data_path=args.data)
        rows = harness.run_train(config, examples)
    except (FloatingPointError, ValueError) as exc:
        print(f"train: aborted: {exc}", file=sys.stderr)
        return 1
    harness.write_loss_csv(args.out, rows)
    if rows:
        first = min(rows[0][1].values())
        last = min(rows[-1][1].values())
        print(f"trained {len(rows)} steps: loss {first:.6g} -> {last:.6g}")
    print(f"wrote {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    n = harness.gen_data_file(
        args.out,
        D_in=args.Din,
        D=args.D,
        K_in=args.Kin,
        K=args.K,
        n_examples=args.n_examples,
        seed=args.seed,
        planted=not args.no_planted,
    )
    print(f"wrote {n} examples to {args.out}")
    return 0


def main(argv=None) -> int:
    level = os.environ.get("LST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
