"""Command-line entry point: ``trpolab {run,compare,certify,resume,plot}``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure (partial
artifacts are kept).
"""
from __future__ import annotations

import argparse
import sys

from . import harness
from .harness import ConfigError, RunError

# flag -> config key (section.key); values are passed through as strings
_FLAGS = {
    "--env": "run.env",
    "--algo": "run.algo",
    "--seed": "run.seed",
    "--iterations": "run.iterations",
    "--hidden": "run.hidden_sizes",
    "--head": "run.head",
    "--out": "run.output_dir",
    "--checkpoint-every": "run.checkpoint_every",
    "--scheme": "sampling.scheme",
    "--paths": "sampling.num_paths",
    "--horizon": "sampling.horizon",
    "--gamma": "sampling.gamma",
    "--trunk-paths": "sampling.trunk_paths",
    "--anchors": "sampling.num_anchors",
    "--actions-per-state": "sampling.actions_per_state",
    "--rollout-len": "sampling.rollout_len",
    "--q-mode": "sampling.q_mode",
    "--baseline": "sampling.baseline",
    "--delta": "trust_region.delta",
    "--cg-iters": "trust_region.cg_iters",
    "--cg-damping": "trust_region.cg_damping",
    "--backtrack-ratio": "trust_region.backtrack_ratio",
    "--max-backtracks": "trust_region.max_backtracks",
    "--fvp-subsample": "trust_region.fvp_subsample",
    "--fim-mode": "trust_region.fim_mode",
    "--inverse-lambda": "baseline.stepsize_inverse_lambda",
    "--l2-delta": "baseline.l2_delta",
    "--cem-population": "baseline.cem_population",
    "--cem-elite-frac": "baseline.cem_elite_frac",
    "--cem-init-std": "baseline.cem_init_stddev",
    "--cem-episodes": "baseline.cem_episodes",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    for flag, key in _FLAGS.items():
        p.add_argument(flag, dest=key, default=None, metavar=key.split(".")[1].upper())


def _overrides(args) -> dict:
    return {key: getattr(args, key) for key in _FLAGS.values() if getattr(args, key) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trpolab", description="Trust-region policy optimization lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train one configuration")
    _add_config_flags(p)
    p.add_argument("--sweep-stepsize", metavar="BASE,FACTOR,COUNT",
                   help="natural-gradient stepsize sweep instead of a single run")

    p = sub.add_parser("compare", help="several algorithms over several seeds")
    _add_config_flags(p)
    p.add_argument("--algos", required=True, help="comma-separated algorithm list")
    p.add_argument("--runs", type=int, default=5)

    p = sub.add_parser("certify", help="certify the improvement bounds on random instances")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--states", type=int, default=5)
    p.add_argument("--actions", type=int, default=3)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output", help="CSV path (default: stdout)")

    p = sub.add_parser("resume", help="continue a run from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--iterations", type=int, help="new total iteration count")

    p = sub.add_parser("plot", help="plot a log.csv or aggregate.csv to SVG")
    p.add_argument("csv")
    p.add_argument("--output", required=True)
    p.add_argument("--y", default="mean_return")
    p.add_argument("--x", default="cumulative_samples")
    return parser


def _summary(log) -> str:
    if not log.rows:
        return f"wrote {log.output_dir} (no iterations)"
    last = log.rows[-1]
    return (f"wrote {log.output_dir}: {len(log.rows)} iterations, "
            f"final mean return {last['mean_return']:.4g}")


def _read_rows(path):
    import csv

    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({k: (v if k == "algo" else float(v)) for k, v in r.items()})
    return rows


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = harness.load_config(args.config, _overrides(args))
            if args.sweep_stepsize:
                try:
                    base, factor, count = args.sweep_stepsize.split(",")
                    base, factor, count = float(base), float(factor), int(count)
                except ValueError:
                    raise ConfigError("--sweep-stepsize expects BASE,FACTOR,COUNT") from None
                if cfg.algo != "natural-gradient":
                    raise ConfigError("--sweep-stepsize applies to --algo natural-gradient")
                rows, best = harness.sweep_stepsize(cfg, base, factor, count, cfg.output_dir)
                print(f"best 1/lambda: {best['stepsize_inverse_lambda'] if best else 'none'}")
            else:
                print(_summary(harness.run_experiment(cfg)))
        elif args.command == "compare":
            import dataclasses

            base = harness.load_config(args.config, _overrides(args))
            cfgs = [dataclasses.replace(base, algo=a.strip()) for a in args.algos.split(",") if a.strip()]
            for c in cfgs:
                if c.algo not in harness.ALGOS:
                    raise ConfigError(f"unknown algo {c.algo!r}")
            _, failures = harness.compare_algorithms(cfgs, args.runs, base.output_dir)
            print(f"wrote {base.output_dir}/aggregate.csv ({len(failures)} failed runs)")
        elif args.command == "certify":
            if args.instances < 0 or args.states < 1 or args.actions < 1 or not 0 < args.gamma < 1:
                raise ConfigError("need instances >= 0, states >= 1, actions >= 1, 0 < gamma < 1")
            rows, summary = harness.certify_suite(args.instances, args.states, args.actions, args.gamma, args.seed)
            harness.write_certify_csv(rows, args.output or sys.stdout)
            print(f"min slack {summary['min_slack']:.3e}, refined-bound min slack {summary['min_slack_refined']:.3e}, "
                  f"refined bound tighter on {summary['fraction_refined_tighter']:.1%}", file=sys.stderr)
        elif args.command == "resume":
            print(_summary(harness.resume_experiment(args.checkpoint, args.iterations)))
        elif args.command == "plot":
            try:
                rows = _read_rows(args.csv)
            except (OSError, ValueError, KeyError) as exc:
                raise ConfigError(f"cannot read {args.csv}: {exc}") from None
            if rows and (args.y not in rows[0] or args.x not in rows[0]):
                raise ConfigError(f"columns {args.x!r}/{args.y!r} not in {args.csv}")
            harness.plot_curves(rows, args.output, y=args.y, x=args.x)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RunError, RuntimeError, ArithmeticError) as exc:
        it = getattr(exc, "iteration", None)
        where = f" at iteration {it}" if it is not None else ""
        print(f"run failed{where}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
