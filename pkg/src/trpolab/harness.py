"""Experiment orchestration: configs, seeded runs, logs, checkpoints,
multi-seed comparisons, bound-certification sweeps and plots."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import policies as pol
from . import theory
from .envs import ActionSpace, TabularEnv, make_env
from .mdp import TabularPolicy, evaluate_exact, random_policy
from .envs import random_mdp
from .solver import FvpContext, SamplingConfig, TrustRegionConfig, collect, compute_step

__all__ = [
    "ConfigError",
    "RunError",
    "RunConfig",
    "RunLog",
    "LOG_COLUMNS",
    "load_config",
    "config_to_ini",
    "run_experiment",
    "resume_experiment",
    "compare_algorithms",
    "sweep_stepsize",
    "certify_suite",
    "write_certify_csv",
    "plot_curves",
]

ALGOS = ("trpo-sp", "trpo-vine", "natural-gradient", "vanilla-pg", "cem")
LOG_VERSION = 1
LOG_COLUMNS = (
    "iteration", "samples", "cumulative_samples", "mean_return", "mean_length", "eta_estimate",
    "surrogate", "kl", "beta", "backtracks", "cg_residual", "accepted", "exact_eta",
)
CERTIFY_COLUMNS = (
    "instance_id", "alpha", "epsilon", "lower_bound", "eta_new", "slack",
    "epsilon_refined", "lower_bound_refined", "slack_refined", "refined_tighter",
)


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class RunConfig:
    env: str = "cartpole"
    algo: str = "trpo-sp"
    seed: int | None = None
    iterations: int = 100
    hidden_sizes: tuple = (30,)
    head: str = "auto"
    output_dir: str = "runs/default"
    checkpoint_every: int = 10
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    trust: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    baseline: bl.BaselineConfig = field(default_factory=bl.BaselineConfig)

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("a seed is required")
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        if self.head not in ("auto", *pol.HEADS):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.iterations < 0 or self.checkpoint_every < 1:
            raise ConfigError("iterations must be >= 0 and checkpoint_every >= 1")
        try:
            make_env(self.env)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["hidden_sizes"] = tuple(d.get("hidden_sizes", ()))
        d["sampling"] = SamplingConfig(**d.get("sampling", {}))
        d["trust"] = TrustRegionConfig(**d.get("trust", {}))
        d["baseline"] = bl.BaselineConfig(**d.get("baseline", {}))
        return cls(**d)


# -- config files ------------------------------------------------------------------

_SECTIONS = {"run": RunConfig, "sampling": SamplingConfig, "trust_region": TrustRegionConfig,
             "baseline": bl.BaselineConfig}
_NESTED = {"sampling": "sampling", "trust_region": "trust", "baseline": "baseline"}


def _convert(cls, name, raw: str):
    f = {f.name: f for f in dataclasses.fields(cls)}.get(name)
    if f is None or (cls is RunConfig and name in _NESTED.values()):
        raise ConfigError(f"unknown key {name!r} for [{cls.__name__}]")
    default = f.default if f.default is not dataclasses.MISSING else None
    raw = raw.strip()
    try:
        if name == "hidden_sizes":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if name == "seed":
            return int(raw)
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI-style config and apply ``overrides``.

    Sections: ``[run]``, ``[sampling]``, ``[trust_region]``, ``[baseline]``.
    Override keys are ``section.key`` (``run`` may be omitted); values are
    strings as they would appear in the file. Overrides win.
    """
    values = {s: {} for s in _SECTIONS}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for section in cp.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            values[section].update(cp[section])
    for key, raw in (overrides or {}).items():
        section, _, name = key.rpartition(".")
        section = section or "run"
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        values[section][name] = str(raw)
    kwargs = {}
    try:
        for section, cls in _SECTIONS.items():
            if section == "run":
                continue
            sub = {k: _convert(cls, k, v) for k, v in values[section].items()}
            kwargs[_NESTED[section]] = cls(**sub)
        run = {k: _convert(RunConfig, k, v) for k, v in values["run"].items()}
        return RunConfig(**run, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_ini(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    d = cfg.to_dict()
    cp["run"] = {k: (" ".join(map(str, v)) if k == "hidden_sizes" else str(v))
                 for k, v in d.items() if k not in _NESTED.values()}
    for section, key in _NESTED.items():
        cp[section] = {k: str(v) for k, v in d[key].items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# -- runs --------------------------------------------------------------------------


@dataclass
class RunLog:
    rows: list
    output_dir: Path
    timing: list = field(default_factory=list)

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def _policy_spec(cfg: RunConfig, env) -> pol.NetworkSpec:
    space: ActionSpace = env.action_space
    head = cfg.head
    if head == "auto":
        if isinstance(env, TabularEnv) and not cfg.hidden_sizes:
            head = "tabular"
        else:
            head = "gaussian" if space.kind == "box" else "categorical"
    if head == "gaussian":
        if space.kind != "box":
            raise ConfigError("gaussian head needs a continuous action space")
        return pol.NetworkSpec.gaussian(env.observation_dim, cfg.hidden_sizes, space.dim)
    if space.kind != "discrete":
        raise ConfigError(f"{head} head needs a discrete action space")
    if head == "tabular":
        if not isinstance(env, TabularEnv) or cfg.hidden_sizes:
            raise ConfigError("tabular head needs a tabular environment and no hidden layers")
        return pol.NetworkSpec.tabular(env.observation_dim, space.factors[0])
    return pol.NetworkSpec.categorical(env.observation_dim, cfg.hidden_sizes, space.factors)


def _exact_eta(env, spec, theta) -> float:
    if not isinstance(env, TabularEnv):
        return float("nan")
    S = env.mdp.num_states
    probs = pol.forward(spec, theta, np.eye(S)).probs[0]
    probs = probs / probs.sum(axis=1, keepdims=True)
    return evaluate_exact(env.mdp, TabularPolicy(probs)).eta


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# trpolab log v{LOG_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])


def read_log(path) -> list:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    for r in csv.DictReader(lines):
        rows.append({k: (int(v) if k in ("iteration", "samples", "cumulative_samples", "backtracks", "accepted")
                         else float(v)) for k, v in r.items()})
    return rows


def _write_timing(path: Path, timing) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,wall_time\n")
        for it, t in timing:
            fh.write(f"{it},{t:.6f}\n")


def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def _save_checkpoint(path: Path, cfg: RunConfig, spec, theta, rng, rows, cem_state, iteration) -> None:
    doc = {
        "version": LOG_VERSION,
        "iteration": iteration,
        "config": cfg.to_dict(),
        "spec": dataclasses.asdict(spec),
        "theta": [float(x) for x in theta],
        "rng_state": _rng_state(rng),
        "rows": rows,
        "cem_state": None if cem_state is None else {
            "mean": [float(x) for x in cem_state.mean],
            "std": [float(x) for x in cem_state.std],
            "best_theta": [float(x) for x in cem_state.best_theta],
            "best_score": cem_state.best_score,
            "iteration": cem_state.iteration,
            "env_steps": cem_state.env_steps,
        },
    }
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1))
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != LOG_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')!r}")
    return doc


def _trpo_like_step(cfg: RunConfig, env, spec, theta, rng):
    """One iteration for the gradient-based algorithms. Returns ``(theta_new, row)``."""
    scfg = cfg.sampling
    if cfg.algo == "trpo-vine":
        scfg = dataclasses.replace(scfg, scheme="vine")
    elif cfg.algo == "trpo-sp":
        scfg = dataclasses.replace(scfg, scheme="single-path")
    try:
        est, info = collect(env, spec, theta, scfg, rng)
    except Exception as exc:
        raise RunError(f"sampling stage failed: {exc}") from exc
    try:
        fvp = FvpContext.for_estimate(est, cfg.trust, rng)
        if cfg.algo in ("trpo-sp", "trpo-vine"):
            rep = compute_step(est, fvp, cfg.trust)
            theta_new = rep.theta_new
            out = dict(surrogate=est.value + rep.surrogate_improvement if rep.accepted else est.value,
                       kl=rep.kl_after if rep.accepted else 0.0, beta=rep.accepted_beta,
                       backtracks=rep.backtracks_used, cg_residual=rep.cg_residual, accepted=rep.accepted)
        elif cfg.algo == "natural-gradient":
            theta_new, _ = bl.natural_gradient_step(est, fvp, cfg.baseline)
            obj, kl_val = est.evaluate(theta_new)
            out = dict(surrogate=obj, kl=kl_val, beta=cfg.baseline.stepsize_inverse_lambda, backtracks=0,
                       cg_residual=float("nan"), accepted=True)
        else:
            theta_new = bl.vanilla_pg_step(est, cfg.baseline)
            obj, kl_val = est.evaluate(theta_new)
            out = dict(surrogate=obj, kl=kl_val, beta=float(np.linalg.norm(theta_new - theta)), backtracks=0,
                       cg_residual=float("nan"), accepted=True)
    except Exception as exc:
        raise RunError(f"step stage failed: {exc}") from exc
    row = dict(samples=info["samples"], mean_return=info["mean_return"], mean_length=info["mean_length"],
               eta_estimate=info["eta_estimate"], **out)
    return theta_new, row


def _cem_step(cfg: RunConfig, env, spec, state, rng):
    before = state.env_steps
    try:
        state, trace = bl.cem_optimize(env, spec, cfg.baseline, 1, rng, state, horizon=cfg.sampling.horizon)
    except Exception as exc:
        raise RunError(f"CEM stage failed: {exc}") from exc
    best, mean = trace[-1]
    row = dict(samples=state.env_steps - before, mean_return=mean, mean_length=float("nan"),
               eta_estimate=best, surrogate=state.best_score, kl=float("nan"), beta=float("nan"),
               backtracks=0, cg_residual=float("nan"), accepted=True)
    return state, row


def _execute(cfg: RunConfig, env, spec, theta, rng, rows, cem_state, start_iter, out: Path, timing) -> RunLog:
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(config_to_ini(cfg))

    def checkpoint(it):
        _save_checkpoint(ckpt_dir / f"iter_{it:05d}.json", cfg, spec, theta, rng, rows, cem_state, it)

    if start_iter == 0:
        checkpoint(0)
    cumulative = rows[-1]["cumulative_samples"] if rows else 0
    for it in range(start_iter + 1, cfg.iterations + 1):
        t0 = time.perf_counter()
        try:
            if cfg.algo == "cem":
                cem_state, row = _cem_step(cfg, env, spec, cem_state, rng)
                theta = cem_state.mean.copy()
            else:
                theta, row = _trpo_like_step(cfg, env, spec, theta, rng)
            if not np.all(np.isfinite(theta)):
                raise RunError("parameters became non-finite")
        except RunError as exc:
            exc.iteration = it
            _write_log(out / "log.csv", rows)
            _write_timing(out / "timing.csv", timing)
            (out / "error.txt").write_text(f"iteration {it}: {exc}\n")
            raise
        cumulative += row["samples"]
        row = dict(iteration=it, cumulative_samples=cumulative, exact_eta=_exact_eta(env, spec, theta), **row)
        row["accepted"] = int(row["accepted"])
        rows.append({c: row[c] for c in LOG_COLUMNS})
        timing.append((it, time.perf_counter() - t0))
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            checkpoint(it)
    _write_log(out / "log.csv", rows)
    _write_timing(out / "timing.csv", timing)
    return RunLog(rows, out, timing)


def _setup(cfg: RunConfig):
    try:
        env = make_env(cfg.env, discount=cfg.sampling.gamma if cfg.sampling.gamma < 1 else 0.99)
        spec = _policy_spec(cfg, env)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return env, spec


def run_experiment(cfg: RunConfig, output_dir=None) -> RunLog:
    """Run ``cfg`` from scratch. Everything random flows from ``cfg.seed``.

    Writes ``log.csv`` (deterministic), ``timing.csv`` (wall clock),
    ``config.ini`` and ``checkpoints/iter_*.json`` (every
    ``checkpoint_every`` iterations, at iteration 0 and at the end).
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    env, spec = _setup(cfg)
    rng = np.random.default_rng(cfg.seed)
    theta = pol.init_params(spec, rng)
    cem_state = None
    if cfg.algo == "cem":
        d = theta.size
        cem_state = bl.CemState(np.zeros(d), np.full(d, cfg.baseline.cem_init_stddev), np.zeros(d))
        theta = cem_state.mean.copy()
    return _execute(cfg, env, spec, theta, rng, [], cem_state, 0, out, [])


def resume_experiment(checkpoint_path, iterations: int | None = None, output_dir=None) -> RunLog:
    """Continue a run from a checkpoint; the result matches an uninterrupted run."""
    doc = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_dict(doc["config"])
    if iterations is not None:
        cfg = dataclasses.replace(cfg, iterations=iterations)
    out = Path(output_dir or Path(checkpoint_path).resolve().parent.parent)
    env, spec = _setup(cfg)
    rng = np.random.default_rng()
    rng.bit_generator.state = doc["rng_state"]
    theta = np.array(doc["theta"], dtype=float)
    cem_state = None
    if doc["cem_state"] is not None:
        c = doc["cem_state"]
        cem_state = bl.CemState(np.array(c["mean"]), np.array(c["std"]), np.array(c["best_theta"]),
                                c["best_score"], c["iteration"], c["env_steps"])
    rows = [dict(r) for r in doc["rows"]]
    return _execute(cfg, env, spec, theta, rng, rows, cem_state, doc["iteration"], out, [])


# -- comparisons -------------------------------------------------------------------


def compare_algorithms(cfgs, runs_per_algo: int = 5, output_dir="runs/compare", plot: bool = True):
    """Run every config with seeds ``seed, seed+1, ...`` and aggregate.

    Writes ``aggregate.csv`` with, per algorithm and iteration, the mean
    cumulative sample count and the mean and standard error of the mean
    episode return over the runs that reached that iteration, plus
    ``compare.svg``. Failed runs are listed in ``failures.txt``.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    aggregate, failures = [], []
    for cfg in cfgs:
        label = cfg.algo
        logs = []
        for k in range(runs_per_algo):
            run_cfg = dataclasses.replace(cfg, seed=cfg.seed + k)
            try:
                logs.append(run_experiment(run_cfg, out / label / f"seed_{run_cfg.seed}").rows)
            except RunError as exc:
                failures.append(f"{label} seed {run_cfg.seed} iteration {exc.iteration}: {exc}")
                partial = out / label / f"seed_{run_cfg.seed}" / "log.csv"
                if partial.exists():
                    logs.append(read_log(partial))
        n_iter = max((len(l) for l in logs), default=0)
        for i in range(n_iter):
            have = [l[i] for l in logs if len(l) > i]
            ret = np.array([r["mean_return"] for r in have])
            aggregate.append({
                "algo": label, "iteration": i + 1,
                "cumulative_samples": float(np.mean([r["cumulative_samples"] for r in have])),
                "mean_return": float(np.mean(ret)),
                "stderr": float(np.std(ret, ddof=1) / math.sqrt(len(ret))) if len(ret) > 1 else 0.0,
                "runs": len(ret),
            })
    cols = ["algo", "iteration", "cumulative_samples", "mean_return", "stderr", "runs"]
    with open(out / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in aggregate:
            w.writerow([r[c] if isinstance(r[c], str) else _fmt(r[c]) for c in cols])
    (out / "failures.txt").write_text("".join(f + "\n" for f in failures))
    if plot and aggregate:
        plot_curves(aggregate, out / "compare.svg")
    return aggregate, failures


def sweep_stepsize(cfg: RunConfig, base: float, factor: float, count: int, output_dir="runs/sweep"):
    """Natural-gradient runs with ``1/lambda = base * factor**i``. Returns rows and the best value."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        step = base * factor**i
        c = dataclasses.replace(cfg, baseline=dataclasses.replace(cfg.baseline, stepsize_inverse_lambda=step))
        try:
            log = run_experiment(c, out / f"step_{i}")
            final = log.rows[-1]["mean_return"] if log.rows else float("nan")
        except RunError:
            final = float("nan")
        rows.append({"stepsize_inverse_lambda": step, "final_mean_return": final})
    finite = [r for r in rows if np.isfinite(r["final_mean_return"])]
    best = max(finite, key=lambda r: r["final_mean_return"]) if finite else None
    with open(out / "sweep.csv", "w") as fh:
        fh.write("stepsize_inverse_lambda,final_mean_return,best\n")
        for r in rows:
            fh.write(f"{_fmt(r['stepsize_inverse_lambda'])},{_fmt(r['final_mean_return'])},{int(r is best)}\n")
    return rows, best


# -- certification -------------------------------------------------------------------


def certify_suite(instances: int, states: int, actions: int, gamma: float, seed: int):
    """Certify both improvement bounds on random (MDP, pi, pi~) triples.

    Returns ``(rows, summary)``; ``summary`` has the minimum slacks and the
    fraction of instances where the refined bound is strictly tighter.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(instances):
        mdp = random_mdp(states, actions, int(rng.integers(0, 2**63 - 1)), discount=gamma)
        pi = random_policy(states, actions, rng)
        pi_new = random_policy(states, actions, rng)
        c1 = theory.certify_tv_bound(mdp, pi, pi_new)
        c2 = theory.certify_perturbation_bound(mdp, pi, pi_new)
        rows.append({
            "instance_id": i, "alpha": c1.alpha, "epsilon": c1.epsilon, "lower_bound": c1.lower_bound,
            "eta_new": c1.eta_new, "slack": c1.slack, "epsilon_refined": c2.epsilon,
            "lower_bound_refined": c2.lower_bound, "slack_refined": c2.slack,
            "refined_tighter": int(c2.lower_bound > c1.lower_bound),
        })
    summary = {
        "instances": instances,
        "min_slack": min((r["slack"] for r in rows), default=float("nan")),
        "min_slack_refined": min((r["slack_refined"] for r in rows), default=float("nan")),
        "fraction_refined_tighter": (sum(r["refined_tighter"] for r in rows) / instances) if instances else float("nan"),
    }
    return rows, summary


def write_certify_csv(rows, path_or_file) -> None:
    fh = open(path_or_file, "w", newline="") if isinstance(path_or_file, (str, Path)) else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CERTIFY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in CERTIFY_COLUMNS])
    finally:
        if isinstance(path_or_file, (str, Path)):
            fh.close()


# -- plots ----------------------------------------------------------------------------


def plot_curves(rows, path, y="mean_return", x="cumulative_samples") -> None:
    """Static SVG learning curves; one line per ``algo`` (or a single line)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = {}
    for r in rows:
        groups.setdefault(r.get("algo", "run"), []).append(r)
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rs in groups.items():
        xs = np.array([r[x] for r in rs], dtype=float)
        ys = np.array([r[y] for r in rs], dtype=float)
        ax.plot(xs, ys, label=label)
        if "stderr" in rs[0]:
            se = np.array([r["stderr"] for r in rs], dtype=float)
            ax.fill_between(xs, ys - se, ys + se, alpha=0.25)
    ax.set_xlabel(x.replace("_", " "))
    ax.set_ylabel(y.replace("_", " "))
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
