"""Seeded multi-run experiments: configuration, execution, CSV output and plots.

Within one seed every algorithm starts from the same initial network
weights. Each run writes its episodes to ``metrics.csv``; ``runs.csv``
holds one line per run, ``summary.csv`` the per-bucket mean return with a
95% t-interval across runs, and ``convergence.csv`` the convergence
statistics per algorithm.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .agents import A2cAgent, DqnAgent, QPolicy, TrainLog, load_policy
from .baselines import run_max_policy_change, run_plain, run_random
from .curriculum import TARGET_PHASES, CurriculumConfig, run_readc
from .envs.grid import load_board, make_grid_env
from .envs.parking import ParkingEnv, ParkingSpec
from .regressor import GbmModel

log = logging.getLogger(__name__)

ALGORITHMS = ("none", "readc-td", "readc-sa", "random", "max-policy-change")
DOMAINS = ("keylock", "flags", "parking")
THRESHOLD_PRESETS = {
    "desk-keylock": 1490.0,
    "desk-flags": 55.0,
    "desk-parking": -20.0,
    "paper-keylock": 900.0,
    "paper-flags": 84.0,
    "paper-parking": -15.0,
}
AUTO_SLACK = 30.0
WORKERS_ENV = "READC_WORKERS"


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


class MissingArtifact(FileNotFoundError):
    """A teacher or regressor file needed by the run does not exist."""


# -- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    # [experiment]
    domain: str = "keylock"
    board: str = "keylock_10x10"
    algorithms: tuple = ("none",)
    n_runs: int = 1
    seed: int = 0
    budget: int = 300_000
    bucket: int = 1_000
    output_dir: str = "results"
    # [network]
    hidden: tuple = (64, 64, 64)
    learning_rate: float = 0.005
    gamma: float = 0.99
    buffer_size: int = 40_000
    batch_size: int = 16
    eps_start: float = 1.0
    eps_min: float = 0.01
    eps_decay: float = 0.995
    # [curriculum]
    max_length: int = 4
    eta: int = 5_000
    beta: int = 1_500
    heuristic: str = "max-entropy"
    clustering: bool = False
    cutoff: float = 3.0
    n_clusters: int = 0
    entropy_window: int = 10
    step_max_steps: int = 5_000
    subset_size: int = 2_000
    # [baselines]
    random_step_iters: int = 2_000
    mpc_steps_prior: int = 5_000
    mpc_steps_per_task: int = 500
    mpc_n_steps: int = 2
    # [convergence]
    threshold: str = "auto"
    window: int = 10
    # [paths]
    teacher_path: str = ""
    regressor_path: str = ""

    SECTIONS = {
        "experiment": ("domain", "board", "algorithms", "n_runs", "seed", "budget", "bucket", "output_dir"),
        "network": ("hidden", "learning_rate", "gamma", "buffer_size", "batch_size", "eps_start", "eps_min", "eps_decay"),
        "curriculum": ("max_length", "eta", "beta", "heuristic", "clustering", "cutoff", "n_clusters", "entropy_window", "step_max_steps", "subset_size"),
        "baselines": ("random_step_iters", "mpc_steps_prior", "mpc_steps_per_task", "mpc_n_steps"),
        "convergence": ("threshold", "window"),
        "paths": ("teacher_path", "regressor_path"),
    }

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"unknown algorithms {bad}; choose from {ALGORITHMS}")
        for name in ("n_runs", "budget", "bucket", "buffer_size", "batch_size", "eta",
                     "beta", "entropy_window", "window", "random_step_iters",
                     "mpc_steps_prior", "mpc_steps_per_task", "mpc_n_steps", "subset_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 < self.eps_decay <= 1.0:
            raise ConfigError("gamma and eps_decay must lie in (0, 1]")
        if self.learning_rate <= 0 or self.cutoff <= 0:
            raise ConfigError("learning_rate and cutoff must be positive")
        if self.max_length < 0 or self.n_clusters < 0:
            raise ConfigError("max_length and n_clusters must be non-negative")
        if not self.hidden or any(h <= 0 for h in self.hidden):
            raise ConfigError("hidden layer widths must be positive")
        try:
            self.curriculum_config("td")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.threshold != "auto" and self.threshold not in THRESHOLD_PRESETS:
            try:
                float(self.threshold)
            except ValueError:
                raise ConfigError(
                    f"threshold must be a number, 'auto' or one of {sorted(THRESHOLD_PRESETS)}"
                ) from None
        if self.domain == "parking" and self.threshold == "auto":
            raise ConfigError("parking has no computable optimum; give a numeric threshold")

    @property
    def seeds(self):
        return [self.seed + k for k in range(self.n_runs)]

    def curriculum_config(self, variant):
        return CurriculumConfig(
            variant=variant, max_length=self.max_length, eta=self.eta, beta=self.beta,
            heuristic=self.heuristic, clustering=self.clustering, cutoff=self.cutoff,
            n_clusters=self.n_clusters or None, entropy_window=self.entropy_window,
            step_max_steps=self.step_max_steps, subset_size=self.subset_size,
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_ini(self):
        cp = configparser.ConfigParser()
        for section, keys in self.SECTIONS.items():
            cp[section] = {k: _format_value(getattr(self, k)) for k in keys}
        return cp

    def save(self, path):
        with open(path, "w") as fh:
            self.to_ini().write(fh)


def _format_value(v):
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(name, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(raw.replace("_", ""))
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {name}") from None


def load_config(path, **overrides):
    """Read an INI experiment file; unknown sections or keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_parser(cp, **overrides)


def config_from_parser(cp, **overrides):
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    values = {}
    for section in cp.sections():
        allowed = ExperimentConfig.SECTIONS.get(section)
        if allowed is None:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in allowed:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(key, raw, defaults[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


# -- environments, agents, thresholds ----------------------------------------


def make_env(config, rng=None):
    if config.domain == "parking":
        n = 8 if config.board in ("parking8", "source") else 30
        return ParkingEnv(ParkingSpec(n_spots=n), rng)
    env = make_grid_env(load_board(config.board))
    expected = "flags" if env.spec.flags else "keylock"
    if expected != config.domain:
        raise ConfigError(f"board {config.board} is a {expected} board, not {config.domain}")
    return env


def make_agent(config, env, rng):
    kw = dict(
        rng=rng, lr=config.learning_rate, gamma=config.gamma,
        batch_size=config.batch_size, buffer_size=config.buffer_size,
        eps_start=config.eps_start, eps_decay=config.eps_decay, eps_min=config.eps_min,
    )
    if env.action_kind == "continuous":
        return A2cAgent(env.obs_dim, env.action_dim, hidden=config.hidden, **kw)
    return DqnAgent(env.obs_dim, env.n_actions, hidden=config.hidden, **kw)


def resolve_threshold(config, env):
    if config.threshold == "auto":
        return env.optimal_return() - AUTO_SLACK
    if config.threshold in THRESHOLD_PRESETS:
        return THRESHOLD_PRESETS[config.threshold]
    return float(config.threshold)


def load_teacher(config, env):
    path = Path(config.teacher_path) if config.teacher_path else None
    if path is None or not path.exists():
        raise MissingArtifact(f"teacher policy file missing: {config.teacher_path or '<unset>'}")
    return load_policy(path, env.action_kind == "continuous" and "gaussian" or "discrete",
                       getattr(env, "action_dim", None))


def load_regressor(config):
    path = Path(config.regressor_path) if config.regressor_path else None
    if path is None or not path.exists():
        raise MissingArtifact(f"regressor model file missing: {config.regressor_path or '<unset>'}")
    return GbmModel.load(path)


def check_artifacts(config):
    """Fail before any run starts when a needed artifact is missing."""
    if "readc-td" in config.algorithms and not Path(config.teacher_path or "\0").exists():
        raise MissingArtifact(f"teacher policy file missing: {config.teacher_path or '<unset>'}")
    if "readc-sa" in config.algorithms and not Path(config.regressor_path or "\0").exists():
        raise MissingArtifact(f"regressor model file missing: {config.regressor_path or '<unset>'}")


# -- convergence ------------------------------------------------------------


def steps_to_convergence(episodes, threshold, window=10, phases=TARGET_PHASES):
    """Global step at which ``window`` consecutive target-start episodes first met ``threshold``."""
    streak = 0
    for e in episodes:
        if e.phase not in phases:
            continue
        streak = streak + 1 if e.ret >= threshold else 0
        if streak >= window:
            return e.global_step
    return None


def asymptotic_return(episodes, budget, tail=0.1, phases=TARGET_PHASES, fallback=10):
    """Mean target-start return over the last ``tail`` fraction of the budget."""
    target = [e for e in episodes if e.phase in phases]
    if not target:
        return float("nan")
    cut = (1.0 - tail) * budget
    late = [e.ret for e in target if e.global_step > cut]
    if not late:
        late = [e.ret for e in target[-fallback:]]
    return float(np.mean(late))


# -- single run ---------------------------------------------------------------


@dataclass
class RunResult:
    run_id: int
    seed: int
    algorithm: str
    init_hash: str
    overhead: int = 0
    episodes: list = field(default_factory=list)
    converged: bool = False
    steps_to_convergence: int | None = None
    asymptotic_return: float = float("nan")
    failed: bool = False
    error: str = ""
    starts: list = field(default_factory=list)


def run_single(config, seed, algorithm, run_id=0, teacher=None, regressor=None):
    """One seeded run of one algorithm; non-finite training marks it failed."""
    init_rng = np.random.default_rng(seed)
    rng = np.random.default_rng([seed, ALGORITHMS.index(algorithm)])
    env = make_env(config, np.random.default_rng([seed, ALGORITHMS.index(algorithm), 1]))
    agent = make_agent(config, env, init_rng)
    result = RunResult(run_id, seed, algorithm, agent.net.digest())
    threshold = resolve_threshold(config, env)
    tlog = TrainLog(budget=config.budget)
    try:
        if algorithm == "none":
            run_plain(env, agent, rng, log=tlog)
        elif algorithm in ("readc-td", "readc-sa"):
            variant = algorithm.split("-")[1]
            if variant == "td" and teacher is None:
                teacher = load_teacher(config, env)
            if variant == "sa" and regressor is None:
                regressor = load_regressor(config)
            _, plan, _ = run_readc(
                env, agent, config.curriculum_config(variant), rng,
                teacher=teacher, regressor=regressor, log=tlog,
            )
            result.starts = [s.start for s in plan.steps]
        elif algorithm == "random":
            _, starts, _ = run_random(
                env, agent, rng, length=max(config.max_length, 1), eta=config.eta,
                step_iters=config.random_step_iters, log=tlog,
            )
            result.starts = starts
        else:
            probe = env.sample_observations(500, rng) if env.action_kind == "continuous" else None
            _, mpc, _ = run_max_policy_change(
                env, agent, rng, steps_prior=config.mpc_steps_prior,
                steps_per_task=config.mpc_steps_per_task, n_steps=config.mpc_n_steps,
                probe_obs=probe, log=tlog,
            )
            result.overhead = mpc.overhead_steps
            result.starts = mpc.curriculum
    except FloatingPointError as exc:
        result.failed = True
        result.error = str(exc)
    result.episodes = tlog.episodes
    result.steps_to_convergence = steps_to_convergence(tlog.episodes, threshold, config.window)
    result.converged = result.steps_to_convergence is not None
    result.asymptotic_return = asymptotic_return(tlog.episodes, config.budget)
    return result


def _run_job(args):
    config, seed, algorithm, run_id = args
    return run_single(config, seed, algorithm, run_id)


# -- experiment -----------------------------------------------------------


@dataclass
class ExperimentResult:
    runs: list
    output_dir: Path
    threshold: float


def worker_count():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def run_experiment(config, workers=None, teacher=None, regressor=None):
    """Every (seed, algorithm) run, then all CSV outputs under ``output_dir``."""
    config.validate()
    if teacher is None and regressor is None:
        check_artifacts(config)
    jobs = []
    for seed in config.seeds:
        for algo in config.algorithms:
            jobs.append((config, seed, algo, len(jobs)))
    workers = worker_count() if workers is None else workers
    if workers > 1 and teacher is None and regressor is None:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        runs = [run_single(c, s, a, i, teacher, regressor) for c, s, a, i in jobs]
    runs.sort(key=lambda r: r.run_id)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.ini")
    write_metrics(runs, out / "metrics.csv")
    write_runs(runs, out / "runs.csv")
    write_summary(runs, config.bucket, config.budget, out / "summary.csv")
    write_convergence(runs, out / "convergence.csv")
    threshold = resolve_threshold(config, make_env(config, np.random.default_rng(0)))
    return ExperimentResult(runs, out, threshold)


METRICS_HEADER = [
    "run_id", "seed", "algorithm", "global_step", "episode", "phase", "return",
    "converged", "steps_to_convergence",
]


def write_metrics(runs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in runs:
            stc = "" if r.steps_to_convergence is None else r.steps_to_convergence
            for e in r.episodes:
                w.writerow([
                    r.run_id, r.seed, r.algorithm, e.global_step, e.episode, e.phase,
                    repr(float(e.ret)), int(r.converged), stc,
                ])


def write_runs(runs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([
            "run_id", "seed", "algorithm", "init_hash", "overhead", "converged",
            "steps_to_convergence", "asymptotic_return", "failed", "error", "starts",
        ])
        for r in runs:
            w.writerow([
                r.run_id, r.seed, r.algorithm, r.init_hash, r.overhead, int(r.converged),
                "" if r.steps_to_convergence is None else r.steps_to_convergence,
                repr(r.asymptotic_return), int(r.failed), r.error,
                " | ".join(repr(s) for s in r.starts),
            ])


def t_interval(values, level=0.95):
    """``(mean, half_width)`` of a Student-t interval; zero width for one value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    half = stats.t.ppf(0.5 + level / 2.0, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size)
    return float(v.mean()), float(half)


def bucket_means(episodes, bucket, phases=TARGET_PHASES):
    """Mean target-start return per step bucket, keyed by bucket index."""
    sums = {}
    for e in episodes:
        if e.phase not in phases:
            continue
        b = (e.global_step - 1) // bucket
        s = sums.setdefault(b, [0.0, 0])
        s[0] += e.ret
        s[1] += 1
    return {b: s / n for b, (s, n) in sums.items()}


def summarize(runs, bucket):
    """Rows of (algorithm, bucket_end_step, n_runs, mean, half_width)."""
    rows = []
    for algo in _algorithms_in_order(runs):
        per_run = [bucket_means(r.episodes, bucket) for r in runs if r.algorithm == algo]
        buckets = sorted(set().union(*per_run)) if per_run else []
        for b in buckets:
            vals = [m[b] for m in per_run if b in m]
            mean, half = t_interval(vals)
            rows.append((algo, (b + 1) * bucket, len(vals), mean, half))
    return rows


def write_summary(runs, bucket, budget, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "step", "n_runs", "mean_return", "ci95_half_width"])
        for algo, step, n, mean, half in summarize(runs, bucket):
            w.writerow([algo, step, n, repr(mean), repr(half)])


def convergence_stats(runs):
    """Per-algorithm dict of run counts, convergence rate, median and mean steps."""
    out = {}
    for algo in _algorithms_in_order(runs):
        rs = [r for r in runs if r.algorithm == algo]
        steps = [r.steps_to_convergence for r in rs if r.converged]
        out[algo] = dict(
            n_runs=len(rs),
            n_converged=len(steps),
            rate=len(steps) / len(rs),
            median=float(np.median(steps)) if steps else float("nan"),
            mean=float(np.mean(steps)) if steps else float("nan"),
            failed=sum(r.failed for r in rs),
            mean_asymptotic_return=float(np.nanmean([r.asymptotic_return for r in rs]))
            if any(np.isfinite(r.asymptotic_return) for r in rs) else float("nan"),
        )
    return out


def write_convergence(runs, path):
    keys = ["n_runs", "n_converged", "rate", "median", "mean", "failed", "mean_asymptotic_return"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", *keys])
        for algo, s in convergence_stats(runs).items():
            w.writerow([algo, *(repr(s[k]) if isinstance(s[k], float) else s[k] for k in keys)])


def _algorithms_in_order(runs):
    seen = []
    for r in runs:
        if r.algorithm not in seen:
            seen.append(r.algorithm)
    return seen


# -- reading results back ------------------------------------------------------


@dataclass
class EpisodeRow:
    global_step: int
    phase: str
    ret: float


def read_metrics(path):
    """Rebuild lightweight run results from ``metrics.csv``."""
    runs = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rid = int(row["run_id"])
            r = runs.get(rid)
            if r is None:
                stc = row["steps_to_convergence"]
                r = RunResult(rid, int(row["seed"]), row["algorithm"], "")
                r.converged = row["converged"] == "1"
                r.steps_to_convergence = int(stc) if stc else None
                runs[rid] = r
            r.episodes.append(EpisodeRow(int(row["global_step"]), row["phase"], float(row["return"])))
    return [runs[k] for k in sorted(runs)]


# -- plots ------------------------------------------------------------------


def box_stats(values):
    """Quartiles, median and mean with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    iqr = q3 - q1
    lo = v[v >= q1 - 1.5 * iqr].min()
    hi = v[v <= q3 + 1.5 * iqr].max()
    return dict(q1=q1, med=med, q3=q3, mean=float(v.mean()), whislo=lo, whishi=hi,
                fliers=v[(v < lo) | (v > hi)])


def best_fraction(runs, fraction=0.8):
    """The fastest-converging ``int(fraction * n)`` runs of each algorithm."""
    keep = []
    for algo in _algorithms_in_order(runs):
        rs = [r for r in runs if r.algorithm == algo]
        k = int(fraction * len(rs))
        conv = sorted((r for r in rs if r.converged), key=lambda r: (r.steps_to_convergence, r.run_id))
        keep.extend(conv[:k])
    return keep


def emit_plots(metrics_path, out_dir, bucket=1_000, best=None):
    """Write ``curves.svg`` and ``convergence_box.svg``; returns their paths.

    ``best`` keeps only the fastest-converging fraction of runs in the box
    plot. Empty metrics produce a warning and no files.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs = read_metrics(metrics_path)
    if not runs or not any(r.episodes for r in runs):
        log.warning("no metrics in %s; nothing to plot", metrics_path)
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plt.rcParams["svg.hashsalt"] = "readc"

    fig, ax = plt.subplots(figsize=(7, 4))
    rows = summarize(runs, bucket)
    for algo in _algorithms_in_order(runs):
        pts = [(s, m, h) for a, s, _, m, h in rows if a == algo]
        if not pts:
            continue
        x, m, h = (np.array(c) for c in zip(*pts))
        ax.plot(x, m, label=algo)
        ax.fill_between(x, m - h, m + h, alpha=0.25)
    ax.set_xlabel("environment steps (offset by curriculum overhead)")
    ax.set_ylabel("mean return")
    ax.legend()
    fig.tight_layout()
    curves = out / "curves.svg"
    fig.savefig(curves, metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    algos = _algorithms_in_order(runs)
    chosen = best_fraction(runs, best) if best else [r for r in runs if r.converged]
    bxp, labels, rates = [], [], []
    for algo in algos:
        rs = [r for r in runs if r.algorithm == algo]
        vals = [r.steps_to_convergence for r in chosen if r.algorithm == algo]
        rates.append(sum(r.converged for r in rs) / len(rs))
        if vals:
            st = box_stats(vals)
            st["label"] = algo
            bxp.append(st)
            labels.append(algo)
    if bxp:
        ax.bxp(
            bxp, showmeans=True, meanline=True,
            medianprops=dict(color="orange", linestyle="-"),
            meanprops=dict(color="green", linestyle=":"),
        )
    top = ax.get_ylim()[1]
    for k, algo in enumerate(algos):
        if algo in labels:
            ax.text(labels.index(algo) + 1, top, f"{rates[k]:.0%}", ha="center", va="bottom")
    ax.set_ylabel("steps to convergence")
    fig.tight_layout()
    box = out / "convergence_box.svg"
    fig.savefig(box, metadata={"Date": None})
    plt.close(fig)
    return [curves, box]
