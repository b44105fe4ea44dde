"""Uncertainty-driven start-state curricula.

One agent, one replay buffer and one visited-state buffer persist through
every phase: an initial warm-up on the target task, ``max_length``
curriculum steps that each restart episodes from the most uncertain state
found so far, and a final phase back on the target's own start.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .agents import (
    EntropyNoReduction,
    FixedIterations,
    HighestReward,
    StateBuffer,
    TrainLog,
    train,
)
from .clustering import singletons, ward_cluster
from .uncertainty import (
    SUBSET_SIZE,
    agent_features,
    argmax_lowest,
    sa_select,
    td_uncertainties,
)

VARIANTS = ("td", "sa")
HEURISTICS = ("max-entropy", "proximity", "max-distance")
PROXIMITY_KEEP = 0.2

# episode phases that start from the target task's own start state
TARGET_PHASES = ("warmup", "target")


@dataclass
class CurriculumConfig:
    variant: str = "td"
    max_length: int = 4
    eta: int = 5_000
    beta: int = 1_500
    heuristic: str = "max-entropy"
    clustering: bool = False
    cutoff: float = 3.0
    n_clusters: int | None = None
    entropy_window: int = 10
    step_max_steps: int | None = 5_000
    subset_size: int = SUBSET_SIZE
    drop_half: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.heuristic not in HEURISTICS:
            raise ValueError(f"heuristic must be one of {HEURISTICS}")
        if self.max_length < 0:
            raise ValueError("max_length must be non-negative")
        if self.eta <= 0 or self.beta <= 0:
            raise ValueError("eta and beta must be positive")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.entropy_window < 1:
            raise ValueError("entropy_window must be at least 1")


@dataclass
class PlanStep:
    start: object
    steps: int
    episodes: int
    trace: list
    score: float
    n_candidates: int
    n_regions: int
    region: int
    fallback: bool


@dataclass
class SelectionAudit:
    """Everything needed to recheck one selection after the run."""

    policy: object
    obs: np.ndarray
    uncertainties: np.ndarray
    labels: np.ndarray
    kept_regions: list
    chosen: int


@dataclass
class CurriculumPlan:
    steps: list = field(default_factory=list)
    overhead_steps: int = 0
    audits: list = field(default_factory=list)

    def __len__(self):
        return len(self.steps)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([
                "step", "start", "steps", "episodes", "score", "candidates",
                "regions", "region", "fallback", "trace",
            ])
            for k, s in enumerate(self.steps):
                w.writerow([
                    k, repr(s.start), s.steps, s.episodes, repr(s.score),
                    s.n_candidates, s.n_regions, s.region, int(s.fallback),
                    " ".join(repr(v) for v in s.trace),
                ])


# -- heuristics -----------------------------------------------------------


@dataclass
class FilterResult:
    kept: list
    fallback: bool = False


def _goal_positions(env):
    goals = [env.position(s) for s in env.positive_terminals()]
    if not goals:
        raise ValueError("environment has no positive terminal states")
    return np.array(goals)


def heuristic_filter(regions, scores, env, heuristic, goals=None):
    """Indices of the regions a heuristic lets through.

    ``regions`` is a list of ``(m, 2)`` member-position arrays, one per
    region. Proximity keeps the ``ceil(0.2 N)`` regions whose members lie
    closest on average to a positive terminal. Max-distance returns the
    single high-score region (above mean + 1 sd) farthest from its nearest
    low-score region (below mean - 1 sd), or every region when either
    class is empty.
    """
    n = len(regions)
    scores = np.asarray(scores, dtype=np.float64)
    if n == 0 or len(scores) != n:
        raise ValueError("need one score per region and at least one region")
    if heuristic == "max-entropy":
        return FilterResult(list(range(n)))
    if heuristic == "proximity":
        goals = _goal_positions(env) if goals is None else np.atleast_2d(goals)
        prox = np.array([_mean_goal_distance(r, goals) for r in regions])
        keep = math.ceil(PROXIMITY_KEEP * n)
        order = np.argsort(prox, kind="stable")[:keep]
        return FilterResult(sorted(order.tolist()))
    if heuristic == "max-distance":
        mu, sd = scores.mean(), scores.std()
        high = np.flatnonzero(scores > mu + sd)
        low = np.flatnonzero(scores < mu - sd)
        if high.size == 0 or low.size == 0:
            return FilterResult(list(range(n)), fallback=True)
        centres = np.array([np.mean(r, axis=0) for r in regions])
        gap = [
            np.min(np.linalg.norm(centres[low] - centres[h], axis=1)) for h in high
        ]
        return FilterResult([int(high[argmax_lowest(gap)])])
    raise ValueError(f"unknown heuristic {heuristic!r}")


def _mean_goal_distance(members, goals):
    members = np.atleast_2d(members)
    d = np.linalg.norm(members[:, None, :] - goals[None, :, :], axis=-1)
    return float(d.min(axis=1).mean())


def select_start(obs, positions, uncertainties, env, config, rng, goals=None):
    """Pick one candidate index from scored candidates.

    Candidates are grouped into regions (Ward clusters or singletons), the
    heuristic filters the regions, and a uniform random member of the
    best-scoring surviving region is returned as
    ``(index, region, partition, filter_result, region_score)``.
    """
    u = np.asarray(uncertainties, dtype=np.float64)
    if config.clustering:
        part = ward_cluster(obs, config.cutoff, config.n_clusters)
    else:
        part = singletons(len(u))
    scores = part.scores(u)
    regions = [positions[c] for c in part.clusters]
    filt = heuristic_filter(regions, scores, env, config.heuristic, goals)
    best = filt.kept[argmax_lowest(scores[filt.kept])]
    members = part.clusters[best]
    idx = int(members[rng.integers(len(members))]) if len(members) > 1 else int(members[0])
    return idx, best, part, filt, float(scores[best])


# -- orchestration --------------------------------------------------------


def run_readc(
    env,
    agent,
    config,
    rng,
    *,
    teacher=None,
    regressor=None,
    final_criterion=None,
    log=None,
    sb=None,
):
    """Warm up, run the curriculum, then train on the target start.

    ``final_criterion`` defaults to running until the step budget of
    ``log``. Returns ``(agent, plan, log)``; when the budget runs out the
    plan may be shorter than ``max_length``.
    """
    if config.variant == "td" and teacher is None:
        raise ValueError("the teacher-dependent variant needs a teacher policy")
    if config.variant == "sa" and not getattr(regressor, "fitted", False):
        raise ValueError("the self-assessed variant needs a fitted regressor")
    log = TrainLog() if log is None else log
    sb = StateBuffer() if sb is None else sb
    if final_criterion is None:
        if log.budget is None:
            raise ValueError("without a final criterion the log needs a step budget")
        final_criterion = HighestReward(math.inf, stop=False)
    plan = CurriculumPlan()
    goals = _goal_positions(env)

    env.set_start(None)
    train(agent, env, FixedIterations(config.eta), sb, rng, log, phase="warmup")
    for k in range(config.max_length):
        if log.exhausted or len(sb) == 0:
            break
        phase = "warmup" if k == 0 else "curriculum"
        past = None
        if config.variant == "td":
            entries = sb.sample(config.subset_size, rng)
            obs = np.array([e.obs for e in entries])
            u = td_uncertainties(agent, teacher, obs, config.drop_half)
        else:
            entries, u, past = sa_select(
                agent, env, sb, regressor, config.beta, rng, log,
                config.subset_size, phase=phase,
            )
            obs = np.array([e.obs for e in entries])
            if log.exhausted:
                break
        positions = np.array([env.position(e.state) for e in entries])
        idx, region, part, filt, score = select_start(
            obs, positions, u, env, config, rng, goals
        )
        plan.audits.append(
            SelectionAudit(agent.snapshot(), obs, np.asarray(u), part.labels, filt.kept, idx)
        )
        chosen = entries[idx]
        env.set_start(env.as_start(chosen.state))
        probe = _probe(config, agent, teacher, regressor, past, chosen, sb, env)
        crit = EntropyNoReduction(probe, config.entropy_window, config.step_max_steps)
        res = train(agent, env, crit, sb, rng, log, phase="curriculum")
        plan.steps.append(
            PlanStep(
                chosen.state, res.steps, res.episodes, list(crit.trace), score,
                len(entries), len(part), region, filt.fallback,
            )
        )
    env.set_start(None)
    if not log.exhausted:
        train(agent, env, final_criterion, sb, rng, log, phase="target")
    return agent, plan, log


def _probe(config, agent, teacher, regressor, past, entry, sb, env):
    """Uncertainty of the single selected state under the live network."""
    obs = entry.obs[None, :]
    if config.variant == "td":
        return lambda: float(td_uncertainties(agent, teacher, obs, config.drop_half)[0])
    key = env.obs_key(entry.obs)

    def probe():
        visits = np.array([sb.count(key)], dtype=np.float64)
        feats = agent_features(
            past.policy_outputs(obs), agent.policy_outputs(obs), visits, agent.kind
        )
        return float(regressor.predict_matrix(feats)[0])

    return probe
