"""Replay storage, DQN / advantage actor-critic learners and the training loop."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Adamax, Mlp

EPS_START = 1.0
EPS_DECAY = 0.995
EPS_MIN = 0.01
LEARNING_RATE = 0.005
GAMMA = 0.99
BUFFER_SIZE = 40_000
BATCH_SIZE = 16
SIGMA_FLOOR = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(FloatingPointError):
    """A loss became NaN or infinite."""


class ReplayBuffer:
    """Ring buffer of ``(s, a, r, terminal, s')`` transitions.

    ``terminal`` marks transitions whose next state ends the task, so the
    bootstrap term is dropped for them; step-cap truncation is not terminal.
    """

    def __init__(self, obs_dim, action_shape=(), capacity=BUFFER_SIZE):
        self.capacity = int(capacity)
        self.obs = np.zeros((self.capacity, obs_dim))
        self.next_obs = np.zeros((self.capacity, obs_dim))
        adt = np.int64 if action_shape == () else np.float64
        self.actions = np.zeros((self.capacity, *action_shape), dtype=adt)
        self.rewards = np.zeros(self.capacity)
        self.terminals = np.zeros(self.capacity)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, obs, action, reward, terminal, next_obs):
        i = self._next
        self.obs[i] = obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.terminals[i] = float(terminal)
        self.next_obs[i] = next_obs
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n, rng):
        """Uniform draw (with replacement) of ``n`` stored transitions."""
        if self.size == 0:
            raise ValueError("cannot sample an empty replay buffer")
        idx = rng.integers(0, self.size, n)
        return Batch(
            self.obs[idx], self.actions[idx], self.rewards[idx],
            self.terminals[idx], self.next_obs[idx],
        )


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray
    next_obs: np.ndarray

    def __len__(self):
        return len(self.rewards)


@dataclass
class StateEntry:
    state: object
    obs: np.ndarray
    count: int = 1


class StateBuffer:
    """Every distinct visited state with its visit count, in first-visit order."""

    def __init__(self):
        self._entries = {}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries

    def add(self, key, state, obs):
        e = self._entries.get(key)
        if e is None:
            self._entries[key] = StateEntry(state, np.array(obs, dtype=np.float64))
        else:
            e.count += 1

    def count(self, key):
        e = self._entries.get(key)
        return 0 if e is None else e.count

    def entries(self):
        return list(self._entries.values())

    def sample(self, n, rng):
        """Up to ``n`` entries drawn uniformly without replacement.

        When the buffer holds no more than ``n`` states, all of them are
        returned in first-visit order.
        """
        entries = self.entries()
        if len(entries) <= n:
            return entries
        idx = np.sort(rng.choice(len(entries), size=n, replace=False))
        return [entries[i] for i in idx]


def epsilon_after(episodes, start=EPS_START, decay=EPS_DECAY, floor=EPS_MIN):
    return max(floor, start * decay**episodes)


class _Learner:
    """Bits shared by both learners: replay, epsilon schedule, step counters."""

    def __init__(self, buffer, gamma, batch_size, eps_start, eps_decay, eps_min):
        self.buffer = buffer
        self.gamma = gamma
        self.batch_size = batch_size
        self.eps_start, self.eps_decay, self.eps_min = eps_start, eps_decay, eps_min
        self.episodes_done = 0
        self.optimizer_steps = 0
        self.epsilon_override = None

    @property
    def epsilon(self):
        if self.epsilon_override is not None:
            return self.epsilon_override
        return epsilon_after(self.episodes_done, self.eps_start, self.eps_decay, self.eps_min)

    def remember(self, obs, action, reward, terminal, next_obs):
        self.buffer.add(obs, action, reward, terminal, next_obs)

    def learn(self, rng):
        """One minibatch update, skipped until the buffer holds a full batch."""
        if len(self.buffer) < self.batch_size:
            return None
        loss = self.update(self.buffer.sample(self.batch_size, rng))
        self.optimizer_steps += 1
        return loss

    def clone(self):
        return copy.deepcopy(self)


class DqnAgent(_Learner):
    """Dual DQN: learned Q-network plus a target copy synced every episode."""

    kind = "discrete"

    def __init__(
        self,
        obs_dim,
        n_actions,
        hidden=(64, 64, 64),
        rng=None,
        lr=LEARNING_RATE,
        gamma=GAMMA,
        batch_size=BATCH_SIZE,
        buffer_size=BUFFER_SIZE,
        eps_start=EPS_START,
        eps_decay=EPS_DECAY,
        eps_min=EPS_MIN,
        net=None,
    ):
        super().__init__(
            ReplayBuffer(obs_dim, (), buffer_size), gamma, batch_size,
            eps_start, eps_decay, eps_min,
        )
        self.n_actions = n_actions
        self.net = net if net is not None else Mlp([obs_dim, *hidden, n_actions], rng)
        self.target = self.net.copy()
        self.optimizer = Adamax(self.net, lr)

    def q_values(self, obs):
        return self.net.forward(obs)

    def greedy(self, obs):
        return _argmax_actions(self.net.forward(obs))

    def act(self, obs, rng):
        if rng.random() < self.epsilon:
            return int(rng.integers(self.n_actions))
        return self.greedy(obs)

    def td_targets(self, batch):
        nxt = self.target.forward(batch.next_obs).max(axis=1)
        return batch.rewards + self.gamma * nxt * (1.0 - batch.terminals)

    def loss_and_grad(self, batch):
        """Mean of ``0.5 * (target - Q(s, a))**2`` and its parameter gradient."""
        y = self.td_targets(batch)
        q, cache = self.net.forward_cached(batch.obs)
        rows = np.arange(len(batch))
        diff = q[rows, batch.actions] - y
        loss = 0.5 * float(np.mean(diff * diff))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"DQN loss became {loss}")
        g = np.zeros_like(q)
        g[rows, batch.actions] = diff / len(batch)
        return loss, self.net.backprop(cache, g)

    def update(self, batch):
        """One Adamax step on the TD loss; returns the loss before the step."""
        loss, grad = self.loss_and_grad(batch)
        self.optimizer.step(grad)
        return loss

    def end_episode(self):
        self.target.load(self.net)
        self.episodes_done += 1

    def policy_outputs(self, obs):
        """Q-values, the raw policy representation used by the uncertainty code."""
        return self.net.forward(np.atleast_2d(obs))

    def snapshot(self):
        return QPolicy(self.net.copy())


def _argmax_actions(q):
    a = np.argmax(q, axis=-1)
    return int(a) if np.ndim(a) == 0 else a


class QPolicy:
    """Frozen Q-network: a teacher or a past copy of a DQN agent."""

    kind = "discrete"

    def __init__(self, net):
        self.net = net

    def policy_outputs(self, obs):
        return self.net.forward(np.atleast_2d(obs))

    def greedy(self, obs):
        return _argmax_actions(self.net.forward(obs))

    def save(self, path):
        self.net.save(path)


class GaussianPolicy:
    """Frozen actor network producing ``(mu, sigma)``."""

    kind = "gaussian"

    def __init__(self, actor, action_dim):
        self.actor = actor
        self.action_dim = action_dim

    def policy_outputs(self, obs):
        out = self.actor.forward(np.atleast_2d(obs))
        d = self.action_dim
        return out[..., :d], softplus(out[..., d:]) + SIGMA_FLOOR

    def greedy(self, obs):
        mu = self.policy_outputs(obs)[0]
        return mu[0] if np.ndim(obs) == 1 else mu

    def save(self, path):
        self.actor.save(path)


def load_policy(path, kind="discrete", action_dim=None):
    net = Mlp.load_file(path)
    if kind == "discrete":
        return QPolicy(net)
    return GaussianPolicy(net, action_dim or net.n_outputs // 2)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gaussian_log_density(a, mu, sigma):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    z = (a - mu) / sigma
    return np.sum(-0.5 * z * z - np.log(sigma) - 0.5 * LOG_2PI, axis=-1)


class A2cAgent(_Learner):
    """Gaussian actor plus value critic with a target copy of the critic.

    The actor emits ``2 * action_dim`` numbers: the mean, then a raw scale
    mapped through ``softplus + 1e-3`` so the standard deviation stays
    positive.
    """

    kind = "gaussian"

    def __init__(
        self,
        obs_dim,
        action_dim,
        hidden=(256, 256, 256),
        rng=None,
        lr=LEARNING_RATE,
        gamma=GAMMA,
        batch_size=BATCH_SIZE,
        buffer_size=BUFFER_SIZE,
        eps_start=EPS_START,
        eps_decay=EPS_DECAY,
        eps_min=EPS_MIN,
        action_low=-1.0,
        action_high=1.0,
        actor=None,
        critic=None,
    ):
        super().__init__(
            ReplayBuffer(obs_dim, (action_dim,), buffer_size), gamma, batch_size,
            eps_start, eps_decay, eps_min,
        )
        self.action_dim = action_dim
        self.action_low, self.action_high = action_low, action_high
        self.actor = actor if actor is not None else Mlp([obs_dim, *hidden, 2 * action_dim], rng)
        self.critic = critic if critic is not None else Mlp([obs_dim, *hidden, 1], rng)
        self.target_critic = self.critic.copy()
        self.actor_opt = Adamax(self.actor, lr)
        self.critic_opt = Adamax(self.critic, lr)

    @property
    def net(self):
        return self.actor

    def gaussian(self, obs):
        out = self.actor.forward(obs)
        d = self.action_dim
        return out[..., :d], softplus(out[..., d:]) + SIGMA_FLOOR

    def policy_outputs(self, obs):
        return self.gaussian(np.atleast_2d(obs))

    def snapshot(self):
        return GaussianPolicy(self.actor.copy(), self.action_dim)

    def greedy(self, obs):
        return self.gaussian(obs)[0]

    def act(self, obs, rng):
        if rng.random() < self.epsilon:
            return rng.uniform(self.action_low, self.action_high, self.action_dim)
        mu, sigma = self.gaussian(obs)
        return mu + sigma * rng.standard_normal(self.action_dim)

    def update(self, batch):
        """One critic step then one actor step; returns the critic loss.

        The actor's advantage uses the target critic for ``V(s')`` and is a
        constant during the actor step.
        """
        critic_loss, actor_loss = self.update_both(batch)
        return critic_loss

    def critic_loss_and_grad(self, batch):
        """Critic TD loss, its gradient, and the actor's advantage.

        The critic regresses on ``r + gamma * V(s')`` from the live critic;
        the advantage uses the target critic for ``V(s')``.
        """
        live = 1.0 - batch.terminals
        v_next = self.critic.forward(batch.next_obs)[:, 0]
        v_next_t = self.target_critic.forward(batch.next_obs)[:, 0]
        v, cache = self.critic.forward_cached(batch.obs)
        v = v[:, 0]
        diff = v - (batch.rewards + self.gamma * v_next * live)
        loss = 0.5 * float(np.mean(diff * diff))
        adv = batch.rewards + self.gamma * v_next_t * live - v
        return loss, self.critic.backprop(cache, (diff / len(batch))[:, None]), adv

    def actor_loss_and_grad(self, batch, adv):
        """``-mean(log pi(a|s) * adv)`` with ``adv`` held constant, and its gradient."""
        out, cache = self.actor.forward_cached(batch.obs)
        d = self.action_dim
        mu, raw = out[:, :d], out[:, d:]
        sigma = softplus(raw) + SIGMA_FLOOR
        logp = gaussian_log_density(batch.actions, mu, sigma)
        loss = -float(np.mean(logp * adv))
        z = (batch.actions - mu) / sigma
        coef = (-adv / len(batch))[:, None]
        g = np.concatenate(
            [coef * z / sigma, coef * (z * z - 1.0) / sigma * sigmoid(raw)], axis=1
        )
        return loss, self.actor.backprop(cache, g)

    def update_both(self, batch):
        critic_loss, critic_grad, adv = self.critic_loss_and_grad(batch)
        actor_loss, actor_grad = self.actor_loss_and_grad(batch, adv)
        if not (math.isfinite(critic_loss) and math.isfinite(actor_loss)):
            raise TrainingDiverged(f"A2C losses became {actor_loss}, {critic_loss}")
        self.critic_opt.step(critic_grad)
        self.actor_opt.step(actor_grad)
        return critic_loss, actor_loss

    def end_episode(self):
        self.target_critic.load(self.critic)
        self.episodes_done += 1


# -- convergence criteria -------------------------------------------------


class FixedIterations:
    """Satisfied after exactly ``n`` environment steps of this phase."""

    def __init__(self, n):
        self.n = int(n)
        self.steps = 0

    def begin(self):
        self.steps = 0

    def after_step(self):
        self.steps += 1
        return self.steps >= self.n

    def after_episode(self, ret):
        return False


def entropy_converged(trace, window=10):
    """True when the last ``window`` values set no new minimum.

    The window counts the value that established the current minimum, so
    ``[5, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4]`` has converged while any strictly
    decreasing trace has not.
    """
    if len(trace) < window:
        return False
    first_min = int(np.argmin(np.asarray(trace, dtype=np.float64)))
    return first_min <= len(trace) - window


class EntropyNoReduction:
    """Stops once the probed uncertainty shows no reduction for ``window`` episodes.

    ``probe`` is evaluated once before training and once after each episode;
    ``max_steps`` bounds a phase that never settles.
    """

    def __init__(self, probe, window=10, max_steps=None):
        self.probe = probe
        self.window = window
        self.max_steps = max_steps
        self.trace = []
        self.steps = 0

    def begin(self):
        self.trace = [float(self.probe())]
        self.steps = 0

    def after_step(self):
        self.steps += 1
        return self.max_steps is not None and self.steps >= self.max_steps

    def after_episode(self, ret):
        self.trace.append(float(self.probe()))
        return entropy_converged(self.trace, self.window)


class HighestReward:
    """Convergence on reaching ``threshold`` in ``window`` consecutive episodes.

    With ``stop=False`` the criterion only records when that happened and
    training runs on until the step budget.
    """

    def __init__(self, threshold, window=10, stop=True, max_steps=None):
        self.threshold = threshold
        self.window = window
        self.stop = stop
        self.max_steps = max_steps
        self.streak = 0
        self.steps = 0
        self.converged = False

    def begin(self):
        self.streak = 0
        self.steps = 0

    def after_step(self):
        self.steps += 1
        return self.max_steps is not None and self.steps >= self.max_steps

    def after_episode(self, ret):
        self.streak = self.streak + 1 if ret >= self.threshold else 0
        if self.streak >= self.window:
            self.converged = True
        return self.stop and self.converged


# -- training loop --------------------------------------------------------


@dataclass
class EpisodeRecord:
    global_step: int
    episode: int
    phase: str
    ret: float
    epsilon: float
    loss: float


@dataclass
class TrainLog:
    """Per-episode records plus the global step clock shared by all phases."""

    budget: int | None = None
    global_step: int = 0
    episodes: list = field(default_factory=list)

    @property
    def exhausted(self):
        return self.budget is not None and self.global_step >= self.budget

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["global_step", "episode", "phase", "return", "epsilon", "loss"])
            for r in self.episodes:
                w.writerow([r.global_step, r.episode, r.phase, repr(r.ret), repr(r.epsilon), repr(r.loss)])


@dataclass
class PhaseResult:
    steps: int
    episodes: int
    satisfied: bool
    budget_hit: bool


def train(agent, env, criterion, sb, rng, log, phase="train"):
    """Run episodes from ``env.start_state`` until ``criterion`` is satisfied.

    Each environment step stores the transition, records the pre-action
    state in ``sb`` (when given) and performs one minibatch update. The
    target network syncs and epsilon decays at the end of every completed
    episode. Also stops when ``log`` runs out of step budget.
    """
    criterion.begin()
    start_step = log.global_step
    n_episodes = 0
    satisfied = False
    while not satisfied and not log.exhausted:
        obs = env.reset()
        ret = 0.0
        losses = []
        finished = False
        while True:
            state = env.state
            action = agent.act(obs, rng)
            res = env.step(action)
            agent.remember(obs, action, res.reward, res.terminal, res.observation)
            if sb is not None:
                sb.add(env.obs_key(obs), state, obs)
            loss = agent.learn(rng)
            if loss is not None:
                losses.append(loss)
            log.global_step += 1
            ret += res.reward
            if criterion.after_step():
                satisfied = True
            if res.terminal or res.truncated:
                finished = True
                break
            if satisfied or log.exhausted:
                break
            obs = res.observation
        if not finished:
            break
        agent.end_episode()
        n_episodes += 1
        log.episodes.append(
            EpisodeRecord(
                log.global_step, len(log.episodes), phase, ret, agent.epsilon,
                float(np.mean(losses)) if losses else float("nan"),
            )
        )
        if criterion.after_episode(ret):
            satisfied = True
    return PhaseResult(log.global_step - start_step, n_episodes, satisfied, log.exhausted)
