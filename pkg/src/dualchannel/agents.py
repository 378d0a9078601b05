"""DDPG over the 2-D action-embedding space, and a flat DQN baseline.

DDPG's actor emits an embedding ``e``; a decoder (learned ``f`` or nearest
neighbour over the embedding table) turns it into a maze action.  The replay
buffer stores ``e`` itself, so the critic is a function of state and
embedding.

Bootstrapping is masked only when the goal is reached.  Hitting the
timeout ends the episode but is not a terminal state of the task.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .embed import Decoder, EmbeddingModel
from .errors import ConfigError, ShapeError, TrainingDiverged
from .maze import MazeConfig, MazeEnv

log = logging.getLogger(__name__)

STATE_DIM = 4
EMBED_DIM = 2
HIDDEN = (30, 20, 10)


@dataclass
class RLConfig:
    gamma: float = 0.99
    tau: float = 0.005
    buffer_capacity: int = 100_000
    warmup: int = 25_000  # ~50 episodes of random actions before the first update
    batch_size: int = 128
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    sigma_start: float = 0.2
    sigma_end: float = 0.02
    # "raw": warm-up executes uniform random actions and stores their embeddings;
    # "embedding": warm-up draws e uniformly from [-1, 1]^2 and decodes it
    warmup_policy: str = "raw"
    # DQN
    dqn_lr: float = 1e-3
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.6
    target_period: int = 0  # 0 -> soft updates with tau, k -> hard copy every k updates

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.buffer_capacity < 1 or self.batch_size < 1:
            raise ConfigError("buffer_capacity and batch_size must be >= 1")
        if self.warmup < 0 or self.target_period < 0:
            raise ConfigError("warmup and target_period must be >= 0")
        if self.warmup_policy not in ("raw", "embedding"):
            raise ConfigError(f"unknown warmup_policy {self.warmup_policy!r}")


# ------------------------------------------------------------------ buffer


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest record is overwritten first."""

    def __init__(self, capacity: int, action_dim: int | None, rng: np.random.Generator | None = None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, STATE_DIM))
        if action_dim is None:
            self.actions = np.zeros(capacity, dtype=np.intp)
        else:
            self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, STATE_DIM))
        self.terminals = np.zeros(capacity)
        self.rng = rng if rng is not None else np.random.default_rng()
        self._next = 0
        self._size = 0
        self.inserted = 0

    def __len__(self):
        return self._size

    def add(self, s, a, r, s_next, terminal) -> None:
        i = self._next
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s_next
        self.terminals[i] = float(terminal)
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.inserted += 1

    def sample(self, batch_size: int):
        """Uniform sample without replacement (the whole buffer if it is smaller)."""
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        k = min(batch_size, self._size)
        idx = self.rng.choice(self._size, size=k, replace=False)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.terminals[idx]


# ---------------------------------------------------------------- helpers


def soft_update(target, online, tau: float):
    """``target <- tau * online + (1 - tau) * target`` in place.

    Accepts DenseNets or plain arrays; returns the updated target parameters.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    t = target.params if isinstance(target, nn.DenseNet) else target
    o = online.params if isinstance(online, nn.DenseNet) else np.asarray(online, dtype=float)
    if t.shape != o.shape:
        raise ShapeError(f"target shape {t.shape} does not match online shape {o.shape}")
    if tau == 1.0:
        t[...] = o
    elif tau > 0.0:
        t *= 1.0 - tau
        t += tau * o
    return t


@dataclass
class EpisodeRecord:
    episode: int
    total_reward: float
    steps: int
    reached_goal: bool


def final_metric(curve, window: int = 100) -> float:
    """Mean total reward over the last ``window`` episodes."""
    if not curve:
        return math.nan
    tail = curve[-window:]
    return float(np.mean([r.total_reward for r in tail]))


def save_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode", "total_reward", "steps", "reached_goal"])
        for r in curve:
            w.writerow([r.episode, repr(float(r.total_reward)), r.steps, int(r.reached_goal)])


def load_curve(path) -> list[EpisodeRecord]:
    with open(path, newline="") as fh:
        return [
            EpisodeRecord(int(row["episode"]), float(row["total_reward"]), int(row["steps"]), bool(int(row["reached_goal"])))
            for row in csv.DictReader(fh)
        ]


def _linear(start: float, end: float, frac: float) -> float:
    frac = min(max(frac, 0.0), 1.0)
    return start + (end - start) * frac


# ------------------------------------------------------------------- DDPG


@dataclass
class DDPGAgent:
    actor: nn.DenseNet
    critic: nn.DenseNet
    actor_target: nn.DenseNet
    critic_target: nn.DenseNet
    buffer: ReplayBuffer
    config: RLConfig
    sigma: float
    actor_opt: nn.Optimizer = field(init=False)
    critic_opt: nn.Optimizer = field(init=False)
    updates: int = 0

    def __post_init__(self):
        self.actor_opt = nn.Optimizer(self.actor, lr=self.config.actor_lr)
        self.critic_opt = nn.Optimizer(self.critic, lr=self.config.critic_lr)

    @classmethod
    def create(cls, config: RLConfig, rng: np.random.Generator, buffer_rng: np.random.Generator):
        actor = nn.DenseNet([STATE_DIM, *HIDDEN, EMBED_DIM], ["tanh"] * 4, rng)
        critic = nn.DenseNet([STATE_DIM + EMBED_DIM, *HIDDEN, 1], ["tanh"] * 3 + ["linear"], rng)
        buffer = ReplayBuffer(config.buffer_capacity, EMBED_DIM, buffer_rng)
        return cls(actor, critic, actor.copy(), critic.copy(), buffer, config, config.sigma_start)

    def critic_targets(self, rewards, next_states, terminals) -> np.ndarray:
        a2 = self.actor_target.forward(next_states)
        q2 = self.critic_target.forward(np.concatenate([next_states, a2], axis=1))[:, 0]
        return rewards + self.config.gamma * (1.0 - terminals) * q2

    def actor_gradient(self, states) -> tuple[float, np.ndarray]:
        """``-mean Q(s, actor(s))`` and its gradient w.r.t. the actor parameters."""
        a, a_cache = self.actor.forward_cached(states)
        q_pi, c_cache = self.critic.forward_cached(np.concatenate([states, a], axis=1))
        _, d_in = self.critic.backward(c_cache, np.full_like(q_pi, -1.0 / len(q_pi)))
        g_actor, _ = self.actor.backward(a_cache, d_in[:, STATE_DIM:])
        return -float(q_pi.mean()), g_actor

    def update(self) -> tuple[float, float]:
        """One critic step, one actor step, then soft target updates."""
        cfg = self.config
        s, e, r, s2, term = self.buffer.sample(cfg.batch_size)
        y = self.critic_targets(r, s2, term)

        q, c_cache = self.critic.forward_cached(np.concatenate([s, e], axis=1))
        critic_loss, dq = nn.mse_loss(q, y[:, None])
        if not math.isfinite(critic_loss):
            raise TrainingDiverged("non-finite critic loss", layer=len(self.critic.layers) - 1)
        g_critic, _ = self.critic.backward(c_cache, dq)
        self.critic_opt.step(g_critic)

        actor_loss, g_actor = self.actor_gradient(s)
        self.actor_opt.step(g_actor)

        soft_update(self.critic_target, self.critic, cfg.tau)
        soft_update(self.actor_target, self.actor, cfg.tau)
        self.updates += 1
        return critic_loss, actor_loss


def ddpg_act(agent: DDPGAgent, state, explore: bool, rng: np.random.Generator) -> np.ndarray:
    """Embedding action for ``state``; Gaussian exploration noise is clipped to [-1, 1]."""
    e = agent.actor.forward(np.asarray(state, dtype=float))
    if explore:
        e = np.clip(e + rng.normal(0.0, agent.sigma, size=EMBED_DIM), -1.0, 1.0)
    return e


def _seeds(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def ddpg_train(
    env_cfg: MazeConfig,
    model: EmbeddingModel,
    decoder: str = "learned",
    episodes: int = 500,
    config: RLConfig | None = None,
    seed=None,
):
    """Train DDPG over ``model``'s embedding space.

    Returns ``(agent, curve)`` with one :class:`EpisodeRecord` per episode.
    """
    config = config or RLConfig()
    if model.n_actuators != env_cfg.n_actuators:
        raise ConfigError("embedding model and maze disagree on the number of actuators")
    decode = Decoder(model, decoder)
    table = model.embed(np.arange(model.n_actions))
    init_rng, env_rng, explore_rng, buffer_rng = _seeds(seed)
    agent = DDPGAgent.create(config, init_rng, buffer_rng)
    env = MazeEnv(env_cfg, env_rng)
    curve: list[EpisodeRecord] = []
    total_steps = 0
    for ep in range(episodes):
        agent.sigma = _linear(config.sigma_start, config.sigma_end, ep / max(episodes - 1, 1))
        obs = env.reset()
        total = 0.0
        while True:
            if total_steps < config.warmup and config.warmup_policy == "raw":
                a = int(explore_rng.integers(model.n_actions))
                e = table[a]
            else:
                if total_steps < config.warmup:
                    e = explore_rng.uniform(-1.0, 1.0, size=EMBED_DIM)
                else:
                    e = ddpg_act(agent, obs, True, explore_rng)
                a = decode(e)
            out = env.step(a)
            nxt = out.state.observation()
            agent.buffer.add(obs, e, out.reward, nxt, out.reached_goal)
            total += out.reward
            total_steps += 1
            if total_steps >= config.warmup and len(agent.buffer) >= 1:
                try:
                    agent.update()
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"DDPG diverged in episode {ep} after {total_steps} steps: {exc}", exc.layer, ep) from exc
            obs = nxt
            if out.done:
                break
        curve.append(EpisodeRecord(ep, total, out.state.steps, out.reached_goal))
        log.debug("ddpg episode %d reward %.2f steps %d", ep, total, out.state.steps)
    return agent, curve


def evaluate_policy(env_cfg: MazeConfig, policy, episodes: int = 10, seed=None) -> list[EpisodeRecord]:
    """Greedy rollouts of ``policy(obs) -> action index``."""
    env = MazeEnv(env_cfg, seed)
    out_records = []
    for ep in range(episodes):
        obs = env.reset()
        total = 0.0
        while True:
            out = env.step(int(policy(obs)))
            total += out.reward
            obs = out.state.observation()
            if out.done:
                break
        out_records.append(EpisodeRecord(ep, total, out.state.steps, out.reached_goal))
    return out_records


# -------------------------------------------------------------------- DQN


@dataclass
class DQNAgent:
    q: nn.DenseNet
    q_target: nn.DenseNet
    buffer: ReplayBuffer
    config: RLConfig
    epsilon: float = 1.0
    opt: nn.Optimizer = field(init=False)
    updates: int = 0

    def __post_init__(self):
        self.opt = nn.Optimizer(self.q, lr=self.config.dqn_lr)

    @classmethod
    def create(cls, n_actions: int, config: RLConfig, rng, buffer_rng):
        q = nn.DenseNet([STATE_DIM, *HIDDEN, n_actions], ["tanh"] * 3 + ["linear"], rng)
        return cls(q, q.copy(), ReplayBuffer(config.buffer_capacity, None, buffer_rng), config, config.eps_start)

    @property
    def n_actions(self) -> int:
        return self.q.n_out

    def act(self, state, rng: np.random.Generator) -> int:
        if rng.random() < self.epsilon:
            return int(rng.integers(self.n_actions))
        return int(np.argmax(self.q.forward(np.asarray(state, dtype=float))))

    def td_targets(self, rewards, next_states, terminals) -> np.ndarray:
        q2 = self.q_target.forward(next_states).max(axis=1)
        return rewards + self.config.gamma * (1.0 - terminals) * q2

    def update(self) -> float:
        cfg = self.config
        s, a, r, s2, term = self.buffer.sample(cfg.batch_size)
        y = self.td_targets(r, s2, term)
        q, cache = self.q.forward_cached(s)
        rows = np.arange(len(a))
        diff = q[rows, a] - y
        loss = float(np.mean(diff * diff))
        if not math.isfinite(loss):
            raise TrainingDiverged("non-finite TD loss", layer=len(self.q.layers) - 1)
        dq = np.zeros_like(q)
        dq[rows, a] = 2.0 * diff / len(a)
        grads, _ = self.q.backward(cache, dq)
        self.opt.step(grads)
        self.updates += 1
        if cfg.target_period:
            if self.updates % cfg.target_period == 0:
                soft_update(self.q_target, self.q, 1.0)
        else:
            soft_update(self.q_target, self.q, cfg.tau)
        return loss


def dqn_train(env_cfg: MazeConfig, episodes: int = 500, config: RLConfig | None = None, seed=None):
    """epsilon-greedy DQN over all 2**n raw actions; returns ``(agent, curve)``."""
    config = config or RLConfig()
    init_rng, env_rng, explore_rng, buffer_rng = _seeds(seed)
    agent = DQNAgent.create(env_cfg.n_actions, config, init_rng, buffer_rng)
    env = MazeEnv(env_cfg, env_rng)
    decay_episodes = config.eps_decay_fraction * episodes
    curve: list[EpisodeRecord] = []
    total_steps = 0
    for ep in range(episodes):
        frac = ep / decay_episodes if decay_episodes > 0 else 1.0
        agent.epsilon = _linear(config.eps_start, config.eps_end, frac)
        obs = env.reset()
        total = 0.0
        while True:
            a = agent.act(obs, explore_rng)
            out = env.step(a)
            nxt = out.state.observation()
            agent.buffer.add(obs, a, out.reward, nxt, out.reached_goal)
            total += out.reward
            total_steps += 1
            if total_steps >= config.warmup:
                try:
                    agent.update()
                except TrainingDiverged as exc:
                    raise TrainingDiverged(f"DQN diverged in episode {ep}: {exc}", exc.layer, ep) from exc
            obs = nxt
            if out.done:
                break
        curve.append(EpisodeRecord(ep, total, out.state.steps, out.reached_goal))
    return agent, curve


# ------------------------------------------------------------- checkpoints


def save_ddpg(agent: DDPGAgent, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("actor", "critic", "actor_target", "critic_target"):
        nn.save_net(getattr(agent, name), d / f"{name}.txt")


def save_dqn(agent: DQNAgent, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nn.save_net(agent.q, d / "q.txt")
    nn.save_net(agent.q_target, d / "q_target.txt")
