"""Continuous 2-D maze driven by n on/off actuators.

An action is an n-bit mask; bit k fires the actuator pointing at angle
2*pi*k/n, and the agent moves by the sum of the fired actuators' unit
vectors scaled by ``magnitude``.  Walls are zero-thickness segments; a move
that would cross one (or leave the unit square) is cut short just before the
first crossing.

The default layout puts the start near the
bottom centre, goal at the top centre, two staggered half-walls forcing an
S-shaped route.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, EpisodeDone

LAYOUT_VERSION = 1
STOP_SHORT = 1e-6
_TOL = 1e-12

Segment = tuple[float, float, float, float]

ARENA_WALLS: tuple[Segment, ...] = (
    (0.0, 0.0, 1.0, 0.0),
    (1.0, 0.0, 1.0, 1.0),
    (1.0, 1.0, 0.0, 1.0),
    (0.0, 1.0, 0.0, 0.0),
)

DEFAULT_WALLS: tuple[Segment, ...] = (
    (0.0, 0.35, 0.6, 0.35),
    (0.4, 0.65, 1.0, 0.65),
)


@dataclass(frozen=True)
class MazeConfig:
    n_actuators: int = 4
    walls: tuple[Segment, ...] = DEFAULT_WALLS
    start: tuple[float, float] = (0.5, 0.1)
    goal: tuple[float, float] = (0.5, 0.9)
    goal_radius: float = 0.05
    magnitude: float | None = None  # None -> 0.3 / n_actuators
    p_noise: float = 0.1
    step_penalty: float = -0.05
    goal_reward: float = 100.0
    collision_penalty: float = -0.01
    timeout: int = 500

    def __post_init__(self):
        if self.n_actuators < 1:
            raise ConfigError("n_actuators must be >= 1")
        if not 0.0 <= self.p_noise <= 1.0:
            raise ConfigError("p_noise must lie in [0, 1]")
        if self.timeout < 1:
            raise ConfigError("timeout must be >= 1")
        if self.goal_radius <= 0:
            raise ConfigError("goal_radius must be positive")
        if self.magnitude is not None and self.magnitude <= 0:
            raise ConfigError("magnitude must be positive")
        object.__setattr__(self, "walls", tuple(tuple(map(float, w)) for w in self.walls))

    @property
    def n_actions(self) -> int:
        return 2**self.n_actuators

    @property
    def step_size(self) -> float:
        return self.magnitude if self.magnitude is not None else 0.3 / self.n_actuators

    def with_actuators(self, n: int) -> "MazeConfig":
        return replace(self, n_actuators=n)


@dataclass
class MazeState:
    agent: tuple[float, float]
    goal: tuple[float, float]
    steps: int = 0
    done: bool = False

    def observation(self) -> np.ndarray:
        return np.array([self.agent[0], self.agent[1], self.goal[0], self.goal[1]])


@dataclass
class StepOutcome:
    state: MazeState
    reward: float
    done: bool
    collided: bool
    noise_applied: bool
    reached_goal: bool
    executed_action: int


# ------------------------------------------------------------------ geometry


def actuator_directions(n: int) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(n) / n
    return np.stack([np.cos(theta), np.sin(theta)], axis=1)


def action_displacement(n: int, action: int, magnitude: float | None = None) -> np.ndarray:
    """Noise-free displacement produced by ``action`` with ``n`` actuators."""
    if not 0 <= action < 2**n:
        raise ValueError(f"action {action} outside [0, {2**n})")
    m = magnitude if magnitude is not None else 0.3 / n
    bits = (action >> np.arange(n)) & 1
    return m * (bits @ actuator_directions(n))


def displacement_table(n: int, magnitude: float | None = None) -> np.ndarray:
    """Displacements for every action, shape ``(2**n, 2)``."""
    m = magnitude if magnitude is not None else 0.3 / n
    actions = np.arange(2**n)
    bits = (actions[:, None] >> np.arange(n)) & 1
    return m * (bits @ actuator_directions(n))


def first_crossing(p, d, walls) -> float:
    """Smallest fraction t in [0, 1] at which ``p + t*d`` meets a wall; inf if none."""
    px, py = p
    dx, dy = d
    best = math.inf
    for x1, y1, x2, y2 in walls:
        ex, ey = x2 - x1, y2 - y1
        denom = dx * ey - dy * ex
        if abs(denom) < _TOL:
            continue
        qx, qy = x1 - px, y1 - py
        t = (qx * ey - qy * ex) / denom
        u = (qx * dy - qy * dx) / denom
        if -1e-9 <= t <= 1.0 and -1e-9 <= u <= 1.0 + 1e-9:
            # only moves heading into the wall count; moving away from a wall
            # the agent is resting against is allowed
            side = ex * (py - y1) - ey * (px - x1)
            heading = ex * dy - ey * dx
            if side * heading < 0 or (side == 0.0 and heading != 0.0):
                best = min(best, max(t, 0.0))
    return best


def resolve_move(p, d, walls) -> tuple[tuple[float, float], bool]:
    """Apply displacement ``d`` from ``p``; returns (new position, collided)."""
    length = math.hypot(d[0], d[1])
    if length == 0.0:
        return (p[0], p[1]), False
    t = first_crossing(p, d, tuple(walls) + ARENA_WALLS)
    if t == math.inf:
        return (p[0] + d[0], p[1] + d[1]), False
    t = max(t - STOP_SHORT / length, 0.0)
    return (p[0] + t * d[0], p[1] + t * d[1]), True


def _point_on_wall(p, walls, tol=1e-9) -> bool:
    for x1, y1, x2, y2 in walls:
        ex, ey = x2 - x1, y2 - y1
        L2 = ex * ex + ey * ey
        s = 0.0 if L2 == 0 else max(0.0, min(1.0, ((p[0] - x1) * ex + (p[1] - y1) * ey) / L2))
        if math.hypot(p[0] - x1 - s * ex, p[1] - y1 - s * ey) <= tol:
            return True
    return False


def validate(cfg: MazeConfig) -> None:
    for name, pt in (("start", cfg.start), ("goal", cfg.goal)):
        if not (0.0 < pt[0] < 1.0 and 0.0 < pt[1] < 1.0):
            raise ConfigError(f"{name} {pt} is not strictly inside the arena")
        if _point_on_wall(pt, cfg.walls):
            raise ConfigError(f"{name} {pt} lies on an obstacle")


# --------------------------------------------------------------- dynamics


def reset(cfg: MazeConfig, seed=None) -> tuple[MazeState, np.random.Generator]:
    """Fresh episode state plus the environment's own generator."""
    validate(cfg)
    state = MazeState(agent=tuple(map(float, cfg.start)), goal=tuple(map(float, cfg.goal)))
    return state, np.random.default_rng(seed)


def step(state: MazeState, action: int, cfg: MazeConfig, rng: np.random.Generator) -> StepOutcome:
    if state.done:
        raise EpisodeDone("step() called on a finished episode")
    n_actions = cfg.n_actions
    if not 0 <= action < n_actions:
        raise ValueError(f"action {action} outside [0, {n_actions})")
    noise = bool(rng.random() < cfg.p_noise)
    executed = int(rng.integers(n_actions)) if noise else int(action)
    d = action_displacement(cfg.n_actuators, executed, cfg.magnitude)
    pos, collided = resolve_move(state.agent, d, cfg.walls)
    steps = state.steps + 1
    reached = math.hypot(pos[0] - state.goal[0], pos[1] - state.goal[1]) <= cfg.goal_radius
    reward = cfg.step_penalty
    if collided:
        reward += cfg.collision_penalty
    if reached:
        reward += cfg.goal_reward
    done = reached or steps >= cfg.timeout
    nxt = MazeState(agent=pos, goal=state.goal, steps=steps, done=done)
    return StepOutcome(nxt, reward, done, collided, noise, reached, executed)


class MazeEnv:
    """Stateful wrapper around :func:`reset` / :func:`step`.

    The generator created by the constructor's ``seed`` persists across
    episodes; ``reset(seed)`` re-seeds it.
    """

    def __init__(self, cfg: MazeConfig, seed=None):
        validate(cfg)
        self.cfg = cfg
        self._displacements = displacement_table(cfg.n_actuators, cfg.magnitude)
        self.state, self.rng = reset(cfg, seed)
        self.state.done = True

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = MazeState(agent=tuple(map(float, self.cfg.start)), goal=tuple(map(float, self.cfg.goal)))
        return self.state.observation()

    def step(self, action: int) -> StepOutcome:
        # same dynamics as step(), with a cached displacement table
        cfg, state = self.cfg, self.state
        if state.done:
            raise EpisodeDone("step() called on a finished episode")
        if not 0 <= action < cfg.n_actions:
            raise ValueError(f"action {action} outside [0, {cfg.n_actions})")
        noise = bool(self.rng.random() < cfg.p_noise)
        executed = int(self.rng.integers(cfg.n_actions)) if noise else int(action)
        dx, dy = self._displacements[executed]
        pos, collided = resolve_move(state.agent, (float(dx), float(dy)), cfg.walls)
        steps = state.steps + 1
        reached = math.hypot(pos[0] - state.goal[0], pos[1] - state.goal[1]) <= cfg.goal_radius
        reward = cfg.step_penalty
        if collided:
            reward += cfg.collision_penalty
        if reached:
            reward += cfg.goal_reward
        done = reached or steps >= cfg.timeout
        self.state = MazeState(agent=pos, goal=state.goal, steps=steps, done=done)
        return StepOutcome(self.state, reward, done, collided, noise, reached, executed)


@dataclass
class Trajectory:
    observations: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)

    def __len__(self):
        return len(self.actions)


def episode_rollout(cfg: MazeConfig, policy: Callable[[np.ndarray], int], seed=None):
    """Run one episode; returns ``(total_reward, trajectory)``."""
    env = MazeEnv(cfg, seed)
    obs = env.reset()
    traj = Trajectory()
    total = 0.0
    done = False
    while not done:
        a = int(policy(obs))
        out = env.step(a)
        traj.observations.append(obs)
        traj.actions.append(a)
        traj.rewards.append(out.reward)
        traj.outcomes.append(out)
        total += out.reward
        obs = out.state.observation()
        done = out.done
    traj.observations.append(obs)
    return total, traj


# -------------------------------------------------------------- layout files


def save_layout(cfg: MazeConfig, path) -> None:
    lines = [
        "# maze layout",
        f"version = {LAYOUT_VERSION}",
        f"n_actuators = {cfg.n_actuators}",
        f"start = {cfg.start[0]!r} {cfg.start[1]!r}",
        f"goal = {cfg.goal[0]!r} {cfg.goal[1]!r}",
        f"goal_radius = {cfg.goal_radius!r}",
        f"p_noise = {cfg.p_noise!r}",
        f"step_penalty = {cfg.step_penalty!r}",
        f"goal_reward = {cfg.goal_reward!r}",
        f"collision_penalty = {cfg.collision_penalty!r}",
        f"timeout = {cfg.timeout}",
    ]
    if cfg.magnitude is not None:
        lines.append(f"magnitude = {cfg.magnitude!r}")
    for w in cfg.walls:
        lines.append("wall = " + " ".join(repr(v) for v in w))
    Path(path).write_text("\n".join(lines) + "\n")


_FLOAT_KEYS = ("goal_radius", "p_noise", "step_penalty", "goal_reward", "collision_penalty", "magnitude")


def parse_layout(text: str, base: MazeConfig | None = None) -> MazeConfig:
    """Parse ``key = value`` layout text; unknown keys are a ConfigError."""
    kwargs = {}
    walls = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"layout line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "version":
                if int(value) != LAYOUT_VERSION:
                    raise ConfigError(f"unsupported layout version {value}")
            elif key == "wall":
                parts = [float(v) for v in value.split()]
                if len(parts) != 4:
                    raise ConfigError(f"layout line {lineno}: wall needs 4 numbers")
                walls.append(tuple(parts))
            elif key in ("start", "goal"):
                parts = [float(v) for v in value.split()]
                if len(parts) != 2:
                    raise ConfigError(f"layout line {lineno}: {key} needs 2 numbers")
                kwargs[key] = tuple(parts)
            elif key in ("n_actuators", "timeout"):
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            else:
                raise ConfigError(f"layout line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"layout line {lineno}: {exc}") from None
    kwargs["walls"] = tuple(walls)
    cfg = replace(base, **kwargs) if base is not None else MazeConfig(**kwargs)
    validate(cfg)
    return cfg


def load_layout(path, base: MazeConfig | None = None) -> MazeConfig:
    return parse_layout(Path(path).read_text(), base)
