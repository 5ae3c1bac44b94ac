"""2D point-mass constrained environments: Circle and Run.

Both tasks share double-integrator dynamics: per-axis acceleration commands,
clamped to a bound, integrated with explicit Euler (v' = v + a*dt,
p' = p + v'*dt).  The observation is [x, y, vx, vy] (m=4, n=2).

Circle rewards counter-clockwise motion along a circle boundary and charges
unit cost whenever |x| exceeds a wall position that cuts through the circle,
so the rewarding path crosses the unsafe region.  Run rewards progress toward
a goal and charges cost for leaving a corridor or exceeding a speed limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .seeding import stream

STATE_DIM = 4
ACTION_DIM = 2


@dataclass(frozen=True)
class CircleEnvConfig:
    radius: float = 1.0
    x_lim: float = 0.6
    dt: float = 0.1
    horizon: int = 200
    action_bound: float = 1.0
    start_noise: float = 0.05

    def __post_init__(self):
        if self.radius <= 0 or self.x_lim <= 0 or self.dt <= 0 or self.action_bound <= 0:
            raise ValueError("radius, x_lim, dt and action_bound must be positive")
        if self.x_lim >= self.radius:
            raise ValueError("x_lim must be smaller than radius")
        if self.start_noise < 0:
            raise ValueError("start_noise must be non-negative")


@dataclass(frozen=True)
class RunEnvConfig:
    y_lim: float = 0.5
    v_lim: float = 1.0
    goal: tuple[float, float] = (10.0, 0.0)
    dt: float = 0.1
    horizon: int = 200
    action_bound: float = 1.0
    start_noise: float = 0.05
    # Appendix-form cost uses max(1, sum of indicators), which is >= 1 at
    # every step; kept behind this flag for comparison, clamp is the default.
    raw_cost_formula: bool = False

    def __post_init__(self):
        if self.y_lim <= 0 or self.v_lim <= 0:
            raise ValueError("y_lim and v_lim must be positive")
        if self.dt <= 0 or self.action_bound <= 0:
            raise ValueError("dt and action_bound must be positive")


EnvConfig = CircleEnvConfig | RunEnvConfig


@dataclass(frozen=True)
class EnvState:
    position: np.ndarray      # (2,)
    velocity: np.ndarray      # (2,)
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float))
        if self.step < 0:
            raise ValueError("step must be non-negative")

    @property
    def observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


def _integrate(state: EnvState, action: np.ndarray, cfg: EnvConfig) -> EnvState:
    action = np.asarray(action, dtype=float)
    if action.shape != (2,) or not np.all(np.isfinite(action)):
        raise ValueError("action must be a finite 2-vector")
    a = np.clip(action, -cfg.action_bound, cfg.action_bound)
    v = state.velocity + a * cfg.dt
    p = state.position + v * cfg.dt
    return EnvState(position=p, velocity=v, step=state.step + 1)


def circle_reward(observation: np.ndarray, radius: float) -> float:
    """Tangential-motion reward at the given (next) observation."""
    x, y, vx, vy = observation
    return float((-y * vx + x * vy) / (1.0 + abs(np.hypot(x, y) - radius)))


def circle_cost(observation: np.ndarray, x_lim: float) -> float:
    return 1.0 if abs(observation[0]) > x_lim else 0.0


def circle_step(state: EnvState, action: np.ndarray,
                cfg: CircleEnvConfig) -> tuple[EnvState, float, float, bool]:
    nxt = _integrate(state, action, cfg)
    obs = nxt.observation
    reward = circle_reward(obs, cfg.radius)
    cost = circle_cost(obs, cfg.x_lim)
    return nxt, reward, cost, nxt.step >= cfg.horizon


def run_reward(observation: np.ndarray, next_observation: np.ndarray,
               goal: tuple[float, float]) -> float:
    g = np.asarray(goal, dtype=float)
    before = float(np.hypot(*(observation[:2] - g)))
    after = float(np.hypot(*(next_observation[:2] - g)))
    return before - after


def run_cost(next_observation: np.ndarray, cfg: RunEnvConfig) -> float:
    indicators = float(abs(next_observation[1]) > cfg.y_lim) + \
        float(np.hypot(next_observation[2], next_observation[3]) > cfg.v_lim)
    if cfg.raw_cost_formula:
        return max(1.0, indicators)
    return min(1.0, indicators)


def run_step(state: EnvState, action: np.ndarray,
             cfg: RunEnvConfig) -> tuple[EnvState, float, float, bool]:
    nxt = _integrate(state, action, cfg)
    reward = run_reward(state.observation, nxt.observation, cfg.goal)
    cost = run_cost(nxt.observation, cfg)
    return nxt, reward, cost, nxt.step >= cfg.horizon


def step(state: EnvState, action: np.ndarray,
         cfg: EnvConfig) -> tuple[EnvState, float, float, bool]:
    if isinstance(cfg, CircleEnvConfig):
        return circle_step(state, action, cfg)
    return run_step(state, action, cfg)


def _reset_with_rng(cfg: EnvConfig, rng: np.random.Generator) -> EnvState:
    if isinstance(cfg, CircleEnvConfig):
        base = np.array([cfg.radius, 0.0])
    else:
        base = np.zeros(2)
    noise = rng.uniform(-cfg.start_noise, cfg.start_noise, size=2)
    return EnvState(position=base + noise, velocity=np.zeros(2), step=0)


def reset(cfg: EnvConfig, seed: int) -> EnvState:
    """Deterministic start state: nominal position plus uniform noise."""
    return _reset_with_rng(cfg, stream(seed, 0, "env-reset"))


def position_bounds(cfg: EnvConfig, margin: float = 1.2) -> tuple[tuple[float, float], tuple[float, float]]:
    """Axis-aligned (x, y) bounding box used for occupancy grids."""
    if isinstance(cfg, CircleEnvConfig):
        r = cfg.radius * margin
        return (-r, r), (-r, r)
    gx = max(abs(cfg.goal[0]), 1.0) * margin
    gy = max(abs(cfg.goal[1]), cfg.y_lim * 4) * margin
    return (-gx, gx), (-gy, gy)
