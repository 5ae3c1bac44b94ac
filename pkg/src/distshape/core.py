"""Core constrained-MDP data types, return accounting and dataset profiling.

A transition carries (s, a, r, c, s') plus a terminal flag; trajectories cache
their undiscounted reward/cost returns; datasets store transitions in columnar
arrays with a trajectory index so that whole-trajectory operations (curation,
profiling, reweighting) stay cheap.  Everything is immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

RETURN_TOL = 1e-12


class DatasetError(ValueError):
    """Malformed dataset or violated precondition."""


@dataclass(frozen=True)
class Transition:
    """One environment step: (s, a, r, c, s') plus terminal flag."""

    state: np.ndarray
    action: np.ndarray
    reward: float
    cost: float
    next_state: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        state = np.asarray(self.state, dtype=float)
        next_state = np.asarray(self.next_state, dtype=float)
        action = np.asarray(self.action, dtype=float)
        if state.shape != next_state.shape:
            raise DatasetError("state and next_state dimensions differ")
        if self.cost < 0:
            raise DatasetError("cost must be non-negative")
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "action", action)
        object.__setattr__(self, "next_state", next_state)
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "cost", float(self.cost))


def trajectory_returns(transitions: Sequence[Transition]) -> tuple[float, float]:
    """Undiscounted reward and cost sums over a non-empty transition sequence."""
    if len(transitions) == 0:
        raise DatasetError("empty trajectory")
    reward = float(sum(t.reward for t in transitions))
    cost = float(sum(t.cost for t in transitions))
    return reward, cost


@dataclass(frozen=True)
class Trajectory:
    """Ordered transitions with cached undiscounted returns."""

    transitions: tuple[Transition, ...]
    reward_return: float
    cost_return: float

    @classmethod
    def from_transitions(cls, transitions: Iterable[Transition]) -> "Trajectory":
        transitions = tuple(transitions)
        reward, cost = trajectory_returns(transitions)
        return cls(transitions, reward, cost)

    def __post_init__(self):
        if len(self.transitions) == 0:
            raise DatasetError("empty trajectory")
        reward, cost = trajectory_returns(self.transitions)
        if abs(reward - self.reward_return) > RETURN_TOL or abs(cost - self.cost_return) > RETURN_TOL:
            raise DatasetError("cached returns disagree with recomputed sums")

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def states(self) -> np.ndarray:
        """State sequence of length len(self)+1 (includes final next_state)."""
        rows = [t.state for t in self.transitions]
        rows.append(self.transitions[-1].next_state)
        return np.asarray(rows, dtype=float)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TransitionDataset:
    """Flat transition store with a trajectory index.

    Columns are (N, m)/(N, n)/(N,) arrays; ``spans[i] = (start, length)`` maps
    trajectory ``i`` to its contiguous row block.  Spans are disjoint and cover
    every row.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    spans: tuple[tuple[int, int], ...]
    metadata: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "actions", "rewards", "costs", "next_states"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        terminals = np.ascontiguousarray(self.terminals, dtype=bool)
        terminals.setflags(write=False)
        object.__setattr__(self, "terminals", terminals)
        object.__setattr__(self, "metadata", dict(self.metadata))
        if self.states.shape != self.next_states.shape:
            raise DatasetError("state/next_state dimensions differ")
        if not (len(self.states) == len(self.actions) == len(self.costs)
                == len(self.next_states) == len(self.terminals) == n):
            raise DatasetError("column lengths differ")
        if np.any(self.costs < 0):
            raise DatasetError("cost must be non-negative")
        covered = 0
        for start, length in self.spans:
            if length < 1 or start != covered:
                raise DatasetError("trajectory spans must be disjoint, ordered and non-empty")
            covered += length
        if covered != n:
            raise DatasetError("trajectory spans do not cover all transitions")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory],
                          metadata: Mapping[str, object] | None = None) -> "TransitionDataset":
        if len(trajectories) == 0:
            raise DatasetError("no trajectories")
        spans = []
        start = 0
        for traj in trajectories:
            spans.append((start, len(traj)))
            start += len(traj)
        ts = [t for traj in trajectories for t in traj.transitions]
        return cls(
            states=np.asarray([t.state for t in ts]),
            actions=np.asarray([t.action for t in ts]),
            rewards=np.asarray([t.reward for t in ts]),
            costs=np.asarray([t.cost for t in ts]),
            next_states=np.asarray([t.next_state for t in ts]),
            terminals=np.asarray([t.terminal for t in ts]),
            spans=tuple(spans),
            metadata=metadata or {},
        )

    def select_trajectories(self, indices: Sequence[int],
                            metadata: Mapping[str, object] | None = None) -> "TransitionDataset":
        """New dataset containing the given trajectories, re-indexed, rows bit-identical."""
        if len(indices) == 0:
            raise DatasetError("no trajectories selected")
        rows = np.concatenate([np.arange(s, s + l) for s, l in (self.spans[i] for i in indices)])
        spans = []
        start = 0
        for i in indices:
            length = self.spans[i][1]
            spans.append((start, length))
            start += length
        return TransitionDataset(
            states=self.states[rows], actions=self.actions[rows],
            rewards=self.rewards[rows], costs=self.costs[rows],
            next_states=self.next_states[rows], terminals=self.terminals[rows],
            spans=tuple(spans),
            metadata=dict(self.metadata if metadata is None else metadata),
        )

    # -- views -------------------------------------------------------------

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    @property
    def n_transitions(self) -> int:
        return len(self.rewards)

    @property
    def n_trajectories(self) -> int:
        return len(self.spans)

    def transition(self, row: int) -> Transition:
        return Transition(self.states[row], self.actions[row], self.rewards[row],
                          self.costs[row], self.next_states[row], bool(self.terminals[row]))

    def trajectory(self, index: int) -> Trajectory:
        start, length = self.spans[index]
        return Trajectory.from_transitions(
            self.transition(r) for r in range(start, start + length))

    def iter_trajectories(self) -> Iterator[Trajectory]:
        for i in range(self.n_trajectories):
            yield self.trajectory(i)

    def trajectory_return_table(self) -> np.ndarray:
        """(n_trajectories, 2) array of (reward_return, cost_return)."""
        out = np.empty((self.n_trajectories, 2))
        for i, (start, length) in enumerate(self.spans):
            out[i, 0] = self.rewards[start:start + length].sum()
            out[i, 1] = self.costs[start:start + length].sum()
        return out

    def trajectory_states(self, index: int) -> np.ndarray:
        """States of trajectory `index` as an (L+1, m) array."""
        start, length = self.spans[index]
        return np.concatenate(
            [self.states[start:start + length],
             self.next_states[start + length - 1:start + length]], axis=0)


@dataclass(frozen=True)
class CostBudget:
    """Episode cost threshold and the agent's discount factor."""

    kappa: float
    gamma: float = 0.99

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class EvaluationReport:
    """Rollout evaluation summary with threshold-normalized metrics."""

    normalized_reward: float
    normalized_cost: float
    raw_reward_mean: float
    raw_reward_std: float
    raw_cost_mean: float
    raw_cost_std: float
    episodes: int
    seed: int

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")


def normalize_metrics(raw_reward: float, raw_cost: float,
                      kappa: float, r_max: float) -> tuple[float, float]:
    """Normalized (reward, cost): reward / r_max and cost / kappa."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    return raw_reward / r_max, raw_cost / kappa


# -- dataset profiling -----------------------------------------------------

PROFILE_TAGS = ("tempting", "conservative", "safe", "mixed")


@dataclass(frozen=True)
class DatasetProfile:
    """Per-trajectory (C, R) scatter with the tempting/conservative typology.

    A trajectory is *tempting* when its reward return exceeds the reference
    policy's, *conservative* when both returns fall below the reference, and
    *safe* when its cost return stays within the budget.  Tempting and safe
    overlap exactly when R > R_ref and C <= kappa.
    """

    points: np.ndarray              # (n, 2) columns (C, R)
    frac_tempting: float
    frac_conservative: float
    frac_safe: float
    tag: str
    reference_reward: float
    reference_cost: float
    kappa: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)


def dataset_profile(dataset: TransitionDataset,
                    reference: tuple[float, float],
                    kappa: float,
                    tag_threshold: float = 0.5) -> DatasetProfile:
    """Classify every trajectory against externally supplied reference returns.

    `reference` is (reward_return, cost_return) of a near-optimal policy; the
    optimal one being unavailable, classifications are approximations and the
    profile records the reference actually used.
    """
    if dataset.n_trajectories == 0:
        raise DatasetError("missing trajectory index")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    r_ref, c_ref = float(reference[0]), float(reference[1])
    table = dataset.trajectory_return_table()
    rewards, costs = table[:, 0], table[:, 1]
    tempting = rewards > r_ref
    conservative = (rewards < r_ref) & (costs < c_ref)
    safe = costs <= kappa
    fracs = {
        "tempting": float(tempting.mean()),
        "conservative": float(conservative.mean()),
        "safe": float(safe.mean()),
    }
    tag = "mixed"
    for name in ("tempting", "conservative", "safe"):
        if fracs[name] > tag_threshold:
            tag = name
            break
    return DatasetProfile(
        points=np.column_stack([costs, rewards]),
        frac_tempting=fracs["tempting"],
        frac_conservative=fracs["conservative"],
        frac_safe=fracs["safe"],
        tag=tag,
        reference_reward=r_ref,
        reference_cost=c_ref,
        kappa=float(kappa),
    )


# -- serialization ---------------------------------------------------------
#
# JSON-lines: a header record {"state_dim", "action_dim", "env", "kind",
# "seed"} followed by one record per transition
# {"traj", "t", "s", "a", "r", "c", "s2", "done"}.  json round-trips finite
# doubles exactly (repr-based float formatting).


def save_dataset(dataset: TransitionDataset, path: str) -> None:
    meta = dataset.metadata
    header = {
        "state_dim": dataset.state_dim,
        "action_dim": dataset.action_dim,
        "env": meta.get("env", ""),
        "kind": meta.get("kind", ""),
        "seed": meta.get("seed", 0),
    }
    for key, value in meta.items():
        if key not in header:
            header[key] = value
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for traj_id, (start, length) in enumerate(dataset.spans):
            for t in range(length):
                row = start + t
                rec = {
                    "traj": traj_id,
                    "t": t,
                    "s": dataset.states[row].tolist(),
                    "a": dataset.actions[row].tolist(),
                    "r": float(dataset.rewards[row]),
                    "c": float(dataset.costs[row]),
                    "s2": dataset.next_states[row].tolist(),
                    "done": bool(dataset.terminals[row]),
                }
                fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str) -> TransitionDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        states, actions, rewards, costs, next_states, dones, trajs = [], [], [], [], [], [], []
        for line in fh:
            rec = json.loads(line)
            states.append(rec["s"])
            actions.append(rec["a"])
            rewards.append(rec["r"])
            costs.append(rec["c"])
            next_states.append(rec["s2"])
            dones.append(rec["done"])
            trajs.append(rec["traj"])
    if not states:
        raise DatasetError(f"no transitions in {path}")
    trajs = np.asarray(trajs)
    spans = []
    start = 0
    for traj_id in dict.fromkeys(trajs.tolist()):
        length = int((trajs == traj_id).sum())
        spans.append((start, length))
        start += length
    metadata = {k: v for k, v in header.items() if k not in ("state_dim", "action_dim")}
    ds = TransitionDataset(
        states=np.asarray(states), actions=np.asarray(actions),
        rewards=np.asarray(rewards), costs=np.asarray(costs),
        next_states=np.asarray(next_states), terminals=np.asarray(dones),
        spans=tuple(spans), metadata=metadata,
    )
    if ds.state_dim != header["state_dim"] or ds.action_dim != header["action_dim"]:
        raise DatasetError("header dimensions disagree with records")
    return ds
