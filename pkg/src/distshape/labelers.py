"""Inverse-dynamics, reward and cost models that label generated windows.

All three are supervised regressors trained on the raw dataset only: the
inverse dynamics maps (s, s') to the connecting action, the reward and cost
heads map (s, a, s') to scalars.  Costs are regressed onto their {0, 1}
labels, clamped to [0, 1] and thresholded when labeling.  Analytic oracles
backed by the toy environments' exact formulas (and the exact
double-integrator inversion a = (v' - v) / dt) serve as the validation
reference.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import envs
from .core import Transition, TransitionDataset
from .diffusion import StateWindow
from .envs import CircleEnvConfig, EnvConfig, RunEnvConfig
from .nets import Network, fit_regression, forward_batch, network_from_dict, network_to_dict

LABELER_HIDDEN = (128, 128)
COST_THRESHOLD = 0.5
MIN_TRANSITIONS = 100


@dataclass(frozen=True)
class InverseDynamicsModel:
    net: Network
    action_bound: float

    def actions(self, states: np.ndarray, next_states: np.ndarray) -> np.ndarray:
        raw = forward_batch(self.net, np.concatenate([states, next_states], axis=1))
        return np.clip(raw, -self.action_bound, self.action_bound)


@dataclass(frozen=True)
class RewardModel:
    net: Network

    def rewards(self, states: np.ndarray, actions: np.ndarray,
                next_states: np.ndarray) -> np.ndarray:
        inp = np.concatenate([states, actions, next_states], axis=1)
        return forward_batch(self.net, inp)[:, 0]


@dataclass(frozen=True)
class CostModel:
    net: Network
    threshold: float = COST_THRESHOLD

    def costs(self, states: np.ndarray, actions: np.ndarray,
              next_states: np.ndarray) -> np.ndarray:
        inp = np.concatenate([states, actions, next_states], axis=1)
        raw = np.clip(forward_batch(self.net, inp)[:, 0], 0.0, 1.0)
        return (raw > self.threshold).astype(float)


@dataclass(frozen=True)
class LabelerReport:
    """Held-out quality of the three labelers (90/10 split)."""

    inverse_rmse: float
    reward_rmse: float
    cost_accuracy: float
    n_train: int
    n_heldout: int


@dataclass(frozen=True)
class Labelers:
    inverse: InverseDynamicsModel
    reward: RewardModel
    cost: CostModel
    report: LabelerReport | None = None


def train_labelers(dataset: TransitionDataset, seed: int = 0, epochs: int = 30,
                   batch_size: int = 256, learning_rate: float = 1e-3,
                   action_bound: float = 1.0) -> Labelers:
    """Fit the three labelers on the raw dataset with a 90/10 held-out report."""
    n = dataset.n_transitions
    if n < MIN_TRANSITIONS:
        raise ValueError(f"dataset too small to train labelers ({n} transitions)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    cut = max(1, int(0.9 * n))
    train, held = order[:cut], order[cut:]

    s, a = dataset.states, dataset.actions
    s2 = dataset.next_states
    inv_in = np.concatenate([s, s2], axis=1)
    sas = np.concatenate([s, a, s2], axis=1)

    inv_net, _ = fit_regression(inv_in[train], a[train], LABELER_HIDDEN, "relu",
                                seed, epochs, batch_size, learning_rate)
    rew_net, _ = fit_regression(sas[train], dataset.rewards[train], LABELER_HIDDEN,
                                "relu", seed + 1, epochs, batch_size, learning_rate)
    cost_net, _ = fit_regression(sas[train], dataset.costs[train], LABELER_HIDDEN,
                                 "relu", seed + 2, epochs, batch_size, learning_rate)

    inverse = InverseDynamicsModel(inv_net, action_bound)
    reward = RewardModel(rew_net)
    cost = CostModel(cost_net)

    pred_a = inverse.actions(s[held], s2[held])
    pred_r = reward.rewards(s[held], a[held], s2[held])
    pred_c = cost.costs(s[held], a[held], s2[held])
    report = LabelerReport(
        inverse_rmse=float(np.sqrt(np.mean((pred_a - a[held]) ** 2))),
        reward_rmse=float(np.sqrt(np.mean((pred_r - dataset.rewards[held]) ** 2))),
        cost_accuracy=float(np.mean(pred_c == dataset.costs[held])),
        n_train=len(train), n_heldout=len(held),
    )
    return Labelers(inverse, reward, cost, report)


def label_window(window: StateWindow, inverse: InverseDynamicsModel,
                 reward: RewardModel, cost: CostModel) -> list[Transition]:
    """Turn an L-state window into L-1 labeled transitions."""
    states = window.states[:-1]
    next_states = window.states[1:]
    actions = inverse.actions(states, next_states)
    rewards = reward.rewards(states, actions, next_states)
    costs = cost.costs(states, actions, next_states)
    return [Transition(states[i], actions[i], rewards[i], costs[i], next_states[i])
            for i in range(len(states))]


# -- analytic oracle ----------------------------------------------------------


@dataclass(frozen=True)
class OracleLabeler:
    """Exact labels from the environment formulas; validation reference only."""

    cfg: EnvConfig

    def actions(self, states: np.ndarray, next_states: np.ndarray) -> np.ndarray:
        acc = (next_states[:, 2:] - states[:, 2:]) / self.cfg.dt
        return np.clip(acc, -self.cfg.action_bound, self.cfg.action_bound)

    def rewards(self, states: np.ndarray, actions: np.ndarray,
                next_states: np.ndarray) -> np.ndarray:
        if isinstance(self.cfg, CircleEnvConfig):
            return np.array([envs.circle_reward(ns, self.cfg.radius)
                             for ns in next_states])
        return np.array([envs.run_reward(s, ns, self.cfg.goal)
                         for s, ns in zip(states, next_states)])

    def costs(self, states: np.ndarray, actions: np.ndarray,
              next_states: np.ndarray) -> np.ndarray:
        if isinstance(self.cfg, CircleEnvConfig):
            return np.array([envs.circle_cost(ns, self.cfg.x_lim)
                             for ns in next_states])
        return np.array([envs.run_cost(ns, self.cfg) for ns in next_states])


def oracle_labelers(cfg: EnvConfig) -> tuple[OracleLabeler, OracleLabeler, OracleLabeler]:
    """Oracle triple usable anywhere the learned labelers are."""
    oracle = OracleLabeler(cfg)
    return oracle, oracle, oracle


# -- checkpoints ---------------------------------------------------------------


def save_labelers(labelers: Labelers, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    payloads = {
        "inverse.json": {**network_to_dict(labelers.inverse.net),
                         "action_bound": labelers.inverse.action_bound},
        "reward.json": network_to_dict(labelers.reward.net),
        "cost.json": {**network_to_dict(labelers.cost.net),
                      "threshold": labelers.cost.threshold},
    }
    for name, payload in payloads.items():
        with open(os.path.join(directory, name), "w") as fh:
            json.dump(payload, fh)


def load_labelers(directory: str) -> Labelers:
    def read(name):
        with open(os.path.join(directory, name)) as fh:
            return json.load(fh)
    inv = read("inverse.json")
    rew = read("reward.json")
    cst = read("cost.json")
    return Labelers(
        inverse=InverseDynamicsModel(network_from_dict(inv), float(inv["action_bound"])),
        reward=RewardModel(network_from_dict(rew)),
        cost=CostModel(network_from_dict(cst), float(cst["threshold"])),
    )
