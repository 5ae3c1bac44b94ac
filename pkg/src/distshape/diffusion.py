"""Conditional denoising diffusion over fixed-length state windows.

The generator models subsequences of L consecutive states.  Training draws a
window, noises it to a uniformly sampled step of a cosine schedule, clamps
the first row back to the true initial state, and regresses the predicted
noise onto the injected noise; the (cost, reward) window returns act as the
condition and are replaced by a null token with probability `p_mask` so one
network serves both the conditional and unconditional roles.  Sampling runs
the reverse chain with classifier-free guidance and re-applies the
initial-state clamp after every step.

Windows live in a normalized space: states are mapped per-feature to [-1, 1]
using the training data's min/max, and window returns are normalized by the
dataset's trajectory return ranges scaled by L/horizon.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import TransitionDataset
from .nets import (AdamState, Network, adam_step, forward_batch, init_network,
                   mse_loss_and_grad, network_from_dict, network_to_dict, TrainBatch)
from .seeding import stream

COSINE_OFFSET = 0.008
BETA_MAX = 0.999
TIME_EMBED_DIM = 16
DEFAULT_K = 20
DEFAULT_L = 32
DEFAULT_W_ALPHA = 2.0
DEFAULT_P_MASK = 0.25
DEFAULT_HIDDEN = (256, 256)
CLAMP_INFLATION = 0.10


class SamplingDivergedError(RuntimeError):
    """Non-finite values appeared during reverse sampling."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha tables for K denoising steps (index 0 holds step k=1)."""

    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "posterior_var"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.beta) == len(self.alpha) == len(self.alpha_bar)
                == len(self.posterior_var) == self.K):
            raise ValueError("schedule tables must have length K")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("beta values must lie in (0, 1)")
        if np.any(np.diff(self.alpha_bar) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")


def cosine_schedule(K: int) -> NoiseSchedule:
    """Cosine noise schedule: alpha_bar follows cos^2((k/K + s)/(1 + s) * pi/2)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    k = np.arange(K + 1, dtype=float)
    f = np.cos(((k / K + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * np.pi / 2.0) ** 2
    alpha_bar_raw = f / f[0]
    beta = np.minimum(1.0 - alpha_bar_raw[1:] / alpha_bar_raw[:-1], BETA_MAX)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
    return NoiseSchedule(K=K, beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar, posterior_var=posterior_var)


@dataclass(frozen=True)
class Condition:
    """Normalized [cost, reward] generation target, or the null token."""

    variant: str                  # "targets" | "null"
    cost_target: float = 0.0
    reward_target: float = 0.0

    def __post_init__(self):
        if self.variant not in ("targets", "null"):
            raise ValueError("variant must be 'targets' or 'null'")
        if self.variant == "targets":
            if not (np.isfinite(self.cost_target) and np.isfinite(self.reward_target)):
                raise ValueError("targets must be finite")
            if not (0.0 <= self.cost_target <= 1.0 and 0.0 <= self.reward_target <= 1.0):
                raise ValueError("targets must lie in [0, 1]")

    @classmethod
    def targets(cls, cost_target: float, reward_target: float) -> "Condition":
        return cls("targets", float(cost_target), float(reward_target))

    @classmethod
    def null(cls) -> "Condition":
        return cls("null")

    @property
    def is_null(self) -> bool:
        return self.variant == "null"


@dataclass(frozen=True)
class StateWindow:
    """L consecutive states as an (L, m) matrix."""

    states: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.states, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError("a window needs at least 2 states")
        arr.setflags(write=False)
        object.__setattr__(self, "states", arr)

    @property
    def length(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class ConditionStats:
    """Normalization maps for states and window returns.

    Return normalization uses the trajectory-level return ranges of the
    training data; a window's partial return is first rescaled by
    1/window_scale (window_scale = L/horizon) onto the trajectory scale.
    """

    feature_lo: np.ndarray
    feature_hi: np.ndarray
    reward_min: float
    reward_max: float
    cost_min: float
    cost_max: float
    window_scale: float
    horizon: int

    def __post_init__(self):
        for name in ("feature_lo", "feature_hi"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- states ------------------------------------------------------------

    def normalize_states(self, states: np.ndarray) -> np.ndarray:
        center = 0.5 * (self.feature_hi + self.feature_lo)
        half = np.maximum(0.5 * (self.feature_hi - self.feature_lo), 1e-12)
        return (states - center) / half

    def denormalize_states(self, normalized: np.ndarray) -> np.ndarray:
        center = 0.5 * (self.feature_hi + self.feature_lo)
        half = np.maximum(0.5 * (self.feature_hi - self.feature_lo), 1e-12)
        return normalized * half + center

    # -- returns -----------------------------------------------------------

    def _spans(self) -> tuple[float, float]:
        return (max(self.reward_max - self.reward_min, 1e-12),
                max(self.cost_max - self.cost_min, 1e-12))

    def normalize_return(self, reward_return: float, cost_return: float,
                         window_level: bool = False,
                         clip: bool = True) -> tuple[float, float]:
        scale = self.window_scale if window_level else 1.0
        r_span, c_span = self._spans()
        r = (reward_return / scale - self.reward_min) / r_span
        c = (cost_return / scale - self.cost_min) / c_span
        if clip:
            r, c = min(max(r, 0.0), 1.0), min(max(c, 0.0), 1.0)
        return float(r), float(c)

    def denormalize_return(self, reward_target: float, cost_target: float,
                           window_level: bool = False) -> tuple[float, float]:
        scale = self.window_scale if window_level else 1.0
        r_span, c_span = self._spans()
        r = (self.reward_min + reward_target * r_span) * scale
        c = (self.cost_min + cost_target * c_span) * scale
        return float(r), float(c)

    def clamp_box(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-feature clamp box: training min/max inflated by 10%."""
        span = self.feature_hi - self.feature_lo
        pad = 0.5 * CLAMP_INFLATION * span
        return self.feature_lo - pad, self.feature_hi + pad


def condition_stats_from_dataset(dataset: TransitionDataset, L: int) -> ConditionStats:
    horizon = int(dataset.metadata.get("horizon", max(l for _, l in dataset.spans)))
    table = dataset.trajectory_return_table()
    all_states = np.concatenate([dataset.states, dataset.next_states], axis=0)
    return ConditionStats(
        feature_lo=all_states.min(axis=0),
        feature_hi=all_states.max(axis=0),
        reward_min=float(table[:, 0].min()),
        reward_max=float(table[:, 0].max()),
        cost_min=float(table[:, 1].min()),
        cost_max=float(table[:, 1].max()),
        window_scale=L / horizon,
        horizon=horizon,
    )


@dataclass(frozen=True)
class GeneratorModel:
    """Denoiser network plus schedule and normalization state."""

    denoiser: Network
    schedule: NoiseSchedule
    L: int
    m: int
    cond_stats: ConditionStats
    w_alpha: float = DEFAULT_W_ALPHA
    raw_noising: bool = False
    train_loss: tuple[float, ...] = ()

    def __post_init__(self):
        expected_in = self.L * self.m + TIME_EMBED_DIM + 3
        if self.denoiser.in_dim != expected_in or self.denoiser.out_dim != self.L * self.m:
            raise ValueError("denoiser dimensions inconsistent with L and m")


def build_generator(dataset: TransitionDataset, K: int = DEFAULT_K, L: int = DEFAULT_L,
                    w_alpha: float = DEFAULT_W_ALPHA,
                    hidden: Sequence[int] = DEFAULT_HIDDEN,
                    seed: int = 0, raw_noising: bool = False) -> GeneratorModel:
    m = dataset.state_dim
    layer_sizes = [L * m + TIME_EMBED_DIM + 3, *hidden, L * m]
    return GeneratorModel(
        denoiser=init_network(layer_sizes, "tanh", seed),
        schedule=cosine_schedule(K),
        L=L, m=m,
        cond_stats=condition_stats_from_dataset(dataset, L),
        w_alpha=w_alpha,
        raw_noising=raw_noising,
    )


# -- forward process ---------------------------------------------------------


def forward_noise(x0: StateWindow, k: int, noise: np.ndarray,
                  schedule: NoiseSchedule, raw_form: bool = False) -> StateWindow:
    """Noise a clean window to step k of the schedule.

    Standard variance-preserving form sqrt(abar)*x0 + sqrt(1-abar)*eps; the
    `raw_form` flag applies abar*x0 + (1-abar)*eps instead (no square roots),
    kept for comparison only.
    """
    if not 1 <= k <= schedule.K:
        raise ValueError(f"k must lie in [1, {schedule.K}]")
    noise = np.asarray(noise, dtype=float)
    if noise.shape != x0.states.shape:
        raise ValueError("noise shape must match the window")
    abar = schedule.alpha_bar[k - 1]
    if raw_form:
        noised = abar * x0.states + (1.0 - abar) * noise
    else:
        noised = np.sqrt(abar) * x0.states + np.sqrt(1.0 - abar) * noise
    return StateWindow(noised)


def time_embedding(k: np.ndarray, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of (integer) denoising steps; rows per entry of k."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _denoiser_inputs(model: GeneratorModel, x: np.ndarray, k: np.ndarray,
                     cond: np.ndarray, null_flag: np.ndarray) -> np.ndarray:
    B = x.shape[0]
    flat = x.reshape(B, model.L * model.m)
    emb = time_embedding(k)
    cond = cond * (1.0 - null_flag[:, None])      # null rows carry zeros
    return np.concatenate([flat, emb, cond, null_flag[:, None]], axis=1)


def _epsilon_batch(model: GeneratorModel, x: np.ndarray, k: np.ndarray,
                   cond: np.ndarray, null_flag: np.ndarray) -> np.ndarray:
    inputs = _denoiser_inputs(model, x, k, cond, null_flag)
    out = forward_batch(model.denoiser, inputs)
    return out.reshape(x.shape)


def guided_epsilon(model: GeneratorModel, x_k: StateWindow, y: Condition,
                   k: int, w_alpha: float | None = None) -> np.ndarray:
    """Classifier-free-guided noise prediction.

    eps = eps(x, null, k) + w_alpha * (eps(x, y, k) - eps(x, null, k)); exact
    unconditional output at w_alpha = 0 and exact conditional output at 1.
    """
    if y.is_null:
        raise ValueError("guided prediction needs a targets condition; "
                         "use the unconditional path explicitly")
    w = model.w_alpha if w_alpha is None else float(w_alpha)
    x = x_k.states[None, :, :]
    ks = np.array([k], dtype=float)
    cond = np.array([[y.cost_target, y.reward_target]])
    eps_null = _epsilon_batch(model, x, ks, np.zeros((1, 2)), np.ones(1))
    eps_cond = _epsilon_batch(model, x, ks, cond, np.zeros(1))
    return (eps_null + w * (eps_cond - eps_null))[0]


# -- training ----------------------------------------------------------------


def mask_conditions(rng: np.random.Generator, n: int, p_mask: float) -> np.ndarray:
    """Null-condition mask used by the training loop: True with probability p."""
    if not 0.0 <= p_mask <= 1.0:
        raise ValueError("p_mask must lie in [0, 1]")
    return rng.random(n) < p_mask


@dataclass(frozen=True)
class _WindowIndex:
    traj_states: list            # normalized (T_i + 1, m) arrays
    traj_id: np.ndarray          # (W,)
    start: np.ndarray            # (W,)
    conditions: np.ndarray       # (W, 2) normalized (cost, reward)


def _index_windows(dataset: TransitionDataset, model: GeneratorModel) -> _WindowIndex:
    L = model.L
    stats = model.cond_stats
    traj_states, traj_id, start, conds = [], [], [], []
    for i, (s0, length) in enumerate(dataset.spans):
        if length + 1 < L:
            continue
        traj_states.append(stats.normalize_states(dataset.trajectory_states(i)))
        rewards = dataset.rewards[s0:s0 + length]
        costs = dataset.costs[s0:s0 + length]
        csum_r = np.concatenate([[0.0], np.cumsum(rewards)])
        csum_c = np.concatenate([[0.0], np.cumsum(costs)])
        for t in range(length + 1 - L + 1):
            r_w = csum_r[t + L - 1] - csum_r[t]
            c_w = csum_c[t + L - 1] - csum_c[t]
            r_n, c_n = stats.normalize_return(r_w, c_w, window_level=True)
            traj_id.append(len(traj_states) - 1)
            start.append(t)
            conds.append((c_n, r_n))
    if not traj_id:
        raise ValueError(f"no trajectory long enough for windows of length {L}")
    return _WindowIndex(traj_states, np.asarray(traj_id), np.asarray(start),
                        np.asarray(conds, dtype=float))


def _gather_windows(index: _WindowIndex, rows: np.ndarray, L: int, m: int) -> np.ndarray:
    out = np.empty((len(rows), L, m))
    for j, w in enumerate(rows):
        t = index.start[w]
        out[j] = index.traj_states[index.traj_id[w]][t:t + L]
    return out


def train_generator(dataset: TransitionDataset, model: GeneratorModel,
                    epochs: int, batch_size: int = 256, seed: int = 0,
                    learning_rate: float = 3.0e-5,
                    p_mask: float = DEFAULT_P_MASK) -> GeneratorModel:
    """Masked conditional denoising training.

    Per window: sample a noise step uniformly, noise the window, clamp its
    first row back to the clean initial state, drop the condition to the null
    token with probability p_mask, and regress the noise prediction onto the
    injected noise (per-element MSE).
    """
    index = _index_windows(dataset, model)
    sched = model.schedule
    rng = stream(seed, 0, "train-generator")
    net = model.denoiser
    opt = AdamState.for_parameters(net.parameters.size, learning_rate)
    n_windows = len(index.traj_id)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n_windows)
        epoch_losses = []
        for b0 in range(0, n_windows, batch_size):
            rows = order[b0:b0 + batch_size]
            B = len(rows)
            x0 = _gather_windows(index, rows, model.L, model.m)
            cond = index.conditions[rows]
            k = rng.integers(1, sched.K + 1, size=B)
            noise = rng.standard_normal(x0.shape)
            null_flag = mask_conditions(rng, B, p_mask).astype(float)
            abar = sched.alpha_bar[k - 1][:, None, None]
            if model.raw_noising:
                xk = abar * x0 + (1.0 - abar) * noise
            else:
                xk = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise
            xk[:, 0, :] = x0[:, 0, :]                    # initial-state clamp
            inputs = _denoiser_inputs(model, xk, k.astype(float), cond, null_flag)
            targets = noise.reshape(B, model.L * model.m)
            loss, grad = mse_loss_and_grad(net, TrainBatch(inputs, targets))
            new_params, opt = adam_step(opt, net.parameters, grad)
            net = net.with_parameters(new_params)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
    return replace(model, denoiser=net,
                   train_loss=model.train_loss + tuple(losses))


# -- sampling ----------------------------------------------------------------


def _draw_window_noise(master_seed: int, indices: np.ndarray, L: int, m: int,
                       K: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-window noise streams: init rows 1..L-1, then one z per step K..2."""
    B = len(indices)
    init = np.empty((B, L - 1, m))
    zs = np.empty((B, K - 1, L, m)) if K > 1 else np.zeros((B, 0, L, m))
    for j, idx in enumerate(indices):
        g = stream(master_seed, int(idx), "gen-window")
        init[j] = g.standard_normal((L - 1, m))
        if K > 1:
            zs[j] = g.standard_normal((K - 1, L, m))
    return init, zs


def sample_windows(model: GeneratorModel, initial_states: np.ndarray,
                   y_c: Condition, seed: int,
                   window_indices: np.ndarray | None = None,
                   w_alpha: float | None = None,
                   trace: list | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-sample one window per initial state.

    Returns (windows, ok): windows is (B, L, m) in raw state units with row 0
    equal to the conditioning state bit-exactly; ok flags windows that stayed
    finite.  Window j draws from the substream `seed ^ window_indices[j]`, so
    results do not depend on batch composition.
    """
    if y_c.is_null:
        raise ValueError("sampling requires a targets condition")
    s0 = np.atleast_2d(np.asarray(initial_states, dtype=float))
    B = s0.shape[0]
    if s0.shape[1] != model.m:
        raise ValueError(f"initial states must have dimension {model.m}")
    indices = np.arange(B) if window_indices is None else np.asarray(window_indices)
    if len(indices) != B:
        raise ValueError("one window index per initial state required")
    w = model.w_alpha if w_alpha is None else float(w_alpha)
    sched = model.schedule
    stats = model.cond_stats
    ns0 = stats.normalize_states(s0)
    init, zs = _draw_window_noise(seed, indices, model.L, model.m, sched.K)
    x = np.concatenate([ns0[:, None, :], init], axis=1)
    cond = np.repeat([[y_c.cost_target, y_c.reward_target]], B, axis=0)
    ok = np.ones(B, dtype=bool)
    for k in range(sched.K, 0, -1):
        ks = np.full(B, float(k))
        eps_null = _epsilon_batch(model, x, ks, np.zeros((B, 2)), np.ones(B))
        eps_cond = _epsilon_batch(model, x, ks, cond, np.zeros(B))
        eps = eps_null + w * (eps_cond - eps_null)
        i = k - 1
        mu = (x - (sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i])) * eps) \
            / np.sqrt(sched.alpha[i])
        if k > 1:
            x = mu + np.sqrt(sched.posterior_var[i]) * zs[:, sched.K - k]
        else:
            x = mu
        x[:, 0, :] = ns0                                  # inpainting clamp
        ok &= np.isfinite(x).all(axis=(1, 2))
        x = np.where(ok[:, None, None], x, 0.0)
        if trace is not None:
            trace.append(x.copy())
    lo, hi = stats.clamp_box()
    out = np.clip(stats.denormalize_states(x), lo, hi)
    out[:, 0, :] = s0                                     # bit-exact row 0
    return out, ok


def sample_subtrajectory(model: GeneratorModel, s0: np.ndarray, y_c: Condition,
                         seed: int, w_alpha: float | None = None) -> StateWindow:
    """Generate a single window from s0; raises if sampling diverges."""
    windows, ok = sample_windows(model, np.asarray(s0)[None, :], y_c, seed,
                                 window_indices=np.array([0]), w_alpha=w_alpha)
    if not ok[0]:
        raise SamplingDivergedError("sampling diverged")
    return StateWindow(windows[0])


def select_condition(stats: ConditionStats, return_table: np.ndarray, kappa: float,
                     kappa_margin: float = 0.7,
                     reward_quantile: float = 0.9) -> Condition:
    """Default generation target.

    The cost target maps a comfortable fraction of the budget through the
    return normalization; the reward target is the `reward_quantile` of
    normalized reward returns among budget-satisfying trajectories, falling
    back to the full dataset when no trajectory is safe.
    """
    rewards, costs = return_table[:, 0], return_table[:, 1]
    safe = rewards[costs <= kappa]
    pool = safe if len(safe) > 0 else rewards
    r_pick = float(np.quantile(pool, reward_quantile))
    r_n, c_n = stats.normalize_return(r_pick, kappa_margin * kappa)
    return Condition.targets(cost_target=c_n, reward_target=r_n)


# -- checkpoint --------------------------------------------------------------


def generator_to_dict(model: GeneratorModel) -> dict:
    payload = network_to_dict(model.denoiser)
    payload["schedule"] = {"K": model.schedule.K, "beta": model.schedule.beta.tolist()}
    payload["L"] = model.L
    payload["m"] = model.m
    payload["cond_stats"] = {
        "feature_lo": model.cond_stats.feature_lo.tolist(),
        "feature_hi": model.cond_stats.feature_hi.tolist(),
        "reward_min": model.cond_stats.reward_min,
        "reward_max": model.cond_stats.reward_max,
        "cost_min": model.cond_stats.cost_min,
        "cost_max": model.cond_stats.cost_max,
        "window_scale": model.cond_stats.window_scale,
        "horizon": model.cond_stats.horizon,
    }
    payload["w_alpha"] = model.w_alpha
    payload["raw_noising"] = model.raw_noising
    return payload


def generator_from_dict(payload: dict) -> GeneratorModel:
    net = network_from_dict(payload)
    beta = np.asarray(payload["schedule"]["beta"], dtype=float)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    schedule = NoiseSchedule(K=int(payload["schedule"]["K"]), beta=beta, alpha=alpha,
                             alpha_bar=alpha_bar,
                             posterior_var=beta * (1.0 - prev) / (1.0 - alpha_bar))
    cs = payload["cond_stats"]
    stats = ConditionStats(
        feature_lo=np.asarray(cs["feature_lo"]), feature_hi=np.asarray(cs["feature_hi"]),
        reward_min=cs["reward_min"], reward_max=cs["reward_max"],
        cost_min=cs["cost_min"], cost_max=cs["cost_max"],
        window_scale=cs["window_scale"], horizon=int(cs["horizon"]))
    return GeneratorModel(denoiser=net, schedule=schedule, L=int(payload["L"]),
                          m=int(payload["m"]), cond_stats=stats,
                          w_alpha=float(payload["w_alpha"]),
                          raw_noising=bool(payload.get("raw_noising", False)))


def save_generator(model: GeneratorModel, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(generator_to_dict(model), fh)


def load_generator(path: str) -> GeneratorModel:
    with open(path) as fh:
        return generator_from_dict(json.load(fh))
