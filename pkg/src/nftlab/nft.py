"""Negative-aware finetuning on the forward process.

The trainable field v_theta is never regressed directly. Two implicit policies
are built around the frozen data-collection field v_old,

    v_pos = (1 - beta) v_old + beta v_theta
    v_neg = (1 + beta) v_old - beta v_theta

and each clean sample supervises v_pos with weight r and v_neg with weight
1 - r, where r in [0, 1] is its optimality probability. Only clean samples,
conditions and r enter the loss; sampler internals never do.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import RunAbortedError, TrainingDivergedError
from .fm_train import ADAPTIVE_FLOOR, velocity_regression
from .nn import MLP, Adam, ema_update
from .samplers import SamplerSpec, sample, time_grid
from .schedule import RF, NoiseSchedule, forward_diffuse, velocity_to_x0

log = logging.getLogger(__name__)

ROLLOUT, TRAIN, EVAL = 0, 1, 2


def optimality_reward(raw, Z):
    """Map raw group rewards to optimality probabilities in [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.shape[0] < 2:
        raise ValueError("need a group of at least two raw rewards")
    if not Z > 0:
        raise ValueError(f"normalizer Z must be positive, got {Z}")
    return 0.5 + 0.5 * np.clip((raw - raw.mean()) / Z, -1.0, 1.0)


def implicit_policies(v_old, v_theta, beta):
    if not beta > 0:
        raise ValueError("beta must be positive")
    v_old = np.asarray(v_old, dtype=np.float64)
    v_theta = np.asarray(v_theta, dtype=np.float64)
    return (1.0 - beta) * v_old + beta * v_theta, (1.0 + beta) * v_old - beta * v_theta


@dataclass
class RolloutBatch:
    """One prompt group: K clean samples with raw rewards and optimality r."""

    cond: int
    x0: np.ndarray
    raw: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        k = self.x0.shape[0]
        if k < 2:
            raise ValueError("a group needs K >= 2 members")
        if self.raw.shape != (k,) or self.r.shape != (k,):
            raise ValueError("raw rewards and r need one entry per sample")
        if np.any(self.r < 0.0) or np.any(self.r > 1.0):
            raise ValueError("optimality probabilities must lie in [0, 1]")


def nft_loss(
    model: MLP,
    v_old,
    x0,
    cond,
    r,
    t,
    eps,
    beta=1.0,
    weighting="uniform",
    negative=True,
    schedule: NoiseSchedule = RF,
    adaptive_denom=None,
):
    """Negative-aware loss and its parameter gradients.

    ``v_old(x_t, cond, t)`` is the frozen data-collection field; no gradient
    flows into it. With ``negative=False`` the (1 - r) branch is dropped. In
    adaptive mode both branches share one stop-gradient divisor taken from the
    positive-branch data-space residuals, unless ``adaptive_denom`` pins it.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (n,))
    x_t, v_target = forward_diffuse(x0, eps, t, schedule)
    v_ref = np.asarray(v_old(x_t, cond, t), dtype=np.float64)
    v_theta = model.forward(x_t, cond, t)
    v_pos, v_neg = implicit_policies(v_ref, v_theta, beta)
    denom = adaptive_denom
    if weighting == "adaptive" and denom is None:
        res = velocity_to_x0(x_t, v_pos, t, schedule) - x0
        denom = max(float(np.mean(np.abs(res))), ADAPTIVE_FLOOR)
    pos_loss, d_pos = velocity_regression(v_pos, v_target, x_t, x0, t, weighting, schedule, denom)
    per_sample = r * pos_loss
    dv = beta * r[:, None] * d_pos
    if negative:
        neg_loss, d_neg = velocity_regression(v_neg, v_target, x_t, x0, t, weighting, schedule, denom)
        per_sample = per_sample + (1.0 - r) * neg_loss
        dv = dv - beta * (1.0 - r)[:, None] * d_neg
    grads = model.backward(dv / n)
    return float(per_sample.mean()), grads


@dataclass(frozen=True)
class EtaSchedule:
    """eta_i = min(rate * i, max) or a constant when ``constant`` is set."""

    rate: float = 0.001
    max: float = 0.5
    constant: Optional[float] = None

    def __call__(self, i):
        eta = self.constant if self.constant is not None else min(self.rate * i, self.max)
        if not 0.0 <= eta <= 1.0:
            raise ValueError(f"eta_{i} = {eta} outside [0, 1]")
        return float(eta)


ETA_PRESETS = {
    "default": EtaSchedule(0.001, 0.5),
    "conservative": EtaSchedule(0.001, 0.999),
    "multi_reward_ocr": EtaSchedule(0.001, 0.95),
    "on_policy": EtaSchedule(constant=0.0),
    "off_policy": EtaSchedule(constant=0.9),
}


def soft_update(theta_old, theta, i, eta_schedule):
    return ema_update(theta_old, theta, eta_schedule(i))


@dataclass
class RlConfig:
    beta: float = 1.0
    eta: EtaSchedule = field(default_factory=EtaSchedule)
    z_mode: str = "running_std"  # or "constant"
    z_value: float = 1.0
    z_window: int = 10
    z_floor: float = 1e-3
    group_size: int = 8
    groups_per_iter: int = 24
    grad_passes: int = 4
    minibatch_size: int = 64
    lr: float = 1e-3
    sampler: SamplerSpec = field(default_factory=lambda: SamplerSpec("euler_ode", 10))
    weighting: str = "adaptive"
    t_sampling: str = "grid"  # or "uniform"
    negative: bool = True
    objective: str = "nft"  # or "rft"
    iterations: int = 300
    eval_every: int = 10
    eval_samples: int = 512
    eval_sampler: SamplerSpec = field(default_factory=lambda: SamplerSpec("euler_ode", 40))
    seed: int = 0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.group_size < 2:
            raise ValueError("group size must be at least 2")
        if self.z_mode not in ("running_std", "constant"):
            raise ValueError(f"unknown z_mode {self.z_mode!r}")
        if self.t_sampling not in ("grid", "uniform"):
            raise ValueError(f"unknown t_sampling {self.t_sampling!r}")
        if self.objective not in ("nft", "rft"):
            raise ValueError(f"unknown objective {self.objective!r}")

    def with_(self, **kw):
        return replace(self, **kw)


def frozen_field(model: MLP):
    """Gradient-free view ``v(x_t, cond, t)`` of a snapshot of ``model``."""
    snap = model.copy()
    return lambda x, c, t: snap.forward(x, c, t)


def member_rngs(seed, tag, iteration, group, k):
    return [np.random.default_rng([seed, tag, iteration, group, j]) for j in range(k)]


def rollout(model: MLP, reward_fn, n_cond, cfg: RlConfig, iteration, sampler=None, schedule=RF):
    """Sample ``groups_per_iter`` groups of ``group_size`` from ``model``.

    Group g uses condition g mod n_cond; every member draws its noise from its
    own generator seeded by (seed, iteration, group, member), so results do not
    depend on how groups are batched. Returns a list of (cond, x0, raw,
    trajectory) with the trajectory None unless the sampler records one.
    """
    sampler = sampler or cfg.sampler
    groups = []
    for c in range(n_cond):
        ids = [g for g in range(cfg.groups_per_iter) if g % n_cond == c]
        if not ids:
            continue
        rngs = [r for g in ids for r in member_rngs(cfg.seed, ROLLOUT, iteration, g, cfg.group_size)]
        x0, traj = sample(model.field(c), sampler, n=len(rngs), rng=rngs, schedule=schedule, dim=model.dim)
        raw = np.asarray(reward_fn(x0, c), dtype=np.float64)
        for j, g in enumerate(ids):
            sl = slice(j * cfg.group_size, (j + 1) * cfg.group_size)
            member_traj = None
            if traj is not None:
                member_traj = _slice_trajectory(traj, sl)
            groups.append((g, c, x0[sl], raw[sl], member_traj))
    groups.sort(key=lambda item: item[0])
    return [item[1:] for item in groups]


def _slice_trajectory(traj, sl):
    from .samplers import Trajectory

    cut = lambda arrs: [None if a is None else a[sl] for a in arrs]
    return Trajectory(traj.times, cut(traj.states), cut(traj.noises), cut(traj.velocities), traj.x0[sl], traj.kind, traj.stochasticity)


def evaluate(model: MLP, reward_fn, n_cond, n_samples=512, sampler=None, seed=0, iteration=0, schedule=RF):
    """Mean raw reward of ODE samples from ``model``, averaged over conditions."""
    sampler = sampler or SamplerSpec("euler_ode", 40)
    means = []
    for c in range(n_cond):
        rng = np.random.default_rng([seed, EVAL, iteration, c])
        x0, _ = sample(model.field(c), sampler, n=n_samples, rng=rng, schedule=schedule, dim=model.dim)
        means.append(float(np.mean(reward_fn(x0, c))))
    return float(np.mean(means))


@dataclass
class RlResult:
    model: MLP
    old_model: MLP
    rows: list


def rl_loop(
    model: MLP,
    reward_fn: Callable,
    cfg: RlConfig,
    n_cond: int = 1,
    emit: Optional[Callable] = None,
    schedule: NoiseSchedule = RF,
    clock=time.perf_counter,
):
    """Online negative-aware finetuning starting from the pretrained ``model``.

    ``reward_fn(x0, cond)`` returns raw rewards. Each iteration collects a
    buffer with the data-collection policy, takes ``grad_passes`` shuffled
    passes of minibatch updates on the training policy, soft-updates the
    data-collection policy and clears the buffer. Metric rows are dicts with
    the CSV columns and are passed to ``emit`` as they are produced.
    """
    from .baselines import rft_accept, rft_loss

    theta = model.copy()
    old = model.copy()
    opt = Adam(theta.params, lr=cfg.lr)
    recent_raw = deque(maxlen=cfg.z_window)
    grid = time_grid(cfg.sampler, schedule)[:-1]
    rows = []
    start = clock()

    def push(row):
        rows.append(row)
        if emit is not None:
            try:
                emit(row)
            except OSError as exc:
                raise RunAbortedError(f"metrics write failed: {exc}", [p.copy() for p in theta.params]) from exc

    def eval_row(i):
        score = evaluate(theta, reward_fn, n_cond, cfg.eval_samples, cfg.eval_sampler, cfg.seed, i, schedule)
        push(dict(phase="eval", iteration=i, mean_raw_reward=score, loss=float("nan"), eta=float("nan"), beta=cfg.beta, wall_clock_s=clock() - start))

    for i in range(cfg.iterations):
        if cfg.eval_every and i % cfg.eval_every == 0:
            eval_row(i)
        groups = rollout(old, reward_fn, n_cond, cfg, i, schedule=schedule)
        if not all(np.all(np.isfinite(g[2])) for g in groups):
            raise TrainingDivergedError(f"non-finite reward at iteration {i}", [p.copy() for p in theta.params])
        recent_raw.append(np.concatenate([g[2] for g in groups]))
        if cfg.z_mode == "running_std":
            Z = max(float(np.std(np.concatenate(recent_raw))), cfg.z_floor)
        else:
            Z = cfg.z_value
        conds = np.concatenate([np.full(len(g[1]), g[0]) for g in groups])
        x0 = np.concatenate([g[1] for g in groups])
        raw_all = np.concatenate([g[2] for g in groups])
        if cfg.objective == "nft":
            r = np.concatenate([RolloutBatch(c, x, raw, optimality_reward(raw, Z)).r for c, x, raw, _ in groups])
            keep = np.ones(len(x0), dtype=bool)
        else:
            r = np.ones(len(x0))
            keep = np.concatenate([rft_accept(raw) for _, _, raw, _ in groups])

        rng = np.random.default_rng([cfg.seed, TRAIN, i])
        v_old = frozen_field(old)
        losses = []
        idx_all = np.flatnonzero(keep)
        for _ in range(cfg.grad_passes):
            perm = rng.permutation(idx_all)
            for lo in range(0, len(perm), cfg.minibatch_size):
                idx = perm[lo : lo + cfg.minibatch_size]
                if cfg.t_sampling == "grid":
                    t = grid[rng.integers(len(grid), size=len(idx))]
                else:
                    t = rng.uniform(cfg.sampler.t_min, 1.0 - cfg.sampler.t_min, size=len(idx))
                eps = rng.standard_normal((len(idx), theta.dim))
                if cfg.objective == "nft":
                    loss, grads = nft_loss(theta, v_old, x0[idx], conds[idx], r[idx], t, eps, cfg.beta, cfg.weighting, cfg.negative, schedule)
                else:
                    loss, grads = rft_loss(theta, x0[idx], conds[idx], t, eps, None, cfg.weighting, schedule)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at iteration {i}", [p.copy() for p in theta.params])
                opt.step(theta.params, grads)
                losses.append(loss)
        eta = cfg.eta(i)
        old.params = soft_update(old.params, theta.params, i, cfg.eta)
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        push(dict(phase="rollout", iteration=i, mean_raw_reward=float(raw_all.mean()), loss=mean_loss, eta=eta, beta=cfg.beta, wall_clock_s=clock() - start))
        log.debug("iter %d reward %.3f loss %.4f eta %.3f", i, raw_all.mean(), mean_loss, eta)
    if cfg.eval_every:
        eval_row(cfg.iterations)
    return RlResult(theta, old, rows)
