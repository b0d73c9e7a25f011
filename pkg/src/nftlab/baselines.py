"""Reverse-process comparators: step-likelihood policy gradient and rejection finetuning."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import RunAbortedError, TrainingDivergedError
from .fm_train import fm_loss
from .nn import MLP, Adam
from .samplers import SamplerSpec, Trajectory, sde_euler_coefficients
from .schedule import RF, NoiseSchedule

log = logging.getLogger(__name__)

ADV_EPS = 1e-6


def group_advantages(raw):
    """(raw - group mean) / (group std + 1e-6)."""
    raw = np.asarray(raw, dtype=np.float64)
    centered = raw - raw.mean()
    return centered / (raw.std() + ADV_EPS)


@dataclass
class AdvantageGroup:
    advantages: np.ndarray
    trajectory: Trajectory

    def __post_init__(self):
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        if abs(self.advantages.sum()) > 1e-10 * max(1.0, len(self.advantages)):
            raise ValueError("advantages must be centered within the group")


def gaussian_log_prob(x, mean, var):
    """Isotropic Gaussian log density summed over the last axis."""
    if not var > 0:
        raise ValueError("variance must be positive")
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    return -0.5 * d * np.log(2.0 * np.pi * var) - np.sum((x - mean) ** 2, axis=-1) / (2.0 * var)


def sde_step_mean(v, x_t, t, s, a):
    """Mean of the Euler flow-SDE transition given the velocity ``v`` at (x_t, t)."""
    drift = v + (a * a / (2.0 * (1.0 - t))) * (x_t + (1.0 - t) * v)
    return x_t - (t - s) * drift


def step_log_prob(v_field, x_t, x_s, t, s, a):
    """log p(x_s | x_t) under the Euler flow-SDE kernel with stochasticity ``a``."""
    if not a > 0:
        raise ValueError("step likelihood needs a > 0 (the ODE kernel is degenerate)")
    _, _, n = sde_euler_coefficients(t, s, a)
    mean = sde_step_mean(v_field(x_t, t), x_t, t, s, a)
    return gaussian_log_prob(x_s, mean, n * n)


def _require_noise(traj: Trajectory):
    if traj.kind != "sde_euler" or not traj.noises or any(e is None for e in traj.noises):
        raise ValueError("policy-gradient loss needs an sde_euler trajectory with recorded noise")


def grpo_loss(model: MLP, cond, traj: Trajectory, advantages, steps=None):
    """-(1/N) sum_i A_i log p(x_s^i | x_t^i), averaged over the chosen steps.

    Gradients come from differentiating the Gaussian log density through its
    mean. ``traj`` holds N paths of the same condition; ``steps`` selects step
    indices (default all).
    """
    _require_noise(traj)
    A = np.asarray(advantages, dtype=np.float64)
    a = traj.stochasticity
    steps = range(len(traj.times) - 1) if steps is None else steps
    total, grads = 0.0, None
    for j in steps:
        t, s = float(traj.times[j]), float(traj.times[j + 1])
        x_t, x_s = traj.states[j], traj.states[j + 1]
        _, m, n = sde_euler_coefficients(t, s, a)
        v = model.forward(x_t, cond, t)
        mean = sde_step_mean(v, x_t, t, s, a)
        logp = gaussian_log_prob(x_s, mean, n * n)
        N = len(A)
        total += float(-(A * logp).mean())
        # d(-A logp / N)/dv = -(A / N) * (x_s - mean) / n^2 * dmean/dv, dmean/dv = -m
        dv = (A / N)[:, None] * m * (x_s - mean) / (n * n)
        g = model.backward(dv)
        grads = g if grads is None else [u + w for u, w in zip(grads, g)]
    k = len(steps)
    return total / k, [g / k for g in grads]


def grpo_noise_form_grad(model: MLP, cond, traj: Trajectory, advantages, steps=None):
    """Gradient of (m / n) (1/N) sum_i (A_i eps_i)^T v(x_t^i), the advantage-weighted-noise form."""
    _require_noise(traj)
    A = np.asarray(advantages, dtype=np.float64)
    a = traj.stochasticity
    steps = range(len(traj.times) - 1) if steps is None else steps
    grads = None
    for j in steps:
        t, s = float(traj.times[j]), float(traj.times[j + 1])
        _, m, n = sde_euler_coefficients(t, s, a)
        model.forward(traj.states[j], cond, t)
        g = model.backward((m / n) * (A / len(A))[:, None] * traj.noises[j])
        grads = g if grads is None else [u + w for u, w in zip(grads, g)]
    return [g / len(steps) for g in grads]


def rft_accept(raw):
    """Samples kept by rejection finetuning: raw reward strictly above the group mean."""
    raw = np.asarray(raw, dtype=np.float64)
    return raw > raw.mean()


def rft_loss(model: MLP, x0, cond, t, eps, accept=None, weighting="uniform", schedule: NoiseSchedule = RF):
    """Flow-matching loss on accepted samples only; no-op with a warning if none are."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    accept = np.ones(n, dtype=bool) if accept is None else np.asarray(accept, dtype=bool)
    if not accept.any():
        warnings.warn("no sample accepted; skipping update", RuntimeWarning)
        return 0.0, [np.zeros_like(p) for p in model.params]
    cond = np.broadcast_to(np.asarray(cond), (n,))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    eps = np.asarray(eps, dtype=np.float64)
    return fm_loss(model, x0[accept], cond[accept], t[accept], eps[accept], weighting, schedule)


def grpo_loop(
    model: MLP,
    reward_fn: Callable,
    cfg,
    n_cond: int = 1,
    a: float = 2**0.5,
    emit: Optional[Callable] = None,
    schedule: NoiseSchedule = RF,
    clock=time.perf_counter,
):
    """On-policy step-likelihood policy gradient (no clipping, no KL).

    Uses ``cfg`` (an RlConfig) for group sizes, iterations, learning rate and
    evaluation; rollouts always use the Euler flow SDE with stochasticity ``a``
    and ``cfg.sampler.steps`` steps. One optimizer step per iteration.
    """
    from .nft import RlResult, evaluate, rollout

    theta = model.copy()
    opt = Adam(theta.params, lr=cfg.lr)
    sampler = SamplerSpec("sde_euler", cfg.sampler.steps, a, cfg.sampler.t_min, record_trajectory=True)
    rows = []
    start = clock()

    def push(row):
        rows.append(row)
        if emit is not None:
            try:
                emit(row)
            except OSError as exc:
                raise RunAbortedError(f"metrics write failed: {exc}", [p.copy() for p in theta.params]) from exc

    for i in range(cfg.iterations):
        if cfg.eval_every and i % cfg.eval_every == 0:
            score = evaluate(theta, reward_fn, n_cond, cfg.eval_samples, cfg.eval_sampler, cfg.seed, i, schedule)
            push(dict(phase="eval", iteration=i, mean_raw_reward=score, loss=float("nan"), eta=0.0, beta=float("nan"), wall_clock_s=clock() - start))
        groups = rollout(theta, reward_fn, n_cond, cfg, i, sampler=sampler, schedule=schedule)
        grads, losses = None, []
        for c, _, raw, traj in groups:
            loss, g = grpo_loss(theta, c, traj, group_advantages(raw))
            losses.append(loss)
            grads = g if grads is None else [u + w for u, w in zip(grads, g)]
        grads = [g / len(groups) for g in grads]
        loss = float(np.mean(losses))
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at iteration {i}", [p.copy() for p in theta.params])
        opt.step(theta.params, grads)
        raw_all = np.concatenate([g[2] for g in groups])
        push(dict(phase="rollout", iteration=i, mean_raw_reward=float(raw_all.mean()), loss=loss, eta=0.0, beta=float("nan"), wall_clock_s=clock() - start))
    if cfg.eval_every:
        score = evaluate(theta, reward_fn, n_cond, cfg.eval_samples, cfg.eval_sampler, cfg.seed, cfg.iterations, schedule)
        push(dict(phase="eval", iteration=cfg.iterations, mean_raw_reward=score, loss=float("nan"), eta=0.0, beta=float("nan"), wall_clock_s=clock() - start))
    return RlResult(theta, theta, rows)
