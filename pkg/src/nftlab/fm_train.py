"""Flow-matching pretraining with selectable time weighting."""

from __future__ import annotations

import logging

import numpy as np

from .errors import TrainingDivergedError
from .nn import MLP, Adam
from .schedule import RF, NoiseSchedule, _as_time, forward_diffuse, velocity_to_x0

log = logging.getLogger(__name__)

WEIGHTINGS = ("uniform", "one_minus_t", "adaptive")
ADAPTIVE_FLOOR = 1e-8


def x0_jacobian(t, schedule: NoiseSchedule = RF):
    """d x0_pred / d v for the velocity-to-data conversion (-t for rectified flow)."""
    t = np.asarray(t, dtype=np.float64)
    a, s = schedule.alpha(t), schedule.sigma(t)
    ad, sd = schedule.alpha_dot(t), schedule.sigma_dot(t)
    return s / (ad * s - sd * a)


def adaptive_weighting(x0_pred, x0, return_grad=False):
    """Self-normalized data-space regression loss.

    Mean over the batch of ||x0_pred - x0||^2 divided by the batch mean of the
    absolute residual entries; the divisor is a constant for differentiation.
    With ``return_grad`` also returns d loss / d x0_pred.
    """
    res = np.asarray(x0_pred, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    if res.shape[0] == 0:
        raise ValueError("empty batch")
    denom = max(float(np.mean(np.abs(res))), ADAPTIVE_FLOOR)
    loss = float(np.mean(np.sum(res**2, axis=-1))) / denom
    if not return_grad:
        return loss
    return loss, 2.0 * res / (denom * res.shape[0])


def velocity_regression(v_pred, v_target, x_t, x0, t, weighting="uniform", schedule=RF, denom=None):
    """Weighted squared error between predicted and target velocities.

    Returns ``(per_sample_loss, dloss_dv)`` where ``dloss_dv`` is the gradient of
    each sample's loss with respect to ``v_pred`` (no batch averaging applied).
    For the adaptive mode, ``denom`` overrides the stop-gradient divisor.
    """
    v_pred = np.asarray(v_pred, dtype=np.float64)
    diff = v_pred - v_target
    if weighting == "uniform":
        return np.sum(diff**2, axis=-1), 2.0 * diff
    if weighting == "one_minus_t":
        w = 1.0 - _as_time(t, diff)
        return np.sum(w * diff**2, axis=-1), 2.0 * w * diff
    if weighting == "adaptive":
        res = velocity_to_x0(x_t, v_pred, t, schedule) - x0
        if denom is None:
            denom = max(float(np.mean(np.abs(res))), ADAPTIVE_FLOOR)
        jac = x0_jacobian(_as_time(t, diff), schedule)
        return np.sum(res**2, axis=-1) / denom, 2.0 * res * jac / denom
    raise ValueError(f"unknown weighting {weighting!r}; choose from {WEIGHTINGS}")


def fm_loss(model: MLP, x0, cond, t, eps, weighting="uniform", schedule: NoiseSchedule = RF, adaptive_denom=None):
    """Flow-matching loss on one batch; returns ``(loss, grads)``.

    ``adaptive_denom`` pins the adaptive divisor, which the gradients treat as
    a constant anyway (useful for finite-difference checks).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    x_t, v_target = forward_diffuse(x0, eps, t, schedule)
    v = model.forward(x_t, cond, t)
    per_sample, dv = velocity_regression(v, v_target, x_t, x0, t, weighting, schedule, adaptive_denom)
    grads = model.backward(dv / n)
    return float(per_sample.mean()), grads


def sample_times(rng, n, t_min=1e-3):
    return rng.uniform(t_min, 1.0 - t_min, size=n)


def pretrain(
    model: MLP,
    mixtures,
    steps=5000,
    batch_size=256,
    lr=1e-3,
    weighting="uniform",
    seed=0,
    t_min=1e-3,
    schedule: NoiseSchedule = RF,
    lr_decay=True,
    log_every=0,
    callback=None,
):
    """Fit ``model`` to the data mixtures, one mixture per condition id.

    Data are drawn fresh from the mixtures every step. Returns the list of
    per-step losses. A non-finite loss raises :class:`TrainingDivergedError`
    carrying the last finite parameters.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=lr)
    n_cond = len(mixtures)
    losses = []
    for step in range(steps):
        cond = rng.integers(n_cond, size=batch_size)
        x0 = np.empty((batch_size, model.dim))
        for c in range(n_cond):
            idx = np.flatnonzero(cond == c)
            if idx.size:
                x0[idx] = mixtures[c].sample(idx.size, rng)
        t = sample_times(rng, batch_size, t_min)
        eps = rng.standard_normal(x0.shape)
        loss, grads = fm_loss(model, x0, cond, t, eps, weighting, schedule)
        if not np.isfinite(loss):
            # params are still those of the previous finite step
            raise TrainingDivergedError(f"non-finite loss at step {step}", [p.copy() for p in model.params])
        if lr_decay:
            # cosine decay to 5% of the base rate
            opt.lr = lr * (0.05 + 0.95 * 0.5 * (1.0 + np.cos(np.pi * step / steps)))
        opt.step(model.params, grads)
        losses.append(loss)
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.5f", step + 1, np.mean(losses[-log_every:]))
        if callback is not None:
            callback(step, loss)
    return losses
