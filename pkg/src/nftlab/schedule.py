"""Noise schedules and conversions between predictor parameterizations.

A schedule defines the forward kernel x_t = alpha(t) x0 + sigma(t) eps with
t = 0 clean data and t = 1 pure noise. Points are arrays whose last axis is the
data dimension; times are scalars or arrays broadcastable against the leading
axes of the points.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from .errors import SingularityError

T_MIN = 1e-4


def _as_time(t, x=None):
    """Return t as float64 with a trailing axis so it broadcasts against points."""
    t = np.asarray(t, dtype=np.float64)
    if x is not None and t.ndim > 0:
        t = t[..., None]
    return t


def _check_same_shape(a, b, what="inputs"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch between {what}: {a.shape} vs {b.shape}")
    return a, b


class NoiseSchedule(ABC):
    """Base class: alpha, sigma and their time derivatives on t in [0, 1]."""

    id: str = "abstract"

    @abstractmethod
    def alpha(self, t): ...

    @abstractmethod
    def sigma(self, t): ...

    @abstractmethod
    def alpha_dot(self, t): ...

    @abstractmethod
    def sigma_dot(self, t): ...

    def inverse_log_snr(self, lam):
        """Time at which log(alpha/sigma) equals ``lam``."""
        raise NotImplementedError(f"{self.id} has no closed-form log-SNR inverse")

    def clamp(self, t, t_min=T_MIN):
        return np.clip(t, t_min, 1.0 - t_min)

    def __repr__(self):
        return f"{type(self).__name__}()"


class RectifiedFlow(NoiseSchedule):
    """alpha_t = 1 - t, sigma_t = t."""

    id = "rectified_flow"

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def sigma(self, t):
        return np.asarray(t, dtype=np.float64) * 1.0

    def alpha_dot(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), -1.0)

    def sigma_dot(self, t):
        return np.full_like(np.asarray(t, dtype=np.float64), 1.0)

    def inverse_log_snr(self, lam):
        # (1 - t) / t = exp(lam)
        return 1.0 / (1.0 + np.exp(np.asarray(lam, dtype=np.float64)))


SCHEDULES = {RectifiedFlow.id: RectifiedFlow}


def get_schedule(schedule_id: str) -> NoiseSchedule:
    try:
        return SCHEDULES[schedule_id]()
    except KeyError:
        raise ValueError(f"unknown schedule id {schedule_id!r}") from None


RF = RectifiedFlow()


def forward_diffuse(x0, eps, t, schedule: NoiseSchedule = RF):
    """Noise ``x0`` to time ``t``; returns ``(x_t, v_target)``."""
    x0, eps = _check_same_shape(x0, eps, "x0 and eps")
    tt = _as_time(t, x0)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ValueError("t must lie in [0, 1]")
    x_t = schedule.alpha(tt) * x0 + schedule.sigma(tt) * eps
    v = schedule.alpha_dot(tt) * x0 + schedule.sigma_dot(tt) * eps
    return x_t, v


def _score_coeffs(t, schedule):
    # alpha * v = c_x * x + c_s * score, from eps = -sigma * score and
    # x0 = (x - sigma * eps) / alpha; scaled by alpha so alpha = 0 stays finite
    a, s = schedule.alpha(t), schedule.sigma(t)
    ad, sd = schedule.alpha_dot(t), schedule.sigma_dot(t)
    return ad, ad * s**2 - sd * s * a


def velocity_to_score(x_t, v, t, schedule: NoiseSchedule = RF):
    """Score of the marginal implied by velocity ``v`` at ``(x_t, t)``."""
    x_t, v = _check_same_shape(x_t, v, "x_t and v")
    tt = _as_time(t, x_t)
    c_x, c_s = _score_coeffs(tt, schedule)
    if np.any(tt <= 0.0) or np.any(c_s == 0.0):
        raise SingularityError("velocity_to_score requires t in (0, 1]")
    return (schedule.alpha(tt) * v - c_x * x_t) / c_s


def score_to_velocity(x_t, score, t, schedule: NoiseSchedule = RF):
    x_t, score = _check_same_shape(x_t, score, "x_t and score")
    tt = _as_time(t, x_t)
    a = schedule.alpha(tt)
    if np.any(tt <= 0.0) or np.any(a == 0.0):
        raise SingularityError("score_to_velocity requires t in (0, 1)")
    c_x, c_s = _score_coeffs(tt, schedule)
    return (c_x * x_t + c_s * score) / a


def velocity_to_x0(x_t, v, t, schedule: NoiseSchedule = RF):
    """Data prediction from a velocity prediction (x_t - t v for rectified flow)."""
    x_t, v = _check_same_shape(x_t, v, "x_t and v")
    tt = _as_time(t, x_t)
    a, s = schedule.alpha(tt), schedule.sigma(tt)
    ad, sd = schedule.alpha_dot(tt), schedule.sigma_dot(tt)
    return (s * v - sd * x_t) / (ad * s - sd * a)


def x0_to_velocity(x_t, x0_pred, t, schedule: NoiseSchedule = RF):
    x_t, x0_pred = _check_same_shape(x_t, x0_pred, "x_t and x0_pred")
    tt = _as_time(t, x_t)
    if np.any(schedule.sigma(tt) == 0.0):
        raise SingularityError("x0_to_velocity requires sigma(t) > 0")
    a, s = schedule.alpha(tt), schedule.sigma(tt)
    ad, sd = schedule.alpha_dot(tt), schedule.sigma_dot(tt)
    return sd / s * x_t + (ad - sd * a / s) * x0_pred


def drift_and_diffusion(t, schedule: NoiseSchedule = RF):
    """Forward SDE coefficients ``(f, g2)`` with f = dlog(alpha)/dt."""
    t = np.asarray(t, dtype=np.float64)
    a = schedule.alpha(t)
    if np.any(a == 0.0):
        raise SingularityError("drift is singular where alpha(t) = 0 (t = 1 for rectified flow)")
    f = schedule.alpha_dot(t) / a
    s = schedule.sigma(t)
    g2 = 2.0 * s * schedule.sigma_dot(t) - 2.0 * f * s**2
    return f, g2


def log_snr(t, schedule: NoiseSchedule = RF):
    """Half log-SNR, log(alpha/sigma).

    At t = 0 this is +inf and at t = 1 it is -inf; the signed infinities are
    returned rather than raised so that grid builders can detect boundaries.
    """
    t = np.asarray(t, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(schedule.alpha(t)) - np.log(schedule.sigma(t))
