"""Reverse-time samplers for velocity fields.

A velocity field is any callable ``v(x, t)`` taking a batch of points of shape
(n, d) and a scalar time. Time runs from 1 (noise) down to 0 (data); every
sampler stops at ``t_min`` and maps the final state to a data prediction.

Kinds:

* ``euler_ode``       x_s = x_t - (t - s) v
* ``multistep2_ode``  second-order data-prediction multistep method on a
  log-SNR-uniform grid; first and last steps are Euler
* ``sde_euler``       Euler discretization of the flow SDE with
  g_t = a sqrt(t / (1 - t)); ``stochasticity`` is ``a`` in [0, sqrt(2)]
* ``sde_ddim``        exponential-integrator step with noise level ``eta``
  in [0, 1]; ``stochasticity`` is ``eta``
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import GridError, SingularityError
from .schedule import RF, NoiseSchedule, log_snr, velocity_to_x0

KINDS = ("euler_ode", "multistep2_ode", "sde_euler", "sde_ddim")
SDE_KINDS = ("sde_euler", "sde_ddim")
MAX_A = math.sqrt(2.0)


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "euler_ode"
    steps: int = 10
    stochasticity: float = 0.0
    t_min: float = 1e-3
    record_trajectory: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}; choose from {KINDS}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not 0.0 < self.t_min < 0.5:
            raise ValueError("t_min must lie in (0, 0.5)")
        hi = MAX_A if self.kind == "sde_euler" else 1.0
        if not 0.0 <= self.stochasticity <= hi + 1e-15:
            raise ValueError(f"stochasticity for {self.kind} must lie in [0, {hi}]")

    @property
    def is_sde(self):
        return self.kind in SDE_KINDS and self.stochasticity > 0.0


@dataclass
class Trajectory:
    """States at every grid time, plus per-step noise (SDE kinds) and velocities."""

    times: np.ndarray
    states: list = field(default_factory=list)
    noises: list = field(default_factory=list)
    velocities: list = field(default_factory=list)
    x0: Optional[np.ndarray] = None
    kind: str = "euler_ode"
    stochasticity: float = 0.0

    def member(self, i):
        """Trajectory of path ``i`` alone (rows of every stored array)."""
        pick = lambda arrs: [None if a is None else a[i : i + 1] for a in arrs]
        return Trajectory(
            self.times,
            pick(self.states),
            pick(self.noises),
            pick(self.velocities),
            None if self.x0 is None else self.x0[i : i + 1],
            self.kind,
            self.stochasticity,
        )


def time_grid(spec: SamplerSpec, schedule: NoiseSchedule = RF):
    """Strictly decreasing grid of ``steps + 1`` times from 1 - t_min to t_min."""
    hi, lo = 1.0 - spec.t_min, spec.t_min
    if spec.kind == "multistep2_ode":
        lam = np.linspace(log_snr(hi, schedule), log_snr(lo, schedule), spec.steps + 1)
        grid = schedule.inverse_log_snr(lam)
        grid[0], grid[-1] = hi, lo
    else:
        grid = np.linspace(hi, lo, spec.steps + 1)
    check_grid(grid, spec.t_min)
    return grid


def check_grid(grid, t_min):
    grid = np.asarray(grid)
    if np.any(np.diff(grid) >= 0.0):
        raise GridError("time grid must be strictly decreasing")
    if grid[0] > 1.0 - t_min + 1e-12 or grid[-1] < t_min - 1e-12:
        raise GridError("time grid leaves the clamp range")


def draw_normal(rng, shape):
    """Standard normal draws from one generator, or one generator per row."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(f"{len(rngs)} generators for {shape[0]} paths")
    return np.stack([g.standard_normal(shape[1:]) for g in rngs])


def euler_ode_step(v_field, x_t, t, s):
    return x_t - (t - s) * v_field(x_t, t)


def sde_euler_coefficients(t, s, a):
    """(l, m, n) with x_s = l x_t - m v + n eps for the Euler flow-SDE step."""
    if not 0.0 < t < 1.0:
        raise SingularityError("flow SDE step requires t in (0, 1)")
    if not s < t:
        raise ValueError("need s < t")
    dt = t - s
    g2 = a * a * t / (1.0 - t)
    k = g2 / (2.0 * t)
    return 1.0 - dt * k, dt * (1.0 + k * (1.0 - t)), math.sqrt(g2 * dt)


def sde_euler_step(v_field, x_t, t, s, a, rng=None, eps=None, v=None):
    """One Euler step of the flow SDE.

    Returns ``(x_s, eps, mean, var)`` where ``var`` is the scalar isotropic
    variance g_t^2 (t - s).
    """
    l, m, n = sde_euler_coefficients(t, s, a)
    if v is None:
        v = v_field(x_t, t)
    # written in the drift form so a = 0 reproduces the ODE step exactly
    drift = v
    if a != 0.0:
        drift = v + (a * a / (2.0 * (1.0 - t))) * (x_t + (1.0 - t) * v)
    mean = x_t - (t - s) * drift
    if eps is None:
        eps = np.zeros_like(x_t) if rng is None and a == 0.0 else draw_normal(rng, x_t.shape)
    return mean + n * eps, eps, mean, n * n


def ddim_coefficients(t, s, eta):
    """(l, m, rho) with x_s = l x_t - m v + rho eps for the exponential-integrator step."""
    if not s < t:
        raise ValueError("need s < t")
    ratio = s * (1.0 - t) / (t * (1.0 - s))
    radicand = 1.0 - ratio * ratio
    if radicand < 0.0:
        raise SingularityError(f"negative radicand {radicand} in noise level")
    rho = eta * s * math.sqrt(radicand)
    root = math.sqrt(max(s * s - rho * rho, 0.0))
    return (1.0 - s) + root, (1.0 - s) * t - root * (1.0 - t), rho


def sde_ddim_step(v_field, x_t, t, s, eta, rng=None, eps=None, v=None, return_noise=False):
    if v is None:
        v = v_field(x_t, t)
    if eta == 0.0:
        # same arithmetic as the Euler ODE step
        x_s = x_t - (t - s) * v
        return (x_s, None) if return_noise else x_s
    l, m, rho = ddim_coefficients(t, s, eta)
    if eps is None:
        eps = draw_normal(rng, x_t.shape)
    x_s = l * x_t - m * v + rho * eps
    return (x_s, eps) if return_noise else x_s


def multistep2_update(x_prev, d_prev, d_prev2, t_i, t_prev, t_prev2, schedule: NoiseSchedule = RF):
    """Second-order multistep update from cached data predictions at two earlier times."""
    lam_i, lam_p, lam_pp = log_snr(np.array([t_i, t_prev, t_prev2]), schedule)
    h = lam_i - lam_p
    h_prev = lam_p - lam_pp
    if h == 0.0 or h_prev == 0.0:
        raise GridError("zero log-SNR step in multistep grid")
    r = h_prev / h
    sig_ratio = schedule.sigma(t_i) / schedule.sigma(t_prev)
    coeff = schedule.alpha(t_i) * np.expm1(-h)
    return sig_ratio * x_prev - coeff * ((1.0 + 0.5 / r) * d_prev - (0.5 / r) * d_prev2)


def multistep2_ode_step(v_field, x_prev, x_prev2, t_i, t_prev, t_prev2, schedule: NoiseSchedule = RF):
    d_prev = velocity_to_x0(x_prev, v_field(x_prev, t_prev), t_prev, schedule)
    d_prev2 = velocity_to_x0(x_prev2, v_field(x_prev2, t_prev2), t_prev2, schedule)
    return multistep2_update(x_prev, d_prev, d_prev2, t_i, t_prev, t_prev2, schedule)


def sample(v_field, spec: SamplerSpec, n=None, rng=None, x_init=None, schedule: NoiseSchedule = RF, dim=None):
    """Integrate from noise to data.

    Either ``x_init`` (shape (n, d)) or ``n`` and ``dim`` must be given; in the
    latter case the starting noise is drawn from ``rng``. ``rng`` may be one
    generator or a sequence of generators, one per path. Returns
    ``(x0, trajectory)`` with ``trajectory`` None unless requested.
    """
    grid = time_grid(spec, schedule)
    if x_init is None:
        x = draw_normal(rng, (n, dim))
    else:
        x = np.array(x_init, dtype=np.float64)
    traj = Trajectory(grid, kind=spec.kind, stochasticity=spec.stochasticity) if spec.record_trajectory else None
    d_hist = []
    n_steps = len(grid) - 1
    for i in range(n_steps):
        t, s = float(grid[i]), float(grid[i + 1])
        v = v_field(x, t)
        eps = None
        if traj is not None:
            traj.states.append(x)
            traj.velocities.append(v)
        if spec.kind == "euler_ode":
            x_new = x - (t - s) * v
        elif spec.kind == "multistep2_ode":
            d_hist.append(velocity_to_x0(x, v, t, schedule))
            if 1 <= i < n_steps - 1:
                x_new = multistep2_update(x, d_hist[-1], d_hist[-2], s, t, float(grid[i - 1]), schedule)
            else:
                x_new = x - (t - s) * v
        elif spec.kind == "sde_euler":
            x_new, eps, _, _ = sde_euler_step(v_field, x, t, s, spec.stochasticity, rng, v=v)
        else:
            x_new, eps = sde_ddim_step(v_field, x, t, s, spec.stochasticity, rng, v=v, return_noise=True)
        if traj is not None:
            traj.noises.append(eps if spec.is_sde else None)
        x = x_new
    t_end = float(grid[-1])
    x0 = velocity_to_x0(x, v_field(x, t_end), t_end, schedule)
    if traj is not None:
        traj.states.append(x)
        traj.x0 = x0
    return x0, traj
