"""Closed-form Gaussian-mixture oracle.

Diagonal-covariance mixtures stay mixtures under the forward kernel, so the
diffused density, the posterior over clean data, the optimal velocity and the
reward-conditioned policy splits all have exact expressions. Everything here is
computed in log space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateSplitError, UndefinedRatioError
from .schedule import RF, NoiseSchedule, _as_time

LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of axis-aligned Gaussians.

    ``weights`` has shape (K,), ``means`` and ``variances`` shape (K, d).
    Zero weights are allowed so that reward splits keep the component layout of
    the mixture they came from.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if var.ndim < 2:
            var = np.broadcast_to(var.reshape(-1, 1), mu.shape)
        var = np.broadcast_to(var, mu.shape).copy()
        if mu.shape[0] != w.shape[0]:
            raise ValueError(f"{w.shape[0]} weights but {mu.shape[0]} means")
        if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be nonnegative and sum to 1, got {w}")
        if np.any(var <= 0.0):
            raise ValueError("variances must be positive")
        for name, arr in (("weights", w), ("means", mu), ("variances", var)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_components(cls, components):
        """Build from ``[(weight, mean, var), ...]``; ``var`` may be a scalar."""
        w, mu, var = zip(*components)
        mu = np.array([np.atleast_1d(m) for m in mu], dtype=np.float64)
        var = np.array([np.broadcast_to(np.atleast_1d(v), mu.shape[1:]) for v in var])
        return cls(np.array(w, dtype=np.float64), mu, var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def reweighted(self, weights) -> "GaussianMixture":
        return GaussianMixture(np.asarray(weights, dtype=np.float64), self.means, self.variances)

    def _log_weights(self):
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def _diffused(self, x_t, t, schedule):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[-1] != self.dim:
            raise ValueError(f"point dimension {x_t.shape[-1]} != mixture dimension {self.dim}")
        tt = _as_time(t, x_t)[..., None]  # (..., 1, 1) against (..., K, d)
        a, s = schedule.alpha(tt), schedule.sigma(tt)
        return x_t[..., None, :], a, s

    def component_log_marginals(self, x_t, t, schedule: NoiseSchedule = RF):
        """log N(x_t; alpha mu_k, alpha^2 var_k + sigma^2) per component, shape (..., K)."""
        x, a, s = self._diffused(x_t, t, schedule)
        var = a**2 * self.variances + s**2
        return -0.5 * np.sum(LOG_2PI + np.log(var) + (x - a * self.means) ** 2 / var, axis=-1)

    def log_marginal(self, x_t, t, schedule: NoiseSchedule = RF):
        return logsumexp(self._log_weights() + self.component_log_marginals(x_t, t, schedule), axis=-1)

    def marginal_density(self, x_t, t, schedule: NoiseSchedule = RF):
        return np.exp(self.log_marginal(x_t, t, schedule))

    def log_density(self, x0):
        return self.log_marginal(x0, 0.0)

    def responsibilities(self, x_t, t, schedule: NoiseSchedule = RF):
        logits = self._log_weights() + self.component_log_marginals(x_t, t, schedule)
        return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))

    def component_posterior_means(self, x_t, t, schedule: NoiseSchedule = RF):
        x, a, s = self._diffused(x_t, t, schedule)
        gain = a * self.variances / (a**2 * self.variances + s**2)
        return self.means + gain * (x - a * self.means)

    def posterior_mean(self, x_t, t, schedule: NoiseSchedule = RF):
        """E[x0 | x_t] under this mixture as the clean-data prior."""
        resp = self.responsibilities(x_t, t, schedule)
        return np.einsum("...k,...kd->...d", resp, self.component_posterior_means(x_t, t, schedule))

    def log_posterior(self, x0, x_t, t, schedule: NoiseSchedule = RF):
        """log pi(x0 | x_t) by Bayes' rule with the Gaussian forward kernel."""
        x0 = np.asarray(x0, dtype=np.float64)
        x_t = np.asarray(x_t, dtype=np.float64)
        tt = _as_time(t, x_t)
        a, s = schedule.alpha(tt), schedule.sigma(tt)
        kernel = -0.5 * np.sum(LOG_2PI + 2.0 * np.log(s) + ((x_t - a * x0) / s) ** 2, axis=-1)
        return self.log_density(x0) + kernel - self.log_marginal(x_t, t, schedule)

    def exact_velocity(self, x_t, t, schedule: NoiseSchedule = RF):
        """Optimal flow-matching velocity a_t x_t + b_t E[x0 | x_t]."""
        tt = np.asarray(t, dtype=np.float64)
        if np.any(tt <= 0.0):
            raise ValueError("exact_velocity is singular at t = 0")
        x_t = np.asarray(x_t, dtype=np.float64)
        tc = _as_time(t, x_t)
        a, s = schedule.alpha(tc), schedule.sigma(tc)
        ad, sd = schedule.alpha_dot(tc), schedule.sigma_dot(tc)
        return sd / s * x_t + (ad - sd * a / s) * self.posterior_mean(x_t, t, schedule)

    def sample(self, n: int, rng: np.random.Generator, return_labels: bool = False):
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.sqrt(self.variances[labels]) * z
        return (x, labels) if return_labels else x

    def mean(self):
        return self.weights @ self.means

    def covariance_diag(self):
        second = self.weights @ (self.variances + self.means**2)
        return second - self.mean() ** 2

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }


@dataclass(frozen=True)
class PolicyTriplet:
    old: GaussianMixture
    positive: GaussianMixture
    negative: GaussianMixture
    mean_reward: float


def split_by_componentwise_reward(mix: GaussianMixture, reward_per_component) -> PolicyTriplet:
    """Split ``mix`` into its optimality-conditioned halves.

    With a reward that is constant on each component the positive policy is the
    mixture reweighted by w_k r_k and the negative one by w_k (1 - r_k).
    """
    r = np.asarray(reward_per_component, dtype=np.float64)
    if r.shape != mix.weights.shape:
        raise ValueError(f"need one reward per component, got shape {r.shape}")
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise ValueError("rewards must lie in [0, 1]")
    pos = mix.weights * r
    neg = mix.weights * (1.0 - r)
    mean_reward = float(pos.sum())
    if pos.sum() <= 0.0:
        raise DegenerateSplitError("positive policy undefined: every reward is zero on the support")
    if neg.sum() <= 0.0:
        raise DegenerateSplitError("negative policy undefined: every reward is one on the support")
    if np.all(r == r[0]):
        # constant reward carries no information: both halves are the old policy
        return PolicyTriplet(old=mix, positive=mix, negative=mix, mean_reward=mean_reward)
    return PolicyTriplet(
        old=mix,
        positive=mix.reweighted(pos / pos.sum()),
        negative=mix.reweighted(neg / neg.sum()),
        mean_reward=mean_reward,
    )


def _log_ratio(num_log, old_log):
    if np.any(~np.isfinite(old_log)):
        raise UndefinedRatioError("old-policy marginal density vanishes at the query point")
    return num_log - old_log


def alpha_coeff(triplet: PolicyTriplet, x_t, t, schedule: NoiseSchedule = RF):
    """alpha(x_t) = E_old[r] * pi+_t(x_t) / pi_old_t(x_t)."""
    log_old = triplet.old.log_marginal(x_t, t, schedule)
    log_pos = triplet.positive.log_marginal(x_t, t, schedule)
    alpha = triplet.mean_reward * np.exp(_log_ratio(log_pos, log_old))
    if np.any(alpha > 1.0 + 1e-9) or np.any(alpha < 0.0):
        warnings.warn(f"alpha outside [0, 1]: range [{alpha.min()}, {alpha.max()}]", RuntimeWarning)
    return alpha


def negative_share(triplet: PolicyTriplet, x_t, t, schedule: NoiseSchedule = RF):
    """(1 - E_old[r]) * pi-_t(x_t) / pi_old_t(x_t); sums with alpha to one."""
    log_old = triplet.old.log_marginal(x_t, t, schedule)
    log_neg = triplet.negative.log_marginal(x_t, t, schedule)
    return (1.0 - triplet.mean_reward) * np.exp(_log_ratio(log_neg, log_old))


def improvement_direction_forms(triplet: PolicyTriplet, x_t, t, schedule: NoiseSchedule = RF):
    """Both expressions of the reinforcement guidance.

    Returns ``((1 - alpha)(v_old - v_neg), alpha (v_pos - v_old))``.
    """
    alpha = alpha_coeff(triplet, x_t, t, schedule)[..., None]
    v_old = triplet.old.exact_velocity(x_t, t, schedule)
    v_pos = triplet.positive.exact_velocity(x_t, t, schedule)
    v_neg = triplet.negative.exact_velocity(x_t, t, schedule)
    return (1.0 - alpha) * (v_old - v_neg), alpha * (v_pos - v_old)


def improvement_direction(triplet: PolicyTriplet, x_t, t, schedule: NoiseSchedule = RF):
    from_neg, from_pos = improvement_direction_forms(triplet, x_t, t, schedule)
    return 0.5 * (from_neg + from_pos)


def optimal_nft_velocity(triplet: PolicyTriplet, x_t, t, beta: float, schedule: NoiseSchedule = RF):
    """Minimizer of the negative-aware loss: v_old + (2 / beta) * Delta."""
    return triplet.old.exact_velocity(x_t, t, schedule) + 2.0 / beta * improvement_direction(
        triplet, x_t, t, schedule
    )


def posterior_split_check(triplet: PolicyTriplet, x0, x_t, t, schedule: NoiseSchedule = RF):
    """Scaled residual of pi_old(x0|x_t) = alpha pi+(x0|x_t) + (1 - alpha) pi-(x0|x_t).

    The absolute difference is divided by max(1, |lhs|) because posterior
    densities of narrow components can be very large.
    """
    alpha = alpha_coeff(triplet, x_t, t, schedule)
    lhs = np.exp(triplet.old.log_posterior(x0, x_t, t, schedule))
    pos = np.exp(triplet.positive.log_posterior(x0, x_t, t, schedule))
    if triplet.positive is triplet.negative:
        rhs = pos  # uninformative reward: the two shares sum to one exactly
    else:
        # 1 - alpha from its own log-space ratio; subtracting from one loses
        # all precision where alpha is within rounding of 1
        neg = np.exp(triplet.negative.log_posterior(x0, x_t, t, schedule))
        rhs = alpha * pos + negative_share(triplet, x_t, t, schedule) * neg
    return np.abs(lhs - rhs) / np.maximum(1.0, np.abs(lhs))


def mixture_identity_residual(triplet: PolicyTriplet, x0):
    """|pi_old - (m pi+ + (1 - m) pi-)| pointwise at clean points ``x0``."""
    m = triplet.mean_reward
    lhs = np.exp(triplet.old.log_density(x0))
    rhs = m * np.exp(triplet.positive.log_density(x0)) + (1.0 - m) * np.exp(triplet.negative.log_density(x0))
    return np.abs(lhs - rhs)


def monte_carlo_guidance(
    mix: GaussianMixture,
    reward_fn,
    x_t,
    t,
    schedule: NoiseSchedule = RF,
    n: int = 100_000,
    seed: int = 0,
):
    """Self-normalized importance estimate of alpha, Delta and the three velocities.

    Works for arbitrary rewards ``reward_fn(x0) -> [0, 1]`` by reweighting a
    fixed bank of clean samples with the forward kernel likelihood. Returns a
    dict with keys ``alpha``, ``delta``, ``v_old``, ``v_pos``, ``v_neg``.
    """
    rng = np.random.default_rng(seed)
    bank = mix.sample(n, rng)
    r = np.asarray(reward_fn(bank), dtype=np.float64)
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), x_t.shape[:1])
    out = {k: [] for k in ("alpha", "delta", "v_old", "v_pos", "v_neg")}
    for x, ti in zip(x_t, tt):
        a, s = schedule.alpha(ti), schedule.sigma(ti)
        ad, sd = schedule.alpha_dot(ti), schedule.sigma_dot(ti)
        logw = -0.5 * np.sum((x - a * bank) ** 2, axis=-1) / s**2
        w = np.exp(logw - logsumexp(logw))
        alpha = float(w @ r)
        e_old = w @ bank
        e_pos = (w * r) @ bank / alpha
        e_neg = (w * (1.0 - r)) @ bank / (1.0 - alpha)
        c_x, c_0 = sd / s, ad - sd * a / s
        v_old, v_pos, v_neg = (c_x * x + c_0 * e for e in (e_old, e_pos, e_neg))
        out["alpha"].append(alpha)
        out["delta"].append(alpha * (v_pos - v_old))
        out["v_old"].append(v_old)
        out["v_pos"].append(v_pos)
        out["v_neg"].append(v_neg)
    return {k: np.array(v) for k, v in out.items()}
