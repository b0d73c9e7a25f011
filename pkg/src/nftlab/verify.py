"""Numerical identity suites against the closed-form mixture oracle.

Each suite returns a :class:`SuiteResult` with the worst measured value, its
tolerance and the elapsed time. ``run_suites`` prints a summary table.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .baselines import grpo_loss, grpo_noise_form_grad
from .fm_train import fm_loss
from .mixture import (
    GaussianMixture,
    alpha_coeff,
    improvement_direction_forms,
    mixture_identity_residual,
    negative_share,
    optimal_nft_velocity,
    posterior_split_check,
    split_by_componentwise_reward,
)
from .nft import nft_loss
from .nn import MLP, Adam
from .samplers import (
    SamplerSpec,
    ddim_coefficients,
    euler_ode_step,
    sample,
    sde_ddim_step,
    time_grid,
)
from .schedule import RF, velocity_to_score, velocity_to_x0, score_to_velocity, x0_to_velocity


@dataclass
class SuiteResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float
    kind: str = "max"  # "max": measured <= tol; "min": measured >= tol

    def row(self):
        op = "<=" if self.kind == "max" else ">="
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<34} {self.measured:>12.3e} {op} {self.tolerance:<9.1e} {self.seconds:>7.2f}s  {status}"


def _result(name, measured, tol, start, kind="max"):
    ok = measured <= tol if kind == "max" else measured >= tol
    return SuiteResult(name, float(measured), tol, bool(ok), time.perf_counter() - start, kind)


def standard_triplets():
    """Three indicator-reward splits of increasing difficulty."""
    one_d = GaussianMixture([0.5, 0.5], [[-1.5], [1.5]], [[0.3], [0.3]])
    two_d = GaussianMixture([0.3, 0.7], [[-2.0, 0.0], [2.0, 0.5]], [[0.25, 0.4], [0.5, 0.25]])
    three = GaussianMixture(
        [0.2, 0.5, 0.3], [[-2.0, -1.0], [0.0, 2.0], [2.5, -0.5]], [[0.2, 0.3], [0.6, 0.2], [0.3, 0.5]]
    )
    return [
        split_by_componentwise_reward(one_d, [0.0, 1.0]),
        split_by_componentwise_reward(two_d, [1.0, 0.0]),
        split_by_componentwise_reward(three, [1.0, 0.0, 1.0]),
    ]


def draw_queries(mix: GaussianMixture, n, rng, t_lo=1e-3, t_hi=1.0 - 1e-3):
    """(x_t, t) pairs with x_t drawn from the diffused mixture at a uniform t."""
    t = rng.uniform(t_lo, t_hi, size=n)
    x0 = mix.sample(n, rng)
    eps = rng.standard_normal(x0.shape)
    return (1.0 - t)[:, None] * x0 + t[:, None] * eps, t


def check_guidance_forms(n=1000, seed=0):
    """sup |(1 - alpha)(v_old - v_neg) - alpha (v_pos - v_old)|."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tri in standard_triplets():
        x_t, t = draw_queries(tri.old, n, rng)
        a, b = improvement_direction_forms(tri, x_t, t)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return _result("guidance_two_forms", worst, 1e-8, start)


def check_shares_sum_to_one(n=1000, seed=1):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tri in standard_triplets():
        x_t, t = draw_queries(tri.old, n, rng)
        total = alpha_coeff(tri, x_t, t) + negative_share(tri, x_t, t)
        worst = max(worst, float(np.max(np.abs(total - 1.0))))
    return _result("alpha_plus_negative_share", worst, 1e-10, start)


def check_alpha_range(n=1000, seed=2):
    """Largest excursion of alpha outside [0, 1]."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tri in standard_triplets():
        x_t, t = draw_queries(tri.old, n, rng)
        a = alpha_coeff(tri, x_t, t)
        worst = max(worst, float(np.max(np.maximum(a - 1.0, -a))), 0.0)
    return _result("alpha_in_unit_interval", worst, 1e-12, start)


def check_distribution_split(n=1000, seed=3):
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tri in standard_triplets():
        x0 = tri.old.sample(n, rng) + 0.5 * rng.standard_normal((n, tri.old.dim))
        worst = max(worst, float(np.max(mixture_identity_residual(tri, x0))))
    return _result("distribution_split", worst, 1e-10, start)


def check_posterior_split(n=1000, seed=4):
    """Scaled residual of the posterior decomposition on random (x0, x_t, t)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tri in standard_triplets():
        x_t, t = draw_queries(tri.old, n, rng)
        x0 = tri.old.sample(n, rng)
        worst = max(worst, float(np.max(posterior_split_check(tri, x0, x_t, t))))
    return _result("posterior_split", worst, 1e-10, start)


def check_parameterizations(n=1000, seed=5):
    """Relative round-trip error velocity -> score / data prediction -> velocity."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 3)) * 3.0
    v = rng.standard_normal((n, 3)) * 3.0
    t = rng.uniform(1e-3, 1.0 - 1e-3, size=n)
    back_s = score_to_velocity(x, velocity_to_score(x, v, t), t)
    back_x = x0_to_velocity(x, velocity_to_x0(x, v, t), t)
    err = max(np.max(np.abs(back_s - v)), np.max(np.abs(back_x - v))) / np.max(np.abs(v))
    return _result("parameterization_round_trip", float(err), 1e-10, start)


def check_ode_reductions(seed=6):
    """a = 0 SDE paths against ODE paths (bitwise) and eta = 0 DDIM steps."""
    start = time.perf_counter()
    mix = GaussianMixture([0.4, 0.6], [[-1.0, 0.5], [1.5, -0.5]], [[0.3, 0.2], [0.2, 0.4]])
    field = mix.exact_velocity
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((256, 2))
    worst = 0.0
    for steps in (1, 7, 10, 40):
        ode, _ = sample(field, SamplerSpec("euler_ode", steps), x_init=x1)
        sde, _ = sample(field, SamplerSpec("sde_euler", steps, 0.0), x_init=x1)
        ddim, _ = sample(field, SamplerSpec("sde_ddim", steps, 0.0), x_init=x1)
        if not (np.array_equal(ode, sde) and np.array_equal(ode, ddim)):
            worst = math.inf
        grid = time_grid(SamplerSpec("euler_ode", steps))
        for t, s in zip(grid[:-1], grid[1:]):
            x = rng.standard_normal((64, 2))
            v = field(x, t)
            # general DDIM coefficients at eta = 0 against the Euler step
            l, m, _ = ddim_coefficients(t, s, 0.0)
            worst = max(worst, float(np.max(np.abs(l * x - m * v - euler_ode_step(field, x, t, s)))))
            worst = max(worst, float(np.max(np.abs(sde_ddim_step(field, x, t, s, 0.0) - (x - (t - s) * v)))))
    return _result("ode_reductions", worst, 1e-12, start)


def _rel(a, b):
    fa, fb = np.concatenate([g.ravel() for g in a]), np.concatenate([g.ravel() for g in b])
    return float(np.max(np.abs(fa - fb)) / max(np.max(np.abs(fb)), 1e-300))


def grpo_identity_configs(n_configs=20, seed=7):
    """Worst relative gap between likelihood and noise-form policy gradients."""
    worst = 0.0
    for k in range(n_configs):
        rng = np.random.default_rng([seed, k])
        dim = int(rng.integers(1, 4))
        model = MLP(dim, 2, hidden=(16, 16), seed=k, zero_final=False)
        a = float(rng.uniform(0.2, math.sqrt(2.0)))
        steps = int(rng.integers(2, 12))
        spec = SamplerSpec("sde_euler", steps, a, record_trajectory=True)
        cond = int(rng.integers(2))
        _, traj = sample(model.field(cond), spec, n=8, rng=rng, dim=dim)
        adv = rng.standard_normal(8)
        adv -= adv.mean()
        _, g_lik = grpo_loss(model, cond, traj, adv)
        g_noise = grpo_noise_form_grad(model, cond, traj, adv)
        worst = max(worst, _rel(g_lik, g_noise))
    return worst


def check_grpo_identity(n_configs=20, seed=7):
    start = time.perf_counter()
    return _result("grpo_gradient_identity", grpo_identity_configs(n_configs, seed), 1e-6, start)


def finite_difference_error(loss_fn, params, rng, n_probe=40, h=1e-6):
    """Worst relative error of the analytic gradient along random coordinates.

    ``loss_fn()`` returns ``(loss, grads)`` evaluated at the current ``params``
    (which are perturbed in place and restored).
    """
    _, grads = loss_fn()
    worst = 0.0
    for _ in range(n_probe):
        i = int(rng.integers(len(params)))
        j = tuple(int(rng.integers(s)) for s in params[i].shape)
        orig = params[i][j]
        params[i][j] = orig + h
        lp, _ = loss_fn()
        params[i][j] = orig - h
        lm, _ = loss_fn()
        params[i][j] = orig
        fd = (lp - lm) / (2.0 * h)
        an = grads[i][j]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def fd_instances(seed=8, n=3):
    """Worst finite-difference error for the network and both losses."""
    worst = {"mlp": 0.0, "fm_loss": 0.0, "nft_loss": 0.0}
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        model = MLP(2, 3, hidden=(12, 10), activation=("tanh", "softplus", "tanh")[k % 3], seed=k, zero_final=False)
        old = MLP(2, 3, hidden=(12, 10), seed=100 + k, zero_final=False)
        x0 = rng.standard_normal((16, 2))
        cond = rng.integers(3, size=16)
        t = rng.uniform(0.05, 0.95, size=16)
        eps = rng.standard_normal((16, 2))
        r = rng.uniform(size=16)
        probe = rng.standard_normal((16, 2))

        def mlp_obj():
            v = model.forward(x0, cond, t)
            return float(np.sum(v * probe)), model.backward(probe)

        worst["mlp"] = max(worst["mlp"], finite_difference_error(mlp_obj, model.params, rng))
        for w in ("uniform", "one_minus_t", "adaptive"):
            # the adaptive divisor is a stop-gradient constant: hold it fixed
            d_fm = d_nft = None
            if w == "adaptive":
                x_t = (1.0 - t)[:, None] * x0 + t[:, None] * eps
                v = model.forward(x_t, cond, t)
                d_fm = float(np.mean(np.abs(velocity_to_x0(x_t, v, t) - x0)))
                v_pos = 0.3 * old.forward(x_t, cond, t) + 0.7 * model.forward(x_t, cond, t)
                d_nft = float(np.mean(np.abs(velocity_to_x0(x_t, v_pos, t) - x0)))
            fm = lambda: fm_loss(model, x0, cond, t, eps, w, adaptive_denom=d_fm)
            worst["fm_loss"] = max(worst["fm_loss"], finite_difference_error(fm, model.params, rng, n_probe=15))
            nft = lambda: nft_loss(model, old.forward, x0, cond, r, t, eps, 0.7, w, adaptive_denom=d_nft)
            worst["nft_loss"] = max(worst["nft_loss"], finite_difference_error(nft, model.params, rng, n_probe=15))
    return worst


def check_finite_differences(seed=8):
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        worst = max(fd_instances(seed).values())
    return _result("finite_difference_gradients", worst, 1e-4, start)


def check_nft_reduces_to_fm(seed=9):
    """r = 1, beta = 1 turns the negative-aware loss into plain flow matching."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = MLP(2, 2, hidden=(16, 16), seed=seed, zero_final=False)
    old = MLP(2, 2, hidden=(16, 16), seed=seed + 1, zero_final=False)
    worst = 0.0
    for w in ("uniform", "one_minus_t", "adaptive"):
        x0 = rng.standard_normal((64, 2))
        cond = rng.integers(2, size=64)
        t = rng.uniform(1e-3, 1 - 1e-3, size=64)
        eps = rng.standard_normal((64, 2))
        l_fm, g_fm = fm_loss(model, x0, cond, t, eps, w)
        l_nft, g_nft = nft_loss(model, old.forward, x0, cond, np.ones(64), t, eps, 1.0, w)
        worst = max(worst, abs(l_fm - l_nft), max(float(np.max(np.abs(a - b))) for a, b in zip(g_fm, g_nft)))
    return _result("nft_reduces_to_fm", worst, 1e-12, start)


# convergence checks (statistical / asymptotic, not exact identities)

ORDER_GAUSSIAN = GaussianMixture([1.0], [[0.5, -1.0]], [[0.3, 2.0]])


def sampler_errors(kind, steps=(16, 32, 64), ref_steps=4096, n=2000, t_min=1e-3, seed=10, mixture=ORDER_GAUSSIAN):
    """RMS endpoint error of ``kind`` against the same sampler at ``ref_steps``."""
    x1 = np.random.default_rng(seed).standard_normal((n, mixture.dim))
    field = mixture.exact_velocity
    ref, _ = sample(field, SamplerSpec(kind, ref_steps, t_min=t_min), x_init=x1)
    return [float(np.sqrt(np.mean(np.sum((sample(field, SamplerSpec(kind, s, t_min=t_min), x_init=x1)[0] - ref) ** 2, axis=1)))) for s in steps]


def observed_orders(errors):
    return [math.log2(a / b) for a, b in zip(errors[:-1], errors[1:])]


def check_sampler_order(kind, bound, steps=(16, 32, 64)):
    start = time.perf_counter()
    orders = observed_orders(sampler_errors(kind, steps))
    return _result(f"order_{kind}", min(orders), bound, start, kind="min")


MARGINAL_MIXTURE = GaussianMixture([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [[0.25, 0.25], [0.25, 0.25]])


def marginal_moments(kind="sde_euler", stochasticity=math.sqrt(2.0), steps=128, n=10_000, seed=11, mixture=MARGINAL_MIXTURE):
    """(max |mean error|, max |variance ratio - 1|) of exact-field samples."""
    rng = np.random.default_rng(seed)
    x, _ = sample(mixture.exact_velocity, SamplerSpec(kind, steps, stochasticity), n=n, rng=rng, dim=mixture.dim)
    mean_err = float(np.max(np.abs(x.mean(0) - mixture.mean())))
    var_err = float(np.max(np.abs(x.var(0) / mixture.covariance_diag() - 1.0)))
    return mean_err, var_err


def check_marginals():
    start = time.perf_counter()
    mean_err, var_err = marginal_moments()
    # scale both to their tolerances and report the worse one
    return _result("sde_marginal_preservation", max(mean_err / 0.05, var_err / 0.05), 1.0, start)


def optimum_fit_error(beta, steps=20_000, batch_size=1024, lr=1e-3, n_eval=4000, seed=1, mixture=MARGINAL_MIXTURE, log_every=0, out=print):
    """Relative RMSE between a trained v_theta and the closed-form optimum of the NFT loss.

    The frozen v_old is the analytic field of ``mixture``; the reward is the
    indicator of the second component, so the positive and negative policies
    stay inside the mixture family. The error is measured on held-out
    (x_t, t) draws restricted to the 90% highest-density region.
    """
    t_min = 1e-3
    r_comp = np.zeros(mixture.n_components)
    r_comp[-1] = 1.0
    triplet = split_by_componentwise_reward(mixture, r_comp)
    v_old = lambda x, c, t: mixture.exact_velocity(x, t)

    ev = np.random.default_rng(99)
    t_ev = ev.uniform(t_min, 1.0 - t_min, n_eval)
    x0_ev = mixture.sample(n_eval, ev)
    x_ev = (1.0 - t_ev)[:, None] * x0_ev + t_ev[:, None] * ev.standard_normal(x0_ev.shape)
    ld = mixture.log_marginal(x_ev, t_ev)
    keep = ld >= np.quantile(ld, 0.1)
    target = optimal_nft_velocity(triplet, x_ev, t_ev, beta)
    scale = math.sqrt(np.mean(np.sum(target**2, axis=1)[keep]))

    model = MLP(mixture.dim, 1, (64, 64, 64), seed=seed)
    opt = Adam(model.params, lr=lr)
    rng = np.random.default_rng(0)

    def error():
        diff = model.forward(x_ev, 0, t_ev) - target
        return math.sqrt(np.mean(np.sum(diff**2, axis=1)[keep])) / scale

    for k in range(steps):
        x0, labels = mixture.sample(batch_size, rng, return_labels=True)
        t = rng.uniform(t_min, 1.0 - t_min, batch_size)
        eps = rng.standard_normal(x0.shape)
        _, grads = nft_loss(model, v_old, x0, 0, r_comp[labels], t, eps, beta)
        # cosine decay to 2% of the base rate
        opt.lr = lr * (0.02 + 0.49 * (1.0 + math.cos(math.pi * k / steps)))
        opt.step(model.params, grads)
        if log_every and (k + 1) % log_every == 0:
            out(f"step {k + 1}: relative error {error():.4f}")
    return error()


IDENTITY_SUITES = (
    check_guidance_forms,
    check_shares_sum_to_one,
    check_alpha_range,
    check_distribution_split,
    check_posterior_split,
    check_parameterizations,
    check_ode_reductions,
    check_nft_reduces_to_fm,
    check_grpo_identity,
    check_finite_differences,
)

CONVERGENCE_SUITES = (
    lambda: check_sampler_order("euler_ode", 0.9),
    lambda: check_sampler_order("multistep2_ode", 1.8),
    check_marginals,
)


def run_suites(full=False, out=print):
    """Run the suites, print a table, return the list of results."""
    suites = IDENTITY_SUITES + (CONVERGENCE_SUITES if full else ())
    results = []
    out(f"{'suite':<34} {'measured':>12}    {'tolerance':<9} {'time':>8}  status")
    out("-" * 78)
    for fn in suites:
        res = fn()
        results.append(res)
        out(res.row())
    n_fail = sum(not r.passed for r in results)
    out("-" * 78)
    out(f"{len(results) - n_fail}/{len(results)} suites passed")
    return results
