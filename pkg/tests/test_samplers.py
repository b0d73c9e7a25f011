import math

import numpy as np
import pytest

from nftlab.errors import GridError, SingularityError
from nftlab.mixture import GaussianMixture
from nftlab.samplers import (
    SamplerSpec,
    check_grid,
    ddim_coefficients,
    euler_ode_step,
    multistep2_update,
    sample,
    sde_ddim_step,
    sde_euler_step,
    time_grid,
)
from nftlab.schedule import RF, log_snr
from nftlab.verify import MARGINAL_MIXTURE, marginal_moments, observed_orders, sampler_errors

STD2 = GaussianMixture([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
const = lambda c: (lambda x, t: np.broadcast_to(np.asarray(c, dtype=float), x.shape).copy())


def test_spec_validation():
    with pytest.raises(ValueError):
        SamplerSpec("heun")
    with pytest.raises(ValueError):
        SamplerSpec("sde_euler", 10, 1.5)
    with pytest.raises(ValueError):
        SamplerSpec("sde_ddim", 10, 1.1)
    with pytest.raises(ValueError):
        SamplerSpec("euler_ode", 0)
    assert SamplerSpec("sde_euler", 10, math.sqrt(2)).is_sde
    assert not SamplerSpec("sde_euler", 10, 0.0).is_sde


@pytest.mark.parametrize("kind", ["euler_ode", "multistep2_ode", "sde_euler", "sde_ddim"])
def test_time_grids(kind):
    grid = time_grid(SamplerSpec(kind, 16))
    assert len(grid) == 17 and np.all(np.diff(grid) < 0)
    assert grid[0] == 1 - 1e-3 and grid[-1] == 1e-3
    with pytest.raises(GridError):
        check_grid(grid[::-1], 1e-3)


def test_log_snr_grid_is_symmetric_about_half():
    grid = time_grid(SamplerSpec("multistep2_ode", 8))
    assert grid[4] == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(np.diff(log_snr(grid)), np.diff(log_snr(grid))[0], rtol=1e-9)


def test_euler_examples(rng):
    x = rng.standard_normal((4, 1))
    np.testing.assert_array_equal(euler_ode_step(const(0.0), x, 0.6, 0.5), x)
    np.testing.assert_allclose(euler_ode_step(const(1.0), x, 0.6, 0.5), x - 0.1, atol=1e-15)


def test_euler_endpoint_variance_on_exact_field():
    x, _ = sample(STD2.exact_velocity, SamplerSpec("euler_ode", 512), n=10_000, rng=np.random.default_rng(0), dim=2)
    np.testing.assert_allclose(x.var(0), 1.0, rtol=0.02)


def test_sde_step_reduces_to_ode_at_zero_stochasticity(rng):
    field = STD2.exact_velocity
    x = rng.standard_normal((10, 2))
    x_s, eps, mean, var = sde_euler_step(field, x, 0.7, 0.6, 0.0)
    assert var == 0.0 and np.array_equal(x_s, euler_ode_step(field, x, 0.7, 0.6)) and np.array_equal(x_s, mean)


def test_sde_step_example(rng):
    x = rng.standard_normal((3, 2))
    v = rng.standard_normal((3, 2))
    _, eps, mean, var = sde_euler_step(None, x, 0.5, 0.4, math.sqrt(2), rng=rng, v=v)
    assert var == pytest.approx(0.2, abs=1e-15)
    # time runs backwards, so the drift enters with the step t - s = 0.1
    np.testing.assert_allclose(mean, x - (v + 2.0 * (x + 0.5 * v)) * 0.1, atol=1e-15)
    with pytest.raises(SingularityError):
        sde_euler_step(None, x, 1.0, 0.9, 1.0, rng=rng, v=v)
    with pytest.raises(SingularityError):
        sde_euler_step(None, x, 0.0, -0.1, 1.0, rng=rng, v=v)


def test_sde_paths_equal_ode_paths_bitwise():
    mix = GaussianMixture([0.4, 0.6], [[-1.0, 0.5], [1.5, -0.5]], [[0.3, 0.2], [0.2, 0.4]])
    x1 = np.random.default_rng(0).standard_normal((128, 2))
    for steps in (3, 10, 33):
        ode, _ = sample(mix.exact_velocity, SamplerSpec("euler_ode", steps), x_init=x1)
        sde, traj = sample(mix.exact_velocity, SamplerSpec("sde_euler", steps, 0.0, record_trajectory=True), x_init=x1)
        assert np.array_equal(ode, sde)
        assert all(e is None for e in traj.noises)


def test_ddim_reduces_to_euler_on_every_grid_pair(rng):
    field = STD2.exact_velocity
    for kind in ("euler_ode", "multistep2_ode"):
        grid = time_grid(SamplerSpec(kind, 20))
        for t, s in zip(grid[:-1], grid[1:]):
            x = rng.standard_normal((16, 2))
            l, m, rho = ddim_coefficients(t, s, 0.0)
            assert rho == 0.0
            assert np.max(np.abs(l * x - m * field(x, t) - euler_ode_step(field, x, t, s))) <= 1e-12
            assert np.array_equal(sde_ddim_step(field, x, t, s, 0.0), euler_ode_step(field, x, t, s))


def test_ddim_step_distribution():
    t, s, eta = 0.8, 0.4, 1.0
    l, m, rho = ddim_coefficients(t, s, eta)
    expect_rho = s * math.sqrt(1 - (s * (1 - t) / (t * (1 - s))) ** 2)
    assert rho == pytest.approx(expect_rho, rel=1e-14)
    root = math.sqrt(s * s - rho * rho)
    assert l == pytest.approx((1 - s) + root) and m == pytest.approx((1 - s) * t - root * (1 - t))
    x = np.full((10_000, 1), 0.7)
    v = const(-0.3)
    out = sde_ddim_step(v, x, t, s, eta, rng=np.random.default_rng(1))
    assert abs(out.mean() - (l * 0.7 + m * 0.3)) <= 4 * rho / 100
    assert abs(out.var() / rho**2 - 1) <= 0.05


def test_ddim_continuity_as_steps_shrink(rng):
    x = rng.standard_normal((5, 2))
    field = STD2.exact_velocity
    gaps = [np.max(np.abs(sde_ddim_step(field, x, 0.5, 0.5 - h, 1.0, eps=np.zeros_like(x)) - x)) for h in (1e-2, 1e-3, 1e-4)]
    assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-2


def test_ddim_rejects_bad_order():
    with pytest.raises(ValueError):
        ddim_coefficients(0.3, 0.5, 1.0)


def test_multistep_constant_prediction_is_first_order_step(rng):
    x = rng.standard_normal((4, 2))
    c = rng.standard_normal((1, 2))
    t_pp, t_p, t_i = 0.8, 0.6, 0.45
    out = multistep2_update(x, c, c, t_i, t_p, t_pp)
    h = log_snr(t_i) - log_snr(t_p)
    expect = RF.sigma(t_i) / RF.sigma(t_p) * x - RF.alpha(t_i) * np.expm1(-h) * c
    np.testing.assert_allclose(out, expect, atol=1e-14)
    # with the data prediction exact, the first-order step lands on the interpolant
    x0 = c
    eps = rng.standard_normal((4, 2))
    x_p = RF.alpha(t_p) * x0 + RF.sigma(t_p) * eps
    np.testing.assert_allclose(multistep2_update(x_p, x0, x0, t_i, t_p, t_pp), RF.alpha(t_i) * x0 + RF.sigma(t_i) * eps, atol=1e-13)


def test_multistep_rejects_degenerate_grid(rng):
    x = rng.standard_normal((2, 2))
    with pytest.raises(GridError):
        multistep2_update(x, x, x, 0.5, 0.5, 0.7)


def test_ode_sampling_is_reproducible():
    spec = SamplerSpec("multistep2_ode", 12)
    a, _ = sample(STD2.exact_velocity, spec, n=64, rng=np.random.default_rng(9), dim=2)
    b, _ = sample(STD2.exact_velocity, spec, n=64, rng=np.random.default_rng(9), dim=2)
    assert np.array_equal(a, b)


def test_per_member_generators_make_paths_order_independent():
    spec = SamplerSpec("sde_euler", 8, 1.0)
    seeds = [11, 12, 13]
    a, _ = sample(STD2.exact_velocity, spec, n=3, rng=[np.random.default_rng(s) for s in seeds], dim=2)
    b, _ = sample(STD2.exact_velocity, spec, n=3, rng=[np.random.default_rng(s) for s in seeds[::-1]], dim=2)
    np.testing.assert_allclose(a, b[::-1], atol=1e-14)


def test_trajectory_recording():
    spec = SamplerSpec("sde_euler", 5, 1.0, record_trajectory=True)
    x0, traj = sample(STD2.exact_velocity, spec, n=7, rng=np.random.default_rng(0), dim=2)
    assert len(traj.states) == 6 and len(traj.noises) == 5 and len(traj.velocities) == 5
    assert np.array_equal(traj.times, time_grid(spec)) and np.array_equal(traj.x0, x0)
    one = traj.member(2)
    assert one.states[0].shape == (1, 2) and np.array_equal(one.noises[1], traj.noises[1][2:3])
    _, none = sample(STD2.exact_velocity, SamplerSpec("euler_ode", 5), n=7, rng=np.random.default_rng(0), dim=2)
    assert none is None
    _, ode = sample(STD2.exact_velocity, SamplerSpec("euler_ode", 5, record_trajectory=True), n=7, rng=np.random.default_rng(0), dim=2)
    assert all(e is None for e in ode.noises)


def test_euler_order():
    assert min(observed_orders(sampler_errors("euler_ode"))) >= 0.9


def test_multistep_asymptotic_order():
    # at finer grids the second-order rate is clearly visible
    orders = observed_orders(sampler_errors("multistep2_ode", steps=(32, 64, 128)))
    assert orders[-1] >= 1.8 and orders[0] > 1.5


@pytest.mark.parametrize(
    "kind,stoch",
    [("euler_ode", 0.0), ("multistep2_ode", 0.0), ("sde_euler", math.sqrt(2)), ("sde_ddim", 0.5)],
)
def test_all_samplers_preserve_data_moments(kind, stoch):
    mean_err, var_err = marginal_moments(kind, stoch, steps=128, n=10_000, seed=21)
    assert mean_err <= 0.05 * np.sqrt(MARGINAL_MIXTURE.covariance_diag().max())
    assert var_err <= 0.05


def _ddim_gaussian_variance_error(steps, eta, s0=0.25):
    """Exact relative terminal variance error for N(0, s0) data; every map is linear."""
    grid = time_grid(SamplerSpec("sde_ddim", steps, eta))
    var = (1 - grid[0]) ** 2 * s0 + grid[0] ** 2
    for t, s in zip(grid[:-1], grid[1:]):
        vt = (1 - t) ** 2 * s0 + t**2
        gain = t / vt - (1 - t) * s0 / vt  # v = gain * x for the exact field
        l, m, rho = ddim_coefficients(t, s, eta)
        var = (l - m * gain) ** 2 * var + rho**2
    return var / s0 - 1


def test_full_noise_ddim_bias_matches_linear_recursion_and_is_first_order():
    g = GaussianMixture([1.0], [[0.0]], [[0.25]])
    x, _ = sample(g.exact_velocity, SamplerSpec("sde_ddim", 128, 1.0), n=40_000, rng=np.random.default_rng(0), dim=1)
    expect = _ddim_gaussian_variance_error(128, 1.0)
    assert abs(x.var() / 0.25 - 1 - expect) <= 0.015
    errs = [abs(_ddim_gaussian_variance_error(n, 1.0)) for n in (256, 512, 1024)]
    assert 1.7 <= errs[0] / errs[1] <= 2.1 and 1.7 <= errs[1] / errs[2] <= 2.1
