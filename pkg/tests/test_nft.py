import inspect
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nftlab.errors import TrainingDivergedError
from nftlab.fm_train import fm_loss
from nftlab.mixture import GaussianMixture
from nftlab.nft import (
    ETA_PRESETS,
    EtaSchedule,
    RlConfig,
    RolloutBatch,
    implicit_policies,
    nft_loss,
    optimality_reward,
    rl_loop,
    soft_update,
)
from nftlab.nn import MLP
from nftlab.rewards import indicator_reward
from nftlab.samplers import SamplerSpec
from nftlab.schedule import forward_diffuse
from nftlab.verify import finite_difference_error

MIX = GaussianMixture([0.5, 0.5], [[-2.0, 0.0], [2.0, 0.0]], [[0.25, 0.25], [0.25, 0.25]])
group = arrays(np.float64, st.integers(2, 9), elements=st.floats(-100, 100))


def _batch(rng, n=16, dim=2):
    return rng.standard_normal((n, dim)), rng.integers(2, size=n), rng.uniform(0.05, 0.95, size=n), rng.standard_normal((n, dim))


def _frozen(seed):
    ref = MLP(2, 2, hidden=(10,), seed=seed, zero_final=False)
    return lambda x, c, t: ref.forward(x, c, t)


# optimality reward


def test_optimality_reward_examples():
    np.testing.assert_allclose(optimality_reward([0.2, 0.8], 0.3), [0.0, 1.0])
    np.testing.assert_array_equal(optimality_reward([3.0, 3.0, 3.0], 0.1), [0.5, 0.5, 0.5])
    np.testing.assert_allclose(optimality_reward([0.0, 1.0, 2.0], 10.0), [0.45, 0.5, 0.55], atol=1e-15)


def test_optimality_reward_errors():
    for z in (0.0, -1.0):
        with pytest.raises(ValueError):
            optimality_reward([0.0, 1.0], z)
    with pytest.raises(ValueError):
        optimality_reward([1.0], 1.0)


@settings(max_examples=100, deadline=None)
@given(group, st.floats(-1e3, 1e3), st.floats(0.01, 100))
def test_optimality_reward_translation_invariant_and_bounded(raw, shift, z):
    r = optimality_reward(raw, z)
    assert np.all((r >= 0) & (r <= 1))
    np.testing.assert_allclose(optimality_reward(raw + shift, z), r, atol=1e-9)
    assert abs(np.mean(r - 0.5)) <= 0.5


@settings(max_examples=100, deadline=None)
@given(group, st.integers(0, 8), st.floats(0.0, 50.0), st.floats(0.01, 100))
def test_optimality_reward_monotone_in_own_reward(raw, j, bump, z):
    j = j % len(raw)
    up = raw.copy()
    up[j] += bump
    assert optimality_reward(up, z)[j] >= optimality_reward(raw, z)[j] - 1e-12


# implicit policies


def test_implicit_policy_examples():
    v_old, v_th = np.array([0.3, -1.0]), np.array([2.0, 0.5])
    pos, neg = implicit_policies(v_old, v_th, 1.0)
    np.testing.assert_array_equal(pos, v_th)
    np.testing.assert_array_equal(neg, 2 * v_old - v_th)
    pos, neg = implicit_policies(v_old, v_old, 0.37)
    np.testing.assert_allclose(pos, v_old, atol=1e-15)
    np.testing.assert_allclose(neg, v_old, atol=1e-15)
    pos, neg = implicit_policies([0.0], [1.0], 0.1)
    assert pos[0] == pytest.approx(0.1) and neg[0] == pytest.approx(-0.1)
    with pytest.raises(ValueError):
        implicit_policies(v_old, v_th, 0.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-10, 10)), arrays(np.float64, 3, elements=st.floats(-10, 10)), st.floats(0.01, 2))
def test_implicit_policy_identities(v_old, v_th, beta):
    pos, neg = implicit_policies(v_old, v_th, beta)
    np.testing.assert_allclose(pos + neg, 2 * v_old, atol=1e-12)
    np.testing.assert_allclose(pos - neg, 2 * beta * (v_th - v_old), atol=1e-12)


# loss


def test_rollout_batch_validation():
    RolloutBatch(0, np.zeros((2, 2)), [0.0, 1.0], [0.0, 1.0])
    with pytest.raises(ValueError):
        RolloutBatch(0, np.zeros((1, 2)), [0.0], [0.5])
    with pytest.raises(ValueError):
        RolloutBatch(0, np.zeros((2, 2)), [0.0, 1.0], [0.0, 1.2])
    with pytest.raises(ValueError):
        RolloutBatch(0, np.zeros((3, 2)), [0.0, 1.0], [0.0, 1.0, 0.5])


@pytest.mark.parametrize("weighting", ["uniform", "one_minus_t", "adaptive"])
def test_unit_reward_unit_beta_reduces_to_flow_matching(rng, weighting):
    model = MLP(2, 2, hidden=(12,), seed=3, zero_final=False)
    x0, c, t, eps = _batch(rng)
    a, ga = nft_loss(model, _frozen(7), x0, c, np.ones(16), t, eps, beta=1.0, weighting=weighting)
    b, gb = fm_loss(model, x0, c, t, eps, weighting)
    assert abs(a - b) <= 1e-12
    for p, q in zip(ga, gb):
        assert np.max(np.abs(p - q)) <= 1e-12


@pytest.mark.parametrize("beta", [0.1, 1.0, 1.7])
def test_half_reward_gradient_is_scaled_regression_onto_old_field(rng, beta):
    # with r = 1/2 the two branches combine to |v - v_old|^2 + beta^2 |v_theta - v_old|^2
    model = MLP(2, 2, hidden=(12,), seed=5, zero_final=False)
    v_old = _frozen(8)
    x0, c, t, eps = _batch(rng)
    _, g = nft_loss(model, v_old, x0, c, 0.5, t, eps, beta=beta)
    x_t, _ = forward_diffuse(x0, eps, t)
    diff = model.forward(x_t, c, t) - v_old(x_t, c, t)
    expect = model.backward(2.0 * beta**2 * diff / len(x0))
    for p, q in zip(g, expect):
        np.testing.assert_allclose(p, q, rtol=1e-9, atol=1e-14)

    params = [p.copy() for p in model.params]
    # finite differences on the quadratic form agree with the loss gradient
    loss_fn = lambda: nft_loss(model, v_old, x0, c, 0.5, t, eps, beta=beta)
    assert finite_difference_error(loss_fn, model.params, rng, n_probe=20) <= 1e-4
    assert all(np.array_equal(a, b) for a, b in zip(params, model.params))


def test_half_reward_gradient_vanishes_at_old_field(rng):
    model = MLP(2, 2, hidden=(12,), seed=5, zero_final=False)
    frozen = model.copy()
    x0, c, t, eps = _batch(rng)
    _, g = nft_loss(model, lambda x, cc, tt: frozen.forward(x, cc, tt), x0, c, 0.5, t, eps, beta=0.3)
    assert max(np.max(np.abs(p)) for p in g) <= 1e-14


@pytest.mark.parametrize("weighting", ["uniform", "one_minus_t", "adaptive"])
@pytest.mark.parametrize("negative", [True, False])
def test_nft_loss_finite_differences(weighting, negative):
    rng = np.random.default_rng(17)
    model = MLP(2, 2, hidden=(12, 12), seed=2, zero_final=False)
    v_old = _frozen(4)
    x0, c, t, eps = _batch(rng)
    r = rng.uniform(size=16)
    denom = 0.8 if weighting == "adaptive" else None
    obj = lambda: nft_loss(model, v_old, x0, c, r, t, eps, 0.4, weighting, negative, adaptive_denom=denom)
    assert finite_difference_error(obj, model.params, rng, n_probe=25) <= 1e-4


def test_negative_branch_switch(rng):
    model = MLP(2, 2, hidden=(12,), seed=1, zero_final=False)
    v_old = _frozen(2)
    x0, c, t, eps = _batch(rng)
    r = rng.uniform(size=16)
    with_neg, _ = nft_loss(model, v_old, x0, c, r, t, eps, 0.5)
    without, _ = nft_loss(model, v_old, x0, c, r, t, eps, 0.5, negative=False)
    pos_only, _ = nft_loss(model, v_old, x0, c, np.zeros(16), t, eps, 0.5, negative=False)
    assert without < with_neg and pos_only == 0.0


def test_loss_interface_never_sees_trajectories():
    names = set(inspect.signature(nft_loss).parameters)
    assert not names & {"traj", "trajectory", "noises", "states"}
    with pytest.raises(ValueError):
        nft_loss(MLP(2, 1), _frozen(0), np.zeros((0, 2)), 0, np.zeros(0), np.zeros(0), np.zeros((0, 2)))


# soft update


def test_eta_schedules():
    default = ETA_PRESETS["default"]
    assert default(0) == 0.0 and default(1000) == 0.5 and default(10**6) == 0.5
    assert default(250) == pytest.approx(0.25)
    assert ETA_PRESETS["conservative"](10**6) == 0.999
    assert ETA_PRESETS["multi_reward_ocr"](10**6) == 0.95
    assert ETA_PRESETS["off_policy"](3) == 0.9 and ETA_PRESETS["on_policy"](3) == 0.0
    with pytest.raises(ValueError):
        EtaSchedule(constant=1.5)(0)


def test_first_soft_update_is_hard_copy():
    old, new = [np.array([1.0, 2.0])], [np.array([5.0, -1.0])]
    np.testing.assert_array_equal(soft_update(old, new, 0, ETA_PRESETS["default"])[0], new[0])
    np.testing.assert_allclose(soft_update(old, new, 1000, ETA_PRESETS["default"])[0], [3.0, 0.5])


def test_config_validation():
    with pytest.raises(ValueError):
        RlConfig(beta=0.0)
    with pytest.raises(ValueError):
        RlConfig(group_size=1)
    with pytest.raises(ValueError):
        RlConfig(z_mode="per_prompt")
    cfg = RlConfig()
    assert cfg.group_size == 8 and cfg.groups_per_iter == 24 and cfg.sampler.steps == 10


# loop


def _tiny(sampler, **kw):
    base = dict(iterations=3, groups_per_iter=4, group_size=4, eval_every=0, sampler=sampler, seed=5)
    base.update(kw)
    return RlConfig(**base)


def _reward(x0, c):
    return indicator_reward(x0, 1, MIX)


@pytest.mark.parametrize(
    "sampler",
    [SamplerSpec("euler_ode", 6), SamplerSpec("multistep2_ode", 6), SamplerSpec("sde_euler", 6, math.sqrt(2)), SamplerSpec("sde_ddim", 6, 1.0)],
)
def test_loop_runs_with_every_sampler(sampler):
    model = MLP(2, 1, hidden=(16,), seed=0)
    res = rl_loop(model, _reward, _tiny(sampler))
    rows = [r for r in res.rows if r["phase"] == "rollout"]
    assert [r["iteration"] for r in rows] == [0, 1, 2]
    assert all(np.isfinite(r["loss"]) for r in rows)
    assert not np.array_equal(res.model.get_flat(), model.get_flat())
    # the first soft update is a hard copy
    assert rows[0]["eta"] == 0.0


def test_loop_is_deterministic_and_emits_rows():
    seen = []
    cfg = _tiny(SamplerSpec("sde_euler", 5, 1.0), eval_every=2, eval_samples=32)
    a = rl_loop(MLP(2, 1, hidden=(16,), seed=0), _reward, cfg, emit=seen.append, clock=lambda: 0.0)
    b = rl_loop(MLP(2, 1, hidden=(16,), seed=0), _reward, cfg, clock=lambda: 0.0)
    assert np.array_equal(a.model.get_flat(), b.model.get_flat())
    assert [str(r) for r in a.rows] == [str(r) for r in b.rows] and seen == a.rows
    assert [r["phase"] for r in a.rows].count("eval") == 3


def test_nan_reward_aborts_with_last_good_weights():
    model = MLP(2, 1, hidden=(16,), seed=0)
    with pytest.raises(TrainingDivergedError) as info:
        rl_loop(model, lambda x, c: np.full(len(x), np.nan), _tiny(SamplerSpec("euler_ode", 4)))
    assert info.value.last_good_params is not None
    assert np.array_equal(np.concatenate([p.ravel() for p in info.value.last_good_params]), model.get_flat())


@pytest.mark.slow
def test_default_loop_reaches_target_mass():
    from nftlab.fm_train import pretrain

    model = MLP(2, 1, seed=0)
    pretrain(model, [MIX], steps=1000, batch_size=256, seed=0)
    res = rl_loop(model, _reward, RlConfig(iterations=40, eval_every=20, eval_samples=256))
    evals = [r["mean_raw_reward"] for r in res.rows if r["phase"] == "eval"]
    assert evals[0] < 0.7 and evals[-1] >= 0.9
