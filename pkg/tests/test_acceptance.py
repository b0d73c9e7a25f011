"""The twelve acceptance criteria, each at its stated tolerance and time budget.

Every test records a PASS/FAIL line that is printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from conftest import record
from nftlab.cli import main
from nftlab.config import load_config
from nftlab.fm_train import fm_loss
from nftlab.nft import nft_loss
from nftlab.nn import MLP
from nftlab.runs import run_ablation, run_pretrain, run_rl
from nftlab.verify import (
    check_finite_differences,
    check_grpo_identity,
    check_guidance_forms,
    check_marginals,
    check_ode_reductions,
    check_posterior_split,
    fd_instances,
    grpo_identity_configs,
    marginal_moments,
    observed_orders,
    optimum_fit_error,
    sampler_errors,
    standard_triplets,
)

pytestmark = pytest.mark.acceptance


def _timed(fn, *args, **kw):
    start = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - start


def test_c1_guidance_identity():
    assert len(standard_triplets()) >= 3
    res = check_guidance_forms(n=1000)
    ok = res.measured <= 1e-8 and res.seconds < 10
    record("1", "guidance direction, two forms agree", ok, f"sup gap {res.measured:.2e} (tol 1e-8), {res.seconds:.2f}s")
    assert ok


def test_c2_posterior_split():
    res = check_posterior_split(n=1000)
    ok = res.measured <= 1e-10 and res.seconds < 10
    record("2", "posterior split identity", ok, f"residual {res.measured:.2e} (tol 1e-10), {res.seconds:.2f}s")
    assert ok


@pytest.mark.slow
@pytest.mark.parametrize("beta", [0.1, 1.0])
def test_c3_nft_loss_optimum(beta):
    err, secs = _timed(optimum_fit_error, beta)
    ok = err <= 0.05 and secs < 300
    record(f"3{'a' if beta < 1 else 'b'}", f"trained field matches closed-form optimum, beta={beta}", ok, f"relative RMSE {err:.4f} (tol 0.05), {secs:.0f}s")
    assert ok


def test_c4_unit_reward_reduction():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        model = MLP(2, 2, hidden=(16, 16), seed=seed, zero_final=False)
        old = MLP(2, 2, hidden=(16, 16), seed=50 + seed, zero_final=False)
        x0, c = rng.standard_normal((32, 2)), rng.integers(2, size=32)
        t, eps = rng.uniform(1e-3, 1 - 1e-3, 32), rng.standard_normal((32, 2))
        for w in ("uniform", "one_minus_t", "adaptive"):
            a, ga = nft_loss(model, old.forward, x0, c, np.ones(32), t, eps, 1.0, w)
            b, gb = fm_loss(model, x0, c, t, eps, w)
            worst = max(worst, abs(a - b), *(float(np.max(np.abs(p - q))) for p, q in zip(ga, gb)))
    secs = time.perf_counter() - start
    ok = worst <= 1e-12 and secs < 1
    record("4", "r=1, beta=1 reduces to flow matching", ok, f"max gap {worst:.2e} (tol 1e-12), {secs:.2f}s")
    assert ok


def test_c5a_euler_order():
    errs, secs = _timed(sampler_errors, "euler_ode")
    orders = observed_orders(errs)
    ok = min(orders) >= 0.9 and secs < 60
    record("5a", "Euler ODE convergence order", ok, f"orders {', '.join(f'{o:.3f}' for o in orders)} (need >= 0.9), {secs:.1f}s")
    assert ok


def test_c5b_multistep_order():
    errs, secs = _timed(sampler_errors, "multistep2_ode")
    orders = observed_orders(errs)
    ok = min(orders) >= 1.8 and secs < 60
    record("5b", "second-order multistep convergence order", ok, f"orders {', '.join(f'{o:.3f}' for o in orders)} over 16/32/64 steps (need >= 1.8), {secs:.1f}s")
    assert ok


def test_c6_sde_ode_reductions():
    res = check_ode_reductions()
    ok = res.passed and res.seconds < 10
    record("6", "a=0 SDE equals ODE bitwise; eta=0 DDIM equals Euler", ok, f"worst gap {res.measured:.2e} (tol 1e-12), {res.seconds:.2f}s")
    assert ok


def test_c7_marginal_preservation():
    (mean_err, var_err), secs = _timed(marginal_moments, "sde_euler", math.sqrt(2.0), 128, 10_000)
    ok = mean_err <= 0.05 and var_err <= 0.05 and secs < 60
    assert check_marginals().passed == (mean_err <= 0.05 and var_err <= 0.05)
    record("7", "maximum-variance SDE keeps data marginals", ok, f"mean err {mean_err:.4f} (tol 0.05), var err {var_err:.4f} (tol 0.05), {secs:.1f}s")
    assert ok


def test_c8_policy_gradient_identity():
    worst, secs = _timed(grpo_identity_configs, 20)
    assert check_grpo_identity().passed
    ok = worst <= 1e-6 and secs < 30
    record("8", "policy-gradient identity over 20 configs", ok, f"worst relative gap {worst:.2e} (tol 1e-6), {secs:.2f}s")
    assert ok


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrained")
    cfg = load_config(out=out)
    return cfg, run_pretrain(cfg)


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["euler_ode", "multistep2_ode", "sde_euler"])
def test_c9_end_to_end(pretrained, tmp_path, kind):
    cfg, base = pretrained
    overrides = [f"rl.sampler.kind={kind}"]
    if kind == "sde_euler":
        overrides.append(f"rl.sampler.stochasticity={math.sqrt(2.0)}")
    run_cfg = load_config(None, overrides, out=tmp_path)
    result, secs = _timed(run_rl, run_cfg, "nft", base)
    evals = [(r["iteration"], r["mean_raw_reward"]) for r in result.rows if r["phase"] == "eval"]
    first = next((i for i, v in evals if v >= 0.9), None)
    ok = first is not None and first <= 300 and secs < 600
    tag = {"euler_ode": "a", "multistep2_ode": "b", "sde_euler": "c"}[kind]
    record(
        f"9{tag}",
        f"end-to-end NFT with {kind} rollouts",
        ok,
        f"start {evals[0][1]:.3f}, first >= 0.9 at iteration {first}, final {evals[-1][1]:.3f}, {secs:.0f}s",
    )
    assert ok


def test_c10_finite_differences():
    worst, secs = _timed(fd_instances)
    assert check_finite_differences().passed
    ok = max(worst.values()) <= 1e-4 and secs < 30
    record("10", "finite-difference gradient checks", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (tol 1e-4), {secs:.2f}s")
    assert ok


@pytest.mark.slow
def test_c11_determinism(tmp_path):
    start = time.perf_counter()
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert main(["rl-nft", "--seed", "3", "--out", str(d), "--override", "metrics.record_wall_clock=false"]) == 0
    names = ["pretrain.ckpt", "pretrain_loss.csv", "nft/metrics.csv", "nft/final.ckpt", "nft/sampler.ckpt"]
    same = [(dirs[0] / n).read_bytes() == (dirs[1] / n).read_bytes() for n in names]
    secs = time.perf_counter() - start
    ok = all(same) and secs < 1200
    record("11", "repeated rl-nft runs are bit-identical", ok, f"{sum(same)}/{len(names)} artifacts identical, {secs:.0f}s")
    assert ok


@pytest.mark.slow
def test_c12_on_policy_starts_faster(pretrained, tmp_path):
    cfg, base = pretrained
    run_cfg = load_config(None, ["rl.iterations=60"], out=tmp_path)
    summary = run_ablation(run_cfg, "eta", ["0", "0.9"], base=base)
    slope = {row["value"]: row["early_slope"] for row in summary}
    ok = slope[0.0] > slope[0.9]
    record("12", "eta=0 has the steeper early reward slope than eta=0.9", ok, f"slopes {slope[0.0]:.4f} vs {slope[0.9]:.4f} (first 50 iterations)")
    assert ok
