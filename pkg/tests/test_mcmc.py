import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from _instances import random_instance, random_theta
from proxyfusion.mcmc import (
    AdaptiveBlock,
    ChainConfig,
    ChainError,
    GaussianTarget,
    PosteriorTarget,
    default_blocks,
    effective_sample_size,
    mcse,
    run_chain,
)
from proxyfusion.model import HyperState, log_marginal_posterior


def test_default_chain_lengths():
    c = ChainConfig()
    assert (c.burn_in, c.post_burn, c.thin) == (10_000, 25_000, 10)


def test_thin_must_divide():
    with pytest.raises(ValueError):
        ChainConfig(post_burn=95, thin=10)


def test_white_noise_ess():
    x = np.random.default_rng(0).standard_normal(10_000)
    assert effective_sample_size(x) == pytest.approx(10_000, rel=0.15)


def test_ar1_ess():
    rng = np.random.default_rng(1)
    rho, n = 0.9, 20_000
    x = np.empty(n)
    x[0] = rng.standard_normal() / math.sqrt(1 - rho**2)
    e = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = rho * x[t - 1] + e[t]
    assert effective_sample_size(x) == pytest.approx(n * (1 - rho) / (1 + rho), rel=0.25)


def test_constant_trace_ess_flag():
    ess, flag = effective_sample_size(np.full(100, 3.0), return_flag=True)
    assert ess == 0 and flag == "constant"


def test_gaussian_target_recovered():
    cfg = ChainConfig(burn_in=2_000, post_burn=20_000, thin=1, seed=3)
    out = run_chain(GaussianTarget(), cfg)
    x = out.column("x")
    assert abs(x.mean()) < 3 * mcse(x)
    assert x.var() == pytest.approx(1.0, rel=0.10)
    for rate in out.acceptance.values():
        assert 0.15 <= rate <= 0.40


def _transition_counts(x, edges):
    s = np.digitize(x, edges)
    k = len(edges) + 1
    C = np.zeros((k, k))
    np.add.at(C, (s[:-1], s[1:]), 1)
    return C, s


def test_frozen_proposal_is_reversible():
    # no burn-in and no adaptation after it: the proposal never changes
    cfg = ChainConfig(burn_in=0, post_burn=60_000, thin=1, adapt_after_burn=False, seed=5)
    out = run_chain(GaussianTarget(mu=1.0, sd=2.0), cfg)
    x = out.column("x")
    # two states: flows across the single cut balance
    C2, _ = _transition_counts(x, [1.5])
    assert abs(C2[0, 1] - C2[1, 0]) <= 1
    # three states: pairwise flows balance within sampling error
    C, s = _transition_counts(x, [0.6, 1.4])
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(C[i, j] - C[j, i]) <= 4 * math.sqrt(C[i, j] + C[j, i] + 1)
    assert np.all(C[np.triu_indices(3, 1)] > 50)


def test_adaptation_steps_diminish():
    blk = AdaptiveBlock([0, 1], np.eye(2), 0.234, 0.6)
    rng = np.random.default_rng(0)
    changes = []
    for t in range(5000):
        before = (blk.log_scale, blk.cov.copy())
        blk.adapt(rng.standard_normal(2), float(rng.uniform()))
        changes.append(abs(blk.log_scale - before[0]) + np.abs(blk.cov - before[1]).max())
    assert np.mean(changes[-500:]) < 0.1 * np.mean(changes[:50])
    # squared step sizes are summable for exponent > 1/2
    g = (np.arange(1, 10**6) + 1.0) ** -0.6
    assert np.sum(g**2) < 10


def test_blocks_must_partition():
    spec = random_instance(0)
    with pytest.raises(ValueError):
        run_chain(spec, ChainConfig(burn_in=0, post_burn=10, thin=1, blocks=[["beta1"]], init_optimize=False))


def test_default_blocks_families():
    spec = random_instance(1, joint=True)
    blocks = default_blocks(spec.free_parameters())
    assert ["beta1", "kappa_g", "kappa"] in blocks
    assert any(all(n.startswith("sigma2_b[") for n in b) for b in blocks)


def test_bad_initial_state():
    spec = random_instance(2)
    bad = spec.default_state().with_values(sigma2_h=-1.0)
    with pytest.raises(ChainError, match="zero posterior density"):
        run_chain(spec, ChainConfig(burn_in=0, post_burn=10, thin=1, init_optimize=False), initial=bad)


def _short(seed=0, **kw):
    return ChainConfig(burn_in=40, post_burn=60, thin=3, latent_stride=6, seed=seed, **kw)


def test_trace_lengths_and_determinism():
    spec = random_instance(3)
    a = run_chain(spec, _short(7))
    b = run_chain(spec, _short(7))
    assert a.theta.shape == (20, len(a.names))
    assert a.delta.shape == (20, spec.n_delta)
    assert len(a.latents) == 10
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.delta, b.delta)
    assert all(np.array_equal(x.b, y.b) for x, y in zip(a.latents, b.latents))
    for rate in a.acceptance.values():
        assert 0 <= rate <= 1


def test_fixed_components_never_move():
    spec = random_instance(4).with_flags(fix_beta1=1.0, fix_kappa=1000.0)
    out = run_chain(spec, _short(1))
    assert np.all(out.column("beta1") == 1.0)
    assert np.all(out.column("kappa") == 1000.0)
    assert "beta1" not in out.free


def test_orthogonalized_latents():
    spec = random_instance(5, with_za=False).with_flags(orthogonalize=True)
    out = run_chain(spec, _short(2))
    for d in out.latents:
        L = spec.focal_process(d.b, d.fields)
        phi = d.fields["phi"]
        assert abs(np.cov(phi, L)[0, 1]) < 1e-12 * max(1.0, np.abs(phi).max() * np.abs(L).max())


def test_beta1_marginal_matches_quadrature():
    # everything but beta1 fixed; no co-located sites so delta is empty
    for seed in range(50):
        spec = random_instance(seed, proxy=True, with_za=False)
        if spec.n_delta == 0 and spec.n_obs >= 12:
            break
    th = random_theta(spec, seed)
    fixed = {k: v for k, v in th.values.items() if k != "beta1"}
    fixed.update(sigma2_h=0.05, sigma2_A=0.1, sigma2_eps=0.05, sigma2_sub=0.05)
    # data drawn with beta1 = 0.8 and a strong L signal, so beta1 is well identified
    rng = np.random.default_rng(0)
    b_L = np.r_[0.5, 2.0, -1.5, 0.0, 0.0]
    L = spec.Z_L @ b_L
    y = spec.P_Y @ L + 0.2 * rng.standard_normal(spec.n_obs)
    A = 0.8 * (spec.P_A @ L) + 0.3 * rng.standard_normal(spec.n_proxy)
    spec = replace(spec, fixed=fixed, y=y, A=A)
    assert [p.name for p in spec.free_parameters()] == ["beta1"]
    grid = np.linspace(-0.5, 2.0, 4001)
    lp = np.array([log_marginal_posterior(spec, HyperState({**fixed, "beta1": b}, np.zeros(0))) for b in grid])
    w = np.exp(lp - lp.max())
    w /= trapezoid(w, grid)
    mean = trapezoid(grid * w, grid)
    var = trapezoid((grid - mean) ** 2 * w, grid)
    assert w[0] < 1e-8 * w.max() and w[-1] < 1e-8 * w.max()
    out = run_chain(spec, ChainConfig(burn_in=1_000, post_burn=8_000, thin=1, seed=11))
    x = out.column("beta1")
    assert abs(x.mean() - mean) < 4 * mcse(x)
    assert x.var() == pytest.approx(var, rel=0.15)


def test_mode_finding_improves_start():
    spec = random_instance(6)
    target = PosteriorTarget(spec)
    from proxyfusion.mcmc import find_mode

    st0 = spec.default_state()
    v0, _ = target.profile(st0)
    st1, cov = find_mode(target, st0)
    v1, _ = target.profile(st1)
    assert v1 >= v0
    assert np.all(np.linalg.eigvalsh(cov) > 0)


@given(st.integers(0, 1000))
@settings(max_examples=10, deadline=None)
def test_ess_bounded_by_length(seed):
    x = np.random.default_rng(seed).standard_normal(200).cumsum()
    ess = effective_sample_size(x)
    assert 0 < ess <= 200 * math.log10(200)
