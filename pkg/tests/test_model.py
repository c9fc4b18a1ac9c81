import math

import numpy as np
import pytest
import scipy.sparse as sp
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from _instances import (
    dense_delta_posterior,
    dense_log_marginal,
    dense_pieces,
    dense_posterior,
    random_instance,
    random_theta,
)
from proxyfusion.grid import RegularGrid
from proxyfusion.model import (
    FusionModelSpec,
    HyperState,
    LatentField,
    ModelError,
    VariantFlags,
    evaluate,
    log_marginal_likelihood,
    log_marginal_posterior,
    log_prior,
    marginalize_b,
    marginalize_joint,
    marginalize_phi,
    obs_variance,
    orthogonalize,
    proxy_variance,
    sample_delta,
    sample_latents_offline,
    stacked_design,
)
from proxyfusion.mrf import tps_precision


# ---- variances -------------------------------------------------------------

def test_full_month_average_has_no_subsampling_term():
    v = obs_variance({"sigma2_eps": 1.5, "sigma2_sub": 3.0, "sigma2_h": 0.0}, [30], [30], [True])
    assert v[0] == pytest.approx(1.5 / 30)


def test_subsampling_arithmetic():
    v = obs_variance({"sigma2_eps": 1.5, "sigma2_sub": 3.0, "sigma2_h": 9.0}, [10], [30], [True])
    assert v[0] == pytest.approx(0.35)


def test_site_effect_added_once_for_non_colocated():
    th = {"sigma2_eps": 1.5, "sigma2_sub": 3.0, "sigma2_h": 0.4}
    v = obs_variance(th, [10, 10], [30, 30], [True, False])
    assert v[1] - v[0] == pytest.approx(0.4)


def test_n_i_above_month_rejected():
    with pytest.raises(ModelError, match="observation 1"):
        obs_variance({"sigma2_eps": 1.5, "sigma2_h": 1.0}, [3, 31], [30, 30], [False, False])


def test_proxy_variance_modes():
    th = {"sigma2_A": 0.3, "sigma2_alpha": 1.2}
    np.testing.assert_allclose(proxy_variance(th, 4), 0.3)
    v = proxy_variance(th, 2, "aod", counts=[30, 5], n_month=30)
    np.testing.assert_allclose(v, [0.3, 0.3 + 1.2 / 6])
    with pytest.raises(ModelError):
        proxy_variance(th, 2, "aod")


# ---- field marginalization -------------------------------------------------------

def _small_phi_problem(seed=0, kappa=0.8):
    rng = np.random.default_rng(seed)
    grid = RegularGrid(4, 5)
    prior = tps_precision(grid)
    rows = np.sort(rng.choice(20, 12, replace=False))
    P = sp.csr_matrix((np.ones(12), (np.arange(12), rows)), shape=(12, 20))
    va = rng.uniform(0.2, 1.0, 12)
    return grid, prior, P, va, kappa


def _phi_spec(prior, P, va_const, kappa):
    n_a = P.shape[0]
    m = prior.dim
    return FusionModelSpec(
        y=np.zeros(2), Z_y=np.zeros((2, 0)), Z_L=np.ones((m, 1)),
        P_Y=sp.csr_matrix((np.ones(2), ([0, 1], [0, 1])), shape=(2, m)),
        groups=np.array([-1]), smooth_names=(), n_i=np.ones(2) * 30, n_month=np.ones(2) * 30,
        colocated_site=np.full(2, -1), A=np.zeros(n_a), P_A=P, Z_a=None,
        fields=(LatentField("phi", prior, "kappa", None, P, False),),
    ), HyperState({"beta1": 0.5, "sigma2_eps": 1.5, "sigma2_h": 1.0, "sigma2_A": va_const, "kappa": kappa})


def test_sigma_a_inverse_matches_dense_woodbury():
    _, prior, P, _, kappa = _small_phi_problem()
    spec, th = _phi_spec(prior, P, 0.37, kappa)
    marg = marginalize_phi(spec, th)
    Pd = P.toarray()
    Q = prior.Q.toarray()
    W = np.eye(12) / 0.37
    Vphi = np.linalg.inv(Pd.T @ W @ Pd + kappa * Q)
    oracle = W - W @ Pd @ Vphi @ Pd.T @ W
    x = np.random.default_rng(1).standard_normal((12, 3))
    np.testing.assert_allclose(marg.apply(x), oracle @ x, atol=1e-9)


def _generalized_det_oracle(Pd, Q, kappa, va):
    """log|Sigma_A|^{-1/2} restricted to the complement of the null image.

    Split phi = N a + phi_perp with N an orthonormal null basis of Q, a flat
    and phi_perp ~ N(0, (kappa Q)^+).  Then A - P N a ~ N(0, C) with
    C = V_A + P (kappa Q)^+ P', and integrating a leaves the determinant
    |C| |(PN)' C^{-1} (PN)|.
    """
    w, v = np.linalg.eigh(Q)
    pos = w > 1e-9 * w.max()
    Qplus = (v[:, pos] / w[pos]) @ v[:, pos].T
    C = np.diag(va) + Pd @ (Qplus / kappa) @ Pd.T
    N = v[:, ~pos]
    PN = Pd @ N
    Ci = np.linalg.inv(C)
    return -0.5 * (np.linalg.slogdet(C)[1] + np.linalg.slogdet(PN.T @ Ci @ PN)[1])


def test_log_det_term_matches_generalized_determinant():
    _, prior, P, _, kappa = _small_phi_problem(3, 2.3)
    spec, th = _phi_spec(prior, P, 0.6, kappa)
    marg = marginalize_phi(spec, th)
    ev = np.linalg.eigvalsh(prior.Q.toarray())
    half_pdet = 0.5 * np.sum(np.log(ev[ev > 1e-9 * ev.max()]))
    oracle = _generalized_det_oracle(P.toarray(), prior.Q.toarray(), kappa, np.full(12, 0.6))
    assert marg.log_det_term + half_pdet == pytest.approx(oracle, abs=1e-8)


def test_sigma_a_inverse_three_zero_eigenvalues():
    _, prior, P, _, kappa = _small_phi_problem(4)
    spec, th = _phi_spec(prior, P, 0.5, kappa)
    S = marginalize_phi(spec, th).dense()
    ev = np.linalg.eigvalsh((S + S.T) / 2)
    assert np.sum(np.abs(ev) < 1e-8 * np.abs(ev).max()) == 3
    # null image of Q is annihilated
    np.testing.assert_allclose(S @ (P @ prior.null_basis), 0.0, atol=1e-9)


def test_large_kappa_projects_out_null_image():
    _, prior, P, _, _ = _small_phi_problem(5)
    spec, th = _phi_spec(prior, P, 0.5, 1e9)
    S = marginalize_phi(spec, th).dense()
    B = P @ prior.null_basis
    proj = np.eye(12) - B @ np.linalg.solve(B.T @ B, B.T)
    np.testing.assert_allclose(S, proj / 0.5, atol=1e-5)


def test_joint_decouples_at_zero_beta1():
    spec = random_instance(11, joint=True, with_za=False)
    th = random_theta(spec, 11).with_values(beta1=0.0)
    joint = marginalize_joint(spec, th)
    # g lives only on Y rows, phi only on A rows: block diagonal Sigma^{-1}
    S = joint.dense()
    nY = spec.n_obs
    np.testing.assert_allclose(S[:nY, nY:], 0.0, atol=1e-10)
    phi_only = marginalize_phi(spec, th).dense()
    np.testing.assert_allclose(S[nY:, nY:], phi_only, atol=1e-9)


def test_joint_kappas_enter_separately():
    spec = random_instance(12, joint=True)
    th = random_theta(spec, 12)
    base = marginalize_joint(spec, th).log_det_term
    up = marginalize_joint(spec, th.with_values(kappa_g=th["kappa_g"] * 2)).log_det_term
    up2 = marginalize_joint(spec, th.with_values(kappa=th["kappa"] * 2)).log_det_term
    assert up != pytest.approx(up2)
    assert np.isfinite(base)


# ---- the anchor: dense joint-Gaussian oracle ----------------------------------------

@pytest.mark.parametrize("kw", [dict(), dict(joint=True), dict(proxy=False), dict(aod=True)])
def test_log_marginal_matches_dense_oracle(kw):
    for seed in range(4):
        spec = random_instance(seed, **kw)
        th = random_theta(spec, seed)
        val, const = dense_log_marginal(spec, th)
        got = log_marginal_likelihood(spec, th)
        assert got + const == pytest.approx(val, abs=1e-7 * max(1.0, abs(val)))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_log_marginal_oracle_property(seed):
    spec = random_instance(seed, joint=seed % 3 == 0)
    th = random_theta(spec, seed)
    val, const = dense_log_marginal(spec, th)
    assert log_marginal_likelihood(spec, th) + const == pytest.approx(val, rel=1e-7, abs=1e-7)


def test_posterior_adds_priors():
    spec = random_instance(2)
    th = random_theta(spec, 2)
    lp = log_marginal_posterior(spec, th)
    s2 = th["sigma2_h"]
    ld = -0.5 * th.delta @ th.delta / s2 - 0.5 * th.delta.size * math.log(2 * math.pi * s2)
    assert lp == pytest.approx(log_marginal_likelihood(spec, th) + ld + log_prior(spec, th))


def test_out_of_support_is_minus_inf():
    spec = random_instance(3)
    th = random_theta(spec, 3)
    assert log_marginal_posterior(spec, th.with_values(sigma2_h=-1.0)) == -math.inf
    assert log_marginal_posterior(spec, th.with_values(sigma2_A=100.0**2 + 1)) == -math.inf
    assert log_marginal_posterior(spec, th.with_values(beta1=501.0)) == -math.inf


def test_prior_densities():
    spec = random_instance(4, with_za=False)
    th = random_theta(spec, 4)
    # sd-uniform: doubling a variance costs -1/2 log 2; doubling kappa costs -3/2 log 2
    d1 = log_prior(spec, th.with_values(sigma2_A=2 * th["sigma2_A"])) - log_prior(spec, th)
    d2 = log_prior(spec, th.with_values(kappa=2 * th["kappa"])) - log_prior(spec, th)
    assert d1 == pytest.approx(-0.5 * math.log(2))
    assert d2 == pytest.approx(-1.5 * math.log(2))
    # smooth sd cap at 10
    assert log_prior(spec, th.with_values(**{"sigma2_b[L:s]": 101.0})) == -math.inf


def test_no_discrepancy_equals_plain_two_likelihood():
    spec = random_instance(5)
    from dataclasses import replace

    nod = replace(spec, fields=(), flags=VariantFlags(include_discrepancy=False))
    th = random_theta(spec, 5)
    ev = evaluate(nod, th)
    # Sigma_A = V_A exactly: dense check of the likelihood
    d = dense_pieces(nod, th)
    X, W = d["Zb"], 1 / d["V"]
    r = d["data"] - d["Pd"] @ th.delta
    lam = d["lam"]
    H = X.T @ (W[:, None] * X) + np.diag(1 / lam)
    h = X.T @ (W * r)
    val = (-0.5 * np.sum(np.log(lam)) - 0.5 * np.sum(np.log(d["V"])) - 0.5 * np.linalg.slogdet(H)[1]
           - 0.5 * (r @ (W * r) - h @ np.linalg.solve(H, h)))
    assert ev.log_likelihood(th.delta) == pytest.approx(val, abs=1e-8)


def test_scaling_data_changes_only_exponent():
    spec = random_instance(6)
    from dataclasses import replace

    th = random_theta(spec, 6).with_delta(np.zeros(spec.n_delta))
    a = evaluate(spec, th).components(th.delta)
    b = evaluate(replace(spec, y=2 * spec.y, A=2 * spec.A), th).components(th.delta)
    for key in ("log_lambda", "field_det", "coef_det"):
        assert a[key] == pytest.approx(b[key])
    assert b["quadratic"] == pytest.approx(4 * a["quadratic"])


# ---- coefficients and delta ------------------------------------------------------------

def test_b_posterior_matches_dense():
    for seed, kw in [(7, {}), (8, dict(joint=True))]:
        spec = random_instance(seed, **kw)
        th = random_theta(spec, seed)
        post = marginalize_b(spec, th)
        mean, cov, nf = dense_posterior(spec, th)
        np.testing.assert_allclose(post.mean, mean[nf:], rtol=1e-6, atol=1e-6)
        # compare the proper part of the covariance: penalized/covariate blocks
        np.testing.assert_allclose(post.cov(), cov[nf:, nf:], rtol=1e-6, atol=1e-3)


def test_gls_limit_without_proxy():
    rng = np.random.default_rng(0)
    n, m = 12, 16
    P_Y = sp.csr_matrix((np.ones(n), (np.arange(n), rng.integers(0, m, n))), shape=(n, m))
    Z_y = rng.standard_normal((n, 2))
    spec = FusionModelSpec(
        y=rng.standard_normal(n), Z_y=Z_y, Z_L=np.ones((m, 1)), P_Y=P_Y,
        groups=np.array([-1, -1, -1]), smooth_names=(), n_i=np.full(n, 30.0), n_month=np.full(n, 30.0),
        colocated_site=np.full(n, -1), fixed={"sigma2_eps": 30.0}, flags=VariantFlags(mode="no_proxy"),
    )
    th = HyperState({"sigma2_eps": 30.0, "sigma2_h": 1e-300}, np.zeros(0))
    post = marginalize_b(spec, th)
    X = np.column_stack([Z_y, np.ones(n)])
    ols = np.linalg.lstsq(X, spec.y, rcond=None)[0]
    np.testing.assert_allclose(post.mean, ols, atol=1e-5)


def test_zero_beta1_leaves_L_columns_to_observations():
    spec = random_instance(9, with_za=True)
    Z = stacked_design(spec, 0.0)
    nY = spec.n_obs
    np.testing.assert_array_equal(Z[nY:, : spec.p_y + spec.p_L], 0.0)
    assert np.any(Z[nY:, spec.p_y + spec.p_L :] != 0)


def test_delta_conditional_matches_dense():
    for seed in range(20):
        spec = random_instance(seed)
        if spec.n_delta:
            break
    th = random_theta(spec, seed)
    mean, prec = evaluate(spec, th).delta_conditional()
    dm, dc = dense_delta_posterior(spec, th)
    np.testing.assert_allclose(mean, dm, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(np.linalg.inv(prec), dc, rtol=1e-6, atol=1e-8)


def test_single_colocated_pair_symmetric_data():
    # one site with two co-located monitors, no fields and only a fixed intercept
    n = 4
    m = 16
    P_Y = sp.csr_matrix((np.ones(n), (np.arange(n), [0, 0, 5, 9])), shape=(n, m))
    y = np.array([1.0, 1.0, -0.5, 0.5])
    spec = FusionModelSpec(
        y=y, Z_y=np.zeros((n, 0)), Z_L=np.ones((m, 1)), P_Y=P_Y, groups=np.array([-1]),
        smooth_names=(), n_i=np.full(n, 30.0), n_month=np.full(n, 30.0),
        colocated_site=np.array([0, 0, -1, -1]), flags=VariantFlags(mode="no_proxy"),
    )
    th = HyperState({"sigma2_eps": 1.5, "sigma2_h": 0.8}, np.zeros(1))
    mean, prec = evaluate(spec, th).delta_conditional()
    dm, dc = dense_delta_posterior(spec, th)
    np.testing.assert_allclose(mean, dm, atol=1e-8)
    # with a flat intercept, the site effect is the shrunken site-vs-rest contrast
    assert mean[0] > 0


def test_no_colocated_sites_gives_empty_delta():
    spec = random_instance(0)
    spec2 = replace(spec, colocated_site=np.full(spec.n_obs, -1))
    th = random_theta(spec2, 0)
    assert sample_delta(spec2, th, np.random.default_rng(0)).size == 0


def test_delta_draws_seeded():
    for seed in range(20):
        spec = random_instance(seed)
        if spec.n_delta:
            break
    th = random_theta(spec, seed)
    a = sample_delta(spec, th, np.random.default_rng(3))
    b = sample_delta(spec, th, np.random.default_rng(3))
    assert np.array_equal(a, b)


# ---- offline latent draws -------------------------------------------------------------

def test_phi_conditional_mean_formula():
    spec = random_instance(13, with_za=True)
    th = random_theta(spec, 13)
    ev = evaluate(spec, th)
    b = ev.coefficient_posterior(th.delta).mean
    got = ev.field_mean(b, th.delta)
    _, b_L, b_a = spec.split_b(b)
    resid = spec.A - spec.Z_a @ b_a - th["beta1"] * spec.PA_ZL @ b_L
    Pphi = spec.fields[0].a_map.toarray()
    W = 1 / th["sigma2_A"]
    V = np.linalg.inv(W * Pphi.T @ Pphi + th["kappa"] * spec.fields[0].prior.Q.toarray())
    np.testing.assert_allclose(got, V @ (W * Pphi.T @ resid), atol=1e-9)


def test_degenerate_zero_data_gives_zero_phi_mean():
    from dataclasses import replace

    spec = random_instance(14, with_za=False)
    spec = replace(spec, A=np.zeros(spec.n_proxy))
    th = random_theta(spec, 14)
    ev = evaluate(spec, th)
    np.testing.assert_allclose(ev.field_mean(np.zeros(spec.n_coef), th.delta), 0.0, atol=1e-12)


def test_phi_draw_covariance():
    _, prior, P, _, kappa = _small_phi_problem(6, 3.0)
    spec, th = _phi_spec(prior, P, 0.5, kappa)
    ev = evaluate(spec, th)
    rng = np.random.default_rng(0)
    b = np.zeros(spec.n_coef)
    resid = ev.d - ev.Z @ b
    draws = np.array([ev.marginal.field_conditional(resid, rng) for _ in range(10_000)])
    Pd = P.toarray()
    target = np.linalg.inv(Pd.T @ Pd / 0.5 + kappa * prior.Q.toarray())
    d = np.diag(target)
    se = np.sqrt((np.outer(d, d) + target**2) / 10_000)
    z = (np.abs(np.cov(draws.T) - target) / se)[np.triu_indices(20)]
    # 210 distinct entries: a couple of 3-SE exceedances are expected by chance
    assert np.mean(z <= 3) >= 0.98 and z.max() < 5


def test_offline_draws_have_expected_shapes():
    spec = random_instance(15, joint=True)
    th = random_theta(spec, 15)
    draw = sample_latents_offline(spec, th, th.delta, np.random.default_rng(0))
    assert draw.b.shape == (spec.n_coef,)
    assert set(draw.fields) == {"g", "phi"}
    assert draw.fields["g"].shape == (spec.fields[0].dim,)
    assert np.all(np.isfinite(draw.b))


# ---- beta1 structure ----------------------------------------------------------------

def test_conditional_proxy_density_is_quadratic_in_beta1():
    spec = random_instance(16, with_za=False)
    th = random_theta(spec, 16)
    b = np.random.default_rng(0).standard_normal(spec.n_coef)
    marg = marginalize_phi(spec, th)

    def cond(beta1):
        r = spec.A - beta1 * spec.PA_ZL @ spec.split_b(b)[1]
        return -0.5 * r @ marg.apply(r)

    xs = np.array([-1.0, 0.3, 2.0])
    coef = np.polyfit(xs, [cond(x) for x in xs], 2)
    for x in [-3.0, 0.7, 5.0]:
        assert cond(x) == pytest.approx(np.polyval(coef, x), rel=1e-9, abs=1e-9)


def test_marginal_is_not_quadratic_in_beta1():
    # the coefficient posterior precision depends on beta1^2, so the log
    # marginal posterior is a ratio of polynomials in beta1, not a quadratic
    spec = random_instance(17, with_za=False)
    th = random_theta(spec, 17)
    f = lambda x: log_marginal_likelihood(spec, th.with_values(beta1=x))
    xs = np.array([-1.0, 0.3, 2.0])
    coef = np.polyfit(xs, [f(x) for x in xs], 2)
    assert abs(f(5.0) - np.polyval(coef, 5.0)) > 1e-3


# ---- orthogonalization ------------------------------------------------------------------

@given(st.integers(0, 10_000), st.integers(10, 200))
@settings(max_examples=40, deadline=None)
def test_orthogonalized_phi_uncorrelated_with_L(seed, n):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal(n) * 3
    phi = 0.7 * L + rng.standard_normal(n) + 2
    out = orthogonalize(phi, L)
    assert abs(np.cov(out.phi, L)[0, 1]) < 1e-12 * max(1, np.abs(phi).max() * np.abs(L).max())
    assert abs(out.phi.mean()) < 1e-12 * max(1, np.abs(phi).max())
    np.testing.assert_allclose(out.phi + out.removed, phi, atol=1e-12)
    np.testing.assert_array_equal(out.L, L)


def test_orthogonal_phi_unchanged_and_multiple_vanishes():
    L = np.array([1.0, 2.0, 3.0, 4.0])
    phi = np.array([1.0, -1.0, -1.0, 1.0])
    np.testing.assert_allclose(orthogonalize(phi, L).phi, phi, atol=1e-12)
    np.testing.assert_allclose(orthogonalize(2 * L, L).phi, 0.0, atol=1e-12)


def test_constant_L_projects_on_mean_only():
    phi = np.array([1.0, 3.0, 5.0])
    out = orthogonalize(phi, np.full(3, 2.0))
    np.testing.assert_allclose(out.phi, phi - 3.0)
    assert out.coef[1] == 0.0


# ---- variants ------------------------------------------------------------------------

def test_variant_flags_validated():
    with pytest.raises(ModelError):
        VariantFlags(mode="both")
    with pytest.raises(ModelError):
        VariantFlags(mode="no_proxy", fix_beta1=1.0)


def test_fixed_components_are_not_free():
    spec = random_instance(18).with_flags(fix_beta1=1.0, fix_kappa=1000.0)
    free = {p.name for p in spec.free_parameters()}
    assert "beta1" not in free and "kappa" not in free and "sigma2_eps" not in free
    st0 = spec.default_state()
    assert st0["beta1"] == 1.0 and st0["kappa"] == 1000.0
