import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epmixed import EPConfig, ModelSpec, PriorSpec, fit
from epmixed.ep import (
    CHANGE_KEYS, EPState, SiteStore, check_convergence, init_sites, mp_expectations, mp_match, mp_step,
    re_downdate_coef, re_tilted_moments, re_update_coef, refine_like_site, refine_re_site,
)
from epmixed.expfam import GaussianMoments, ImproperError, IWParams, iw_combine
from epmixed.model import Dataset
from epmixed.reference import dense_ep_fit, global_params, max_rel_diff, mc_tilted_oracle, random_instance
from epmixed.sparse import SparseGlobal, assemble

from conftest import small_problem


def test_init_sites_binomial():
    data, spec, _ = small_problem("binomial", L=3, obs=2)
    s = init_sites(data, spec)
    assert s.like_r.shape == (6, 1) and np.all(s.like_r == 0) and np.all(s.like_Q == 1.0)
    np.testing.assert_array_equal(s.re_Q, np.tile(np.eye(2), (3, 1, 1)))
    np.testing.assert_array_equal(s.re_Psi, np.tile(np.eye(2), (3, 1, 1)))
    assert np.all(s.re_nu == 4.0)
    np.testing.assert_array_equal(s.prior_sigma.Psi, spec.priors.Psi_Sigma)
    assert s.prior_sigma.nu == spec.priors.nu_Sigma


def test_init_sites_zip():
    data, spec, _ = small_problem("zip", L=2, obs=3)
    s = init_sites(data, spec)
    np.testing.assert_array_equal(s.like_r, np.zeros((6, 2)))
    np.testing.assert_array_equal(s.like_Q, np.tile(np.eye(2), (6, 1, 1)))


# -- random-effects tilted moments


@pytest.mark.parametrize("Q,expected", [(1, 2.0), (2, 5 / 3), (3, 1.5)])
def test_re_tilted_symmetric_case(Q, expected):
    mh, Sh = re_tilted_moments(GaussianMoments(np.zeros(Q), np.eye(Q)), IWParams(np.eye(Q), Q + 2.0))
    np.testing.assert_allclose(mh, 0.0, atol=1e-15)
    np.testing.assert_allclose(Sh, expected * np.eye(Q), rtol=1e-12)
    assert expected == pytest.approx((Q + 3) / (Q + 1), rel=1e-15)


def test_re_tilted_scalar_case():
    mh, Sh = re_tilted_moments(GaussianMoments([1.0], [[1.0]]), IWParams(1.0, 3.0))
    assert mh[0] == pytest.approx(5 / 3, abs=1e-12)
    assert Sh[0, 0] == pytest.approx(11 / 9, abs=1e-12)


def test_re_tilted_flat_weight_limit():
    mu, S = np.array([0.3, -1.2]), np.array([[1.5, 0.4], [0.4, 0.8]])
    mh, Sh = re_tilted_moments(GaussianMoments(mu, S), IWParams(1e12 * np.eye(2), 5.0))
    np.testing.assert_allclose(mh, mu, atol=1e-9)
    np.testing.assert_allclose(Sh, S, atol=1e-9)


def test_re_tilted_rejects_bad_inputs():
    with pytest.raises(ImproperError):
        re_tilted_moments(GaussianMoments([0.0], [[-1.0]]), IWParams(1.0, 3.0))
    with pytest.raises(ImproperError):
        re_tilted_moments(GaussianMoments([0.0], [[1.0]]), IWParams(-1.0, 3.0))


def test_re_tilted_matches_monte_carlo():
    r = np.random.default_rng(3)
    for k in range(5):
        Q = 1 + k % 3
        A = r.standard_normal((Q, Q))
        S = A @ A.T + 0.5 * np.eye(Q)
        B = r.standard_normal((Q, Q))
        Psi = B @ B.T + 0.5 * np.eye(Q)
        mu = r.standard_normal(Q)
        Pinv = np.linalg.inv(Psi)
        mc = mc_tilted_oracle(lambda u: 1.0 + np.einsum("ni,ij,nj->n", u, Pinv, u), GaussianMoments(mu, S),
                              200_000, seed=k)
        mh, Sh = re_tilted_moments(GaussianMoments(mu, S), IWParams(Psi, Q + 2.0))
        assert np.all(np.abs(mh - mc.mu) <= 5 * mc.se_mu + 1e-12)
        assert np.all(np.abs(Sh - mc.Sigma) <= 5 * mc.se_Sigma + 1e-12)


def test_power_ep_coefficients():
    assert re_downdate_coef(3.0) == 0.5
    assert re_update_coef(3.0) == -2.0


# -- moment propagation


def mp_fixture():
    # two groups, Q = 1, each u_l ~ N(0, 1) under q1
    g = SparseGlobal(np.ones((2, 1, 1)), np.zeros((2, 1, 1)), [[1.0]], np.zeros((2, 1)), [0.0])
    sites = SiteStore(
        like_r=np.zeros((0, 1)), like_Q=np.zeros((0, 1, 1)), re_r=np.zeros((2, 1)), re_Q=np.ones((2, 1, 1)),
        re_Psi=np.ones((2, 1, 1)), re_nu=np.full(2, 3.0), prior_r=np.zeros(1), prior_Q=np.eye(1),
        prior_sigma=IWParams(1.0, 3.0))
    priors = PriorSpec([0.0], [[1.0]], [[1.0]], 3.0)
    return g, sites, priors


def test_mp_worked_example():
    g, sites, priors = mp_fixture()
    E_Omega, E_omega = mp_expectations(np.zeros((2, 1)), np.ones((2, 1, 1)), priors.Psi_Sigma, 3.0)
    assert E_Omega[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert E_omega == pytest.approx(26 / 9, abs=1e-12)
    new = mp_step(g, sites, priors)
    assert new.nu == pytest.approx(18 / 26 + 4, abs=1e-10)
    assert new.nu == pytest.approx(4.6923, abs=1e-4)
    assert new.Psi[0, 0] == pytest.approx(18 / 26 + 2, abs=1e-10)
    np.testing.assert_allclose(sites.re_Psi[:, 0, 0], 0.5 * (18 / 26 + 1), atol=1e-10)
    np.testing.assert_allclose(sites.re_nu, 0.5 * (18 / 26 + 1) - 2, atol=1e-10)
    assert sites.re_Psi[0, 0, 0] == pytest.approx(0.84615, abs=1e-5)
    assert sites.re_nu[0] == pytest.approx(-1.1538, abs=1e-4)


def test_mp_expectations_match_monte_carlo():
    # Omega(u) = (Psi + sum u_l u_l') / (nu + L - Q - 1) is the full-conditional mean of Sigma
    r = np.random.default_rng(0)
    L, Q, nu = 3, 2, 4.0
    mu = r.standard_normal((L, Q))
    A = r.standard_normal((L, Q, Q))
    S = A @ A.transpose(0, 2, 1) + 0.3 * np.eye(Q)
    Psi = np.eye(Q)
    E_Omega, _ = mp_expectations(mu, S, Psi, nu)
    u = mu + np.einsum("lij,nlj->nli", np.linalg.cholesky(S), r.standard_normal((400_000, L, Q)))
    Om = (Psi + np.einsum("nli,nlj->nij", u, u)) / (nu + L - Q - 1)
    se = Om.std(axis=0) / np.sqrt(len(u))
    assert np.all(np.abs(Om.mean(axis=0) - E_Omega) <= 5 * se)


def test_mp_recombination_invariant():
    g, sites, priors = mp_fixture()
    new = mp_step(g, sites, priors)
    back = iw_combine(*sites.sigma_parts())
    assert back.nu == pytest.approx(new.nu, rel=1e-15)
    np.testing.assert_allclose(back.Psi, new.Psi, rtol=1e-15)


def test_mp_degenerate_posterior_is_prior_pull():
    L, Q = 4, 2
    Psi = np.array([[2.0, 0.3], [0.3, 1.0]])
    E_Omega, _ = mp_expectations(np.zeros((L, Q)), np.zeros((L, Q, Q)), Psi, 5.0)
    np.testing.assert_allclose(E_Omega, Psi / (5.0 + L - Q - 1), rtol=1e-15)


def test_mp_precondition():
    with pytest.raises(ValueError, match="nu_Sigma"):
        mp_expectations(np.zeros((1, 2)), np.ones((1, 2, 2)), np.eye(2), 4.0)


def test_mp_match_roundtrip():
    # matched inverse-Wishart has the requested mean
    E = np.array([[1.5, 0.2], [0.2, 0.7]])
    iw = mp_match(E, 3.0)
    np.testing.assert_allclose(iw.Psi / (iw.nu - 3), E, rtol=1e-14)


# -- convergence


def hist(values):
    return [{k: v for k in CHANGE_KEYS} for v in values]


def test_convergence_examples():
    cfg = EPConfig()
    assert check_convergence(hist([1, 1, 1, 1, 0]), cfg)
    assert not check_convergence(hist([1, 1, 1, 1, 1]), cfg)
    assert not check_convergence(hist([1, 1, 0]), cfg)
    assert not check_convergence(hist([1, 1, 1, 1, 0.05]), cfg)
    assert check_convergence(hist([1, 1, 1, 1, 0.049]), cfg)


def test_convergence_reference_modes():
    values = [1, 1, 1, 1, 0.5, 0.3, 0.1, 0.04]
    assert not check_convergence(hist(values), EPConfig())
    assert check_convergence(hist(values), EPConfig(conv_reference="initial"))


def test_config_validation():
    with pytest.raises(ValueError):
        EPConfig(damping=0.0)
    with pytest.raises(ValueError):
        EPConfig(min_passes=6, max_passes=5)
    with pytest.raises(ValueError):
        EPConfig(schedule="async")
    with pytest.raises(ValueError):
        EPConfig(conv_reference="median")


# -- site refinement


def single_obs_state(damping):
    # one probit observation, z = 0, x = 1, beta ~ N(0, 1)
    data = Dataset(y=[1.0], X=[[1.0]], Z=[[0.0]], group=[0], extra=[1.0], likelihood="binomial")
    spec = ModelSpec("binomial", PriorSpec([0.0], [[1.0]], [[1.0]], 3.0))
    return EPState(data, spec, EPConfig(damping=damping))


def apply(state, ref):
    assert not ref.skipped
    assert state.g.apply_delta_alpha(0, ref.lifted_dQ, ref.lifted_dr)
    state.sites.like_Q[0] += ref.dQ
    state.sites.like_r[0] += ref.dr


def test_full_step_reaches_tilted_moments_and_fixed_point():
    st_ = single_obs_state(1.0)
    st_.sites.like_Q[0] = 0.0
    st_.g = assemble(st_.sites, st_.data, st_.layout)
    apply(st_, refine_like_site(0, st_.g, st_.sites, st_.data, st_.cfg))
    m = st_.g.marginal_alpha(0)
    assert m.mu[1] == pytest.approx(1 / np.sqrt(np.pi), abs=1e-7)
    assert m.Sigma[1, 1] == pytest.approx(1 - 1 / np.pi, abs=1e-7)
    again = refine_like_site(0, st_.g, st_.sites, st_.data, st_.cfg)
    np.testing.assert_allclose(again.dr, 0.0, atol=1e-10)
    np.testing.assert_allclose(again.dQ, 0.0, atol=1e-10)


def test_damping_scales_step():
    full, half = single_obs_state(1.0), single_obs_state(0.5)
    a = refine_like_site(0, full.g, full.sites, full.data, full.cfg)
    b = refine_like_site(0, half.g, half.sites, half.data, half.cfg)
    np.testing.assert_allclose(b.dr, 0.5 * a.dr, rtol=1e-12)
    np.testing.assert_allclose(b.dQ, 0.5 * a.dQ, rtol=1e-12)


def test_re_site_fixed_point():
    data, spec = random_instance(1, "binomial", Q=1)
    post = fit(data, spec, EPConfig(damping=1.0, min_passes=30, max_passes=30))
    ref = refine_re_site(0, post.theta, post.sites, post.sigma, EPConfig(damping=1.0))
    assert not ref.skipped
    assert np.abs(ref.dr).max() < 1e-6 and np.abs(ref.dQ).max() < 1e-6


@pytest.mark.parametrize("likelihood", ["binomial", "zip"])
def test_two_group_fit_matches_dense(likelihood):
    data, spec, _ = small_problem(likelihood, L=2, obs=6)
    cfg = EPConfig(min_passes=6, max_passes=6)
    sp, de = [], []
    fit(data, spec, cfg, on_pass=lambda s: sp.append(global_params(s.g, s.sigma)))
    dense_ep_fit(data, spec, cfg, on_pass=lambda k, g, sig: de.append(global_params(g, sig)))
    assert len(sp) == len(de) == 6
    assert max(max_rel_diff(a, b) for a, b in zip(sp, de)) <= 1e-10


@pytest.mark.parametrize("likelihood", ["binomial", "zip"])
def test_mp_recombination_on_fits(likelihood):
    data, spec, _ = small_problem(likelihood, L=10, obs=5)
    checked = []

    def check(s):
        back = iw_combine(*s.sites.sigma_parts())
        checked.append(max(abs(back.nu - s.sigma.nu) / s.sigma.nu,
                           np.abs(back.Psi - s.sigma.Psi).max() / np.abs(s.sigma.Psi).max()))

    fit(data, spec, EPConfig(min_passes=8, max_passes=8), on_pass=check)
    assert len(checked) == 8 and max(checked) <= 1e-14


@pytest.mark.parametrize("likelihood", ["binomial", "zip"])
@pytest.mark.parametrize("schedule", ["sequential", "parallel"])
def test_no_skips_on_simulated_settings(likelihood, schedule):
    data, spec, _ = small_problem(likelihood, L=100)
    post = fit(data, spec, EPConfig(min_passes=20, max_passes=20, schedule=schedule))
    assert post.total_skips == 0


def test_probit_recovers_fixed_effects():
    data, spec, truth = small_problem("binomial", L=100, seed=7)
    post = fit(data, spec, EPConfig(max_passes=100))
    mu, sd = post.theta.marginal_summaries()
    beta = post.layout.beta_slice
    z = (mu[beta] - truth["beta"]) / sd[beta]
    assert np.all(np.abs(z) < 4), z


def test_schedules_agree_closely():
    data, spec, _ = small_problem("binomial", L=20)
    a = fit(data, spec, EPConfig(max_passes=60, conv_reference="initial"))
    b = fit(data, spec, EPConfig(max_passes=60, conv_reference="initial", schedule="parallel"))
    ma, sa = a.theta.marginal_summaries()
    mb, sb = b.theta.marginal_summaries()
    assert np.abs(ma - mb).max() < 0.05 * sa.max()


def test_posterior_summary_labels():
    data, spec, _ = small_problem("zip", L=3, obs=4)
    post = fit(data, spec, EPConfig(min_passes=5, max_passes=5))
    labels, mu, sd = post.summary()
    assert labels[0].startswith("u[") and labels[0].endswith("[1]")
    assert "lambda" in labels and labels[-3:] == ["Sigma[1,1]", "Sigma[2,1]", "Sigma[2,2]"]
    assert len(labels) == mu.size == sd.size
    assert np.all(sd > 0)


@given(st.integers(0, 10_000))
@settings(max_examples=5, deadline=None)
def test_global_stays_proper(seed):
    data, spec = random_instance(seed, "zip")
    post = fit(data, spec, EPConfig(min_passes=5, max_passes=5))
    Qd, _ = post.theta.to_dense()
    assert np.linalg.eigvalsh(Qd).min() > 0
    assert post.sigma.nu > post.layout.Q - 1
