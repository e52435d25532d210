import numpy as np
import pytest

from ringclim.fce import (DesignCache, Priors, SamplerConfig, alpha_full_conditional, fit_fce,
                          gibbs_sweep, initial_state, log_posterior, theta_summary,
                          tree_residuals, update_beta, variance_summary)
from ringclim.sampler_core import DivergenceError, ar1_stationary_cov


@pytest.fixture(scope="module")
def state_and_cache(small_design):
    st = initial_state(small_design)
    st.phi, st.sigma2, st.tau2, st.sigma2_beta = 0.4, 0.3, 0.07, 0.5
    return st, DesignCache(small_design, Priors())


def test_alpha_conditional_matches_dense_gls(small_design, state_and_cache):
    d = small_design
    st, cache = state_and_cache
    diag, sup, lin = alpha_full_conditional(st, cache)
    j = 2
    Q = np.eye(d.T) / st.tau2
    b = (d.F[j] @ st.theta) * d.stand_mask[j] / st.tau2
    for i in np.flatnonzero(d.stand_of_tree == j):
        obs = np.flatnonzero(d.mask[i])
        P = np.eye(d.T)[obs]
        Si = np.linalg.inv(ar1_stationary_cov(obs.size, st.phi, st.sigma2))
        r = d.log_y[i, obs] - d.X[i, obs] @ st.beta[i]
        Q += P.T @ Si @ P
        b += P.T @ Si @ r
    np.testing.assert_allclose(diag[j], np.diag(Q), atol=1e-9)
    np.testing.assert_allclose(sup[j], np.diag(Q, 1), atol=1e-9)
    np.testing.assert_allclose(lin[j], b, atol=1e-9)


def test_beta_conditional_matches_dense(small_design, state_and_cache):
    d = small_design
    st, cache = state_and_cache
    i = 5
    obs = np.flatnonzero(d.mask[i])
    Si = np.linalg.inv(ar1_stationary_cov(obs.size, st.phi, st.sigma2))
    X = d.X[i, obs]
    r = d.log_y[i, obs] - st.alpha[d.stand_of_tree[i], obs]
    null = d.basis.null_space()
    Q = X.T @ Si @ X + d.basis.penalty / st.sigma2_beta + null @ null.T / 100.0
    mean = np.linalg.solve(Q, X.T @ Si @ r)
    # the sampler's draw with z = 0 is the conditional mean
    np.testing.assert_allclose(cache.xtwx(st.phi)[i] / st.sigma2, X.T @ Si @ X, atol=1e-9)
    draws = []
    s2 = st.copy()
    rng = np.random.default_rng(0)
    for _ in range(4000):
        update_beta(s2, cache, rng)
        draws.append(s2.beta[i])
    se = np.sqrt(np.diag(np.linalg.inv(Q))) / np.sqrt(len(draws))
    assert np.all(np.abs(np.mean(draws, 0) - mean) < 5 * se)


def test_residuals_zero_off_mask(small_design, state_and_cache):
    st, cache = state_and_cache
    assert np.all(tree_residuals(st, cache)[~small_design.mask] == 0)


def test_same_seed_same_draws_and_chains_differ(small_design):
    cfg = SamplerConfig(iterations=60, burn_in=20, seed=4, chains=2)
    a, b = fit_fce(small_design, cfg), fit_fce(small_design, cfg)
    np.testing.assert_array_equal(a.draws["theta"], b.draws["theta"])
    assert not np.allclose(a.draws["theta"][0], a.draws["theta"][1])
    assert a.draws["theta"].shape == (2, 40, 5)
    assert np.isnan(a.draws["alpha"][0, 0][~small_design.stand_mask]).all()


def test_parallel_chains_match_serial(small_design):
    cfg = SamplerConfig(iterations=30, burn_in=10, seed=2, chains=2)
    np.testing.assert_array_equal(fit_fce(small_design, cfg).draws["phi"],
                                  fit_fce(small_design, cfg, n_jobs=2).draws["phi"])


def test_fixed_values_are_held(small_design):
    cfg = SamplerConfig(iterations=30, burn_in=10, fixed={"phi": 0.25, "tau2": 0.05})
    ch = fit_fce(small_design, cfg)
    assert np.all(ch["phi"] == 0.25) and np.all(ch["tau2"] == 0.05)


def test_theta_conditional_is_exact_when_alpha_known(small_data, small_design):
    # with alpha and tau2 fixed at truth, theta draws follow the conjugate regression posterior
    d, truth = small_design, small_data.truth
    cfg = SamplerConfig(iterations=3000, burn_in=0, update_order=("theta",),
                        fixed={"tau2": truth["tau2"]})
    st = initial_state(d)
    st.alpha = truth["alpha"].copy()
    st.tau2 = truth["tau2"]
    cache = DesignCache(d, cfg.priors)
    rng = np.random.default_rng(1)
    draws = []
    for _ in range(cfg.iterations):
        st = gibbs_sweep(st, d, cfg, rng, cache)
        draws.append(st.theta)
    Fo = d.F[d.stand_mask]
    Q = Fo.T @ Fo / truth["tau2"] + np.eye(d.p) / 100.0
    mean = np.linalg.solve(Q, Fo.T @ truth["alpha"][d.stand_mask] / truth["tau2"])
    np.testing.assert_allclose(np.mean(draws, 0), mean, atol=5 * np.sqrt(np.diag(np.linalg.inv(Q))).max() / np.sqrt(3000))
    np.testing.assert_allclose(np.cov(np.array(draws).T), np.linalg.inv(Q), rtol=0.15, atol=1e-5)


def test_short_fit_recovers_truth_roughly(small_data, small_design):
    ch = fit_fce(small_design, SamplerConfig(iterations=800, burn_in=300, seed=1))
    s = theta_summary(ch)
    err = np.abs(s["mean"].to_numpy() - small_data.truth["theta"])
    assert np.all(err < 4 * (s["q97.5"] - s["q2.5"]).to_numpy() / 3.92 + 0.05)
    v = variance_summary(ch).set_index("parameter")
    assert 0.1 < v.loc["phi", "mean"] < 0.6 and 0.2 < v.loc["sigma2", "mean"] < 0.4
    assert 0.2 < ch.meta["phi_acceptance"][0] < 0.7
    assert np.all(np.isfinite(ch["logpost"]))


def test_log_posterior_increases_from_poor_start(small_design):
    st = initial_state(small_design)
    cache = DesignCache(small_design, Priors())
    bad = st.copy()
    bad.theta = st.theta + 3.0
    assert log_posterior(bad, cache, Priors()) < log_posterior(st, cache, Priors())


def test_divergence_detected(small_design):
    with pytest.raises(DivergenceError):
        fit_fce(small_design, SamplerConfig(iterations=5, burn_in=1, divergence_limit=1e-9))


def test_stream_and_store_beta(tmp_path, small_design):
    cfg = SamplerConfig(iterations=20, burn_in=5, store_beta=True, stream_path=str(tmp_path / "run"))
    ch = fit_fce(small_design, cfg)
    assert ch.draws["beta"].shape[2:] == (small_design.n, small_design.basis.n_basis)
    assert (tmp_path / "run.chain0.csv").exists()
    with pytest.raises(ValueError):
        SamplerConfig(iterations=10, burn_in=10)
