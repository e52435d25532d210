import numpy as np
import pytest

from ringclim.ring_data import rings_to_frame
from ringclim.synth import (SynthConfig, eps_moments, simulate, simulate_monthly_climate,
                            simulate_selection, theta_path, variance_ratio)


def test_degenerate_chain_gives_unit_widths():
    cfg = SynthConfig(n_trees=10, n_stands=2, n_years=15, theta=(0.0,) * 5, sigma2=0.0, tau2=0.0,
                      trend="flat")
    for r in simulate(cfg).rings:
        np.testing.assert_array_equal(r.widths, 1.0)


def test_invalid_configs():
    with pytest.raises(ValueError):
        SynthConfig(phi=1.0)
    with pytest.raises(ValueError):
        SynthConfig(n_years=0)
    with pytest.raises(ValueError):
        SynthConfig(n_trees=3, n_stands=5)


def test_variance_ratio_near_six():
    ratios = [variance_ratio(simulate(SynthConfig(seed=s))) for s in range(20)]
    assert np.mean(ratios) == pytest.approx(0.29 / 0.05, rel=0.1)


def test_error_moments_over_replicates():
    cfg = SynthConfig(n_trees=40, n_stands=4, n_years=30)
    stats = np.array([eps_moments(simulate(cfg.replace(seed=s))) for s in range(200)])
    target = 0.29 / (1 - 0.37**2)
    for col, truth in ((0, target), (1, 0.37)):
        x = stats[:, col]
        se = x.std(ddof=1) / np.sqrt(len(x))
        assert abs(x.mean() - truth) < 3 * se


def test_staggered_recruitment_counts_non_decreasing():
    data = simulate(SynthConfig(n_trees=60, n_stands=6, n_years=40, staggered=True, seed=4))
    first = np.array([r.first_year for r in data.rings])
    counts = [(first <= y).sum() for y in data.truth["years"]]
    assert np.all(np.diff(counts) >= 0) and counts[-1] == 60 and counts[0] >= 6


def test_theta_paths():
    cfg = SynthConfig(n_years=20, theta_path="step", change_index=10)
    path = theta_path(cfg)
    assert np.all(path[:10, 2] == -0.25) and np.all(path[10:, 2] == pytest.approx(-0.55))
    ramp = theta_path(cfg.replace(theta_path="ramp", change_length=4))
    assert ramp[12, 2] == pytest.approx(-0.25 - 0.15)
    walk = theta_path(cfg.replace(theta_path="walk", sigma_theta=(0.01,) * 5), np.random.default_rng(0))
    assert np.all(walk[0] == cfg.theta) and np.ptp(walk[:, 0]) > 0


def test_truth_record_and_schemas():
    data = simulate(SynthConfig(n_trees=12, n_stands=3, n_years=10, seed=1))
    a = data.truth["alpha"]
    F, path, v = data.truth["F"], data.truth["theta_path"], data.truth["v"]
    np.testing.assert_allclose(a, np.einsum("jtp,tp->jt", F, path) + v)
    r = data.rings[0]
    i = 0
    logy = data.truth["trend"][i] + a[data.truth["stand_of_tree"][i]] + data.truth["eps"][i]
    np.testing.assert_allclose(np.log(r.widths), logy)
    assert len(rings_to_frame(data.rings)) == 12 * 10
    assert set(data.climate.columns) >= {"stand_id", "year", "SNOW"}
    tf = data.truth_frame()
    assert len(tf) == 3 + 10 * 5
    np.testing.assert_array_equal(simulate(SynthConfig(n_trees=12, n_stands=3, n_years=10, seed=1))
                                  .truth["eps"], data.truth["eps"])


def test_selection_generator():
    y, X, beta, support = simulate_selection(n=300, p=28, seed=2)
    assert X.shape == (300, 28) and len(support) == 5
    np.testing.assert_allclose(X.std(0, ddof=1), 1.0)
    off = np.corrcoef(X.T)[np.triu_indices(28, 1)]
    assert 0.5 < off.mean() < 0.7
    assert set(np.flatnonzero(beta)) == set(support)


def test_monthly_climate_schema():
    df = simulate_monthly_climate(["A", "B"], range(2000, 2003))
    assert len(df) == 2 * 3 * 12 and (df["tmin_c"] < df["tmax_c"]).all() and (df["precip_mm"] > 0).all()
