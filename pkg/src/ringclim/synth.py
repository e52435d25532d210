"""Forward simulation of the hierarchical growth model for recovery tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .ring_data import RingSeries

DEFAULT_VARIABLES = ("FAL-DEF", "SPR-DEF", "SUM-DEF", "SUM-DEF-LAG", "SNOW")
DEFAULT_THETA = (-0.3, -0.2, -0.25, -0.25, 0.15)
_SPECIES = ("ABBA", "ACRU", "ACSA", "BEPA", "FRNI", "PIGL", "PIMA", "PIBA", "PIST", "POTR", "QURU", "THOC")


@dataclass(frozen=True)
class SynthConfig:
    n_trees: int = 200
    n_stands: int = 20
    n_years: int = 60
    p: int = 5
    start_year: int = 1948
    theta: tuple = DEFAULT_THETA
    theta_path: str = "constant"        # constant | step | ramp | walk
    change_index: int = 30              # year index where a step/ramp starts
    change_length: int = 10             # ramp duration (years)
    theta_change: tuple = (0.0, 0.0, -0.3, 0.0, 0.0)
    sigma_theta: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)   # walk increments sd^2
    sigma2: float = 0.29
    phi: float = 0.37
    tau2: float = 0.05
    trend: str = "negexp"               # negexp | flat
    trend_amplitude: float = 0.8
    trend_scale: float = 25.0
    tree_intercept_sd: float = 0.2
    staggered: bool = False
    max_age_at_start: int = 40
    seed: int = 0
    variables: tuple = DEFAULT_VARIABLES
    climate: np.ndarray | None = field(default=None, repr=False)   # (k, T, p)

    def __post_init__(self):
        for name in ("n_trees", "n_stands", "n_years", "p"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not abs(self.phi) < 1:
            raise ValueError("|phi| must be < 1")
        if self.n_trees < self.n_stands:
            raise ValueError("need at least one tree per stand")
        if len(self.theta) != self.p or len(self.variables) < self.p:
            raise ValueError("theta / variables length must match p")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class SyntheticData:
    rings: list
    climate: pd.DataFrame       # stand_id, year, <variables>
    truth: dict

    def truth_frame(self):
        years = self.truth["years"]
        rows = [(name, "", "", float(self.truth[name])) for name in ("sigma2", "phi", "tau2")]
        th = self.truth["theta_path"]
        for t, y in enumerate(years):
            for v, name in enumerate(self.truth["variables"]):
                rows.append(("theta", int(y), name, float(th[t, v])))
        return pd.DataFrame(rows, columns=["parameter", "year", "variable", "value"])


def theta_path(config: SynthConfig, rng=None):
    T, p = config.n_years, config.p
    base = np.asarray(config.theta, dtype=float)
    delta = np.asarray(config.theta_change[:p], dtype=float)
    path = np.tile(base, (T, 1))
    t = np.arange(T)[:, None]
    if config.theta_path == "step":
        path = path + (t >= config.change_index) * delta
    elif config.theta_path == "ramp":
        frac = np.clip((t - config.change_index) / max(config.change_length, 1), 0.0, 1.0)
        path = path + frac * delta
    elif config.theta_path == "walk":
        sd = np.sqrt(np.asarray(config.sigma_theta[:p], dtype=float))
        steps = rng.standard_normal((T, p)) * sd
        steps[0] = 0.0
        path = path + np.cumsum(steps, axis=0)
    elif config.theta_path != "constant":
        raise ValueError(f"unknown theta path {config.theta_path!r}")
    return path


def _ar1(rng, n, phi, sigma2):
    e = np.empty(n)
    if sigma2 == 0:
        return np.zeros(n)
    e[0] = rng.normal(0.0, np.sqrt(sigma2 / (1 - phi**2)))
    z = rng.normal(0.0, np.sqrt(sigma2), n)
    for t in range(1, n):
        e[t] = phi * e[t - 1] + z[t]
    return e


def simulate(config=SynthConfig()):
    """Draw rings, climate covariates and the full latent record from the model."""
    rng = np.random.default_rng(config.seed)
    n, k, T, p = config.n_trees, config.n_stands, config.n_years, config.p
    years = config.start_year + np.arange(T)
    if config.climate is not None:
        F = np.asarray(config.climate, dtype=float)
        if F.shape != (k, T, p):
            raise ValueError(f"climate must have shape {(k, T, p)}")
    else:
        F = rng.standard_normal((k, T, p))
    path = theta_path(config, rng)
    v = rng.normal(0.0, np.sqrt(config.tau2), (k, T)) if config.tau2 > 0 else np.zeros((k, T))
    alpha = np.einsum("jtp,tp->jt", F, path) + v

    stand_of_tree = np.arange(n) % k
    if config.staggered:
        # trees enter over the first 60% of the record and stay to the end;
        # one tree per stand is present from the start
        first_idx = rng.integers(0, max(1, int(0.6 * T)), n)
        first_idx[:k] = 0
    else:
        first_idx = np.zeros(n, dtype=int)
    age_at_first = rng.integers(1, config.max_age_at_start + 1, n)
    recruitment = years[first_idx] - np.where(first_idx > 0, 0, age_at_first)

    intercepts = (rng.normal(0.0, config.tree_intercept_sd, n)
                  if config.trend != "flat" and config.tree_intercept_sd > 0 else np.zeros(n))
    rings, eps_all, trend_all = [], np.full((n, T), np.nan), np.full((n, T), np.nan)
    for i in range(n):
        t0 = first_idx[i]
        yrs = years[t0:]
        age = yrs - recruitment[i]
        if config.trend == "flat":
            tr = np.zeros(yrs.size)
        elif config.trend == "negexp":
            tr = intercepts[i] + config.trend_amplitude * np.exp(-age / config.trend_scale)
        else:
            raise ValueError(f"unknown trend {config.trend!r}")
        eps = _ar1(rng, yrs.size, config.phi, config.sigma2)
        logy = tr + alpha[stand_of_tree[i], t0:] + eps
        eps_all[i, t0:] = eps
        trend_all[i, t0:] = tr
        j = stand_of_tree[i]
        rings.append(RingSeries(f"T{i:04d}", f"S{j:02d}", f"S{j:02d}-P{i % 3 + 1}",
                                _SPECIES[i % len(_SPECIES)], int(recruitment[i]), int(yrs[0]),
                                np.exp(logy)))

    stand_ids = [f"S{j:02d}" for j in range(k)]
    jj, tt = np.meshgrid(np.arange(k), np.arange(T), indexing="ij")
    climate = pd.DataFrame({"stand_id": np.array(stand_ids)[jj.ravel()], "year": years[tt.ravel()]})
    for v_idx, name in enumerate(config.variables[:p]):
        climate[name] = F[jj.ravel(), tt.ravel(), v_idx]

    truth = {"years": years, "variables": list(config.variables[:p]), "theta_path": path,
             "theta": path[0].copy(), "alpha": alpha, "v": v, "eps": eps_all, "trend": trend_all,
             "F": F, "sigma2": config.sigma2, "phi": config.phi, "tau2": config.tau2,
             "stand_of_tree": stand_of_tree, "first_index": first_idx, "recruitment": recruitment}
    return SyntheticData(rings, climate, truth)


def innovation_variance(data: SyntheticData):
    """Empirical variance of the tree-level AR(1) innovations."""
    eps, phi = data.truth["eps"], data.truth["phi"]
    w = eps[:, 1:] - phi * eps[:, :-1]
    return float(np.nanmean(w**2))


def variance_ratio(data: SyntheticData):
    """Tree-level (pure error) to stand-level (inter-annual) log-growth variance."""
    stand = float(np.mean(data.truth["v"] ** 2))
    return innovation_variance(data) / stand


def eps_moments(data: SyntheticData):
    """(variance, lag-1 autocorrelation) of the simulated tree errors, pooled,
    from unbiased zero-mean autocovariance estimates."""
    e = data.truth["eps"]
    m = np.isfinite(e)
    e0 = np.where(m, e, 0.0)
    pair = m[:, 1:] & m[:, :-1]
    g0 = np.sum(e0**2) / m.sum()
    g1 = np.sum(e0[:, 1:] * e0[:, :-1] * pair) / pair.sum()
    return float(g0), float(g1 / g0)


def simulate_selection(n=1200, p=28, n_true=5, rho=0.6, coef=(0.3, -0.25, 0.2, -0.2, 0.25),
                       noise_sd=1.0, seed=0, support=None):
    """Equicorrelated standard-normal regressors with a known sparse support.

    Returns (y, X standardized by column, beta, support indices).
    """
    rng = np.random.default_rng(seed)
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    shared = rng.standard_normal((n, 1))
    X = np.sqrt(rho) * shared + np.sqrt(1 - rho) * rng.standard_normal((n, p))
    X = (X - X.mean(axis=0)) / X.std(axis=0, ddof=1)
    support = np.sort(rng.choice(p, n_true, replace=False)) if support is None else np.asarray(support)
    beta = np.zeros(p)
    beta[support] = np.resize(np.asarray(coef, dtype=float), support.size) if n_true else 0.0
    y = X @ beta + rng.normal(0.0, noise_sd, n)
    return y, X, beta, support


def simulate_monthly_climate(stand_ids, years, seed=0, latitude=47.0):
    """Plausible mid-latitude monthly weather in the water-balance input schema.

    Not tied to the model's climate covariates; it only exercises the
    water-balance stage.
    """
    rng = np.random.default_rng(seed)
    months = np.arange(1, 13)
    cycle = -12.0 + 31.0 * np.sin(np.pi * (months - 1) / 11.0) ** 2   # ~ -12 C Jan, ~19 C Jul
    wet = 25.0 + 75.0 * np.sin(np.pi * (months - 1) / 11.0) ** 2
    frames = []
    for j, sid in enumerate(stand_ids):
        n = len(years) * 12
        tmean = np.tile(cycle, len(years)) + rng.normal(0.0, 2.0, n) + rng.normal(0.0, 0.5)
        spread = rng.uniform(4.0, 7.0, n)
        # year-level wetness so that dry springs and summers occur
        wetness = np.repeat(rng.lognormal(-0.1, 0.45, len(years)), 12)
        precip = rng.gamma(2.0, np.tile(wet, len(years)) * wetness / 2.0)
        frames.append(pd.DataFrame({
            "stand_id": sid, "year": np.repeat(np.asarray(years, dtype=int), 12),
            "month": np.tile(months, len(years)), "tmin_c": tmean - spread, "tmean_c": tmean,
            "tmax_c": tmean + spread, "precip_mm": precip,
            "latitude": latitude + 0.1 * j}))
    return pd.concat(frames, ignore_index=True)
