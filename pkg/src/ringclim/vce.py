"""Variable-climate-effects (VCE) model: random-walk climate coefficients.

The stand level of the FCE model becomes a dynamic linear model::

    alpha[j, t] = f[j, t]' theta[t] + v[j, t],    v ~ N(0, tau2)
    theta[t]    = theta[t-1] + w[t],              w ~ N(0, Sigma_theta)

with ``theta[0] ~ N(m0, P0^-1)``.  Inside each Gibbs sweep the coefficient
path is drawn by forward filtering, backward sampling conditional on the
current stand effects.

In ``strict`` mode every stand-year row informs only its own year, which is
the exact full conditional.  ``windowed`` mode lets year ``t`` also use the
rows of years ``t-h .. t+h`` (h = 2 gives the five-year window); rows are then
reused by up to ``2h + 1`` states, so the draw targets a pseudo-posterior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import pandas as pd
from scipy import stats

from .design import ModelDesign
from .fce import SamplerConfig, _assemble_chain, map_chains, run_chain
from .sampler_core import SamplerError, sample_inverse_gamma, sample_mvn_cov

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowPlan:
    T: int
    half_width: int = 2
    mode: str = "strict"     # strict | windowed

    def __post_init__(self):
        if self.mode not in ("strict", "windowed"):
            raise ValueError(f"unknown window mode {self.mode!r}")
        if self.half_width < 0:
            raise ValueError("half_width must be >= 0")

    def years_for(self, t):
        """Year indices whose rows inform state ``t``."""
        if self.mode == "strict":
            return [t]
        return list(range(max(0, t - self.half_width), min(self.T, t + self.half_width + 1)))

    def aggregate(self, per_year):
        """Sum per-year information arrays (T, ...) over each state's window."""
        if self.mode == "strict" or self.half_width == 0:
            return per_year
        c = np.concatenate([np.zeros((1, *per_year.shape[1:])), np.cumsum(per_year, axis=0)])
        t = np.arange(self.T)
        lo = np.maximum(0, t - self.half_width)
        hi = np.minimum(self.T, t + self.half_width + 1)
        return c[hi] - c[lo]


def year_information(F, stand_mask, alpha=None):
    """Per-year sums F'F (T, p, p) and F'alpha (T, p) over observed stands."""
    Fm = np.where(stand_mask[..., None], F, 0.0)
    G = np.einsum("jtp,jtq->tpq", Fm, Fm)
    if alpha is None:
        return G
    h = np.einsum("jtp,jt->tp", Fm, np.where(stand_mask, alpha, 0.0))
    return G, h


@dataclass
class FilterResult:
    m: np.ndarray   # (T, p) filtered means
    C: np.ndarray   # (T, p, p) filtered covariances
    min_eig: np.ndarray = field(default=None)   # smallest eigenvalue of C_t before any jitter

    @property
    def T(self):
        return self.m.shape[0]


def _as_cov(sigma_theta, p):
    s = np.asarray(sigma_theta, dtype=float)
    if s.ndim == 0:
        return s * np.eye(p)
    if s.ndim == 1:
        return np.diag(s)
    return s


def filter_information(G, h, sigma_theta, tau2, m0, P0, jitter=1e-10):
    """Kalman filter given per-state information sums.

    ``G[t] = sum f f'`` and ``h[t] = sum f alpha`` over the rows informing
    state ``t``.  ``P0`` is the prior precision of the first state (may be
    zero for a diffuse start when ``G[0]`` has full rank).
    """
    T, p = h.shape
    S = _as_cov(sigma_theta, p)
    eye = np.eye(p)
    m = np.empty((T, p))
    C = np.empty((T, p, p))
    min_eig = np.empty(T)
    Q0 = np.asarray(P0, dtype=float) + G[0] / tau2
    try:
        C[0] = np.linalg.inv(Q0)
    except np.linalg.LinAlgError:
        raise SamplerError("first state has a singular posterior precision") from None
    m[0] = C[0] @ (np.asarray(P0, dtype=float) @ np.asarray(m0, dtype=float) + h[0] / tau2)
    for t in range(T):
        if t > 0:
            R = C[t - 1] + S
            A = eye + R @ G[t] / tau2
            sol = np.linalg.solve(A, np.column_stack([R, m[t - 1] + R @ h[t] / tau2]))
            C[t] = sol[:, :p]
            m[t] = sol[:, p]
        C[t] = 0.5 * (C[t] + C[t].T)
        w = np.linalg.eigvalsh(C[t])
        min_eig[t] = w[0]
        if w[0] < -jitter:
            log.warning("filter covariance lost positive definiteness at t=%d (min eig %.3g); jittering",
                        t, w[0])
            C[t] += (jitter - w[0]) * eye
    return FilterResult(m, C, min_eig)


def kalman_filter(alpha, F, stand_mask, sigma_theta, tau2, m0, P0, plan: WindowPlan | None = None):
    """Filtered moments of the coefficient path given stand effects ``alpha`` (k, T)."""
    Gy, hy = year_information(F, stand_mask, alpha)
    plan = plan or WindowPlan(Gy.shape[0])
    return filter_information(plan.aggregate(Gy), plan.aggregate(hy), sigma_theta, tau2, m0, P0)


def _gain(C, S):
    """B = C (C + S)^-1 and the predicted covariance R = C + S."""
    R = C + S
    try:
        B = np.linalg.solve(R, C).T
    except np.linalg.LinAlgError:
        B = C @ np.linalg.pinv(R)
    return B, R


def rts_smoother(filt: FilterResult, sigma_theta):
    """Smoothed means (T, p) and covariances (T, p, p)."""
    T, p = filt.m.shape
    S = _as_cov(sigma_theta, p)
    ms = filt.m.copy()
    Cs = filt.C.copy()
    for t in range(T - 2, -1, -1):
        B, R = _gain(filt.C[t], S)
        ms[t] = filt.m[t] + B @ (ms[t + 1] - filt.m[t])
        Cs[t] = filt.C[t] + B @ (Cs[t + 1] - R) @ B.T
        Cs[t] = 0.5 * (Cs[t] + Cs[t].T)
    return ms, Cs


def ffbs(filt: FilterResult, sigma_theta, rng):
    """Backward-sample a full coefficient path (T, p) from filtered moments."""
    T, p = filt.m.shape
    S = _as_cov(sigma_theta, p)
    path = np.empty((T, p))
    path[-1] = sample_mvn_cov(filt.m[-1], filt.C[-1], rng)
    for t in range(T - 2, -1, -1):
        B, R = _gain(filt.C[t], S)
        mean = filt.m[t] + B @ (path[t + 1] - filt.m[t])
        cov = filt.C[t] - B @ filt.C[t].T
        path[t] = sample_mvn_cov(mean, cov, rng)
    return path


def sample_prior_path(T, m0, C0, sigma_theta, rng):
    """Random-walk path with no observations."""
    p = np.asarray(m0).size
    S = _as_cov(sigma_theta, p)
    path = np.empty((T, p))
    path[0] = sample_mvn_cov(np.asarray(m0, dtype=float), np.asarray(C0, dtype=float), rng)
    for t in range(1, T):
        path[t] = sample_mvn_cov(path[t - 1], S, rng)
    return path


@dataclass(frozen=True)
class VceOptions:
    mode: str = "strict"
    half_width: int = 2
    sigma_theta_form: str = "diagonal"    # diagonal | wishart
    wishart_df: float | None = None       # defaults to p + 2
    wishart_scale: float = 0.01
    theta0_mean: tuple | None = None
    theta0_cov: np.ndarray | None = None


def theta0_prior(design, options: VceOptions, priors, fce_chain=None):
    """(m0, P0): prior mean and precision of the first coefficient state."""
    p = design.p
    if options.theta0_mean is not None:
        m0 = np.asarray(options.theta0_mean, dtype=float)
        cov = np.asarray(options.theta0_cov, dtype=float) if options.theta0_cov is not None \
            else priors.theta_sd**2 * np.eye(p)
        return m0, np.linalg.inv(cov)
    if fce_chain is not None:
        th = fce_chain["theta"]
        cov = np.atleast_2d(np.cov(th, rowvar=False)) * 10.0
        return th.mean(axis=0), np.linalg.inv(cov)
    return np.zeros(p), np.eye(p) / priors.theta_sd**2


def make_theta_update(design, config: SamplerConfig, options: VceOptions, m0, P0):
    plan = WindowPlan(design.T, options.half_width, options.mode)
    G = plan.aggregate(year_information(design.F, design.stand_mask))
    p = design.p
    a0, b0 = config.priors.var_shape, config.priors.var_rate
    nu0 = options.wishart_df if options.wishart_df is not None else p + 2

    def update(state, cache, rng):
        hy = np.einsum("jtp,jt->tp", cache.F, np.where(cache.stand_mask, state.alpha, 0.0))
        filt = filter_information(G, plan.aggregate(hy), state.sigma_theta, state.tau2, m0, P0)
        state.theta = ffbs(filt, state.sigma_theta, rng)
        if "sigma_theta" in config.fixed:
            return
        w = np.diff(state.theta, axis=0)
        if options.sigma_theta_form == "diagonal":
            ss = np.sum(w**2, axis=0)
            state.sigma_theta = np.diag(sample_inverse_gamma(a0 + 0.5 * w.shape[0], b0 + 0.5 * ss,
                                                             rng, size=p))
        elif options.sigma_theta_form == "wishart":
            scale = options.wishart_scale * np.eye(p) + w.T @ w
            state.sigma_theta = np.atleast_2d(
                stats.invwishart.rvs(df=nu0 + w.shape[0], scale=scale, random_state=rng))
        else:
            raise ValueError(f"unknown sigma_theta form {options.sigma_theta_form!r}")

    return update


def _vce_chain(design, config, options, m0, P0, chain_index):
    update = make_theta_update(design, config, options, m0, P0)
    return run_chain(design, config, chain_index, time_varying=True, theta_update=update)


def fit_vce(design: ModelDesign, config=SamplerConfig(), options=VceOptions(), fce_chain=None,
            n_jobs=1):
    """Posterior draws for the time-varying model; ``theta`` draws are (T, p)."""
    m0, P0 = theta0_prior(design, options, config.priors, fce_chain)
    fixed = dict(config.fixed)
    if "sigma_theta" in fixed:
        fixed["sigma_theta"] = _as_cov(fixed["sigma_theta"], design.p)
        config = config.replace(fixed=fixed)
    worker = partial(_vce_chain, design, config, options, m0, P0)
    draws, extras, rates = map_chains(worker, config.chains, n_jobs)
    chain = _assemble_chain(design, config, draws, extras, rates, "vce", time_varying=True)
    chain.meta.update({"mode": options.mode, "half_width": options.half_width,
                       "theta0_mean": np.asarray(m0).tolist()})
    return chain


def trajectory_frame(chain, design: ModelDesign, half_width=2, level=0.95):
    """Per-year posterior mean, credible bounds and annual r^2 for each variable."""
    from .classifier import annual_r2

    th = chain["theta"]                       # (S, T, p)
    lo, hi = np.quantile(th, [(1 - level) / 2, 1 - (1 - level) / 2], axis=0)
    mean = th.mean(axis=0)
    alpha_mean = _alpha_mean(chain, design)
    rows = []
    for t, year in enumerate(design.years):
        r2 = annual_r2(alpha_mean, design.F, mean, t, design.stand_mask, half_width)
        for v, name in enumerate(design.variables):
            rows.append((int(year), name, mean[t, v], lo[t, v], hi[t, v], r2))
    q = f"{100 * (1 - level) / 2:g}"
    return pd.DataFrame(rows, columns=["year", "variable", "post_mean", f"q{q}",
                                       f"q{100 - float(q):g}", "r2_annual"])


def _alpha_mean(chain, design):
    if "alpha" not in chain.draws:
        raise ValueError("chain has no stored stand effects (store_alpha=False)")
    a = chain["alpha"]
    with np.errstate(invalid="ignore"):
        return np.where(design.stand_mask, np.nanmean(np.where(np.isnan(a), 0.0, a), axis=0), np.nan)
