"""Gibbs sampler for the fixed-climate-effects (FCE) hierarchical growth model.

Tree level::

    log y[i, t] = x[i, t]' beta[i] + alpha[j(i), t] + eps[i, t],
    eps[i, .] stationary AR(1) with innovation variance sigma2 and coefficient phi

Stand level::

    alpha[j, t] = f[j, t]' theta + v[j, t],   v ~ N(0, tau2)

Spline coefficients carry a P-spline prior: the penalized directions have
variance ``sigma2_beta`` and the penalty null space a vague normal prior.
The update machinery here is shared with :mod:`ringclim.vce`.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
import pandas as pd

from .design import ModelDesign
from .sampler_core import (ChainRecorder, DivergenceError, PosteriorChain, ar1_stats,
                           rng_stream, sample_inverse_gamma, sample_mvn_precision,
                           sample_phi_ar1, sample_tridiagonal)

_SCALARS = ("sigma2", "phi", "tau2", "sigma2_beta")


@dataclass(frozen=True)
class Priors:
    var_shape: float = 0.01
    var_rate: float = 0.01
    theta_sd: float = 10.0
    null_sd: float = 10.0
    phi: tuple = (1.0, 1.0)   # Beta prior on (phi + 1) / 2


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    chains: int = 1
    seed: int = 0
    phi_steps: int = 5
    phi_step: float = 0.05
    update_order: tuple = ("beta", "alpha", "theta", "variances", "phi")
    fixed: dict = field(default_factory=dict)
    priors: Priors = field(default_factory=Priors)
    store_alpha: bool = True
    store_beta: bool = False
    stream_path: str | None = None
    divergence_limit: float = 1e12
    init_jitter: float = 0.05

    def __post_init__(self):
        if not self.iterations > self.burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if self.chains < 1 or self.thin < 1:
            raise ValueError("chains and thin must be >= 1")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class FceState:
    beta: np.ndarray        # (n, K)
    alpha: np.ndarray       # (k, T)
    theta: np.ndarray       # (p,) or (T, p) for the time-varying model
    sigma2: float
    phi: float
    tau2: float
    sigma2_beta: float
    sigma_theta: np.ndarray | None = None   # (p, p) random-walk covariance, VCE only

    def copy(self):
        return FceState(self.beta.copy(), self.alpha.copy(), np.array(self.theta, copy=True),
                        self.sigma2, self.phi, self.tau2, self.sigma2_beta,
                        None if self.sigma_theta is None else self.sigma_theta.copy())


class DesignCache:
    """Quantities derived once from a design."""

    def __init__(self, design: ModelDesign, priors: Priors):
        self.design = design
        self.mask = design.mask
        self.has_prev = design.has_prev
        self.first = design.is_first
        self.has_next = np.zeros_like(self.mask)
        self.has_next[:, :-1] = self.has_prev[:, 1:]
        self.log_y = np.where(self.mask, design.log_y, 0.0)
        self.X = np.where(self.mask[..., None], design.X, 0.0)
        self.S = np.zeros((design.k, design.n))
        self.S[design.stand_of_tree, np.arange(design.n)] = 1.0
        self.stand_mask = design.stand_mask
        self.F = np.where(self.stand_mask[..., None], design.F, 0.0)
        pen = design.basis.penalty
        self.penalty = pen
        self.penalty_rank = int(np.linalg.matrix_rank(pen)) if pen.any() else 0
        null = design.basis.null_space()
        self.null_proj = null @ null.T / priors.null_sd**2
        Fo = self.F[self.stand_mask]
        self.FtF = Fo.T @ Fo
        self.n_obs = int(self.mask.sum())
        self.n_stand_years = int(self.stand_mask.sum())

        X = self.X
        Xt = np.swapaxes(X, 1, 2)
        self.Xt = Xt
        # X' W'W X = (1 - phi^2) M_first + M_prev + phi^2 M_next - phi C
        self.M_first = Xt @ (X * self.first[..., None])
        self.M_prev = Xt @ (X * self.has_prev[..., None])
        self.M_next = Xt @ (X * self.has_next[..., None])
        lead = X[:, :-1] * self.has_prev[:, 1:, None]
        cross = np.swapaxes(lead, 1, 2) @ X[:, 1:]
        self.C = cross + np.swapaxes(cross, 1, 2)

    def xtwx(self, phi):
        return (1.0 - phi**2) * self.M_first + self.M_prev + phi**2 * self.M_next - phi * self.C

    def ar1_bands(self, phi):
        """Diagonal and super-diagonal of W'W for every tree (zero off the mask)."""
        d = np.where(self.first, 1.0 - phi**2, 0.0) + np.where(self.has_prev, 1.0, 0.0)
        d = d + np.where(self.has_next, phi**2, 0.0)
        off = np.where(self.has_prev[:, 1:], -phi, 0.0)
        return d, off

    def wtw(self, r, phi, bands=None):
        """W'W r along the year axis of a padded (n, T) array."""
        d, off = bands if bands is not None else self.ar1_bands(phi)
        out = d * r
        out[:, 1:] += off * r[:, :-1]
        out[:, :-1] += off * r[:, 1:]
        return out


# ---------------------------------------------------------------- block updates

def trend(state, cache):
    return (cache.X @ state.beta[..., None])[..., 0]


def climate_mean(state, cache):
    """Prior mean of alpha implied by the stand-level regression, (k, T)."""
    th = np.asarray(state.theta)
    if th.ndim == 1:
        return cache.F @ th
    return np.einsum("jtp,tp->jt", cache.F, th)


def tree_residuals(state, cache):
    """eps = log y - trend - alpha, zero where unobserved."""
    e = cache.log_y - trend(state, cache) - state.alpha[cache.design.stand_of_tree]
    return np.where(cache.mask, e, 0.0)


def update_beta(state, cache, rng):
    r = np.where(cache.mask, cache.log_y - state.alpha[cache.design.stand_of_tree], 0.0)
    Q = cache.xtwx(state.phi) / state.sigma2
    Q += cache.penalty / state.sigma2_beta + cache.null_proj
    b = (cache.Xt @ cache.wtw(r, state.phi)[..., None])[..., 0] / state.sigma2
    state.beta = sample_mvn_precision(Q, b, rng)


def alpha_full_conditional(state, cache):
    """Tridiagonal precision (diag, super-diagonal) and linear term of the
    stand-year effects given everything else, each per stand."""
    d, off = cache.ar1_bands(state.phi)
    r = np.where(cache.mask, cache.log_y - trend(state, cache), 0.0)
    wr = cache.wtw(r, state.phi, (d, off))
    diag = cache.S @ d / state.sigma2 + 1.0 / state.tau2
    sup = cache.S @ off / state.sigma2
    lin = cache.S @ wr / state.sigma2 + climate_mean(state, cache) / state.tau2
    return diag, sup, lin


def update_alpha(state, cache, rng):
    diag, sup, lin = alpha_full_conditional(state, cache)
    state.alpha, _ = sample_tridiagonal(diag, sup, lin, rng)


def update_theta_fixed(state, cache, rng, priors):
    sm = cache.stand_mask
    Q = cache.FtF / state.tau2 + np.eye(cache.F.shape[2]) / priors.theta_sd**2
    b = cache.F[sm].T @ state.alpha[sm] / state.tau2
    state.theta = sample_mvn_precision(Q, b, rng)


def update_variances(state, cache, rng, priors, fixed):
    a0, b0 = priors.var_shape, priors.var_rate
    if "sigma2" not in fixed:
        ss = ar1_stats(tree_residuals(state, cache), cache.mask).ss(state.phi)
        state.sigma2 = float(sample_inverse_gamma(a0 + 0.5 * cache.n_obs, b0 + 0.5 * ss, rng))
    if "tau2" not in fixed:
        v = (state.alpha - climate_mean(state, cache))[cache.stand_mask]
        state.tau2 = float(sample_inverse_gamma(a0 + 0.5 * v.size, b0 + 0.5 * np.sum(v**2), rng))
    if "sigma2_beta" not in fixed:
        quad = np.sum((state.beta @ cache.penalty) * state.beta)
        dof = cache.design.n * cache.penalty_rank
        state.sigma2_beta = float(sample_inverse_gamma(a0 + 0.5 * dof, b0 + 0.5 * quad, rng))


def update_phi(state, cache, rng, priors, step, n_steps):
    st = ar1_stats(tree_residuals(state, cache), cache.mask)
    state.phi, acc = sample_phi_ar1(st, state.sigma2, state.phi, rng, step=step,
                                    prior=priors.phi, n_steps=n_steps)
    return acc


def log_posterior(state, cache, priors):
    """Unnormalized joint log density (tree and stand levels plus priors)."""
    a0, b0 = priors.var_shape, priors.var_rate
    e = tree_residuals(state, cache)
    st = ar1_stats(e, cache.mask)
    lp = -0.5 * cache.n_obs * np.log(state.sigma2) + st.loglik(state.phi, state.sigma2)
    v = (state.alpha - climate_mean(state, cache))[cache.stand_mask]
    lp += -0.5 * v.size * np.log(state.tau2) - 0.5 * np.sum(v**2) / state.tau2
    quad = np.sum((state.beta @ cache.penalty) * state.beta)
    lp += -0.5 * cache.design.n * cache.penalty_rank * np.log(state.sigma2_beta) - 0.5 * quad / state.sigma2_beta
    lp += -0.5 * np.sum((state.beta @ cache.null_proj) * state.beta)
    th = np.asarray(state.theta)
    lp += -0.5 * np.sum(th[0] ** 2 if th.ndim == 2 else th**2) / priors.theta_sd**2
    if th.ndim == 2 and state.sigma_theta is not None and th.shape[0] > 1:
        w = np.diff(th, axis=0)
        sign, logdet = np.linalg.slogdet(state.sigma_theta)
        lp += -0.5 * w.shape[0] * logdet - 0.5 * np.sum(w * np.linalg.solve(state.sigma_theta, w.T).T)
    for s2 in (state.sigma2, state.tau2, state.sigma2_beta):
        lp += -(a0 + 1) * np.log(s2) - b0 / s2
    return float(lp)


# ---------------------------------------------------------------- initialization

def initial_state(design: ModelDesign, rng=None, jitter=0.0, time_varying=False):
    """Deterministic moment-based start, optionally jittered."""
    cache_priors = Priors()
    cache = DesignCache(design, cache_priors)
    K = design.basis.n_basis
    ridge = design.basis.penalty + 1e-3 * np.eye(K)
    XtX = np.einsum("itk,itl->ikl", cache.X, cache.X) + ridge
    Xty = np.einsum("itk,it->ik", cache.X, cache.log_y)
    beta = np.linalg.solve(XtX, Xty[..., None])[..., 0]
    r = np.where(cache.mask, cache.log_y - np.einsum("itk,ik->it", cache.X, beta), 0.0)
    counts = cache.S @ cache.mask
    alpha = np.where(counts > 0, (cache.S @ r) / np.maximum(counts, 1), 0.0)
    sm = cache.stand_mask
    p = design.p
    Fo = cache.F[sm]
    theta = np.linalg.solve(Fo.T @ Fo + 1e-6 * np.eye(p), Fo.T @ alpha[sm]) if sm.any() else np.zeros(p)
    e = np.where(cache.mask, r - alpha[design.stand_of_tree], 0.0)
    sigma2 = max(float(np.sum(e**2) / max(cache.n_obs, 1)), 1e-3)
    resid = alpha[sm] - Fo @ theta
    tau2 = max(float(np.mean(resid**2)) if resid.size else 1.0, 1e-3)
    if rng is not None and jitter > 0:
        theta = theta + jitter * rng.standard_normal(p)
        alpha = alpha + jitter * np.sqrt(tau2) * rng.standard_normal(alpha.shape)
    state = FceState(beta, alpha, theta, sigma2, 0.0, tau2, 1.0)
    if time_varying:
        state.theta = np.tile(theta, (design.T, 1))
        state.sigma_theta = 0.01 * np.eye(p)
    return state


# ---------------------------------------------------------------- driver

def gibbs_sweep(state, design, config=SamplerConfig(), rng=None, cache=None, theta_update=None,
                phi_step=None):
    """One full scan of block updates; returns the new state.

    ``theta_update(state, cache, rng)`` replaces the constant-coefficient
    regression step (used by the time-varying model).
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    cache = cache if cache is not None else DesignCache(design, config.priors)
    state = state.copy()
    for name, value in config.fixed.items():
        setattr(state, name, np.array(value, dtype=float) if np.ndim(value) else float(value))
    fixed = config.fixed
    acc = 0
    for block in config.update_order:
        if block == "beta" and "beta" not in fixed:
            update_beta(state, cache, rng)
        elif block == "alpha" and "alpha" not in fixed:
            update_alpha(state, cache, rng)
        elif block == "theta" and "theta" not in fixed:
            if theta_update is None:
                update_theta_fixed(state, cache, rng, config.priors)
            else:
                theta_update(state, cache, rng)
        elif block == "variances":
            update_variances(state, cache, rng, config.priors, fixed)
        elif block == "phi" and "phi" not in fixed:
            acc = update_phi(state, cache, rng, config.priors, phi_step or config.phi_step,
                             config.phi_steps)
    state._phi_accepted = acc
    return state


def _check_divergence(state, limit):
    for name in ("sigma2", "tau2", "sigma2_beta"):
        v = getattr(state, name)
        if not np.isfinite(v) or v > limit:
            raise DivergenceError(f"{name} diverged to {v:.3g}")
    if not np.all(np.isfinite(state.theta)):
        raise DivergenceError("theta became non-finite")


def run_chain(design, config, chain_index=0, time_varying=False, theta_update=None,
              extra_record=None, init=None):
    """Run one chain and return (draws dict, extras dict, acceptance rate)."""
    rng = rng_stream(config.seed, "chain", chain_index)
    cache = DesignCache(design, config.priors)
    state = init.copy() if init is not None else initial_state(
        design, rng, config.init_jitter if chain_index > 0 else 0.0, time_varying)
    stream = None
    if config.stream_path:
        stream = f"{config.stream_path}.chain{chain_index}.csv"
    rec = ChainRecorder(config.iterations, config.burn_in, config.thin, stream)
    step = config.phi_step
    accepted = 0
    proposals = 0
    window_acc = 0
    beta_sum = np.zeros_like(state.beta)
    trend_sum = np.zeros(design.mask.shape)
    init_logpost = log_posterior(state, cache, config.priors)
    for it in range(config.iterations):
        state = gibbs_sweep(state, design, config, rng, cache, theta_update, phi_step=step)
        _check_divergence(state, config.divergence_limit)
        acc = state._phi_accepted
        if it < config.burn_in:
            window_acc += acc
            if (it + 1) % 50 == 0 and config.phi_steps > 0:
                rate = window_acc / (50 * config.phi_steps)
                step *= np.exp(rate - 0.44)
                step = float(np.clip(step, 1e-4, 1.0))
                window_acc = 0
        else:
            accepted += acc
            proposals += config.phi_steps
        if rec.keep(it):
            vals = {"theta": state.theta, "sigma2": state.sigma2, "phi": state.phi,
                    "tau2": state.tau2, "sigma2_beta": state.sigma2_beta,
                    "logpost": log_posterior(state, cache, config.priors)}
            if state.sigma_theta is not None:
                vals["sigma_theta"] = np.diag(state.sigma_theta)
            if config.store_alpha:
                vals["alpha"] = np.where(design.stand_mask, state.alpha, np.nan)
            if config.store_beta:
                vals["beta"] = state.beta
            if extra_record is not None:
                vals.update(extra_record(state, cache))
            rec.record(it, vals)
            beta_sum += state.beta
            trend_sum += trend(state, cache)
    n = max(rec.count, 1)
    extras = {"beta_mean": beta_sum / n, "trend_mean": np.where(design.mask, trend_sum / n, np.nan),
              "init_logpost": np.array(init_logpost), "phi_step": np.array(step)}
    rate = accepted / proposals if proposals else np.nan
    return rec.draws(), extras, rate


def _labels(design, time_varying):
    labels = {"theta": design.variables if not time_varying else
              [f"{y}:{v}" for y in design.years for v in design.variables]}
    if time_varying:
        labels["sigma_theta"] = design.variables
    return labels


def map_chains(worker, n_chains, n_jobs=1):
    """Run ``worker(c)`` for every chain index, in worker processes when n_jobs > 1.

    Each chain draws from its own seeded stream, so results do not depend on
    ``n_jobs``.
    """
    if n_jobs > 1 and n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, n_chains)) as pool:
            results = list(pool.map(worker, range(n_chains)))
    else:
        results = [worker(c) for c in range(n_chains)]
    return [list(x) for x in zip(*results)]


def fit_fce(design: ModelDesign, config=SamplerConfig(), n_jobs=1):
    """Posterior draws for the fixed-climate-effects model."""
    draws, extras, rates = map_chains(partial(run_chain, design, config), config.chains, n_jobs)
    return _assemble_chain(design, config, draws, extras, rates, "fce", time_varying=False)


def _assemble_chain(design, config, draws, extras, rates, model, time_varying):
    blocks = {k: np.concatenate([d[k] for d in draws], axis=0) for k in draws[0]}
    return PosteriorChain(blocks, config.burn_in, config.thin, config.iterations, config.seed,
                          _labels(design, time_varying),
                          {"model": model, "variables": list(design.variables),
                           "years": design.years.tolist(), "stand_ids": list(design.stand_ids),
                           "tree_ids": list(design.tree_ids),
                           "phi_acceptance": [float(r) for r in rates]},
                          {k: np.mean([e[k] for e in extras], axis=0) for k in extras[0]})


def theta_summary(chain: PosteriorChain):
    """Posterior median and 95% interval per climate variable."""
    th = chain["theta"]
    q = np.quantile(th, [0.025, 0.5, 0.975], axis=0)
    return pd.DataFrame({"variable": chain.meta["variables"], "median": q[1], "q2.5": q[0],
                         "q97.5": q[2], "mean": th.mean(axis=0)})


def variance_summary(chain: PosteriorChain):
    rows = []
    for name in _SCALARS:
        x = chain[name]
        q = np.quantile(x, [0.025, 0.5, 0.975])
        rows.append((name, x.mean(), q[1], q[0], q[2]))
    return pd.DataFrame(rows, columns=["parameter", "mean", "median", "q2.5", "q97.5"])
