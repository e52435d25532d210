"""Bayesian Lasso (Park & Casella hierarchy) for climate-variable selection.

    y | beta, sigma2      ~ N(X beta, sigma2 I)
    beta | sigma2, tau2   ~ N(0, sigma2 diag(tau2))
    tau2_k | lam2         ~ Exp(lam2 / 2)
    lam2                  ~ Gamma(r, delta)
    sigma2                ~ 1 / sigma2

``prior="flat"`` drops the shrinkage layer (the lam -> 0 limit) and gives
ordinary Bayesian regression, useful as a reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .design import ModelDesign
from .sampler_core import PosteriorChain, rng_stream, sample_inverse_gamma


class StandardizationError(ValueError):
    pass


@dataclass(frozen=True)
class LassoConfig:
    iterations: int = 3000
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    r: float = 1.0
    delta: float = 1.78
    prior: str = "laplace"        # laplace | flat
    fixed_lam2: float | None = None
    ci_level: float = 0.90
    std_tol: float = 1e-6


def check_standardized(X, tol=1e-6):
    """Raise unless every column has mean 0 and sample sd 1 (within ``tol``)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise StandardizationError("design must be 2-D with at least 2 rows")
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    bad = np.flatnonzero((np.abs(mu) > tol) | (np.abs(sd - 1.0) > tol))
    if bad.size:
        j = bad[0]
        raise StandardizationError(f"column {j} not standardized (mean {mu[j]:.3g}, sd {sd[j]:.3g}); "
                                   f"{bad.size} column(s) affected")


def standardize_columns(X):
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0, ddof=1)
    if np.any(sd == 0):
        raise StandardizationError(f"constant column(s) {np.flatnonzero(sd == 0).tolist()}")
    return (X - X.mean(axis=0)) / sd


def fit_blasso(y, X, config=LassoConfig(), names=None):
    """Gibbs sampler for the Bayesian Lasso; returns a PosteriorChain.

    ``y`` is centred internally.  Blocks: beta (S, p), tau2 (S, p), lam2, sigma2.
    """
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.shape[0] != y.size:
        raise ValueError("X and y row counts differ")
    check_standardized(X, config.std_tol)
    if config.iterations <= config.burn_in:
        raise ValueError("iterations must exceed burn_in")
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    rng = rng_stream(config.seed, "blasso")
    y = y - y.mean()
    XtX, Xty = X.T @ X, X.T @ y
    flat = config.prior == "flat"
    if not flat and config.prior != "laplace":
        raise ValueError(f"unknown prior {config.prior!r}")

    beta = np.linalg.lstsq(XtX + np.eye(p), Xty, rcond=None)[0]
    sigma2 = float(np.var(y - X @ beta)) or 1.0
    inv_tau2 = np.ones(p)
    lam2 = config.fixed_lam2 if config.fixed_lam2 is not None else p * np.sqrt(sigma2) / np.abs(beta).sum()
    keep = range(config.burn_in, config.iterations, config.thin)
    S = len(keep)
    out = {"beta": np.empty((S, p)), "tau2": np.empty((S, p)), "lam2": np.empty(S),
           "sigma2": np.empty(S)}
    s = 0
    for it in range(config.iterations):
        A = XtX + (0.0 if flat else np.diag(inv_tau2))
        L = np.linalg.cholesky(A)
        mean = np.linalg.solve(L.T, np.linalg.solve(L, Xty))
        beta = mean + np.sqrt(sigma2) * np.linalg.solve(L.T, rng.standard_normal(p))
        resid = y - X @ beta
        if flat:
            sigma2 = sample_inverse_gamma(0.5 * (n - 1), 0.5 * resid @ resid, rng)
        else:
            sigma2 = sample_inverse_gamma(0.5 * (n - 1 + p),
                                          0.5 * (resid @ resid + beta @ (inv_tau2 * beta)), rng)
            mu = np.sqrt(lam2 * sigma2 / np.maximum(beta**2, 1e-300))
            inv_tau2 = rng.wald(mu, lam2)
            inv_tau2 = np.maximum(inv_tau2, 1e-12)
            if config.fixed_lam2 is None:
                lam2 = rng.gamma(p + config.r, 1.0 / (0.5 * np.sum(1.0 / inv_tau2) + config.delta))
        if s < S and it == keep[s]:
            out["beta"][s] = beta
            out["tau2"][s] = 1.0 / inv_tau2 if not flat else np.inf
            out["lam2"][s] = lam2 if not flat else 0.0
            out["sigma2"][s] = sigma2
            s += 1
    draws = {k: v[None] for k, v in out.items()}
    return PosteriorChain(draws, config.burn_in, config.thin, config.iterations, config.seed,
                          {"beta": names, "tau2": names},
                          {"model": "blasso", "variables": names, "prior": config.prior,
                           "selection_rule": f"{100 * config.ci_level:g}% credible interval excludes zero",
                           "r": config.r, "delta": config.delta})


def selected(chain, level=0.90):
    """Boolean per coefficient: the central ``level`` interval excludes zero."""
    lo, hi = np.quantile(chain["beta"], [(1 - level) / 2, 1 - (1 - level) / 2], axis=0)
    return (lo > 0) | (hi < 0)


def lasso_summary(chain, level=0.90):
    b = chain["beta"]
    lo, med, hi = np.quantile(b, [(1 - level) / 2, 0.5, 1 - (1 - level) / 2], axis=0)
    q = f"{100 * (1 - level) / 2:g}"
    return pd.DataFrame({"variable": chain.meta["variables"], "median": med, f"q{q}": lo,
                         f"q{100 - float(q):g}": hi, "selected": (lo > 0) | (hi < 0)})


def lasso_response(design: ModelDesign, lam=1.0):
    """Per-stand-year mean deviation of log growth from a per-tree P-spline fit.

    Returns (response vector, F rows, stand-year index pairs) over observed
    stand-years; a quick first stage that avoids running the full model.
    """
    X = np.where(design.mask[..., None], design.X, 0.0)
    y = np.where(design.mask, design.log_y, 0.0)
    K = design.basis.n_basis
    A = np.einsum("itk,itl->ikl", X, X) + lam * design.basis.penalty + 1e-8 * np.eye(K)
    b = np.linalg.solve(A, np.einsum("itk,it->ik", X, y)[..., None])[..., 0]
    r = np.where(design.mask, y - np.einsum("itk,ik->it", X, b), 0.0)
    S = np.zeros((design.k, design.n))
    S[design.stand_of_tree, np.arange(design.n)] = 1.0
    counts = S @ design.mask
    dev = (S @ r) / np.maximum(counts, 1)
    j, t = np.nonzero(design.stand_mask)
    return dev[j, t], design.F[j, t], np.column_stack([j, t])


def select_variables(design: ModelDesign, config=LassoConfig()):
    """Two-stage selection over all design variables; returns (chain, summary frame)."""
    y, F, _ = lasso_response(design)
    chain = fit_blasso(y, standardize_columns(F), config, names=design.variables)
    return chain, lasso_summary(chain, config.ci_level)
