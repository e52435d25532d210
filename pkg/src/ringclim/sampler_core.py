"""Shared MCMC machinery: seeded streams, conjugate draws, AR(1) helpers,
chain storage and convergence diagnostics."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats


class SamplerError(RuntimeError):
    pass


class DivergenceError(SamplerError):
    pass


class InsufficientDrawsError(ValueError):
    pass


# ---------------------------------------------------------------- random streams

def rng_stream(seed, *labels):
    """Independent generator for a labelled sub-stream of one master seed."""
    key = tuple(zlib.crc32(str(lab).encode()) for lab in labels)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


# ---------------------------------------------------------------- gaussian draws

def _chol(q):
    try:
        return np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        raise SamplerError("posterior precision is not positive definite") from None


def sample_mvn_precision(precision, linear, rng, z=None):
    """Draw from N(Q^-1 b, Q^-1) given precision Q and linear term b.

    Works batched over leading axes of ``precision`` (..., d, d) and ``linear`` (..., d).
    """
    q = np.asarray(precision, dtype=float)
    b = np.asarray(linear, dtype=float)
    L = _chol(q)
    if z is None:
        z = rng.standard_normal(b.shape)
    u = np.linalg.solve(L, b[..., None])
    mean_plus = np.linalg.solve(np.swapaxes(L, -1, -2), u + z[..., None])
    return mean_plus[..., 0]


def sample_mvn_cov(mean, cov, rng):
    """Draw from N(mean, cov) for a positive semi-definite ``cov``."""
    cov = 0.5 * (cov + cov.T)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        L = v * np.sqrt(np.clip(w, 0.0, None))
    return mean + L @ rng.standard_normal(mean.shape[0])


def sample_normal_conjugate(prior_mean, prior_precision, rng, lik_precision=None, lik_linear=None):
    """Exact draw from a Gaussian full conditional.

    The posterior has precision ``prior_precision + lik_precision`` and linear
    term ``prior_precision @ prior_mean + lik_linear``.  Scalars are accepted.
    An infinite (scalar or diagonal) prior precision pins those coordinates to
    the prior mean.
    """
    m0 = np.atleast_1d(np.asarray(prior_mean, dtype=float))
    d = m0.size
    q0 = np.asarray(prior_precision, dtype=float)
    q0 = np.diag(np.broadcast_to(q0, (d,))).astype(float) if q0.ndim < 2 else q0
    ql = np.zeros((d, d)) if lik_precision is None else np.atleast_2d(np.asarray(lik_precision, dtype=float))
    bl = np.zeros(d) if lik_linear is None else np.atleast_1d(np.asarray(lik_linear, dtype=float))
    pinned = np.isinf(np.diag(q0))
    out = m0.copy()
    free = ~pinned
    if free.any():
        q0f = np.where(np.isinf(q0), 0.0, q0)
        qf = (q0f + ql)[np.ix_(free, free)]
        # condition on pinned coordinates held at the prior mean
        bf = (q0f @ np.where(pinned, 0.0, m0))[free] + bl[free] - ((q0f + ql)[np.ix_(free, pinned)] @ m0[pinned])
        out[free] = sample_mvn_precision(qf, bf, rng)
    return out if np.ndim(prior_mean) else out[0]


def sample_inverse_gamma(shape, rate, rng, size=None):
    """Inverse-gamma draw (density proportional to x^(-shape-1) exp(-rate/x))."""
    if not (np.all(np.asarray(shape) > 0) and np.all(np.asarray(rate) > 0)):
        raise ValueError(f"inverse-gamma needs shape > 0 and rate > 0, got {shape}, {rate}")
    return rate / rng.gamma(shape, 1.0, size=size)


def sample_tridiagonal(diag, off, linear, rng, z=None):
    """Draw x ~ N(Q^-1 b, Q^-1) for symmetric tridiagonal precisions.

    ``diag`` (..., T), ``off`` (..., T-1) super-diagonal, ``linear`` (..., T);
    batched over leading axes.  Returns ``(draw, mean)``.
    """
    diag = np.asarray(diag, dtype=float)
    off = np.asarray(off, dtype=float)
    b = np.asarray(linear, dtype=float)
    T = diag.shape[-1]
    ld = np.empty_like(diag)   # cholesky diagonal
    ls = np.empty_like(off)    # cholesky sub-diagonal
    ld[..., 0] = diag[..., 0]
    for t in range(T):
        if t > 0:
            ls[..., t - 1] = off[..., t - 1] / ld[..., t - 1]
            ld[..., t] = diag[..., t] - ls[..., t - 1] ** 2
        if np.any(ld[..., t] <= 0):
            raise SamplerError("tridiagonal precision is not positive definite")
        ld[..., t] = np.sqrt(ld[..., t])
    # forward solve L u = b
    u = np.empty_like(b)
    u[..., 0] = b[..., 0] / ld[..., 0]
    for t in range(1, T):
        u[..., t] = (b[..., t] - ls[..., t - 1] * u[..., t - 1]) / ld[..., t]
    if z is None:
        z = rng.standard_normal(b.shape)

    def back(v):
        x = np.empty_like(v)
        x[..., T - 1] = v[..., T - 1] / ld[..., T - 1]
        for t in range(T - 2, -1, -1):
            x[..., t] = (v[..., t] - ls[..., t] * x[..., t + 1]) / ld[..., t]
        return x

    mean = back(u)
    return back(u + z), mean


# ---------------------------------------------------------------- AR(1)

def ar1_whiten(e, phi):
    """Whitened innovations of a stationary AR(1) series (variance sigma^2 each)."""
    e = np.asarray(e, dtype=float)
    w = np.empty_like(e)
    w[0] = np.sqrt(1.0 - phi**2) * e[0]
    w[1:] = e[1:] - phi * e[:-1]
    return w


def ar1_loglik(e, phi, sigma2):
    """Exact stationary AR(1) Gaussian log-likelihood of one zero-mean series."""
    w = ar1_whiten(e, phi)
    n = w.size
    return (-0.5 * n * np.log(2 * np.pi * sigma2) + 0.5 * np.log(1.0 - phi**2)
            - 0.5 * np.sum(w**2) / sigma2)


def ar1_stationary_cov(n, phi, sigma2):
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    return sigma2 * phi**lag / (1.0 - phi**2)


@dataclass(frozen=True)
class AR1Stats:
    """Sufficient statistics of zero-mean residual series for phi."""

    n_series: int
    n_obs: int
    first_sq: float   # sum of squared first residuals
    cur_sq: float     # sum e_t^2 over t with a predecessor
    cross: float      # sum e_t e_{t-1}
    prev_sq: float    # sum e_{t-1}^2

    def ss(self, phi):
        """Sum of squared whitened residuals at ``phi``."""
        return self.cur_sq - 2 * phi * self.cross + phi**2 * self.prev_sq + (1 - phi**2) * self.first_sq

    def loglik(self, phi, sigma2):
        return 0.5 * self.n_series * np.log1p(-phi**2) - 0.5 * self.ss(phi) / sigma2


def ar1_stats(residuals, mask=None):
    """Statistics from a list of 1-d series, or a padded (n, T) array plus contiguous mask."""
    if mask is None:
        series = [np.asarray(r, dtype=float) for r in residuals]
        return AR1Stats(len(series), int(sum(s.size for s in series)),
                        float(sum(s[0] ** 2 for s in series)),
                        float(sum(np.sum(s[1:] ** 2) for s in series)),
                        float(sum(np.sum(s[1:] * s[:-1]) for s in series)),
                        float(sum(np.sum(s[:-1] ** 2) for s in series)))
    e = np.where(mask, residuals, 0.0)
    has_prev = np.zeros_like(mask)
    has_prev[:, 1:] = mask[:, 1:] & mask[:, :-1]
    first = mask & ~has_prev
    prev = np.zeros_like(e)
    prev[:, 1:] = e[:, :-1]
    prev = np.where(has_prev, prev, 0.0)
    return AR1Stats(int(first.sum()), int(mask.sum()), float(np.sum(e[first] ** 2)),
                    float(np.sum(np.where(has_prev, e, 0.0) ** 2)), float(np.sum(e * prev)),
                    float(np.sum(prev**2)))


def _phi_logprior(phi, prior):
    a, b = prior
    if a == 1 and b == 1:
        return 0.0
    u = 0.5 * (phi + 1.0)
    return (a - 1) * np.log(u) + (b - 1) * np.log1p(-u)


def sample_phi_ar1(residuals, sigma2, phi, rng, step=0.05, prior=(1.0, 1.0), n_steps=1, mask=None):
    """Metropolis update of the AR(1) coefficient on (-1, 1).

    Random-walk proposals are reflected at +-1, which keeps the proposal
    symmetric.  ``prior`` are the parameters of a Beta prior on (phi + 1) / 2;
    (1, 1) is uniform.  ``residuals`` may be an :class:`AR1Stats`.

    Returns ``(phi, n_accepted)``.
    """
    st = residuals if isinstance(residuals, AR1Stats) else ar1_stats(residuals, mask)
    if not -1 < phi < 1:
        raise ValueError(f"initial phi {phi} outside (-1, 1)")
    cur = st.loglik(phi, sigma2) + _phi_logprior(phi, prior)
    acc = 0
    for _ in range(n_steps):
        prop = phi + step * rng.standard_normal()
        while prop > 1 or prop < -1:
            prop = 2 - prop if prop > 1 else -2 - prop
        if abs(prop) >= 1:
            continue
        new = st.loglik(prop, sigma2) + _phi_logprior(prop, prior)
        if np.log(rng.uniform()) < new - cur:
            phi, cur = prop, new
            acc += 1
    return phi, acc


# ---------------------------------------------------------------- diagnostics

def _split(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    m, n = x.shape[:2]
    half = n // 2
    return np.concatenate([x[:, :half], x[:, n - half:]], axis=0)


def _check_draws(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    m, n = x.shape[:2]
    if n < 4 or (m < 2 and n < 200):
        raise InsufficientDrawsError(f"need >= 2 chains or >= 200 draws (got {m} x {n})")
    return x


def split_rhat(x):
    """Split potential scale reduction factor of draws shaped (chains, draws).

    Values are floored at 1.  Returns inf when chains are internally constant
    but disagree with each other.
    """
    x = _split(_check_draws(x))
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else np.inf
    var_plus = (n - 1) / n * w + b / n
    return float(max(1.0, np.sqrt(var_plus / w)))


def _autocov(x):
    n = x.size
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    ac = np.fft.irfft(f * np.conj(f))[:n] / n
    return ac


def ess(x):
    """Multi-chain effective sample size (Geyer initial monotone sequence),
    capped at the number of stored draws."""
    x = _check_draws(x)
    m, n = x.shape
    total = m * n
    var_within = x.var(axis=1, ddof=1).mean()
    if var_within == 0:
        return float(total)
    acov = np.stack([_autocov(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1)
    var_plus = chain_var.mean() * (n - 1) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (chain_var.mean() - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer: sum consecutive pairs while positive, enforce monotone decrease
    s, prev_pair = 0.0, np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev_pair)
        s += pair
        prev_pair = pair
        t += 2
    tau = -1.0 + 2.0 * s
    if tau <= 0:
        return float(total)
    return float(min(total, total / tau))


def diagnostics(chain: "PosteriorChain", blocks=None):
    """ESS and split-R-hat per scalar dimension; returns a DataFrame."""
    rows = []
    for name in blocks or chain.blocks:
        arr = chain.draws[name]
        flat = arr.reshape(arr.shape[0], arr.shape[1], -1)
        labels = chain.dim_labels(name)
        for d in range(flat.shape[2]):
            x = flat[:, :, d]
            rows.append((name, labels[d], ess(x), split_rhat(x)))
    return pd.DataFrame(rows, columns=["block", "dimension", "ess", "rhat"])


# ---------------------------------------------------------------- chain storage

@dataclass
class PosteriorChain:
    """MCMC draws per named block, each shaped (chains, draws, *dims)."""

    draws: dict
    burn_in: int
    thin: int
    iterations: int
    seed: int
    labels: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    @property
    def blocks(self):
        return list(self.draws)

    @property
    def n_chains(self):
        return next(iter(self.draws.values())).shape[0]

    @property
    def n_draws(self):
        return next(iter(self.draws.values())).shape[1]

    def __getitem__(self, name):
        """Draws pooled over chains, shaped (chains * draws, *dims)."""
        a = self.draws[name]
        return a.reshape(-1, *a.shape[2:])

    def dim_labels(self, name):
        shape = self.draws[name].shape[2:]
        if name in self.labels:
            return list(self.labels[name])
        if not shape:
            return [""]
        return [",".join(map(str, idx)) for idx in np.ndindex(*shape)]

    def mean(self, name):
        return self[name].mean(axis=0)

    def median(self, name):
        return np.median(self[name], axis=0)

    def quantile(self, name, q):
        return np.quantile(self[name], q, axis=0)

    def summary(self, blocks=None, with_diagnostics=True):
        rows = []
        for name in blocks or self.blocks:
            x = self[name].reshape(self.n_chains * self.n_draws, -1)
            per_chain = self.draws[name].reshape(self.n_chains, self.n_draws, -1)
            labels = self.dim_labels(name)
            q = np.quantile(x, [0.025, 0.5, 0.975], axis=0)
            for d in range(x.shape[1]):
                e = r = np.nan
                if with_diagnostics:
                    try:
                        e, r = ess(per_chain[:, :, d]), split_rhat(per_chain[:, :, d])
                    except InsufficientDrawsError:
                        pass
                rows.append((name, labels[d], x[:, d].mean(), q[1, d], x[:, d].std(ddof=1),
                             q[0, d], q[2, d], e, r))
        return pd.DataFrame(rows, columns=["block", "dimension", "mean", "median", "sd",
                                           "q2.5", "q97.5", "ess", "rhat"])

    def save(self, path):
        path = Path(path)
        header = {"burn_in": self.burn_in, "thin": self.thin, "iterations": self.iterations,
                  "seed": self.seed, "labels": {k: list(v) for k, v in self.labels.items()},
                  "meta": self.meta}
        np.savez_compressed(path, __header__=np.array(json.dumps(header, sort_keys=True)),
                            **{f"block_{k}": v for k, v in self.draws.items()},
                            **{f"extra_{k}": np.asarray(v) for k, v in self.extras.items()})

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["__header__"]))
            draws = {k[6:]: z[k] for k in z.files if k.startswith("block_")}
            extras = {k[6:]: z[k] for k in z.files if k.startswith("extra_")}
        return cls(draws, header["burn_in"], header["thin"], header["iterations"], header["seed"],
                   header["labels"], header["meta"], extras)

    @classmethod
    def concat(cls, chains):
        first = chains[0]
        draws = {k: np.concatenate([c.draws[k] for c in chains], axis=0) for k in first.draws}
        return cls(draws, first.burn_in, first.thin, first.iterations, first.seed, first.labels,
                   first.meta, first.extras)


class ChainRecorder:
    """Collects thinned post-burn-in draws for one chain; optionally appends
    scalar blocks to a CSV every ``flush_every`` iterations."""

    def __init__(self, iterations, burn_in, thin, stream_path=None, flush_every=100):
        if not iterations > burn_in >= 0:
            raise ValueError("need iterations > burn_in >= 0")
        if thin < 1:
            raise ValueError("thin must be >= 1")
        self.iterations, self.burn_in, self.thin = iterations, burn_in, thin
        self.n_keep = (iterations - burn_in) // thin
        self.store = {}
        self.count = 0
        self.stream_path = Path(stream_path) if stream_path else None
        self.flush_every = flush_every
        self._pending = []

    def keep(self, it):
        return it >= self.burn_in and (it + 1 - self.burn_in) % self.thin == 0 and self.count < self.n_keep

    def record(self, it, values: dict):
        if not self.keep(it):
            return
        for k, v in values.items():
            v = np.asarray(v, dtype=float)
            if k not in self.store:
                self.store[k] = np.empty((self.n_keep, *v.shape))
            self.store[k][self.count] = v
        self.count += 1
        if self.stream_path is not None:
            row = {"iteration": it}
            for k, v in values.items():
                v = np.asarray(v, dtype=float)
                if v.size <= 32:
                    for idx, x in zip(np.ndindex(*v.shape) if v.shape else [()], v.ravel()):
                        row[k + ("[" + ",".join(map(str, idx)) + "]" if idx else "")] = x
            self._pending.append(row)
            if (it + 1) % self.flush_every == 0:
                self.flush()

    def flush(self):
        if self.stream_path is None or not self._pending:
            return
        df = pd.DataFrame(self._pending)
        header = not self.stream_path.exists()
        df.to_csv(self.stream_path, mode="a", header=header, index=False)
        self._pending = []

    def draws(self):
        self.flush()
        return {k: v[None, : self.count] for k, v in self.store.items()}


def geweke_z(x, prior_mean, prior_var, n_eff=None):
    """z statistic comparing the mean of dependent draws with a known mean."""
    x = np.asarray(x, dtype=float)
    n_eff = n_eff if n_eff is not None else ess(x)
    return (x.mean() - prior_mean) / np.sqrt(prior_var / n_eff)


def two_sided_p(z):
    return float(2 * stats.norm.sf(abs(z)))
