"""Brute-force reference computations used by several test modules."""

import numpy as np


def dense_rw_posterior(alpha, F, stand_mask, sigma_theta, tau2, m0, C0, upto=None):
    """Condition the joint Gaussian of (theta_1..T, observed alpha rows) directly.

    theta follows a random walk from theta_1 ~ N(m0, C0); every observed
    stand-year row is alpha = f' theta_t + N(0, tau2).  Rows after ``upto``
    (a year index) are ignored, which gives filtered rather than smoothed
    moments.  Returns the mean (T, p) and covariance (T*p, T*p) of the path.
    """
    k, T, p = F.shape
    S = np.diag(sigma_theta) if np.ndim(sigma_theta) == 1 else np.asarray(sigma_theta)
    # path = A @ [theta_1, w_2, ..., w_T]
    A = np.kron(np.tril(np.ones((T, T))), np.eye(p))
    base_cov = np.zeros((T * p, T * p))
    base_cov[:p, :p] = C0
    for t in range(1, T):
        base_cov[t * p:(t + 1) * p, t * p:(t + 1) * p] = S
    mu = A @ np.concatenate([m0, np.zeros((T - 1) * p)])
    cov = A @ base_cov @ A.T
    rows = [(j, t) for t in range(T) for j in range(k)
            if stand_mask[j, t] and (upto is None or t <= upto)]
    if not rows:
        return mu.reshape(T, p), cov
    H = np.zeros((len(rows), T * p))
    y = np.empty(len(rows))
    for r, (j, t) in enumerate(rows):
        H[r, t * p:(t + 1) * p] = F[j, t]
        y[r] = alpha[j, t]
    cyy = H @ cov @ H.T + tau2 * np.eye(len(rows))
    cxy = cov @ H.T
    gain = np.linalg.solve(cyy, cxy.T).T
    mean = mu + gain @ (y - H @ mu)
    post = cov - gain @ cxy.T
    return mean.reshape(T, p), 0.5 * (post + post.T)


def random_instance(rng, T=5, p=2, k=3, missing=0.2):
    F = rng.standard_normal((k, T, p))
    mask = rng.random((k, T)) > missing
    mask[:, 0] = True
    alpha = rng.standard_normal((k, T))
    S = rng.uniform(0.05, 0.4, p)
    C0 = np.diag(rng.uniform(0.5, 2.0, p))
    m0 = rng.standard_normal(p)
    return alpha, F, mask, S, 0.3, m0, C0
