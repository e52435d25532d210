"""P-spline age basis and the aligned arrays consumed by the samplers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import BSpline

from .ring_data import RingSeries, StudyWindow, stand_tables
from .water_balance import SEASONAL_VARIABLES


class DesignError(ValueError):
    pass


def difference_penalty(n_basis, order=2):
    d = np.diff(np.eye(n_basis), n=order, axis=0)
    return d.T @ d


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis in tree age with a difference penalty."""

    knots: np.ndarray  # full knot vector, boundary knots repeated degree + 1 times
    degree: int = 3
    penalty_order: int = 2

    @property
    def n_basis(self):
        return self.knots.size - self.degree - 1

    @property
    def interior_knots(self):
        return self.knots[self.degree + 1: -(self.degree + 1)]

    @property
    def lower(self):
        return self.knots[0]

    @property
    def upper(self):
        return self.knots[-1]

    @property
    def penalty(self):
        return difference_penalty(self.n_basis, self.penalty_order)

    def evaluate(self, ages):
        """Basis rows at ``ages``; ages outside the knot span are clamped to it."""
        a = np.clip(np.asarray(ages, dtype=float).ravel(), self.lower, self.upper)
        return BSpline.design_matrix(a, self.knots, self.degree).toarray()

    def null_space(self):
        """Orthonormal basis of the penalty null space (polynomials of degree < order)."""
        return _null_space(self.penalty)


def _null_space(pen):
    w, v = np.linalg.eigh(pen)
    tol = 1e-9 * max(1.0, np.abs(w).max())
    return v[:, w < tol]


@dataclass(frozen=True)
class ConstantBasis:
    """Intercept-only trend (no age dependence)."""

    @property
    def n_basis(self):
        return 1

    @property
    def knots(self):
        return np.array([])

    @property
    def penalty(self):
        return np.zeros((1, 1))

    def evaluate(self, ages):
        return np.ones((np.asarray(ages).size, 1))

    def null_space(self):
        return np.ones((1, 1))


def build_basis(ages, n_knots=10, degree=3, penalty_order=2):
    """Cubic B-spline basis with ``n_knots`` interior knots at age quantiles."""
    ages = np.asarray(ages, dtype=float).ravel()
    if ages.size == 0 or np.any(ages < 0):
        raise DesignError("ages must be non-empty and non-negative")
    if n_knots < degree + 1:
        raise DesignError(f"n_knots={n_knots} must be at least degree + 1 = {degree + 1}")
    distinct = np.unique(ages)
    if distinct.size < max(n_knots, 2):
        raise DesignError(f"{distinct.size} distinct ages is fewer than the {n_knots} knots")
    lo, hi = distinct[0], distinct[-1]
    interior = np.quantile(distinct, np.linspace(0, 1, n_knots + 2)[1:-1])
    knots = np.concatenate([np.repeat(lo, degree + 1), interior, np.repeat(hi, degree + 1)])
    return SplineBasis(knots, degree, penalty_order)


def fit_penalized(basis: SplineBasis, ages, y, lam):
    """Direct ridge solve of a P-spline fit; returns coefficients."""
    b = basis.evaluate(ages)
    return np.linalg.solve(b.T @ b + lam * basis.penalty, b.T @ np.asarray(y, dtype=float))


@dataclass
class ModelDesign:
    """Padded tree x year and stand x year arrays with observation masks.

    ``log_y``/``X`` are zero wherever ``mask`` is False; ``F`` is zero where
    ``stand_mask`` is False.
    """

    years: np.ndarray            # (T,)
    tree_ids: list
    stand_ids: list
    species: list
    recruitment: np.ndarray      # (n,)
    stand_of_tree: np.ndarray    # (n,) j(i)
    mask: np.ndarray             # (n, T) bool
    log_y: np.ndarray            # (n, T)
    X: np.ndarray                # (n, T, K)
    F: np.ndarray                # (k, T, p)
    stand_mask: np.ndarray       # (k, T) bool, any tree of the stand observed
    variables: list
    basis: SplineBasis
    initiation: np.ndarray = field(default=None)  # (k,) stand initiation years
    intercept: bool = False

    @property
    def n(self):
        return self.mask.shape[0]

    @property
    def k(self):
        return self.F.shape[0]

    @property
    def T(self):
        return self.years.size

    @property
    def p(self):
        return self.F.shape[2]

    @property
    def has_prev(self):
        hp = np.zeros_like(self.mask)
        hp[:, 1:] = self.mask[:, 1:] & self.mask[:, :-1]
        return hp

    @property
    def is_first(self):
        return self.mask & ~self.has_prev

    def summary(self):
        rows = [("n_trees", self.n), ("n_stands", self.k), ("n_years", self.T),
                ("n_variables", self.p), ("n_basis", self.basis.n_basis),
                ("first_year", int(self.years[0])), ("last_year", int(self.years[-1])),
                ("tree_years", int(self.mask.sum())), ("stand_years", int(self.stand_mask.sum())),
                ("variables", ";".join(self.variables)),
                ("knots", ";".join(f"{x:.6g}" for x in self.basis.knots))]
        return pd.DataFrame(rows, columns=["field", "value"])

    def mask_frame(self):
        rows = []
        for i, tid in enumerate(self.tree_ids):
            obs = np.flatnonzero(self.mask[i])
            rows.append((tid, self.stand_ids[self.stand_of_tree[i]],
                         int(self.years[obs[0]]), int(self.years[obs[-1]]), obs.size))
        return pd.DataFrame(rows, columns=["tree_id", "stand_id", "first_year", "last_year", "n_years"])


def assemble(rings, seasonal: pd.DataFrame, selected_vars, window: StudyWindow | None = None,
             n_knots=10, degree=3, basis: SplineBasis | None = None, intercept=False,
             allowed_variables=SEASONAL_VARIABLES):
    """Align rings and standardized seasonal climate into a ModelDesign.

    ``seasonal`` has columns ``stand_id``, ``year`` and one column per variable.
    """
    selected_vars = list(selected_vars)
    for v in selected_vars:
        if allowed_variables is not None and v not in allowed_variables:
            raise DesignError(f"unknown climate variable {v!r}")
        if v not in seasonal.columns:
            raise DesignError(f"selected variable {v!r} missing from climate table")
    if window is not None:
        rings = [s2 for s2 in (s.truncate(window) for s in rings) if s2 is not None]
    if not rings:
        raise DesignError("no ring series inside the study window")
    rings = sorted(rings, key=lambda s: s.tree_id)
    if window is None:
        window = StudyWindow(min(s.first_year for s in rings), max(s.last_year for s in rings))
    years = window.years
    T = years.size
    stands = sorted({s.stand_id for s in rings})
    sidx = {s: j for j, s in enumerate(stands)}
    n, k, p = len(rings), len(stands), len(selected_vars)

    clim = seasonal.astype({"stand_id": str})
    clim = clim[clim["stand_id"].isin(stands) & clim["year"].between(years[0], years[-1])]
    for s in stands:
        if not (clim["stand_id"] == s).any():
            raise DesignError(f"stand {s} has no climate rows")

    mask = np.zeros((n, T), dtype=bool)
    log_y = np.zeros((n, T))
    ages = np.zeros((n, T))
    for i, s in enumerate(rings):
        lo = s.first_year - years[0]
        mask[i, lo: lo + s.widths.size] = True
        log_y[i, lo: lo + s.widths.size] = np.log(s.widths)
        ages[i] = years - s.recruitment_year
    stand_of_tree = np.array([sidx[s.stand_id] for s in rings], dtype=int)
    stand_mask = np.zeros((k, T), dtype=bool)
    np.logical_or.at(stand_mask, stand_of_tree, mask)

    if basis is None:
        basis = build_basis(ages[mask], n_knots=n_knots, degree=degree)
    X = np.zeros((n, T, basis.n_basis))
    X[mask] = basis.evaluate(ages[mask])

    F = np.zeros((k, T, p + int(intercept)))
    have = np.zeros((k, T), dtype=bool)
    jj = clim["stand_id"].map(sidx).to_numpy()
    tt = clim["year"].to_numpy(dtype=int) - years[0]
    vals = clim[selected_vars].to_numpy(dtype=float)
    ok = np.all(np.isfinite(vals), axis=1)
    F[jj[ok], tt[ok], : p] = vals[ok]
    have[jj[ok], tt[ok]] = True
    if intercept:
        F[..., p] = 1.0
    lacking = stand_mask & ~have
    if lacking.any():
        j, t = np.argwhere(lacking)[0]
        raise DesignError(f"stand {stands[j]} year {years[t]}: observed trees but no climate row "
                          f"({int(lacking.sum())} stand-years lacking)")
    F[~stand_mask] = 0.0

    tables = stand_tables(rings)
    initiation = np.array([tables[s].initiation_year for s in stands])
    names = selected_vars + (["INTERCEPT"] if intercept else [])
    return ModelDesign(years, [s.tree_id for s in rings], stands, [s.species_code for s in rings],
                       np.array([s.recruitment_year for s in rings]), stand_of_tree, mask, log_y, X, F,
                       stand_mask, names, basis, initiation, intercept)


def climate_frame(design: ModelDesign):
    """Stand-year table of the design's climate covariates (observed stand-years only)."""
    j, t = np.nonzero(design.stand_mask)
    df = pd.DataFrame({"stand_id": [design.stand_ids[x] for x in j], "year": design.years[t]})
    for v, name in enumerate(design.variables):
        df[name] = design.F[j, t, v]
    return df
