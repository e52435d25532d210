"""Classification of annual climate sensitivity into response categories.

A variable-year is *sensitive* when its coefficient's credible interval
excludes zero and the annual r^2 of the stand-effect fit over the
surrounding five years is at least 0.25.  Sensitive years are then
attributed, in priority order, to a threshold exceedance, a persistent
response to an earlier exceedance, a disturbance period, or left unknown.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

CATEGORIES = ("zero", "weak", "threshold", "persistent", "disturbance", "unknown")
SENSITIVE = ("threshold", "persistent", "disturbance", "unknown")

DEFAULT_QUANTILES = {"SUM-DEF": 0.95, "SUM-DEF-LAG": 0.95, "FAL-DEF": 0.98, "SPR-DEF": 0.85, "SNOW": 0.85}


@dataclass(frozen=True)
class ThresholdConfig:
    quantiles: dict = field(default_factory=lambda: dict(DEFAULT_QUANTILES))

    def __post_init__(self):
        for v, q in self.quantiles.items():
            if not 0 < q < 1:
                raise ValueError(f"quantile for {v} must lie in (0, 1), got {q}")

    def level(self, variable):
        return self.quantiles[variable]


@dataclass(frozen=True)
class DisturbanceCalendar:
    intervals: tuple = ()      # ((start, end), ...) inclusive
    hosts: tuple = ()

    def __post_init__(self):
        iv = tuple(sorted((int(a), int(b)) for a, b in self.intervals))
        for a, b in iv:
            if a > b:
                raise ValueError(f"interval {a}-{b} is reversed")
        for (a0, b0), (a1, b1) in zip(iv, iv[1:]):
            if a1 <= b0:
                raise ValueError(f"intervals {a0}-{b0} and {a1}-{b1} overlap")
        object.__setattr__(self, "intervals", iv)
        object.__setattr__(self, "hosts", tuple(self.hosts))

    def contains(self, year):
        return any(a <= year <= b for a, b in self.intervals)

    def is_host(self, species):
        return species in self.hosts

    def to_dict(self):
        return {"outbreaks": [f"{a}-{b}" for a, b in self.intervals], "hosts": list(self.hosts)}

    @classmethod
    def from_dict(cls, d):
        iv = []
        for item in d.get("outbreaks", []):
            if isinstance(item, str):
                a, _, b = item.partition("-")
                iv.append((int(a), int(b or a)))
            else:
                iv.append((int(item[0]), int(item[1])))
        return cls(tuple(iv), tuple(d.get("hosts", ())))


# forest tent caterpillar outbreaks affecting the study stands, and host genera
FTC_CALENDAR = DisturbanceCalendar(((1951, 1959), (1964, 1972), (1989, 1995), (2000, 2006)),
                                   ("ACSA", "BEPA", "POGR", "POTR", "QURU"))


@dataclass(frozen=True)
class ResponseLabel:
    variable: str
    year: int
    category: str
    ci_low: float = float("nan")
    ci_high: float = float("nan")
    r2_annual: float = float("nan")

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    def as_dict(self):
        return asdict(self)


def _window(t, T, half_width):
    return range(max(0, t - half_width), min(T, t + half_width + 1))


def annual_r2(alpha, F, theta, t, stand_mask=None, half_width=2):
    """r^2 of stand effects in the years around ``t`` explained by ``theta[t]``.

    ``alpha`` (k, T) and ``theta`` (T, p) may also carry a leading draws axis,
    in which case posterior means are used.  NaN entries of ``alpha`` are
    treated as unobserved.  Returns NaN when the window's stand effects are
    constant.
    """
    alpha = np.asarray(alpha, dtype=float)
    theta = np.asarray(theta, dtype=float)
    F = np.asarray(F, dtype=float)
    if alpha.ndim == 3:
        alpha = np.nanmean(alpha, axis=0)
    if theta.ndim == 3:
        theta = theta.mean(axis=0)
    k, T = alpha.shape
    obs = np.isfinite(alpha) if stand_mask is None else (np.asarray(stand_mask, bool) & np.isfinite(alpha))
    s = np.array(list(_window(t, T, half_width)))
    if s.size == 0:
        raise ValueError(f"year index {t} outside 0..{T - 1}")
    a = alpha[:, s][obs[:, s]]
    f = F[:, s][obs[:, s]]
    if a.size == 0:
        return float("nan")
    ss_tot = np.sum((a - a.mean()) ** 2)
    if ss_tot == 0:
        return float("nan")
    return float(1.0 - np.sum((a - f @ theta[t]) ** 2) / ss_tot)


def annual_climate(climate: pd.DataFrame, variables=None):
    """Mean across stands of each climate variable per year (index = year)."""
    cols = [c for c in climate.columns if c not in ("stand_id", "year")] if variables is None else list(variables)
    if "stand_id" not in climate.columns:
        return climate.set_index("year")[cols].sort_index()
    return climate.groupby("year")[cols].mean().sort_index()


def exceedance_years(values, q):
    """Years whose value is strictly above the ``q`` quantile of the series."""
    s = pd.Series(values).dropna()
    if s.empty:
        return []
    cut = np.quantile(s.to_numpy(dtype=float), q)
    return [int(y) for y in s.index[s.to_numpy() > cut]]


def _runs(years):
    """Split sorted years into maximal runs of consecutive years."""
    runs = []
    for y in sorted(years):
        if runs and y == runs[-1][-1] + 1:
            runs[-1].append(y)
        else:
            runs.append([y])
    return runs


def categorize(sensitive_years, exceedances, calendar: DisturbanceCalendar, window=2,
               priority=("threshold", "persistent", "disturbance")):
    """Map each sensitive year of one variable to a category."""
    exc = np.asarray(sorted(exceedances), dtype=int)
    near = {y: bool(exc.size) and bool(np.any(np.abs(exc - y) <= window)) for y in sensitive_years}
    persistent = {}
    for run in _runs(sensitive_years):
        seen = False
        for y in run:
            persistent[y] = seen and not near[y]
            seen = seen or near[y]
    tests = {"threshold": near, "persistent": persistent,
             "disturbance": {y: calendar.contains(y) for y in sensitive_years}}
    out = {}
    for y in sensitive_years:
        out[y] = next((c for c in priority if tests[c][y]), "unknown")
    return out


def classify(trajectory: pd.DataFrame, climate: pd.DataFrame, thresholds=ThresholdConfig(),
             calendar=FTC_CALENDAR, window=2, r2_cut=0.25, ci_cols=("q2.5", "q97.5"),
             priority=("threshold", "persistent", "disturbance")):
    """Label every variable-year of a coefficient trajectory.

    ``trajectory`` has columns year, variable, the two CI columns and
    r2_annual; ``climate`` is either a stand-year table or annual means.
    """
    lo_col, hi_col = ci_cols
    means = annual_climate(climate, sorted(trajectory["variable"].unique()))
    traj_years = set(trajectory["year"].astype(int))
    if not traj_years <= set(means.index.astype(int)):
        missing = sorted(traj_years - set(means.index.astype(int)))
        raise ValueError(f"climate does not cover trajectory years, e.g. {missing[:3]}")
    labels = []
    for var in sorted(trajectory["variable"].unique()):
        rows = trajectory[trajectory["variable"] == var].sort_values("year")
        exc = exceedance_years(means[var], thresholds.level(var))
        base = {}
        for y, lo, hi, r2 in rows[["year", lo_col, hi_col, "r2_annual"]].itertuples(index=False):
            if lo <= 0 <= hi:
                base[int(y)] = "zero"
            elif not (np.isfinite(r2) and r2 >= r2_cut):
                base[int(y)] = "weak"
            else:
                base[int(y)] = None
        cats = categorize([y for y, c in base.items() if c is None], exc, calendar, window, priority)
        for y, lo, hi, r2 in rows[["year", lo_col, hi_col, "r2_annual"]].itertuples(index=False):
            labels.append(ResponseLabel(var, int(y), base[int(y)] or cats[int(y)],
                                        float(lo), float(hi), float(r2)))
    return labels


def labels_frame(labels):
    cols = ["variable", "year", "category", "ci_low", "ci_high", "r2_annual"]
    return pd.DataFrame([lab.as_dict() for lab in labels], columns=cols)


def category_percentages(labels):
    """Percent of sensitive responses falling in each sensitive category."""
    cats = [lab.category for lab in labels if lab.category in SENSITIVE]
    if not cats:
        return {c: 0.0 for c in SENSITIVE}
    return {c: 100.0 * cats.count(c) / len(cats) for c in SENSITIVE}


def _spans(years):
    return ", ".join(f"{r[0]}" if len(r) == 1 else f"{r[0]}-{r[-1]}" for r in _runs(years))


def category_table(labels):
    """Sensitive years per variable and category as compact year spans."""
    df = labels_frame(labels)
    df = df[df["category"].isin(SENSITIVE)]
    rows = []
    for var in sorted(df["variable"].unique()):
        sub = df[df["variable"] == var]
        rows.append([var] + [_spans(sub.loc[sub["category"] == c, "year"].tolist()) or "NA"
                             for c in SENSITIVE])
    pct = category_percentages(labels)
    rows.append(["percent"] + [f"{pct[c]:g}" for c in SENSITIVE])
    return pd.DataFrame(rows, columns=["variable", *SENSITIVE])


def exceedance_report(climate: pd.DataFrame, thresholds=ThresholdConfig(), labels=None, window=2,
                      variables=None):
    """Exceedance years per variable, flagged when a threshold response lies within ``window`` years."""
    variables = list(thresholds.quantiles) if variables is None else list(variables)
    means = annual_climate(climate, variables)
    responses = {}
    for lab in labels or ():
        if lab.category == "threshold":
            responses.setdefault(lab.variable, []).append(lab.year)
    rows = []
    for var in variables:
        q = thresholds.level(var)
        vals = means[var].dropna()
        cut = float(np.quantile(vals.to_numpy(dtype=float), q)) if len(vals) else float("nan")
        resp = np.asarray(responses.get(var, []), dtype=int)
        for y in exceedance_years(vals, q):
            hit = bool(resp.size) and bool(np.any(np.abs(resp - y) <= window))
            rows.append((var, y, float(vals.loc[y]), cut, q, hit))
    return pd.DataFrame(rows, columns=["variable", "year", "value", "threshold", "quantile", "responded"])


def low_growth_stands(alpha_mean, stand_ids, years, year_range, percentile=5.0):
    """The ceil(percentile/100 * k) stands with the lowest mean stand effect over ``year_range``.

    Ties are broken by stand id.
    """
    years = np.asarray(years)
    a, b = year_range
    if a > b or a < years[0] or b > years[-1]:
        raise ValueError(f"year range {a}-{b} outside study window {years[0]}-{years[-1]}")
    sel = (years >= a) & (years <= b)
    with np.errstate(invalid="ignore"):
        m = np.nanmean(np.asarray(alpha_mean, dtype=float)[:, sel], axis=1)
    m = np.where(np.isfinite(m), m, np.inf)
    n_pick = math.ceil(percentile / 100.0 * len(stand_ids))
    order = sorted(range(len(stand_ids)), key=lambda j: (m[j], stand_ids[j]))
    return [stand_ids[j] for j in order[:n_pick]]


def partial_residuals(design, trend, alpha_mean, year_range, calendar=FTC_CALENDAR, percentile=5.0):
    """Observed log growth minus the fitted age trend, for trees in the lowest-growth stands.

    ``trend`` is the (n, T) fitted spline (posterior mean); ``alpha_mean`` the
    (k, T) posterior mean stand effects.
    """
    stands = low_growth_stands(alpha_mean, design.stand_ids, design.years, year_range, percentile)
    a, b = year_range
    rows = []
    chosen = {design.stand_ids.index(s) for s in stands}
    for i, tid in enumerate(design.tree_ids):
        j = design.stand_of_tree[i]
        if j not in chosen:
            continue
        sp = design.species[i]
        for t in np.flatnonzero(design.mask[i] & (design.years >= a) & (design.years <= b)):
            rows.append((tid, design.stand_ids[j], sp, calendar.is_host(sp), int(design.years[t]),
                         float(design.log_y[i, t] - trend[i, t])))
    return pd.DataFrame(rows, columns=["tree_id", "stand_id", "species", "host", "year", "residual"])


def initiation_curve(labels, initiation, observed=None):
    """Cumulative fraction of responses against years since stand initiation.

    Every sensitive response year counts once for each stand observed in that
    year, at that stand's age.  ``initiation`` maps stand id to initiation
    year; ``observed`` maps stand id to the years it was observed (default:
    every year).  Curves are returned for the unknown category and for all
    sensitive categories.
    """
    out = []
    for name, keep in (("unknown", ("unknown",)), ("all", SENSITIVE)):
        ages = []
        for lab in labels:
            if lab.category not in keep:
                continue
            for sid, start in initiation.items():
                if observed is None or lab.year in observed[sid]:
                    ages.append(lab.year - int(start))
        if not ages:
            continue
        vals, counts = np.unique(ages, return_counts=True)
        cum = np.cumsum(counts) / counts.sum()
        out.extend((name, int(v), int(c), float(f)) for v, c, f in zip(vals, counts, cum))
    return pd.DataFrame(out, columns=["label_set", "years_since_initiation", "n", "cumulative_fraction"])


def curve_at(curve, age, label_set="unknown"):
    """Cumulative fraction of ``label_set`` responses at or below ``age``."""
    c = curve[curve["label_set"] == label_set]
    c = c[c["years_since_initiation"] <= age]
    return float(c["cumulative_fraction"].iloc[-1]) if len(c) else 0.0
