"""Tree-ring series ingestion, stand tables and derived stand ages."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

RING_COLUMNS = ("tree_id", "stand_id", "plot_id", "species", "recruitment_year", "year", "width_mm")

# Species sampled in the northeastern Minnesota stands; extend via register_species().
SPECIES_REGISTRY = {
    "ABBA", "ACRU", "ACSA", "BEPA", "FRNI", "LALA", "PIGL", "PIMA",
    "PIBA", "PIRE", "PIST", "POGR", "POTR", "QURU", "THOC",
}


class RingDataError(ValueError):
    """Raised when ring data violate the series invariants."""


def register_species(*codes):
    SPECIES_REGISTRY.update(c.upper() for c in codes)


@dataclass(frozen=True)
class StudyWindow:
    start_year: int = 1897
    end_year: int = 2007

    def __post_init__(self):
        if not self.start_year < self.end_year:
            raise RingDataError(
                f"study window start {self.start_year} must precede end {self.end_year}")

    @property
    def years(self):
        return np.arange(self.start_year, self.end_year + 1)

    def __len__(self):
        return self.end_year - self.start_year + 1


@dataclass(frozen=True)
class RingSeries:
    """Annual growth increments (mm) of one tree over a contiguous run of years."""

    tree_id: str
    stand_id: str
    plot_id: str
    species_code: str
    recruitment_year: int
    first_year: int
    widths: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.widths, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "widths", w)
        if w.ndim != 1 or w.size == 0:
            raise RingDataError(f"tree {self.tree_id}: widths must be a non-empty 1-d series")
        bad = np.flatnonzero(~(w > 0))
        if bad.size:
            years = (self.first_year + bad).tolist()
            raise RingDataError(f"tree {self.tree_id}: non-positive width in year(s) {years}")
        if self.recruitment_year > self.first_year:
            raise RingDataError(
                f"tree {self.tree_id}: recruitment year {self.recruitment_year} "
                f"after first observed year {self.first_year}")

    @property
    def last_year(self):
        return self.first_year + self.widths.size - 1

    @property
    def years(self):
        return np.arange(self.first_year, self.last_year + 1)

    def ages(self):
        return self.years - self.recruitment_year

    def as_dict(self):
        return dict(zip(self.years.tolist(), self.widths.tolist()))

    def truncate(self, window: StudyWindow):
        """Restrict to the study window; returns None when no years remain."""
        lo = max(self.first_year, window.start_year)
        hi = min(self.last_year, window.end_year)
        if lo > hi:
            return None
        w = self.widths[lo - self.first_year: hi - self.first_year + 1]
        return RingSeries(self.tree_id, self.stand_id, self.plot_id, self.species_code,
                          self.recruitment_year, lo, w.copy())


@dataclass(frozen=True)
class StandTable:
    stand_id: str
    tree_ids: tuple
    initiation_year: int


def log_growth(series: RingSeries):
    """Map year -> natural log of the increment."""
    return dict(zip(series.years.tolist(), np.log(series.widths).tolist()))


def derive_initiation(stand):
    """Stand initiation year: lower order statistic at the 25th percentile of
    member recruitment years (1-based index ceil(0.25 n))."""
    years = sorted(int(s.recruitment_year) if isinstance(s, RingSeries) else int(s) for s in stand)
    if not years:
        raise RingDataError("cannot derive initiation year of an empty stand")
    k = max(1, math.ceil(0.25 * len(years)))
    return years[k - 1]


def stand_tables(rings):
    groups = {}
    for s in rings:
        groups.setdefault(s.stand_id, []).append(s)
    return {sid: StandTable(sid, tuple(s.tree_id for s in members), derive_initiation(members))
            for sid, members in sorted(groups.items())}


def rings_from_frame(df: pd.DataFrame, schema=None):
    if schema:
        df = df.rename(columns={v: k for k, v in schema.items()})
    missing = [c for c in RING_COLUMNS if c not in df.columns]
    if missing:
        raise RingDataError(f"ring table missing column(s): {missing}")
    df = df.astype({"tree_id": str, "stand_id": str, "plot_id": str, "species": str})
    out = []
    unknown = set()
    for tree_id, g in df.groupby("tree_id", sort=True):
        g = g.sort_values("year")
        years = g["year"].to_numpy(dtype=int)
        widths = g["width_mm"].to_numpy(dtype=float)
        bad = np.flatnonzero(~(widths > 0))
        if bad.size:
            raise RingDataError(f"tree {tree_id}: non-positive width in year(s) {years[bad].tolist()}")
        if np.unique(years).size != years.size:
            raise RingDataError(f"tree {tree_id}: duplicated year rows")
        full = np.arange(years[0], years[-1] + 1)
        if full.size != years.size:
            gaps = sorted(set(full.tolist()) - set(years.tolist()))
            raise RingDataError(f"tree {tree_id}: year gap(s) {gaps}")
        meta = g.iloc[0]
        for col in ("stand_id", "plot_id", "species", "recruitment_year"):
            if g[col].nunique() != 1:
                raise RingDataError(f"tree {tree_id}: inconsistent {col} across rows")
        code = str(meta["species"]).upper()
        if code not in SPECIES_REGISTRY:
            unknown.add(code)
        out.append(RingSeries(str(tree_id), meta["stand_id"], meta["plot_id"], code,
                              int(meta["recruitment_year"]), int(years[0]), widths))
    if unknown:
        warnings.warn(f"species code(s) not in registry: {sorted(unknown)}", stacklevel=2)
    return out


def load_rings(path, schema=None):
    """Read long-format ring CSV (one row per tree-year) into RingSeries."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return rings_from_frame(pd.read_csv(path, dtype={"tree_id": str, "stand_id": str,
                                                     "plot_id": str}), schema)


def rings_to_frame(rings):
    rows = []
    for s in rings:
        for y, w in zip(s.years.tolist(), s.widths.tolist()):
            rows.append((s.tree_id, s.stand_id, s.plot_id, s.species_code,
                         s.recruitment_year, y, w))
    return pd.DataFrame(rows, columns=list(RING_COLUMNS))


def save_rings(rings, path):
    rings_to_frame(rings).to_csv(path, index=False, float_format="%.17g")
