"""Monthly Thornthwaite-type water balance and seasonal climate aggregation.

Monthly mean temperature and precipitation are converted to potential
evapotranspiration (PET), actual evapotranspiration (AET), climatic water
deficit (DEF = PET - AET) and snow pack with a single-layer soil bucket and a
temperature-index snow model.  The monthly values are then aggregated into the
28 seasonal growth-year variables used as candidate climate covariates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

CLIMATE_COLUMNS = ("stand_id", "year", "month", "tmin_c", "tmean_c", "tmax_c", "precip_mm", "latitude")

# mid-month day of year
_MID_MONTH_DOY = np.array([15, 46, 74, 105, 135, 166, 196, 227, 258, 288, 319, 349])
_DAYS_IN_MONTH = np.array([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31])

# season -> (months, year offset relative to growth year) ; December belongs to t-1
SEASONS = {
    "FAL": ((9, 10, 11), (-1, -1, -1)),
    "WIN": ((12, 1, 2), (-1, 0, 0)),
    "SPR": ((3, 4, 5), (0, 0, 0)),
    "SUM": ((6, 7, 8), (0, 0, 0)),
    "SUM-LAG": ((6, 7, 8), (-1, -1, -1)),
}
_TEMPS = ("TMIN", "TMEAN", "TMAX")
_FLUXES = ("AET", "PET", "DEF")


def _variable_name(season, var):
    if season == "SUM-LAG":
        return f"SUM-{var}-LAG"
    return f"{season}-{var}"


def seasonal_variables():
    """The 28 candidate variables, in a fixed order."""
    names = []
    for var in _TEMPS:
        names += [_variable_name(s, var) for s in SEASONS]
    for var in _FLUXES:
        names += [_variable_name(s, var) for s in SEASONS if s != "WIN"]
    names.append("SNOW")
    return names


SEASONAL_VARIABLES = tuple(seasonal_variables())


class WaterBalanceError(ValueError):
    pass


@dataclass(frozen=True)
class BucketParams:
    """Soil bucket and snow constants (mm, degrees C)."""

    awc: float = 150.0
    snow_temp: float = 0.0
    rain_temp: float = 6.0
    melt_temp_lo: float = 0.0
    melt_temp_hi: float = 6.0
    spinup_cycles: int = 50
    spinup_tol: float = 0.01


def daylength_hours(latitude, month):
    """Mean daylength at mid-month from the solar declination."""
    lat = np.deg2rad(latitude)
    doy = _MID_MONTH_DOY[np.asarray(month) - 1]
    decl = 0.409 * np.sin(2 * np.pi * doy / 365.0 - 1.39)
    x = np.clip(-np.tan(lat) * np.tan(decl), -1.0, 1.0)
    return 24.0 / np.pi * np.arccos(x)


def heat_index(tmean):
    t = np.asarray(tmean, dtype=float)
    return float(np.sum(np.where(t > 0, (np.maximum(t, 0) / 5.0) ** 1.514, 0.0)))


def thornthwaite_exponent(index):
    return 6.75e-7 * index**3 - 7.71e-5 * index**2 + 1.792e-2 * index + 0.49239


def thornthwaite_pet(tmean, latitude, months=None, index=None, month_days=False):
    """Monthly Thornthwaite PET (mm).

    Parameters
    ----------
    tmean : array_like
        Monthly mean temperature (deg C).  Without ``index`` exactly 12
        consecutive months are required to form the annual heat index.
    latitude : float
        Degrees; the daylength correction is undefined beyond the polar circles.
    months : array_like, optional
        Calendar month (1-12) of each entry; defaults to January..December.
    index : float, optional
        Pre-computed annual heat index.
    month_days : bool
        Also scale by days-in-month / 30 (off by default).
    """
    t = np.asarray(tmean, dtype=float)
    if not -66.5 <= latitude <= 66.5:
        raise WaterBalanceError(f"latitude {latitude} outside [-66.5, 66.5]")
    if months is None:
        months = np.arange(1, t.size + 1)
    months = np.asarray(months)
    if index is None:
        if t.size != 12:
            raise WaterBalanceError("heat index needs 12 consecutive months")
        index = heat_index(t)
    if index <= 0:
        return np.zeros_like(t)
    a = thornthwaite_exponent(index)
    corr = daylength_hours(latitude, months) / 12.0
    if month_days:
        corr = corr * _DAYS_IN_MONTH[months - 1] / 30.0
    pet = 16.0 * corr * (10.0 * np.maximum(t, 0.0) / index) ** a
    return np.where(t > 0, pet, 0.0)


def step_bucket(snowpack, soil_water, tmean, precip, pet, params=BucketParams()):
    """Advance the snow + soil bucket by one month.

    Works elementwise on scalars or arrays.  Returns a dict with the new
    ``snowpack`` and ``soil_water`` plus ``aet``, ``deficit``, ``runoff``
    and ``melt`` (all mm).
    """
    snowpack = np.maximum(np.asarray(snowpack, dtype=float), 0.0)
    soil = np.clip(np.asarray(soil_water, dtype=float), 0.0, params.awc)
    tmean = np.asarray(tmean, dtype=float)
    precip = np.maximum(np.asarray(precip, dtype=float), 0.0)
    pet = np.maximum(np.asarray(pet, dtype=float), 0.0)

    snow_frac = np.clip((params.rain_temp - tmean) / (params.rain_temp - params.snow_temp), 0.0, 1.0)
    snow = precip * snow_frac
    rain = precip - snow
    pack = snowpack + snow
    melt_frac = np.clip((tmean - params.melt_temp_lo) / (params.melt_temp_hi - params.melt_temp_lo), 0.0, 1.0)
    melt = pack * melt_frac
    pack = pack - melt

    supply = rain + melt
    wet = supply >= pet
    surplus = np.where(wet, supply - pet, 0.0)
    recharge = np.minimum(surplus, params.awc - soil)
    draw = np.where(wet, 0.0, np.minimum(pet - supply, soil))
    # the clamp only removes round-off when soil covers the whole shortfall
    aet = np.minimum(np.where(wet, pet, supply + draw), pet)
    new_soil = soil + recharge - draw
    runoff = surplus - recharge
    return {
        "snowpack": pack,
        "soil_water": new_soil,
        "aet": aet,
        "deficit": pet - aet,
        "runoff": runoff,
        "melt": melt,
    }


@dataclass
class WaterBalanceSeries:
    """Monthly water balance for one stand."""

    stand_id: str
    years: np.ndarray
    months: np.ndarray
    tmin: np.ndarray
    tmean: np.ndarray
    tmax: np.ndarray
    precip: np.ndarray
    pet: np.ndarray
    aet: np.ndarray
    deficit: np.ndarray
    snowpack: np.ndarray
    soil_water: np.ndarray
    runoff: np.ndarray
    params: BucketParams = field(default_factory=BucketParams)
    initial_snowpack: float = 0.0
    initial_soil_water: float = 0.0

    def to_frame(self):
        return pd.DataFrame({
            "stand_id": self.stand_id, "year": self.years, "month": self.months,
            "tmin_c": self.tmin, "tmean_c": self.tmean, "tmax_c": self.tmax,
            "precip_mm": self.precip, "pet_mm": self.pet, "aet_mm": self.aet,
            "deficit_mm": self.deficit, "snowpack_mm": self.snowpack,
            "soil_water_mm": self.soil_water, "runoff_mm": self.runoff,
        })

    def closure_error(self):
        """Monthly precipitation minus (storage change + AET + runoff)."""
        snow_prev = np.concatenate([[self.initial_snowpack], self.snowpack[:-1]])
        soil_prev = np.concatenate([[self.initial_soil_water], self.soil_water[:-1]])
        return self.precip - ((self.snowpack - snow_prev) + (self.soil_water - soil_prev)
                              + self.aet + self.runoff)


def _spinup(tmean, precip, pet, params):
    snow, soil = 0.0, params.awc
    for _ in range(params.spinup_cycles):
        s0, w0 = snow, soil
        for m in range(tmean.size):
            st = step_bucket(snow, soil, tmean[m], precip[m], pet[m], params)
            snow, soil = float(st["snowpack"]), float(st["soil_water"])
        if abs(snow - s0) < params.spinup_tol and abs(soil - w0) < params.spinup_tol:
            break
    return snow, soil


def run_stand(monthly: pd.DataFrame, params=BucketParams(), month_days=False):
    """Water balance for one stand's contiguous monthly record (whole years)."""
    m = monthly.sort_values(["year", "month"])
    sid = str(m["stand_id"].iloc[0])
    years = m["year"].to_numpy(dtype=int)
    months = m["month"].to_numpy(dtype=int)
    idx = years * 12 + months - 1
    if np.any(np.diff(idx) != 1):
        raise WaterBalanceError(f"stand {sid}: monthly record is not contiguous")
    if months[0] != 1 or months[-1] != 12:
        raise WaterBalanceError(f"stand {sid}: record must cover whole calendar years")
    tmean = m["tmean_c"].to_numpy(dtype=float)
    tmin = m["tmin_c"].to_numpy(dtype=float)
    tmax = m["tmax_c"].to_numpy(dtype=float)
    precip = m["precip_mm"].to_numpy(dtype=float)
    if np.any(precip < 0):
        raise WaterBalanceError(f"stand {sid}: negative precipitation")
    if np.any(tmin > tmean + 1e-9) or np.any(tmean > tmax + 1e-9):
        raise WaterBalanceError(f"stand {sid}: temperatures violate tmin <= tmean <= tmax")
    lat = float(m["latitude"].iloc[0])

    pet = np.empty_like(tmean)
    for start in range(0, tmean.size, 12):
        pet[start:start + 12] = thornthwaite_pet(tmean[start:start + 12], lat,
                                                 months[start:start + 12], month_days=month_days)

    snow0, soil0 = _spinup(tmean[:12], precip[:12], pet[:12], params)
    n = tmean.size
    out = {k: np.empty(n) for k in ("snowpack", "soil_water", "aet", "deficit", "runoff")}
    snow, soil = snow0, soil0
    for i in range(n):
        st = step_bucket(snow, soil, tmean[i], precip[i], pet[i], params)
        for k in out:
            out[k][i] = st[k]
        snow, soil = st["snowpack"], st["soil_water"]
    return WaterBalanceSeries(sid, years, months, tmin, tmean, tmax, precip, pet,
                              out["aet"], out["deficit"], out["snowpack"], out["soil_water"],
                              out["runoff"], params, snow0, soil0)


def run_water_balance(monthly: pd.DataFrame, params=BucketParams(), awc_by_stand=None,
                      month_days=False):
    """Run the bucket model for every stand; returns {stand_id: WaterBalanceSeries}."""
    missing = [c for c in CLIMATE_COLUMNS if c not in monthly.columns]
    if missing:
        raise WaterBalanceError(f"climate table missing column(s): {missing}")
    monthly = monthly.astype({"stand_id": str})
    out = {}
    for sid, g in monthly.groupby("stand_id", sort=True):
        p = params
        if awc_by_stand and sid in awc_by_stand:
            p = BucketParams(**{**params.__dict__, "awc": float(awc_by_stand[sid])})
        out[sid] = run_stand(g, p, month_days=month_days)
    return out


def aggregate_seasonal(series):
    """Seasonal growth-year variables for one or many WaterBalanceSeries.

    Returns a DataFrame with ``stand_id``, ``year`` and the 28 variables.
    A variable whose seasonal window is not fully covered is NaN.
    """
    if isinstance(series, WaterBalanceSeries):
        series = [series]
    elif isinstance(series, dict):
        series = list(series.values())
    frames = []
    for wb in series:
        years = np.unique(wb.years)
        y0 = years[0]
        grid = {}
        for name, vals in (("TMIN", wb.tmin), ("TMEAN", wb.tmean), ("TMAX", wb.tmax),
                           ("AET", wb.aet), ("PET", wb.pet), ("DEF", wb.deficit),
                           ("SNOW", wb.snowpack)):
            g = np.full((years.size + 1, 12), np.nan)  # row 0 is the year before the record
            g[wb.years - y0 + 1, wb.months - 1] = vals
            grid[name] = g
        rows = {"stand_id": wb.stand_id, "year": years}
        yi = np.arange(years.size) + 1
        for var in _TEMPS + _FLUXES:
            for season, (months, offs) in SEASONS.items():
                if var in _FLUXES and season == "WIN":
                    continue
                block = np.stack([grid[var][yi + o, mth - 1] for mth, o in zip(months, offs)], axis=1)
                agg = block.mean(axis=1) if var in _TEMPS else block.sum(axis=1)
                rows[_variable_name(season, var)] = agg
        months, offs = SEASONS["WIN"]
        rows["SNOW"] = np.stack([grid["SNOW"][yi + o, mth - 1]
                                 for mth, o in zip(months, offs)], axis=1).mean(axis=1)
        frames.append(pd.DataFrame(rows)[["stand_id", "year", *SEASONAL_VARIABLES]])
    return pd.concat(frames, ignore_index=True)


@dataclass(frozen=True)
class Standardizer:
    mean: dict
    sd: dict

    def transform(self, df):
        out = df.copy()
        for v in self.mean:
            out[v] = (df[v] - self.mean[v]) / self.sd[v]
        return out

    def inverse(self, df):
        out = df.copy()
        for v in self.mean:
            out[v] = df[v] * self.sd[v] + self.mean[v]
        return out

    def to_frame(self):
        return pd.DataFrame({"variable": list(self.mean), "mean": list(self.mean.values()),
                             "sd": list(self.sd.values())})


def standardize(seasonal: pd.DataFrame, variables=None):
    """z-score each variable over all stand-years (sample sd, ddof=1).

    Returns ``(standardized_frame, Standardizer)``.
    """
    if variables is None:
        variables = [c for c in seasonal.columns if c not in ("stand_id", "year")]
    mean, sd = {}, {}
    for v in variables:
        x = seasonal[v].to_numpy(dtype=float)
        x = x[np.isfinite(x)]
        if x.size < 2:
            raise WaterBalanceError(f"variable {v}: fewer than 2 values to standardize")
        s = x.std(ddof=1)
        if not s > 0:
            raise WaterBalanceError(f"variable {v}: zero variance")
        mean[v], sd[v] = float(x.mean()), float(s)
    st = Standardizer(mean, sd)
    return st.transform(seasonal), st
