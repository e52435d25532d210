"""Staged pipeline: simulate / water balance -> select -> fit-fce -> fit-vce -> classify -> report.

Every stage reads and writes plain files in one output directory and appends
a record to ``manifest.json``.  All randomness derives from the single
configuration seed through labelled sub-streams.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy
import yaml

from . import __version__
from .classifier import (DisturbanceCalendar, FTC_CALENDAR, ThresholdConfig, annual_climate,
                         category_percentages, category_table, classify, exceedance_report,
                         initiation_curve, labels_frame, partial_residuals)
from .design import assemble
from .fce import Priors, SamplerConfig, fit_fce, theta_summary, variance_summary
from .lasso import LassoConfig, select_variables
from .ring_data import StudyWindow, load_rings, save_rings
from .sampler_core import PosteriorChain, diagnostics, rng_stream
from .synth import SynthConfig, simulate, simulate_monthly_climate
from .vce import VceOptions, fit_vce, trajectory_frame
from .water_balance import BucketParams, aggregate_seasonal, run_water_balance, standardize

log = logging.getLogger(__name__)

STAGES = ("simulate", "water-balance", "select", "fit-fce", "fit-vce", "classify", "report")
FLOAT_FORMAT = "%.10g"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class DependencyError(RuntimeError):
    """A stage's upstream artifact is missing; the message names the stage to run."""


class ConvergenceWarning(UserWarning):
    pass


DEFAULTS = {
    "paths": {"rings": None, "climate": None, "seasonal": None, "calendar": None, "output": "out"},
    "window": None,
    "water_balance": {"awc": 150.0, "snow_temp": 0.0, "rain_temp": 6.0, "month_days": False},
    "variables": None,
    "selection": {"iterations": 3000, "burn_in": 1000, "ci_level": 0.90, "r": 1.0, "delta": 1.78},
    "sampler": {"iterations": 2000, "burn_in": 1000, "thin": 1, "chains": 2, "n_knots": 10,
                "rhat_max": 1.1},
    "vce": {"mode": "strict", "half_width": 2, "sigma_theta": "diagonal", "use_fce_prior": True},
    "thresholds": None,
    "classifier": {"ci_level": 0.95, "r2_cut": 0.25, "half_width": 2,
                   "residual_ranges": [[1950, 1954], [1991, 1993]], "percentile": 5.0},
    "synth": {},
    "seed": 0,
}


def _merge(base, over, prefix=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ConfigError(f"{prefix}{k}: unknown configuration field")
        if isinstance(base[k], dict) and base[k] and k not in ("synth",):
            if not isinstance(v, dict):
                raise ConfigError(f"{prefix}{k}: expected a mapping")
            out[k] = _merge(base[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, d, base_dir=None):
        cfg = cls(_merge(DEFAULTS, d or {}), Path(base_dir) if base_dir else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            d = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path}: {e}") from None
        if d is not None and not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(d, path.parent)

    def __getitem__(self, key):
        return self.data[key]

    def validate(self):
        s = self["sampler"]
        for key in ("iterations", "burn_in", "thin", "chains"):
            if not isinstance(s[key], int) or isinstance(s[key], bool):
                raise ConfigError(f"sampler.{key}: must be an integer")
        if s["burn_in"] < 0:
            raise ConfigError("sampler.burn_in: must be >= 0")
        if s["iterations"] <= s["burn_in"]:
            raise ConfigError("sampler.iterations: must exceed sampler.burn_in")
        if s["chains"] < 1:
            raise ConfigError("sampler.chains: must be >= 1")
        if s["thin"] < 1:
            raise ConfigError("sampler.thin: must be >= 1")
        sel = self["selection"]
        if sel["iterations"] <= sel["burn_in"]:
            raise ConfigError("selection.iterations: must exceed selection.burn_in")
        if not 0 < sel["ci_level"] < 1:
            raise ConfigError("selection.ci_level: must lie in (0, 1)")
        c = self["classifier"]
        if not 0 < c["ci_level"] < 1:
            raise ConfigError("classifier.ci_level: must lie in (0, 1)")
        if not c["half_width"] >= 0:
            raise ConfigError("classifier.half_width: must be >= 0")
        if self["vce"]["mode"] not in ("strict", "windowed"):
            raise ConfigError("vce.mode: must be 'strict' or 'windowed'")
        if self["vce"]["sigma_theta"] not in ("diagonal", "wishart"):
            raise ConfigError("vce.sigma_theta: must be 'diagonal' or 'wishart'")
        if not isinstance(self["seed"], int) or self["seed"] < 0:
            raise ConfigError("seed: must be a non-negative integer")
        w = self["window"]
        if w is not None:
            try:
                StudyWindow(int(w["start"]), int(w["end"]))
            except (KeyError, TypeError):
                raise ConfigError("window: expected {start: YEAR, end: YEAR}") from None
            except ValueError as e:
                raise ConfigError(f"window: {e}") from None
        try:
            self.thresholds()
        except ValueError as e:
            raise ConfigError(f"thresholds: {e}") from None
        v = self["variables"]
        if v is not None and (not isinstance(v, list) or not v):
            raise ConfigError("variables: must be a non-empty list or null")
        try:
            SynthConfig(**{k: tuple(x) if isinstance(x, list) else x for k, x in self["synth"].items()})
        except TypeError as e:
            raise ConfigError(f"synth: {e}") from None
        except ValueError as e:
            raise ConfigError(f"synth: {e}") from None

    # ------------------------------------------------------------ derived settings

    def out_dir(self):
        return self.resolve(self["paths"]["output"])

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def window(self):
        w = self["window"]
        return None if w is None else StudyWindow(int(w["start"]), int(w["end"]))

    def thresholds(self):
        t = self["thresholds"]
        return ThresholdConfig() if t is None else ThresholdConfig(dict(t))

    def calendar(self):
        p = self["paths"]["calendar"]
        if p is None:
            return FTC_CALENDAR
        return load_calendar(self.resolve(p))

    def stage_seed(self, stage):
        return int(rng_stream(self["seed"], stage).integers(2**31 - 1))

    def sampler_config(self, stage):
        s = self["sampler"]
        return SamplerConfig(iterations=s["iterations"], burn_in=s["burn_in"], thin=s["thin"],
                             chains=s["chains"], seed=self.stage_seed(stage), priors=Priors())


def load_calendar(path):
    """Disturbance calendar from YAML: ``outbreaks: ["1951-1959", ...]``, ``hosts: [...]``."""
    try:
        d = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"paths.calendar: {path} not found") from None
    try:
        return DisturbanceCalendar.from_dict(d or {})
    except (ValueError, TypeError) as e:
        raise ConfigError(f"paths.calendar: {e}") from None


def save_calendar(calendar, path):
    Path(path).write_text(yaml.safe_dump(calendar.to_dict(), sort_keys=False))


# ---------------------------------------------------------------- run context

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    return {"ringclim": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__}


class Run:
    """Output directory bookkeeping shared by the stages."""

    def __init__(self, config: RunConfig, threads=1):
        self.config = config
        self.threads = max(1, int(threads))
        self.out = config.out_dir()
        self.out.mkdir(parents=True, exist_ok=True)
        self.warnings = []

    def path(self, name):
        return self.out / name

    def require(self, name, stage, configured=None):
        """Path of an input artifact, from config or the output directory."""
        if configured is not None:
            p = self.config.resolve(configured)
            if not p.exists():
                raise DependencyError(f"{p} not found")
            return p
        p = self.path(name)
        if not p.exists():
            raise DependencyError(f"{name} not found in {self.out}; run the '{stage}' stage first")
        return p

    def write_csv(self, df, name):
        p = self.path(name)
        df.to_csv(p, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return p

    def record(self, stage, inputs, outputs):
        mpath = self.path("manifest.json")
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"stages": []}
        manifest["stages"] = [s for s in manifest["stages"] if s["stage"] != stage]
        manifest["stages"].append({
            "stage": stage, "seed": self.config["seed"],
            "inputs": {str(Path(p).name): _sha256(p) for p in inputs},
            "outputs": {str(Path(p).relative_to(self.out)): _sha256(p) for p in outputs},
            "versions": _versions()})
        order = {s: i for i, s in enumerate(STAGES)}
        manifest["stages"].sort(key=lambda s: order[s["stage"]])
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- stages

def stage_simulate(run: Run):
    cfg = run.config
    synth = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["synth"].items()}
    synth.setdefault("seed", cfg.stage_seed("simulate"))
    data = simulate(SynthConfig(**synth))
    outs = [run.path("rings.csv")]
    save_rings(data.rings, outs[0])
    outs.append(run.write_csv(data.climate, "seasonal.csv"))
    outs.append(run.write_csv(data.truth_frame(), "truth.csv"))
    monthly = simulate_monthly_climate(sorted(data.climate["stand_id"].unique()), data.truth["years"],
                                       seed=cfg.stage_seed("simulate-weather"))
    outs.append(run.write_csv(monthly, "climate_monthly.csv"))
    save_calendar(cfg.calendar(), run.path("calendar.yaml"))
    outs.append(run.path("calendar.yaml"))
    run.record("simulate", [], outs)


def stage_water_balance(run: Run):
    cfg = run.config
    wb = cfg["water_balance"]
    src = run.require("climate_monthly.csv", "simulate", cfg["paths"]["climate"])
    monthly = pd.read_csv(src, dtype={"stand_id": str})
    params = BucketParams(awc=wb["awc"], snow_temp=wb["snow_temp"], rain_temp=wb["rain_temp"])
    series = run_water_balance(monthly, params, month_days=wb["month_days"])
    frames = [s.to_frame() for s in series.values()]
    outs = [run.write_csv(pd.concat(frames, ignore_index=True), "water_balance_monthly.csv")]
    raw = aggregate_seasonal(series)
    outs.append(run.write_csv(raw, "seasonal_raw.csv"))
    complete = raw.dropna()
    std, scaler = standardize(complete)
    outs.append(run.write_csv(std, "seasonal.csv"))
    outs.append(run.write_csv(scaler.to_frame(), "standardization.csv"))
    run.record("water-balance", [src], outs)


def _rings_and_seasonal(run):
    cfg = run.config
    rp = run.require("rings.csv", "simulate", cfg["paths"]["rings"])
    sp = run.require("seasonal.csv", "water-balance", cfg["paths"]["seasonal"])
    return rp, sp, load_rings(rp), pd.read_csv(sp, dtype={"stand_id": str})


def _variables(run, seasonal):
    cfg = run.config
    if cfg["variables"] is not None:
        return list(cfg["variables"])
    sel = run.path("selected_variables.txt")
    if sel.exists():
        names = [x for x in sel.read_text().split() if x]
        if names:
            return names
    return [c for c in seasonal.columns if c not in ("stand_id", "year")]


def _design(run, rings, seasonal, variables):
    cfg = run.config
    allowed = None   # synthetic tables may carry arbitrary covariate names
    return assemble(rings, seasonal, variables, window=cfg.window(),
                    n_knots=cfg["sampler"]["n_knots"], allowed_variables=allowed)


def stage_select(run: Run):
    cfg = run.config
    rp, sp, rings, seasonal = _rings_and_seasonal(run)
    candidates = [c for c in seasonal.columns if c not in ("stand_id", "year")]
    design = _design(run, rings, seasonal, candidates)
    s = cfg["selection"]
    lcfg = LassoConfig(iterations=s["iterations"], burn_in=s["burn_in"], ci_level=s["ci_level"],
                       r=s["r"], delta=s["delta"], seed=cfg.stage_seed("select"))
    _, summary = select_variables(design, lcfg)
    outs = [run.write_csv(summary, "lasso_summary.csv")]
    chosen = summary.loc[summary["selected"], "variable"].tolist()
    p = run.path("selected_variables.txt")
    p.write_text("\n".join(chosen) + ("\n" if chosen else ""))
    outs.append(p)
    if not chosen:
        log.warning("selection kept no variables; fit stages will fall back to all variables")
    run.record("select", [rp, sp], outs)


def _convergence(run, chain, stage, blocks):
    diag = diagnostics(chain, blocks) if chain.n_chains > 1 or chain.n_draws >= 200 else None
    if diag is None:
        return None
    worst = float(np.nanmax(np.where(np.isfinite(diag["rhat"]), diag["rhat"], np.inf)))
    if worst > run.config["sampler"]["rhat_max"]:
        msg = f"{stage}: max split R-hat {worst:.3f} exceeds {run.config['sampler']['rhat_max']}"
        log.warning(msg)
        run.warnings.append(msg)
    return diag


def stage_fit_fce(run: Run):
    rp, sp, rings, seasonal = _rings_and_seasonal(run)
    design = _design(run, rings, seasonal, _variables(run, seasonal))
    chain = fit_fce(design, run.config.sampler_config("fit-fce"), n_jobs=run.threads)
    chain.save(run.path("fce_chain.npz"))
    outs = [run.path("fce_chain.npz"),
            run.write_csv(theta_summary(chain), "fce_theta.csv"),
            run.write_csv(variance_summary(chain), "fce_variances.csv"),
            run.write_csv(design.summary(), "design_summary.csv")]
    diag = _convergence(run, chain, "fit-fce", ["theta", "sigma2", "phi", "tau2"])
    if diag is not None:
        outs.append(run.write_csv(diag, "fce_diagnostics.csv"))
    run.record("fit-fce", [rp, sp], outs)


def stage_fit_vce(run: Run):
    cfg = run.config
    rp, sp, rings, seasonal = _rings_and_seasonal(run)
    design = _design(run, rings, seasonal, _variables(run, seasonal))
    inputs = [rp, sp]
    fce = None
    if cfg["vce"]["use_fce_prior"] and run.path("fce_chain.npz").exists():
        fce = PosteriorChain.load(run.path("fce_chain.npz"))
        if list(fce.meta["variables"]) != list(design.variables):
            fce = None
        else:
            inputs.append(run.path("fce_chain.npz"))
    v = cfg["vce"]
    options = VceOptions(mode=v["mode"], half_width=v["half_width"], sigma_theta_form=v["sigma_theta"])
    chain = fit_vce(design, cfg.sampler_config("fit-vce"), options, fce_chain=fce, n_jobs=run.threads)
    chain.save(run.path("vce_chain.npz"))
    level = cfg["classifier"]["ci_level"]
    traj = trajectory_frame(chain, design, cfg["classifier"]["half_width"], level)
    outs = [run.path("vce_chain.npz"), run.write_csv(traj, "theta_trajectory.csv"),
            run.write_csv(variance_summary(chain), "vce_variances.csv")]
    diag = _convergence(run, chain, "fit-vce", ["sigma2", "phi", "tau2"])
    if diag is not None:
        outs.append(run.write_csv(diag, "vce_diagnostics.csv"))
    run.record("fit-vce", inputs, outs)


def _ci_cols(level):
    lo = f"{100 * (1 - level) / 2:g}"
    return f"q{lo}", f"q{100 - float(lo):g}"


def stage_classify(run: Run):
    cfg = run.config
    tp = run.require("theta_trajectory.csv", "fit-vce")
    cp = run.require("vce_chain.npz", "fit-vce")
    rp, sp, rings, seasonal = _rings_and_seasonal(run)
    traj = pd.read_csv(tp)
    c = cfg["classifier"]
    variables = sorted(traj["variable"].unique())
    thresholds = cfg.thresholds()
    missing = [v for v in variables if v not in thresholds.quantiles]
    if missing:
        raise ConfigError(f"thresholds: no quantile configured for {missing}")
    calendar = cfg.calendar()
    labels = classify(traj, seasonal, thresholds, calendar, window=c["half_width"],
                      r2_cut=c["r2_cut"], ci_cols=_ci_cols(c["ci_level"]))
    outs = [run.write_csv(labels_frame(labels), "labels.csv"),
            run.write_csv(category_table(labels), "category_table.csv"),
            run.write_csv(exceedance_report(seasonal, thresholds, labels, c["half_width"], variables),
                          "exceedances.csv")]

    chain = PosteriorChain.load(cp)
    design = _design(run, rings, seasonal, list(chain.meta["variables"]))
    alpha = chain["alpha"]
    alpha_mean = np.where(design.stand_mask, np.nanmean(np.where(np.isnan(alpha), 0.0, alpha), axis=0),
                          np.nan)
    trend = np.nan_to_num(chain.extras["trend_mean"])
    frames = []
    for a, b in c["residual_ranges"]:
        a, b = max(a, int(design.years[0])), min(b, int(design.years[-1]))
        if a > b:
            continue
        df = partial_residuals(design, trend, alpha_mean, (a, b), calendar, c["percentile"])
        df.insert(0, "range", f"{a}-{b}")
        frames.append(df)
    pr = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["range", "tree_id", "stand_id", "species", "host", "year", "residual"])
    outs.append(run.write_csv(pr, "partial_residuals.csv"))
    init = dict(zip(design.stand_ids, design.initiation.tolist()))
    observed = {s: set(design.years[design.stand_mask[j]].tolist()) for j, s in enumerate(design.stand_ids)}
    outs.append(run.write_csv(initiation_curve(labels, init, observed), "initiation_curve.csv"))
    pct = category_percentages(labels)
    outs.append(run.write_csv(pd.DataFrame({"category": list(pct), "percent": list(pct.values())}),
                              "category_percentages.csv"))
    run.record("classify", [tp, cp, rp, sp], outs)


def stage_report(run: Run):
    """Plot-ready tables (coefficients, trajectories, thresholds, residuals, initiation) under report/."""
    cfg = run.config
    need = {"fce_theta.csv": "fit-fce", "theta_trajectory.csv": "fit-vce", "labels.csv": "classify",
            "exceedances.csv": "classify", "partial_residuals.csv": "classify",
            "initiation_curve.csv": "classify"}
    src = {n: run.require(n, s) for n, s in need.items()}
    _, sp, _, seasonal = _rings_and_seasonal(run)
    rdir = run.path("report")
    rdir.mkdir(exist_ok=True)
    traj = pd.read_csv(src["theta_trajectory.csv"])
    labels = pd.read_csv(src["labels.csv"])
    trajectory = traj.merge(labels[["variable", "year", "category"]], on=["variable", "year"], how="left")
    variables = sorted(traj["variable"].unique())
    means = annual_climate(seasonal, variables)
    counts = seasonal.groupby("year")[variables].count()
    se = seasonal.groupby("year")[variables].std(ddof=1) / np.sqrt(counts)
    th = cfg.thresholds()
    exc = pd.read_csv(src["exceedances.csv"])
    rows = []
    for v in variables:
        cut = float(np.quantile(means[v].dropna(), th.level(v)))
        hit = exc[exc["variable"] == v].set_index("year")["responded"]
        for y in means.index:
            rows.append((v, int(y), means.at[y, v], 2 * se.at[y, v], cut, int(y) in hit.index,
                         bool(hit.get(int(y), False))))
    thresholds = pd.DataFrame(rows, columns=["variable", "year", "mean", "two_se", "threshold",
                                       "exceedance", "responded"])
    tables = {"fixed_coefficients.csv": pd.read_csv(src["fce_theta.csv"]),
              "coefficient_trajectories.csv": trajectory, "climate_thresholds.csv": thresholds,
              "defoliation_residuals.csv": pd.read_csv(src["partial_residuals.csv"]),
              "initiation_curve.csv": pd.read_csv(src["initiation_curve.csv"])}
    outs = [run.write_csv(df, f"report/{name}") for name, df in tables.items()]
    index = pd.DataFrame({"file": list(tables), "rows": [len(df) for df in tables.values()]})
    outs.append(run.write_csv(index, "report/index.csv"))
    run.record("report", list(src.values()) + [sp], outs)


STAGE_FUNCS = {"simulate": stage_simulate, "water-balance": stage_water_balance, "select": stage_select,
               "fit-fce": stage_fit_fce, "fit-vce": stage_fit_vce, "classify": stage_classify,
               "report": stage_report}


def parse_stages(text):
    stages = [s.strip() for s in text.split(",") if s.strip()] if isinstance(text, str) else list(text)
    bad = [s for s in stages if s not in STAGES]
    if bad:
        raise ConfigError(f"--stages: unknown stage(s) {bad}; choose from {', '.join(STAGES)}")
    return sorted(set(stages), key=STAGES.index)


def run_pipeline(config: RunConfig, stages, threads=1):
    """Run ``stages`` in pipeline order; returns the Run (``run.warnings`` lists convergence issues)."""
    run = Run(config, threads)
    for stage in parse_stages(stages):
        log.info("stage %s", stage)
        STAGE_FUNCS[stage](run)
    return run

