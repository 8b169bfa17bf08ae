"""Monte Carlo forecast of a planned study's enrollment.

Every simulated trial draws one parameter set from each fitted model, then
simulates country start-ups, site activations and subject arrivals in that
order.  Trials use independent random streams keyed by
``(master_seed, trial_index)``, so results do not depend on the order in
which trials are executed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data_model import PlannedStudy
from .enroll_glmm import FittedEnrollModel, sample_enroll_draw, simulate_site_enrollment
from .errors import EmptyInput, ModelMismatch
from .lmm import FittedCsuModel, sample_csu_draw, simulate_country_startup
from .nhpp import NhppHyperParams, NhppPosterior, RateShape, sample_lambda_conditional, simulate_site_activations

SCHEMA_VERSION = 1
DEFAULT_QUANTILES = (0.025, 0.20, 0.25, 0.30, 0.50, 0.70, 0.75, 0.80, 0.975)


@dataclass(frozen=True)
class SimulationConfig:
    n_trials: int = 1000
    horizon: float = 60.0
    master_seed: int = 0
    quantile_levels: tuple = DEFAULT_QUANTILES
    grid_step: float = 1.0

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        levels = tuple(float(q) for q in self.quantile_levels)
        if any(not 0 < q < 1 for q in levels) or list(levels) != sorted(set(levels)):
            raise ValueError("quantile levels must be distinct, sorted and inside (0, 1)")
        object.__setattr__(self, "quantile_levels", levels)

    @property
    def summary_grid(self) -> np.ndarray:
        n = int(math.floor(self.horizon / self.grid_step + 1e-9))
        return np.arange(n + 1) * self.grid_step

    def rng(self, trial_index: int) -> np.random.Generator:
        return np.random.default_rng([self.master_seed, trial_index])


def _fingerprint(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FittedModels:
    csu: FittedCsuModel
    nhpp: NhppPosterior
    enroll: FittedEnrollModel

    def __post_init__(self):
        pools = {
            "start-up": tuple(self.csu.countries),
            "activation": tuple(self.nhpp.countries),
            "enrollment": tuple(self.enroll.countries),
        }
        if len(set(pools.values())) != 1:
            detail = "; ".join(f"{k}: {','.join(v)}" for k, v in pools.items())
            raise ModelMismatch(f"fitted models disagree on the country pool ({detail})")

    @property
    def countries(self) -> tuple:
        return tuple(self.csu.countries)

    def fingerprints(self) -> dict:
        return {
            "csu": _fingerprint(self.csu.to_dict()),
            "nhpp": _fingerprint(self.nhpp.to_dict()),
            "enroll": _fingerprint(self.enroll.to_dict()),
        }


@dataclass
class SimulatedTrial:
    trial_index: int
    countries: tuple
    startup: np.ndarray  # per candidate country; may exceed the horizon
    site_country: np.ndarray  # retained sites, in activation order
    site_activation: np.ndarray
    subject_times: np.ndarray  # sorted
    subject_site: np.ndarray
    lsfd: float
    n_candidate_sites: int

    @property
    def country_site_counts(self) -> dict:
        counts = np.bincount(self.site_country, minlength=len(self.countries))
        return {c: int(n) for c, n in zip(self.countries, counts)}

    def cumulative_subjects(self, grid) -> np.ndarray:
        return np.searchsorted(self.subject_times, np.asarray(grid, dtype=float), side="right")


def run_trial_with_values(
    countries: Sequence[str],
    startups,
    lambdas,
    rates,
    shape: RateShape,
    params: NhppHyperParams,
    plan: PlannedStudy,
    horizon: float,
    rng: np.random.Generator,
    trial_index: int = 0,
) -> SimulatedTrial:
    """Simulate activations and enrollment given concrete per-country values."""
    countries = tuple(countries)
    startups = np.asarray(startups, dtype=float)
    times, owners = [], []
    for k, u in enumerate(startups):
        if u > horizon:
            continue
        extra = simulate_site_activations(shape, params, lambdas[k], u, horizon - u, rng)
        times.append(np.concatenate([[u], extra]))
        owners.append(np.full(len(extra) + 1, k))
    if times:
        all_times = np.concatenate(times)
        all_owners = np.concatenate(owners)
    else:
        all_times, all_owners = np.empty(0), np.empty(0, dtype=int)
    order = np.argsort(all_times, kind="stable")[: plan.target_sites]
    site_act = all_times[order]
    site_cty = all_owners[order].astype(int)

    subj, subj_site = [], []
    for s, (t, k) in enumerate(zip(site_act, site_cty)):
        arrivals = simulate_site_enrollment(rates[k], t, horizon, rng)
        subj.append(arrivals)
        subj_site.append(np.full(len(arrivals), s))
    if subj:
        subject_times = np.concatenate(subj)
        subject_site = np.concatenate(subj_site)
        o = np.argsort(subject_times, kind="stable")
        subject_times, subject_site = subject_times[o], subject_site[o]
    else:
        subject_times, subject_site = np.empty(0), np.empty(0, dtype=int)
    lsfd = float(subject_times[plan.target_subjects - 1]) if len(subject_times) >= plan.target_subjects else math.inf
    return SimulatedTrial(
        trial_index=trial_index,
        countries=countries,
        startup=startups,
        site_country=site_cty,
        site_activation=site_act,
        subject_times=subject_times,
        subject_site=subject_site,
        lsfd=lsfd,
        n_candidate_sites=len(all_times),
    )


def simulate_trial(
    models: FittedModels,
    plan: PlannedStudy,
    config: SimulationConfig,
    trial_index: int,
    rng: Optional[np.random.Generator] = None,
) -> SimulatedTrial:
    if rng is None:
        rng = config.rng(trial_index)
    countries = plan.resolve_countries(models.countries)

    csu_draw = sample_csu_draw(models.csu, rng, new_study=True)
    post = models.nhpp
    params = post.sample(int(rng.integers(post.n_samples)))
    lambdas = [sample_lambda_conditional(post.shape, params, post.country_stats[c], rng) for c in countries]
    enroll_draw = sample_enroll_draw(models.enroll, rng, new_study=True)

    startups = [simulate_country_startup(csu_draw, c, plan.therapeutic_area) for c in countries]
    rates = [enroll_draw.rate(c) for c in countries]
    return run_trial_with_values(
        countries, startups, lambdas, rates, post.shape, params, plan, config.horizon, rng, trial_index
    )


# --------------------------------------------------------------------------
# Summaries
# --------------------------------------------------------------------------

def quantile_with_censoring(values, p: float) -> float:
    """Order statistic ``ceil(p n)`` with infinite values sorted last."""
    vals = np.sort(np.asarray(values, dtype=float))
    n = len(vals)
    if n == 0:
        raise EmptyInput("quantile of an empty sample")
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    # tolerance keeps e.g. 0.3 * 10 from rounding up to 4
    rank = max(math.ceil(p * n - 1e-9), 1)
    return float(vals[rank - 1])


def _curve_from_counts(counts: np.ndarray, levels, cap: int) -> np.ndarray:
    """counts: trials x grid.  Returns grid x levels."""
    capped = np.minimum(counts, cap)
    ordered = np.sort(capped, axis=0)
    n = ordered.shape[0]
    rows = [max(math.ceil(p * n - 1e-9), 1) - 1 for p in levels]
    return ordered[rows, :].T.astype(float)


def enrollment_curve(trials: Sequence[SimulatedTrial], grid, levels, cap: int) -> np.ndarray:
    """Quantiles over trials of capped cumulative enrollment; shape (grid, levels)."""
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted ascending")
    counts = np.array([t.cumulative_subjects(grid) for t in trials])
    return _curve_from_counts(counts, levels, cap)


def _fmt(x: float):
    return "Inf" if math.isinf(x) else x


@dataclass
class ForecastResult:
    config: SimulationConfig
    plan: PlannedStudy
    countries: tuple
    lsfd_values: np.ndarray
    grid: np.ndarray
    curves: np.ndarray  # grid x levels
    site_counts: np.ndarray  # trials x countries
    startups: np.ndarray  # trials x countries
    fingerprints: dict = field(default_factory=dict)

    @property
    def n_censored(self) -> int:
        return int(np.sum(np.isinf(self.lsfd_values)))

    @property
    def lsfd_quantiles(self) -> dict:
        return {p: quantile_with_censoring(self.lsfd_values, p) for p in self.config.quantile_levels}

    def prediction_interval(self, level: float) -> tuple:
        lo = quantile_with_censoring(self.lsfd_values, (1.0 - level) / 2.0)
        hi = quantile_with_censoring(self.lsfd_values, (1.0 + level) / 2.0)
        return lo, hi

    def country_summaries(self) -> dict:
        out = {}
        for k, code in enumerate(self.countries):
            sc = self.site_counts[:, k]
            su = self.startups[:, k]
            out[code] = {
                "p_active": float(np.mean(sc > 0)),
                "site_count": {p: quantile_with_censoring(sc, p) for p in self.config.quantile_levels},
                "startup": {p: quantile_with_censoring(su, p) for p in self.config.quantile_levels},
            }
        return out

    def to_dict(self) -> dict:
        levels = self.config.quantile_levels
        return {
            "schema_version": SCHEMA_VERSION,
            "config": {
                "n_trials": self.config.n_trials,
                "horizon_months": self.config.horizon,
                "master_seed": self.config.master_seed,
                "quantile_levels": list(levels),
                "grid_step": self.config.grid_step,
            },
            "plan": {
                "target_subjects": self.plan.target_subjects,
                "target_sites": self.plan.target_sites,
                "therapeutic_area": self.plan.therapeutic_area,
                "indication": self.plan.indication,
                "candidate_countries": list(self.countries),
            },
            "model_fingerprints": dict(self.fingerprints),
            "lsfd_quantiles": {str(p): _fmt(v) for p, v in self.lsfd_quantiles.items()},
            "n_censored": self.n_censored,
            "enrollment_curves": {
                "months": [float(t) for t in self.grid],
                "levels": list(levels),
                "values": [[float(v) for v in row] for row in self.curves],
            },
            "country_summaries": {
                code: {
                    "p_active": s["p_active"],
                    "site_count": {str(p): v for p, v in s["site_count"].items()},
                    "startup_months": {str(p): _fmt(v) for p, v in s["startup"].items()},
                }
                for code, s in self.country_summaries().items()
            },
        }

    def write(self, outdir) -> None:
        """Write forecast.json, curves.csv, lsfd.csv and countries.csv."""
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        levels = self.config.quantile_levels
        with (out / "forecast.json").open("w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with (out / "curves.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["month"] + [f"q{p:g}" for p in levels])
            for t, row in zip(self.grid, self.curves):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        with (out / "lsfd.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trial_index", "lsfd_months"])
            for i, v in enumerate(self.lsfd_values):
                w.writerow([i, "" if math.isinf(v) else repr(float(v))])
        with (out / "countries.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["country", "p_active"]
                + [f"sites_q{p:g}" for p in levels]
                + [f"startup_q{p:g}" for p in levels]
            )
            for code, s in self.country_summaries().items():
                w.writerow(
                    [code, repr(s["p_active"])]
                    + [repr(s["site_count"][p]) for p in levels]
                    + [("Inf" if math.isinf(s["startup"][p]) else repr(s["startup"][p])) for p in levels]
                )


def run_forecast(
    models: FittedModels,
    plan: PlannedStudy,
    config: SimulationConfig = SimulationConfig(),
    order: Optional[Sequence[int]] = None,
) -> ForecastResult:
    """Simulate ``config.n_trials`` trials and summarize them.

    ``order`` optionally permutes the execution order of trials; the result
    is identical for any permutation.
    """
    countries = plan.resolve_countries(models.countries)
    n = config.n_trials
    if order is None:
        order = range(n)
    elif sorted(order) != list(range(n)):
        raise ValueError("order must be a permutation of the trial indices")
    grid = config.summary_grid
    lsfd = np.empty(n)
    counts = np.empty((n, len(grid)), dtype=int)
    site_counts = np.empty((n, len(countries)), dtype=int)
    startups = np.empty((n, len(countries)))
    for i in order:
        trial = simulate_trial(models, plan, config, i, config.rng(i))
        lsfd[i] = trial.lsfd
        counts[i] = trial.cumulative_subjects(grid)
        site_counts[i] = np.bincount(trial.site_country, minlength=len(countries))
        startups[i] = trial.startup
    return ForecastResult(
        config=config,
        plan=plan,
        countries=countries,
        lsfd_values=lsfd,
        grid=grid,
        curves=_curve_from_counts(counts, config.quantile_levels, plan.target_subjects),
        site_counts=site_counts,
        startups=startups,
        fingerprints=models.fingerprints(),
    )
