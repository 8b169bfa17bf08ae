"""Synthetic histories from known parameters, brute-force oracles and the
coverage calibration harness.

Synthetic studies follow the same three-segment generative process the
models assume:

1. each participating country starts up after ``exp(mu + alpha'x + beta_j +
   gamma_k + eps)`` months;
2. further sites open as an NHPP with rate ``Lambda_k g(t - u)``;
3. every open site enrolls subjects as a homogeneous Poisson process at rate
   ``exp(mu_en + gamma_en_k)``.

Activation in a study stops at the later of its last country start-up and
the time at which the study's site budget is reached, so each country's
activation window is fully observed.  Enrollment is recorded up to the time
the study reaches its subject target.
"""

from __future__ import annotations

import datetime as dt
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import stats as sps

from .data_model import (
    GENERAL_MEDICINE,
    THERAPEUTIC_AREAS,
    IngestOptions,
    PlannedStudy,
    SiteRecord,
    build_dataset,
)
from .enroll_glmm import fit_enroll
from .errors import TrialHorizonError
from .lmm import CsuModelSpec, fit_csu
from .nhpp import (
    TIME_DECAY,
    ActivationData,
    McmcConfig,
    NhppHyperParams,
    PriorSpec,
    RateShape,
    integrated_intensity,
    log_shape,
    run_metropolis,
    simulate_site_activations,
)
from .simulator import FittedModels, SimulationConfig, run_forecast, run_trial_with_values

ANCHOR_DATE = dt.date(2020, 1, 1)
DEFAULT_NOMINAL_LEVELS = (0.40, 0.50, 0.70, 0.95)


@dataclass(frozen=True)
class GroundTruth:
    """Generative parameters and the shape of a synthetic portfolio."""

    # country start-up (log months)
    csu_mu: float = math.log(4.0)
    csu_alpha: tuple = (0.1, -0.1, 0.2)  # immunology, oncology, neurology vs general medicine
    csu_sigma_gamma: float = 0.3
    csu_sigma_beta: float = 0.2
    csu_sigma_eps: float = 0.4
    # site activation
    nhpp_shape: RateShape = TIME_DECAY
    nhpp_alpha: float = 3.0
    nhpp_beta: float = 0.5
    nhpp_eta: float = 0.2
    nhpp_e: Optional[float] = None
    nhpp_lambdas: Optional[tuple] = None  # fixed per-country base rates
    # subject enrollment (per site-month)
    enroll_mu: float = math.log(0.5)
    enroll_sigma_gamma: float = 0.4
    # portfolio
    n_studies: int = 10
    n_countries: int = 8
    countries_per_study: tuple = (3, 6)
    sites_per_study: tuple = (10, 20)
    subjects_per_study: tuple = (60, 150)
    history_horizon: float = 120.0
    m_days_per_month: float = 30.4375
    # the held-out study used in calibration
    planned_subjects: int = 100
    planned_sites: int = 20
    planned_ta: str = "immunology"

    def __post_init__(self):
        if isinstance(self.nhpp_shape, str):
            object.__setattr__(self, "nhpp_shape", RateShape(self.nhpp_shape))
        for name in ("csu_sigma_gamma", "csu_sigma_beta", "csu_sigma_eps", "enroll_sigma_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.nhpp_params.in_support(self.nhpp_shape):
            raise ValueError("NHPP parameters are not valid for the rate shape")
        if self.nhpp_lambdas is not None and len(self.nhpp_lambdas) != self.n_countries:
            raise ValueError("nhpp_lambdas needs one rate per country")
        if len(self.csu_alpha) != 3:
            raise ValueError("csu_alpha needs three therapeutic-area contrasts")
        lo, hi = self.countries_per_study
        if not 1 <= lo <= hi <= self.n_countries:
            raise ValueError("countries_per_study must lie within [1, n_countries]")

    @property
    def nhpp_params(self) -> NhppHyperParams:
        return NhppHyperParams(self.nhpp_alpha, self.nhpp_beta, self.nhpp_eta, self.nhpp_e)

    @property
    def countries(self) -> tuple:
        return tuple(f"C{k + 1:02d}" for k in range(self.n_countries))

    @property
    def planned_study(self) -> PlannedStudy:
        return PlannedStudy(self.planned_subjects, self.planned_sites, self.planned_ta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nhpp_shape"] = {"variant": self.nhpp_shape.variant, "epsilon_offset": self.nhpp_shape.epsilon_offset}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        d = dict(d)
        if "nhpp_shape" in d:
            s = d["nhpp_shape"]
            d["nhpp_shape"] = RateShape(s["variant"], s.get("epsilon_offset", 1e-5)) if isinstance(s, dict) else RateShape(s)
        for key in ("csu_alpha", "countries_per_study", "sites_per_study", "subjects_per_study", "nhpp_lambdas"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class CountryTruth:
    """Realized country-level effects shared by every study of a portfolio."""

    csu_gamma: np.ndarray
    lambdas: np.ndarray
    enroll_gamma: np.ndarray


def draw_country_effects(truth: GroundTruth, rng: np.random.Generator) -> CountryTruth:
    C = truth.n_countries
    gam = rng.normal(0.0, truth.csu_sigma_gamma, C) if truth.csu_sigma_gamma > 0 else np.zeros(C)
    if truth.nhpp_lambdas is not None:
        lam = np.asarray(truth.nhpp_lambdas, dtype=float)
    else:
        lam = rng.gamma(truth.nhpp_alpha, truth.nhpp_beta, C)
    en = rng.normal(0.0, truth.enroll_sigma_gamma, C) if truth.enroll_sigma_gamma > 0 else np.zeros(C)
    return CountryTruth(gam, lam, en)


def _ta_contrast(truth: GroundTruth, ta: str) -> float:
    idx = THERAPEUTIC_AREAS.index(ta)
    return 0.0 if idx == 0 else truth.csu_alpha[idx - 1]


def _startups(truth, effects, country_idx, ta, rng) -> np.ndarray:
    beta_j = rng.normal(0.0, truth.csu_sigma_beta) if truth.csu_sigma_beta > 0 else 0.0
    eps = rng.normal(0.0, truth.csu_sigma_eps, len(country_idx)) if truth.csu_sigma_eps > 0 else np.zeros(len(country_idx))
    eta = truth.csu_mu + _ta_contrast(truth, ta) + beta_j + effects.csu_gamma[country_idx] + eps
    return np.exp(eta)


def _month_day(t: float, m: float, round_up: bool) -> int:
    return int(math.ceil(t * m)) if round_up else int(math.floor(t * m))


def _generate_study(truth, effects, j, rng, m):
    """Site records of synthetic study ``j``."""
    C = truth.n_countries
    codes = truth.countries
    n_cty = int(rng.integers(truth.countries_per_study[0], truth.countries_per_study[1] + 1))
    cidx = np.sort(rng.choice(C, n_cty, replace=False))
    target_sites = int(rng.integers(truth.sites_per_study[0], truth.sites_per_study[1] + 1))
    target_subjects = int(rng.integers(truth.subjects_per_study[0], truth.subjects_per_study[1] + 1))
    ta = THERAPEUTIC_AREAS[j % len(THERAPEUTIC_AREAS)]
    H = truth.history_horizon

    u = _startups(truth, effects, cidx, ta, rng)
    times, owners = [], []
    for pos, k in enumerate(cidx):
        if u[pos] > H:
            continue
        extra = simulate_site_activations(truth.nhpp_shape, truth.nhpp_params, effects.lambdas[k], u[pos], H - u[pos], rng)
        times.append(np.concatenate([[u[pos]], extra]))
        owners.append(np.full(len(extra) + 1, k))
    if not times:
        return []
    t_all = np.concatenate(times)
    o_all = np.concatenate(owners)
    order = np.argsort(t_all, kind="stable")
    t_all, o_all = t_all[order], o_all[order]
    # stop when the site budget is met, but never before the last start-up
    started = u[u <= H]
    stop = max(t_all[min(target_sites, len(t_all)) - 1], started.max())
    keep = t_all <= stop
    t_all, o_all = t_all[keep], o_all[keep]

    subj_t, subj_s = [], []
    for s, (t, k) in enumerate(zip(t_all, o_all)):
        rate = math.exp(truth.enroll_mu + effects.enroll_gamma[k])
        n = rng.poisson(rate * (H - t))
        arr = H - rng.uniform(0.0, H - t, n)
        subj_t.append(arr)
        subj_s.append(np.full(n, s))
    subj_t = np.concatenate(subj_t)
    subj_s = np.concatenate(subj_s)
    if len(subj_t) >= target_subjects:
        lsfd = np.partition(subj_t, target_subjects - 1)[target_subjects - 1]
    else:
        lsfd = H
    enrolled = subj_t <= lsfd

    approval = ANCHOR_DATE + dt.timedelta(days=j)
    # Later sites land at least one day after their country's first site.  Flooring both to
    # the same day could otherwise leave activations inside a zero-length window, which the
    # continuous-time model gives probability zero.
    act_days, first_day = [], {}
    for t, k in zip(t_all, o_all):
        day = max(_month_day(t, m, False), 1)
        if k in first_day:
            day = max(day, first_day[k] + 1)
        else:
            first_day[k] = day
        act_days.append(day)
    counts = np.bincount(subj_s[enrolled], minlength=len(t_all))
    last_t = np.full(len(t_all), -np.inf)
    np.maximum.at(last_t, subj_s[enrolled], subj_t[enrolled])

    records = []
    site_no = {}
    for s, k in enumerate(o_all):
        site_no[k] = site_no.get(k, 0) + 1
        n = int(counts[s])
        if n:
            # subjects cannot share the activation day's start
            last_day = max(_month_day(last_t[s], m, True), act_days[s] + 1)
            last = approval + dt.timedelta(days=last_day)
        else:
            last = None
        records.append(
            SiteRecord(
                study_id=f"S{j + 1:03d}",
                therapeutic_area=ta,
                country_code=codes[k],
                site_id=f"{codes[k]}-{site_no[k]:03d}",
                protocol_approval_date=approval,
                site_activation_date=approval + dt.timedelta(days=act_days[s]),
                last_subject_enrolled_date=last,
                n_subjects_enrolled=n,
            )
        )
    return records


def generate_history(truth: GroundTruth, seed=0, effects: Optional[CountryTruth] = None):
    """Simulate a historical portfolio.

    Returns ``(dataset, truth, effects)``; ``effects`` holds the realized
    country-level parameters so that a held-out study can share them.
    """
    rng = np.random.default_rng(seed)
    if effects is None:
        effects = draw_country_effects(truth, rng)
    records = []
    for j in range(truth.n_studies):
        records.extend(_generate_study(truth, effects, j, rng, truth.m_days_per_month))
    dataset = build_dataset(records, IngestOptions(m_days_per_month=truth.m_days_per_month))
    return dataset, truth, effects


def simulate_true_trial(
    truth: GroundTruth,
    effects: CountryTruth,
    plan: PlannedStudy,
    horizon: float,
    rng: np.random.Generator,
    countries: Optional[Sequence[str]] = None,
):
    """One realization of a new study under the true parameters."""
    codes = truth.countries
    idx = np.arange(len(codes)) if countries is None else np.array([codes.index(c) for c in countries])
    u = _startups(truth, effects, idx, plan.therapeutic_area, rng)
    rates = np.exp(truth.enroll_mu + effects.enroll_gamma[idx])
    return run_trial_with_values(
        [codes[i] for i in idx], u, effects.lambdas[idx], rates, truth.nhpp_shape, truth.nhpp_params, plan, horizon, rng
    )


# --------------------------------------------------------------------------
# Oracles
# --------------------------------------------------------------------------

ORACLE_TAIL = 1e-12


def _log_lambda_grid(params: NhppHyperParams, n: int, total_I: float, grid_size: int) -> np.ndarray:
    """Log-spaced support covering both the prior and the posterior of Lambda."""
    post_shape = n + params.alpha
    post_scale = params.beta / (params.beta * total_I + 1.0)
    lo = min(
        sps.gamma.ppf(ORACLE_TAIL, params.alpha, scale=params.beta),
        sps.gamma.ppf(ORACLE_TAIL, post_shape, scale=post_scale),
    )
    hi = max(
        sps.gamma.isf(ORACLE_TAIL, params.alpha, scale=params.beta),
        sps.gamma.isf(ORACLE_TAIL, post_shape, scale=post_scale),
    )
    lo = max(lo, 1e-300)
    return np.linspace(math.log(lo), math.log(hi), grid_size)


def _log_integrand(params, n, total_I, s):
    lam = np.exp(s)
    # the extra s is the Jacobian of lambda = exp(s)
    return n * s - lam * total_I + sps.gamma.logpdf(lam, params.alpha, scale=params.beta) + s


def _log_trapezoid(x: np.ndarray, logf: np.ndarray) -> float:
    top = np.max(logf)
    return float(top + math.log(np.trapezoid(np.exp(logf - top), x)))


def oracle_nhpp_marginal(shape: RateShape, params: NhppHyperParams, combination, grid_size: int = 200_001) -> float:
    """Log marginal likelihood of one combination by trapezoid integration.

    ``combination`` is ``(delta, offsets)`` with offsets measured from the
    country start-up.  The conditional NHPP likelihood
    ``Lambda^n prod g(t) exp(-Lambda I(delta))`` is integrated against the
    ``Gamma(alpha, scale=beta)`` density on a log-spaced grid truncated
    where both prior and posterior tails fall below 1e-12.
    """
    if grid_size < 100_000:
        raise ValueError("grid_size must be at least 1e5")
    delta = float(combination[0])
    offsets = np.asarray(combination[1], dtype=float)
    n = len(offsets)
    I = float(integrated_intensity(shape, params, delta))
    log_g = float(np.sum(log_shape(shape, params, offsets)))
    s = _log_lambda_grid(params, n, I, grid_size)
    return _log_trapezoid(s, _log_integrand(params, n, I, s)) + log_g


def oracle_grid_posterior_lambda(shape: RateShape, params: NhppHyperParams, stats, grid_size: int = 200_001) -> tuple:
    """Posterior mean and variance of a country's base rate on a grid.

    ``stats`` is a :class:`~trial_horizon.nhpp.CountryActivationStats`.
    """
    n = stats.n_total
    I = float(np.sum(integrated_intensity(shape, params, stats.deltas))) if stats.windows else 0.0
    s = _log_lambda_grid(params, n, I, grid_size)
    logf = _log_integrand(params, n, I, s)
    w = np.exp(logf - logf.max())
    lam = np.exp(s)
    z = np.trapezoid(w, s)
    mean = np.trapezoid(w * lam, s) / z
    var = np.trapezoid(w * (lam - mean) ** 2, s) / z
    return float(mean), float(var)


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CoverageRow:
    nominal: float
    covered: int
    n: int
    coverage: float
    ci_low: float  # Clopper-Pearson 95% interval of the observed coverage
    ci_high: float
    band_low: float  # central 95% binomial band around the nominal level
    band_high: float

    @property
    def within_band(self) -> bool:
        return self.band_low <= self.coverage <= self.band_high


@dataclass
class CalibrationResult:
    rows: list
    n_replicates: int
    n_failed: int
    failures: list = field(default_factory=list)
    true_lsfd: list = field(default_factory=list)

    def to_csv_rows(self) -> list:
        header = ["nominal", "covered", "n", "coverage", "ci_low", "ci_high", "band_low", "band_high"]
        out = [header]
        for r in self.rows:
            out.append([repr(r.nominal), r.covered, r.n, repr(r.coverage), repr(r.ci_low), repr(r.ci_high), repr(r.band_low), repr(r.band_high)])
        return out


def binomial_band(n: int, p: float, level: float = 0.95) -> tuple:
    """Central ``level`` band of the Binomial(n, p) proportion."""
    tail = (1.0 - level) / 2.0
    return float(sps.binom.ppf(tail, n, p) / n), float(sps.binom.isf(tail, n, p) / n)


def _replicate(args):
    truth, r, seed, sim_config, mcmc, priors, levels = args
    rng = np.random.default_rng([seed, r, 1])
    try:
        dataset, _, effects = generate_history(truth, seed=[seed, r, 0])
        plan = truth.planned_study
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            csu = fit_csu(dataset, CsuModelSpec())
            post = run_metropolis(truth.nhpp_shape, ActivationData.from_dataset(dataset), priors, replace(mcmc, seed=int(rng.integers(2**31))))
            enroll = fit_enroll(dataset)
        models = FittedModels(csu, post, enroll)
        config = replace(sim_config, master_seed=int(rng.integers(2**31)))
        result = run_forecast(models, plan, config)
        true = simulate_true_trial(truth, effects, plan, config.horizon, rng, countries=dataset.countries)
    except TrialHorizonError as exc:
        return r, None, f"{type(exc).__name__}: {exc}"
    hits = []
    for q in levels:
        lo, hi = result.prediction_interval(q)
        hits.append(lo <= true.lsfd <= hi)
    return r, (true.lsfd, hits), None


def calibration_experiment(
    truth: GroundTruth,
    n_replicates: int = 200,
    sim_config: SimulationConfig = SimulationConfig(n_trials=200),
    seed: int = 0,
    levels: Sequence[float] = DEFAULT_NOMINAL_LEVELS,
    mcmc: McmcConfig = McmcConfig(),
    priors: PriorSpec = PriorSpec(),
    n_jobs: int = 1,
) -> CalibrationResult:
    """Coverage of central prediction intervals for a held-out study's LSFD.

    Each replicate simulates a history and one new study from ``truth``,
    fits the three models, forecasts, and checks whether the true LSFD lies
    in the forecast interval at every nominal level.  Replicates whose fit
    fails are reported and left out of the denominators.
    """
    if n_replicates < 100:
        warnings.warn("fewer than 100 replicates; coverage estimates are coarse", stacklevel=2)
    tasks = [(truth, r, seed, sim_config, mcmc, priors, tuple(levels)) for r in range(n_replicates)]
    if n_jobs > 1:
        with ProcessPoolExecutor(n_jobs) as pool:
            outcomes = list(pool.map(_replicate, tasks))
    else:
        outcomes = [_replicate(t) for t in tasks]
    outcomes.sort(key=lambda o: o[0])

    ok = [o[1] for o in outcomes if o[1] is not None]
    failures = [(o[0], o[2]) for o in outcomes if o[1] is None]
    n = len(ok)
    rows = []
    for i, q in enumerate(levels):
        covered = sum(1 for _, hits in ok if hits[i])
        if n:
            ci = sps.binomtest(covered, n).proportion_ci(0.95, method="exact")
            band = binomial_band(n, q)
            cov = covered / n
        else:
            ci, band, cov = (math.nan, math.nan), (math.nan, math.nan), math.nan
        rows.append(CoverageRow(float(q), covered, n, cov, float(ci[0]), float(ci[1]), band[0], band[1]))
    return CalibrationResult(rows, n_replicates, len(failures), failures, [t for t, _ in ok])


def degenerate_truth(**overrides) -> GroundTruth:
    """A truth with every variance at zero and start-ups beyond a 60-month horizon.

    No simulated or true study reaches its target in time, so the LSFD is
    deterministic (infinite) and every interval covers it.
    """
    base = dict(
        csu_mu=math.log(100.0),
        csu_sigma_gamma=0.0,
        csu_sigma_beta=0.0,
        csu_sigma_eps=0.0,
        csu_alpha=(0.0, 0.0, 0.0),
        enroll_sigma_gamma=0.0,
        history_horizon=240.0,
        planned_ta=GENERAL_MEDICINE,
    )
    base.update(overrides)
    return GroundTruth(**base)
