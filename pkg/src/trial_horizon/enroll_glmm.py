"""Subject enrollment model: Poisson GLMM with exposure offset.

Each site's enrolled count is Poisson with mean ``d * exp(mu + gamma_k)``
where ``d`` is its enrollment exposure in months and ``gamma_k ~ N(0,
sigma^2)`` is a country effect.  With a single grouping factor the marginal
likelihood factorizes over countries; each one-dimensional integral is
evaluated by adaptive Gauss-Hermite quadrature centred at the Laplace mode.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy import optimize
from scipy.special import gammaln, logsumexp

from .data_model import HistoricalDataset
from .errors import InsufficientData, NonConvergence, ZeroExposureWithCount

SCHEMA_VERSION = 1
DEFAULT_AGQ_ORDER = 15
LAPLACE_SITE_THRESHOLD = 10_000
ZERO_SIGMA = 1e-8
_LOG_SIGMA_FLOOR = math.log(1e-10)


@lru_cache(maxsize=None)
def _hermite(order: int):
    x, w = np.polynomial.hermite.hermgauss(order)
    return x, np.log(w) + x**2


@dataclass(frozen=True)
class CountrySummary:
    """Sufficient statistics of one country's sites for the Poisson kernel."""

    n_sites: int
    total_count: float
    total_exposure: float
    log_const: float  # sum(n log d - log n!)

    @classmethod
    def from_sites(cls, sites) -> "CountrySummary":
        sites = list(sites)
        n = np.array([s[0] for s in sites], dtype=float)
        d = np.array([s[1] for s in sites], dtype=float)
        if np.any((d <= 0) & (n > 0)):
            raise ZeroExposureWithCount("a site with enrolled subjects has zero exposure")
        if np.any(d < 0):
            raise ValueError("negative exposure")
        pos = n > 0
        log_const = float(np.sum(n[pos] * np.log(d[pos])) - np.sum(gammaln(n + 1)))
        return cls(len(sites), float(n.sum()), float(d.sum()), log_const)


class _Stacked:
    """Country summaries as arrays, for vectorized evaluation."""

    def __init__(self, summaries):
        self.n_sites = np.array([s.n_sites for s in summaries], dtype=float)
        self.count = np.array([s.total_count for s in summaries], dtype=float)
        self.exposure = np.array([s.total_exposure for s in summaries], dtype=float)
        self.const = np.array([s.log_const for s in summaries], dtype=float)


def _modes(mu, sigma, st: _Stacked):
    """Newton iterations for the modes of the (concave) log integrands."""
    prec = 1.0 / sigma**2
    g = np.zeros_like(st.count)
    for _ in range(100):
        rate = st.exposure * np.exp(mu + g)
        step = (st.count - rate - g * prec) / (-rate - prec)
        # damp very large steps from far-off starting points
        step = np.clip(step, -5.0, 5.0)
        g = g - step
        if np.all(np.abs(step) < 1e-12 * (1.0 + np.abs(g))):
            break
    return g, st.exposure * np.exp(mu + g) + prec


def _country_logliks(mu: float, sigma: float, st: _Stacked, order: int) -> np.ndarray:
    if sigma <= 0:
        return st.const + st.count * mu - st.exposure * math.exp(mu)
    g_hat, curvature = _modes(mu, sigma, st)
    tau = 1.0 / np.sqrt(curvature)
    x, logw = _hermite(order)
    out = np.empty_like(g_hat)
    laplace = st.n_sites > LAPLACE_SITE_THRESHOLD
    for use_laplace in (False, True):
        sel = laplace == use_laplace
        if not sel.any():
            continue
        xs, lw = (np.zeros(1), np.array([math.log(math.sqrt(math.pi))])) if use_laplace else (x, logw)
        nodes = g_hat[sel, None] + math.sqrt(2.0) * tau[sel, None] * xs[None, :]
        eta = mu + nodes
        logf = (
            st.const[sel, None]
            + st.count[sel, None] * eta
            - st.exposure[sel, None] * np.exp(eta)
            - 0.5 * (nodes / sigma) ** 2
            - math.log(sigma)
            - 0.5 * math.log(2 * math.pi)
        )
        out[sel] = np.log(math.sqrt(2.0) * tau[sel]) + logsumexp(lw[None, :] + logf, axis=1)
    return out


def _summary_loglik(mu: float, sigma: float, s: CountrySummary, order: int) -> float:
    return float(_country_logliks(mu, sigma, _Stacked([s]), order)[0])


def country_marginal_loglik(mu: float, sigma: float, sites, order: int = DEFAULT_AGQ_ORDER) -> float:
    """log of the integral over gamma of prod_m Poisson(n_m; d_m e^(mu+gamma)) N(gamma; 0, sigma^2).

    ``sites`` is a sequence of ``(count, exposure)`` pairs.
    """
    if order < 1 or order % 2 == 0:
        raise ValueError("quadrature order must be a positive odd integer")
    return _summary_loglik(mu, sigma, CountrySummary.from_sites(sites), order)


@dataclass(frozen=True)
class FittedEnrollModel:
    mu_en_hat: float
    mu_en_se: float
    sigma_en_gamma: float
    country_modes: dict
    country_condvars: dict
    loglik: float
    agq_nodes: int
    countries: tuple = ()
    # Laplace covariance of (mu, effects of the countries in country_modes)
    joint_cov: tuple = ()

    @cached_property
    def _joint_factor(self) -> np.ndarray:
        cov = np.asarray(self.joint_cov, dtype=float)
        w, vecs = np.linalg.eigh((cov + cov.T) / 2.0)
        return vecs * np.sqrt(np.clip(w, 0.0, None))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "subject_enrollment_glmm",
            "mu_en_hat": self.mu_en_hat,
            "mu_en_se": self.mu_en_se,
            "sigma_en_gamma": self.sigma_en_gamma,
            "countries": list(self.countries),
            "country_modes": dict(self.country_modes),
            "country_condvars": dict(self.country_condvars),
            "loglik": self.loglik,
            "agq_nodes": self.agq_nodes,
            "joint_cov": [list(r) for r in self.joint_cov],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedEnrollModel":
        if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "subject_enrollment_glmm":
            raise ValueError("not a version-1 subject enrollment model document")
        return cls(
            mu_en_hat=float(d["mu_en_hat"]),
            mu_en_se=float(d["mu_en_se"]),
            sigma_en_gamma=float(d["sigma_en_gamma"]),
            country_modes={k: float(v) for k, v in d["country_modes"].items()},
            country_condvars={k: float(v) for k, v in d["country_condvars"].items()},
            loglik=float(d["loglik"]),
            agq_nodes=int(d["agq_nodes"]),
            countries=tuple(d["countries"]),
            joint_cov=tuple(tuple(float(v) for v in row) for row in d.get("joint_cov", [])),
        )


def country_sites(dataset: HistoricalDataset) -> dict:
    """(count, exposure) pairs per country, in pool order."""
    out = {code: [] for code in dataset.countries}
    for combo in dataset.combinations:
        code = dataset.countries[combo.country_index]
        out[code].extend((s.n_subjects, s.duration) for s in combo.site_exposures)
    return out


def _hessian(f, x, h=1e-4):
    x = np.asarray(x, dtype=float)
    k = len(x)
    H = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            ei = np.zeros(k)
            ej = np.zeros(k)
            ei[i] = h
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return H


def _joint_laplace_cov(rates: np.ndarray, sigma: float) -> np.ndarray:
    """Inverse Hessian of the joint log density of (mu, gamma_1..gamma_K) at its mode."""
    k = len(rates)
    H = np.empty((k + 1, k + 1))
    H[0, 0] = rates.sum()
    H[0, 1:] = H[1:, 0] = rates
    H[1:, 1:] = np.diag(rates + 1.0 / sigma**2)
    cov = np.linalg.inv(H)
    return (cov + cov.T) / 2.0


def fit_enroll_sites(sites_by_country: dict, order: int = DEFAULT_AGQ_ORDER) -> FittedEnrollModel:
    """Maximum-likelihood fit from ``{country: [(count, exposure), ...]}``."""
    summaries = {c: CountrySummary.from_sites(s) for c, s in sites_by_country.items() if s}
    total_n = sum(s.total_count for s in summaries.values())
    total_d = sum(s.total_exposure for s in summaries.values())
    if total_d <= 0:
        raise InsufficientData("no site has positive enrollment exposure")
    if total_n <= 0:
        raise InsufficientData("no subjects enrolled in the historical data; the rate is not estimable")
    codes = tuple(summaries)
    stacked = _Stacked([summaries[c] for c in codes])

    def loglik(mu, sigma):
        # fixed country order keeps the sum reproducible
        return float(np.sum(_country_logliks(mu, sigma, stacked, order)))

    mu0 = math.log(total_n / total_d)
    ll0 = loglik(mu0, 0.0)
    fit_sigma = len(codes) >= 2
    if not fit_sigma:
        warnings.warn("fewer than two countries with data; country variance fixed at 0", stacklevel=2)

    mu_hat, sigma_hat, ll = mu0, 0.0, ll0
    if fit_sigma:
        def objective(p):
            return -loglik(p[0], math.exp(max(p[1], _LOG_SIGMA_FLOOR)))

        best = None
        for ls0 in (math.log(0.1), math.log(0.5), math.log(1.5)):
            res = optimize.minimize(
                objective, [mu0, ls0], method="Nelder-Mead",
                options={"fatol": 1e-10, "xatol": 1e-8, "maxiter": 5000},
            )
            if best is None or res.fun < best.fun:
                best = res
        if not best.success:
            raise NonConvergence(f"enrollment GLMM optimizer did not converge: {best.message}")
        sig = math.exp(max(best.x[1], _LOG_SIGMA_FLOOR))
        # an interior optimum must beat the sigma = 0 boundary by more than
        # optimizer noise; otherwise the flat ridge near 0 is collapsed
        if -best.fun > ll0 + 1e-9 and sig >= ZERO_SIGMA:
            mu_hat, sigma_hat, ll = float(best.x[0]), sig, -float(best.fun)

    if sigma_hat > 0:
        H = _hessian(lambda p: -loglik(p[0], math.exp(p[1])), [mu_hat, math.log(sigma_hat)])
        try:
            cov = np.linalg.inv(H)
            se = math.sqrt(cov[0, 0]) if cov[0, 0] > 0 else math.sqrt(1.0 / H[0, 0])
        except np.linalg.LinAlgError:
            se = math.sqrt(1.0 / H[0, 0])
    else:
        se = 1.0 / math.sqrt(total_n)

    if sigma_hat > 0:
        g, curv = _modes(mu_hat, sigma_hat, stacked)
        modes = {c: float(v) for c, v in zip(codes, g)}
        condvars = {c: float(1.0 / v) for c, v in zip(codes, curv)}
        joint = _joint_laplace_cov(stacked.exposure * np.exp(mu_hat + g), sigma_hat)
    else:
        modes = {c: 0.0 for c in codes}
        condvars = {c: 0.0 for c in codes}
        joint = np.zeros((len(codes) + 1, len(codes) + 1))
        joint[0, 0] = se**2
    return FittedEnrollModel(
        mu_en_hat=mu_hat,
        mu_en_se=se,
        sigma_en_gamma=sigma_hat,
        country_modes=modes,
        country_condvars=condvars,
        loglik=ll,
        agq_nodes=order,
        countries=tuple(sites_by_country),
        joint_cov=tuple(tuple(float(v) for v in row) for row in joint),
    )


def fit_enroll(dataset: HistoricalDataset, order: int = DEFAULT_AGQ_ORDER) -> FittedEnrollModel:
    return fit_enroll_sites(country_sites(dataset), order)


@dataclass(frozen=True)
class EnrollDraw:
    mu: float
    gamma: dict

    def rate(self, country: str) -> float:
        return math.exp(self.mu + self.gamma[country])


def sample_enroll_draw(
    fitted: FittedEnrollModel, rng: np.random.Generator, new_study: bool = True, joint: bool = True
) -> EnrollDraw:
    """One draw of the intercept and every pool country's effect.

    With ``joint=True`` the intercept and the effects of observed countries
    come from their joint Laplace approximation, so the well-determined
    country rates ``mu + gamma_k`` are not blurred by intercept uncertainty.
    ``joint=False`` draws ``mu ~ N(mu_hat, se^2)`` and each effect
    independently from its conditional variance.  Countries without data
    draw from ``N(0, sigma^2)`` either way.  ``new_study`` is accepted for
    symmetry with the start-up model; the enrollment model has no study
    effect.
    """
    codes = fitted.countries
    observed = list(fitted.country_modes)
    if joint and fitted.joint_cov:
        mean = np.array([fitted.mu_en_hat] + [fitted.country_modes[c] for c in observed])
        z = mean + fitted._joint_factor @ rng.standard_normal(len(mean))
        mu, gam = float(z[0]), dict(zip(observed, z[1:]))
    else:
        mu = float(rng.normal(fitted.mu_en_hat, fitted.mu_en_se))
        sds = np.sqrt([fitted.country_condvars[c] for c in observed])
        modes = np.array([fitted.country_modes[c] for c in observed])
        gam = dict(zip(observed, modes + sds * rng.standard_normal(len(observed))))
    unseen = [c for c in codes if c not in gam]
    if unseen:
        gam.update(zip(unseen, fitted.sigma_en_gamma * rng.standard_normal(len(unseen))))
    return EnrollDraw(mu=mu, gamma={c: float(gam[c]) for c in codes})


def simulate_site_enrollment(rate: float, start: float, end: float, rng: np.random.Generator) -> np.ndarray:
    """Homogeneous Poisson subject arrivals on ``(start, end]``, sorted."""
    length = end - start
    if rate <= 0 or length <= 0:
        return np.empty(0)
    n = rng.poisson(rate * length)
    return np.sort(end - rng.uniform(0.0, length, n))
