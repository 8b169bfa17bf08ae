"""Country start-up time model: a log-scale linear mixed model fitted by REML.

The response is ``log(u)`` for every study-country combination, with an
intercept, treatment-coded therapeutic-area contrasts, a crossed random
country intercept and (optionally) a random study intercept::

    log u_i = mu + beta_study[j[i]] + gamma_country[k[i]] + alpha . x_i + eps_i

Variance components are estimated by minimizing the REML deviance with
Nelder-Mead over log-variances.  Two evaluations of the deviance are
provided: a dense one that assembles the marginal covariance ``V``
explicitly, and one based on the mixed-model (Henderson) equations that
only factors ``q x q`` matrices.  The fit uses the latter; the two agree to
rounding error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, optimize

from .data_model import GENERAL_MEDICINE, THERAPEUTIC_AREAS, HistoricalDataset, normalize_ta
from .errors import InsufficientData, NonConvergence, NumericalFailure, UnknownCountry, ZeroStartupTime

SCHEMA_VERSION = 1
LOG_VAR_FLOOR = math.log(1e-10)
ZERO_VARIANCE = 1e-8
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CsuModelSpec:
    include_study_effect: bool = True
    ta_reference_level: str = GENERAL_MEDICINE

    def __post_init__(self):
        object.__setattr__(self, "ta_reference_level", normalize_ta(self.ta_reference_level))

    @property
    def contrast_levels(self) -> tuple:
        return tuple(ta for ta in THERAPEUTIC_AREAS if ta != self.ta_reference_level)

    def contrast_vector(self, ta: str) -> np.ndarray:
        ta = normalize_ta(ta)
        return np.array([1.0 if ta == lvl else 0.0 for lvl in self.contrast_levels])


@dataclass(frozen=True)
class OptimizerOptions:
    tolerance: float = 1e-8
    max_iter: int = 20000
    polish: bool = True


@dataclass(eq=False)
class CsuDesign:
    """Response, fixed-effect matrix and random-effect incidence for one fit."""

    y: np.ndarray
    x_full: np.ndarray
    kept: tuple
    country_idx: np.ndarray
    study_idx: np.ndarray
    countries: tuple
    studies: tuple
    spec: CsuModelSpec

    @property
    def n(self) -> int:
        return len(self.y)

    @cached_property
    def X(self) -> np.ndarray:
        return self.x_full[:, list(self.kept)]

    @property
    def blocks(self) -> list:
        """(name, n_levels, row->level index) per random-effect block."""
        out = [("country", len(self.countries), self.country_idx)]
        if self.spec.include_study_effect:
            out.append(("study", len(self.studies), self.study_idx))
        return out

    @cached_property
    def Z(self) -> np.ndarray:
        cols = []
        for _, n_levels, idx in self.blocks:
            z = np.zeros((self.n, n_levels))
            z[np.arange(self.n), idx] = 1.0
            cols.append(z)
        return np.hstack(cols)

    @cached_property
    def column_block(self) -> np.ndarray:
        return np.concatenate([np.full(n_levels, b) for b, (_, n_levels, _) in enumerate(self.blocks)])

    @cached_property
    def _cross(self):
        Z, X = self.Z, self.X
        return Z.T @ Z, Z.T @ X, X.T @ X

    def dropped_levels(self) -> tuple:
        levels = self.spec.contrast_levels
        return tuple(levels[c - 1] for c in range(1, 4) if c not in self.kept)


def design_from_arrays(y, tas, country_codes, study_ids, spec: CsuModelSpec = CsuModelSpec()) -> CsuDesign:
    """Assemble a design from per-row values (log start-up times already taken)."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    countries = tuple(sorted(set(country_codes)))
    studies = tuple(sorted(set(study_ids)))
    cpos = {c: i for i, c in enumerate(countries)}
    spos = {s: i for i, s in enumerate(studies)}
    x_full = np.zeros((n, 4))
    x_full[:, 0] = 1.0
    for i, ta in enumerate(tas):
        x_full[i, 1:] = spec.contrast_vector(ta)

    kept = [0]
    for col in (1, 2, 3):
        trial = x_full[:, kept + [col]]
        if np.linalg.matrix_rank(trial) > len(kept):
            kept.append(col)
    design = CsuDesign(
        y=y,
        x_full=x_full,
        kept=tuple(kept),
        country_idx=np.array([cpos[c] for c in country_codes], dtype=int),
        study_idx=np.array([spos[s] for s in study_ids], dtype=int),
        countries=countries,
        studies=studies,
        spec=spec,
    )
    dropped = design.dropped_levels()
    if dropped:
        warnings.warn(
            f"therapeutic-area contrasts not estimable from the data, treated as 0: {', '.join(dropped)}",
            stacklevel=3,
        )
    return design


def build_design(dataset: HistoricalDataset, spec: CsuModelSpec = CsuModelSpec()) -> CsuDesign:
    u = np.array([c.startup_time for c in dataset.combinations], dtype=float)
    zero = np.flatnonzero(u <= 0)
    if zero.size:
        raise ZeroStartupTime(
            f"combination {int(zero[0])} has start-up time 0 (first site activated on the "
            "protocol approval date); log start-up time is undefined"
        )
    tas = [dataset.combination_ta(c) for c in dataset.combinations]
    codes = [dataset.countries[c.country_index] for c in dataset.combinations]
    sids = [dataset.studies[c.study_index].study_id for c in dataset.combinations]
    return design_from_arrays(np.log(u), tas, codes, sids, spec)


# --------------------------------------------------------------------------
# REML deviance
# --------------------------------------------------------------------------

def _unpack(theta, design: CsuDesign):
    """Map log-variances (country, study, residual) to clipped variances."""
    theta = np.maximum(np.asarray(theta, dtype=float), LOG_VAR_FLOOR)
    if theta.shape != (3,):
        raise ValueError("theta must hold (log var_country, log var_study, log var_resid)")
    var = np.exp(theta)
    block_vars = [var[0]] + ([var[1]] if design.spec.include_study_effect else [])
    return np.array(block_vars), var[2]


def _chol(a, what):
    try:
        return linalg.cho_factor(a, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalFailure(f"{what} is not positive definite") from None


def _logdet(cf) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(cf[0]))))


def _reml_dense(block_vars, var_e, design: CsuDesign) -> float:
    X, y = design.X, design.y
    n, p = X.shape
    V = var_e * np.eye(n)
    for var_b, (_, _, idx) in zip(block_vars, design.blocks):
        V += var_b * (idx[:, None] == idx[None, :])
    cV = _chol(V, "V")
    ViX = linalg.cho_solve(cV, X, check_finite=False)
    XtViX = X.T @ ViX
    cA = _chol(XtViX, "X'V^-1X")
    beta = linalg.cho_solve(cA, ViX.T @ y, check_finite=False)
    r = y - X @ beta
    quad = float(r @ linalg.cho_solve(cV, r, check_finite=False))
    return _logdet(cV) + _logdet(cA) + quad + (n - p) * _LOG_2PI


@dataclass
class _MmeState:
    beta: np.ndarray
    A_factor: tuple
    M_factor: tuple
    lam: np.ndarray
    lZtr: np.ndarray
    rss: float
    var_e: float
    criterion: float


def _reml_mme(block_vars, var_e, design: CsuDesign) -> _MmeState:
    X, y, Z = design.X, design.y, design.Z
    n, p = X.shape
    ZtZ, ZtX, XtX = design._cross
    lam = np.sqrt(block_vars[design.column_block] / var_e)
    M = lam[:, None] * ZtZ * lam[None, :]
    M[np.diag_indices_from(M)] += 1.0
    cM = _chol(M, "I + Lambda Z'Z Lambda")
    lZtX = lam[:, None] * ZtX
    A = XtX - lZtX.T @ linalg.cho_solve(cM, lZtX, check_finite=False)
    cA = _chol(A, "X'V^-1X")
    lZty = lam * (Z.T @ y)
    b = X.T @ y - lZtX.T @ linalg.cho_solve(cM, lZty, check_finite=False)
    beta = linalg.cho_solve(cA, b, check_finite=False)
    r = y - X @ beta
    lZtr = lam * (Z.T @ r)
    rss = max(float(r @ r - lZtr @ linalg.cho_solve(cM, lZtr, check_finite=False)), 0.0)
    crit = (n - p) * math.log(var_e) + _logdet(cM) + _logdet(cA) + rss / var_e + (n - p) * _LOG_2PI
    return _MmeState(beta, cA, cM, lam, lZtr, rss, var_e, crit)


def reml_criterion(theta, design: CsuDesign, method: str = "dense") -> float:
    """-2 x restricted log-likelihood at log-variances ``theta``.

    ``theta`` is ``(log var_country, log var_study, log var_residual)``; the
    study entry is ignored when the model specification excludes the study
    effect.  Entries below ``log(1e-10)`` are clipped to that floor.  ``method`` is ``"dense"``
    (explicit ``V``) or ``"mme"`` (mixed-model equations).
    """
    block_vars, var_e = _unpack(theta, design)
    if method == "dense":
        return _reml_dense(block_vars, var_e, design)
    if method == "mme":
        return _reml_mme(block_vars, var_e, design).criterion
    raise ValueError(f"unknown method {method!r}")


def conditional_effects(design: CsuDesign, variances) -> tuple:
    """Conditional modes and variances of all random effects at given variances.

    ``variances`` is ``(var_country, var_study, var_residual)`` on the natural
    scale.  Returns ``(modes, condvars, state)`` with one entry per Z column.
    """
    variances = np.maximum(np.asarray(variances, dtype=float), math.exp(LOG_VAR_FLOOR))
    block_vars, var_e = _unpack(np.log(variances), design)
    st = _reml_mme(block_vars, var_e, design)
    q = len(st.lam)
    Minv = linalg.cho_solve(st.M_factor, np.eye(q), check_finite=False)
    modes = st.lam * (Minv @ st.lZtr)
    condvars = var_e * st.lam**2 * np.diag(Minv)
    return modes, condvars, st


def joint_covariance(design: CsuDesign, st: _MmeState) -> np.ndarray:
    """Covariance of the estimation errors of (fixed effects, all random effects).

    This is ``var_e`` times the inverse of the full mixed-model coefficient
    matrix.  Its fixed-effect block equals ``(X'V^-1 X)^-1``; the random
    effect block is the prediction error variance, which unlike the
    conditional variances also reflects uncertainty in the fixed effects.
    """
    ZtZ, ZtX, XtX = design._cross
    p, q = XtX.shape[0], len(st.lam)
    lZtX = st.lam[:, None] * ZtX
    M = st.lam[:, None] * ZtZ * st.lam[None, :] + np.eye(q)
    K = np.block([[XtX, lZtX.T], [lZtX, M]])
    Kinv = linalg.inv(K, check_finite=False)
    scale = np.concatenate([np.ones(p), st.lam])
    cov = st.var_e * scale[:, None] * Kinv * scale[None, :]
    return (cov + cov.T) / 2.0


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------

def _psd_factor(cov) -> np.ndarray:
    """F with F F' = cov for a symmetric positive semi-definite matrix."""
    cov = np.asarray(cov, dtype=float)
    w, vecs = np.linalg.eigh((cov + cov.T) / 2.0)
    return vecs * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class FittedCsuModel:
    mu_hat: float
    alpha_hat: tuple
    fixed_cov: tuple
    sigma_gamma: float
    sigma_beta: float
    sigma_eps: float
    country_modes: dict
    country_condvars: dict
    reml_value: float
    spec: CsuModelSpec
    countries: tuple = ()
    dropped_levels: tuple = ()
    n_obs: int = 0
    study_modes: dict = field(default_factory=dict)
    # (mu, 3 contrasts, one effect per country); empty when not available
    joint_cov: tuple = ()

    @property
    def fixed_mean(self) -> np.ndarray:
        return np.concatenate([[self.mu_hat], np.asarray(self.alpha_hat, dtype=float)])

    @cached_property
    def _fixed_factor(self) -> np.ndarray:
        return _psd_factor(self.fixed_cov)

    @cached_property
    def _joint_factor(self) -> np.ndarray:
        return _psd_factor(self.joint_cov)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "country_startup_lmm",
            "spec": {
                "include_study_effect": self.spec.include_study_effect,
                "ta_reference_level": self.spec.ta_reference_level,
                "contrast_levels": list(self.spec.contrast_levels),
                "response": "log",
            },
            "mu_hat": self.mu_hat,
            "alpha_hat": list(self.alpha_hat),
            "fixed_cov": [list(r) for r in self.fixed_cov],
            "sigma_gamma": self.sigma_gamma,
            "sigma_beta": self.sigma_beta,
            "sigma_eps": self.sigma_eps,
            "countries": list(self.countries),
            "country_modes": dict(self.country_modes),
            "country_condvars": dict(self.country_condvars),
            "study_modes": dict(self.study_modes),
            "reml_value": self.reml_value,
            "dropped_levels": list(self.dropped_levels),
            "n_obs": self.n_obs,
            "joint_cov": [list(r) for r in self.joint_cov],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedCsuModel":
        if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "country_startup_lmm":
            raise ValueError("not a version-1 country start-up model document")
        spec = CsuModelSpec(
            include_study_effect=d["spec"]["include_study_effect"],
            ta_reference_level=d["spec"]["ta_reference_level"],
        )
        return cls(
            mu_hat=float(d["mu_hat"]),
            alpha_hat=tuple(float(a) for a in d["alpha_hat"]),
            fixed_cov=tuple(tuple(float(v) for v in row) for row in d["fixed_cov"]),
            sigma_gamma=float(d["sigma_gamma"]),
            sigma_beta=float(d["sigma_beta"]),
            sigma_eps=float(d["sigma_eps"]),
            country_modes={k: float(v) for k, v in d["country_modes"].items()},
            country_condvars={k: float(v) for k, v in d["country_condvars"].items()},
            reml_value=float(d["reml_value"]),
            spec=spec,
            countries=tuple(d["countries"]),
            dropped_levels=tuple(d.get("dropped_levels", ())),
            n_obs=int(d.get("n_obs", 0)),
            study_modes={k: float(v) for k, v in d.get("study_modes", {}).items()},
            joint_cov=tuple(tuple(float(v) for v in row) for row in d.get("joint_cov", [])),
        )


def _start_points(design: CsuDesign) -> list:
    X, y = design.X, design.y
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    dof = max(design.n - X.shape[1], 1)
    total = max(float(resid @ resid) / dof, 1e-6)
    nre = len(design.blocks)
    shares = [
        [1.0 / (nre + 1)] * nre + [1.0 / (nre + 1)],  # equal split
        [0.1 / nre] * nre + [0.9],  # residual-dominant
        [0.8 / nre] * nre + [0.2],  # group-dominant
    ]
    return [np.log(total * np.array(s)) for s in shares]


def _to_theta(active, design: CsuDesign) -> np.ndarray:
    if design.spec.include_study_effect:
        return np.asarray(active, dtype=float)
    return np.array([active[0], LOG_VAR_FLOOR, active[1]])


def fit_csu_design(design: CsuDesign, options: OptimizerOptions = OptimizerOptions()) -> FittedCsuModel:
    n, p = design.X.shape
    if n < p + 1:
        raise InsufficientData(f"{n} combinations cannot support {p} fixed-effect columns")
    if len(design.countries) < 2:
        raise InsufficientData("at least two countries are required to estimate the country variance")

    def objective(active):
        active = np.maximum(active, LOG_VAR_FLOOR)
        block_vars, var_e = _unpack(_to_theta(active, design), design)
        return _reml_mme(block_vars, var_e, design).criterion

    # bounding the log-variances keeps the simplex from drifting along the
    # flat region below the floor when a component collapses to zero
    starts = _start_points(design)
    bounds = [(LOG_VAR_FLOOR, None)] * len(starts[0])
    best = None
    for x0 in starts:
        res = optimize.minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={"fatol": options.tolerance, "xatol": 1e-6, "maxiter": options.max_iter},
        )
        if best is None or res.fun < best.fun:
            best = res
    if not best.success and best.nit >= options.max_iter:
        raise NonConvergence(f"REML optimizer hit the iteration cap ({options.max_iter})")
    if options.polish:
        # restart from the best vertex with a fresh simplex and tight
        # tolerances; the criterion tolerance is relative because an absolute
        # one can sit below the rounding error of a large criterion
        res = optimize.minimize(
            objective,
            np.maximum(best.x, LOG_VAR_FLOOR),
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "fatol": 1e-13 * max(1.0, abs(best.fun)),
                "xatol": 1e-10,
                "maxiter": options.max_iter,
                "adaptive": False,
            },
        )
        if res.fun <= best.fun:
            best = res

    theta = _to_theta(np.maximum(best.x, LOG_VAR_FLOOR), design)
    var = np.exp(theta)
    if not design.spec.include_study_effect:
        var[1] = 0.0
    reported = np.where(var < ZERO_VARIANCE, 0.0, var)

    modes, condvars, st = conditional_effects(design, var)
    XtViX_inv = linalg.cho_solve(st.A_factor, np.eye(p), check_finite=False) * st.var_e

    kept = list(design.kept)
    beta_full = np.zeros(4)
    beta_full[kept] = st.beta
    cov_full = np.zeros((4, 4))
    cov_full[np.ix_(kept, kept)] = (XtViX_inv + XtViX_inv.T) / 2.0

    block = design.column_block
    C = len(design.countries)
    cm, cv = modes[:C], condvars[:C]
    if reported[0] == 0.0:
        cm, cv = np.zeros(C), np.zeros(C)
    full = joint_covariance(design, st)
    sel = list(range(p)) + list(range(p, p + C))
    joint = np.zeros((4 + C, 4 + C))
    where = kept + list(range(4, 4 + C))
    joint[np.ix_(where, where)] = full[np.ix_(sel, sel)]
    if reported[0] == 0.0:
        joint[4:, :] = 0.0
        joint[:, 4:] = 0.0
    joint[:4, :4] = cov_full

    study_modes = {}
    if design.spec.include_study_effect and reported[1] > 0.0:
        study_modes = {s: float(v) for s, v in zip(design.studies, modes[block == 1])}

    return FittedCsuModel(
        mu_hat=float(beta_full[0]),
        alpha_hat=tuple(float(a) for a in beta_full[1:]),
        fixed_cov=tuple(tuple(float(v) for v in row) for row in cov_full),
        sigma_gamma=math.sqrt(reported[0]),
        sigma_beta=math.sqrt(reported[1]),
        sigma_eps=math.sqrt(reported[2]),
        country_modes={c: float(m) for c, m in zip(design.countries, cm)},
        country_condvars={c: float(v) for c, v in zip(design.countries, cv)},
        reml_value=float(best.fun),
        spec=design.spec,
        countries=design.countries,
        dropped_levels=design.dropped_levels(),
        n_obs=n,
        study_modes=study_modes,
        joint_cov=tuple(tuple(float(v) for v in row) for row in joint),
    )


def fit_csu(
    dataset: HistoricalDataset,
    spec: CsuModelSpec = CsuModelSpec(),
    options: OptimizerOptions = OptimizerOptions(),
) -> FittedCsuModel:
    """Fit the country start-up model to every combination in ``dataset``."""
    if len(dataset.countries) < 2:
        raise InsufficientData("at least two countries are required")
    return fit_csu_design(build_design(dataset, spec), options)


def conditional_country(fitted: FittedCsuModel, country: str) -> tuple:
    try:
        return fitted.country_modes[country], fitted.country_condvars[country]
    except KeyError:
        raise UnknownCountry(f"country {country!r} was not observed when fitting") from None


# --------------------------------------------------------------------------
# Simulation draws
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CsuDraw:
    mu: float
    alpha: np.ndarray
    gamma: dict
    beta_new: float
    sigma_eps: float
    spec: CsuModelSpec
    rng: np.random.Generator = field(repr=False, compare=False)

    def residual(self) -> float:
        return float(self.rng.normal(0.0, self.sigma_eps))


def sample_csu_draw(
    fitted: FittedCsuModel, rng: np.random.Generator, new_study: bool = True, joint: bool = True
) -> CsuDraw:
    """One draw of the fixed effects and every pool country's effect.

    With ``joint=True`` (and a fitted joint covariance) the fixed effects and
    country effects are drawn together from the mixed-model equations, which
    keeps the negative correlation between the intercept and the country
    modes.  ``joint=False`` draws the fixed effects from ``fixed_cov`` and
    each country effect independently from its conditional variance.
    """
    codes = fitted.countries
    modes = np.array([fitted.country_modes[c] for c in codes])
    if joint and fitted.joint_cov:
        mean = np.concatenate([fitted.fixed_mean, modes])
        z = mean + fitted._joint_factor @ rng.standard_normal(len(mean))
        fixed, gammas = z[:4], z[4:]
    else:
        fixed = fitted.fixed_mean + fitted._fixed_factor @ rng.standard_normal(4)
        sds = np.sqrt([fitted.country_condvars[c] for c in codes])
        gammas = modes + sds * rng.standard_normal(len(codes))
    beta_new = float(rng.normal(0.0, fitted.sigma_beta)) if new_study else 0.0
    return CsuDraw(
        mu=float(fixed[0]),
        alpha=fixed[1:],
        gamma={c: float(g) for c, g in zip(codes, gammas)},
        beta_new=beta_new,
        sigma_eps=fitted.sigma_eps,
        spec=fitted.spec,
        rng=rng,
    )


def simulate_country_startup(draw: CsuDraw, country: str, ta: str) -> float:
    """Start-up time in months for ``country`` under one parameter draw."""
    try:
        gamma = draw.gamma[country]
    except KeyError:
        raise UnknownCountry(f"no country effect drawn for {country!r}") from None
    eta = draw.mu + draw.beta_new + gamma + float(draw.alpha @ draw.spec.contrast_vector(ta))
    return math.exp(eta + draw.residual())
