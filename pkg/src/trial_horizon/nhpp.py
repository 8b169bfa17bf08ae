"""Site activation model: a hierarchical non-homogeneous Poisson process.

Within a study-country combination the sites after the first open as a
Poisson process with intensity ``Lambda_k * g(t)`` where ``t`` is time since
the country started up and ``g`` is one of two unit-rate shapes:

* time decay:  ``g(t) = exp(-(eta + eps) t)``
* quadratic:   ``g(t) = exp(-(t - e)^2 / (2 (eta + eps)))``

``Lambda_k ~ Gamma(alpha, scale=beta)`` per country.  Integrating ``Lambda``
out gives a closed-form marginal likelihood in ``(alpha, beta, eta[, e])``
which is sampled by random-walk Metropolis on the log scale.  Given a
posterior draw, each country's ``Lambda_k`` is conjugate Gamma.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln, ndtr

from .data_model import HistoricalDataset
from .errors import NonFiniteLikelihood, StuckChain

SCHEMA_VERSION = 1
EPSILON_OFFSET = 1e-5
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class RateShape:
    variant: str = "decay"
    epsilon_offset: float = EPSILON_OFFSET

    def __post_init__(self):
        aliases = {"timedecay": "decay", "time_decay": "decay", "quadratic": "quad"}
        variant = aliases.get(self.variant.lower(), self.variant.lower())
        if variant not in ("decay", "quad"):
            raise ValueError(f"unknown rate shape {self.variant!r}")
        object.__setattr__(self, "variant", variant)
        if not self.epsilon_offset > 0:
            raise ValueError("epsilon_offset must be positive")

    @property
    def param_names(self) -> tuple:
        return ("alpha", "beta", "eta") if self.variant == "decay" else ("alpha", "beta", "eta", "e")


TIME_DECAY = RateShape("decay")
QUADRATIC = RateShape("quad")


@dataclass(frozen=True)
class NhppHyperParams:
    alpha: float
    beta: float
    eta: float
    e: Optional[float] = None

    def in_support(self, shape: RateShape) -> bool:
        if not (self.alpha > 0 and self.beta > 0):
            return False
        if shape.variant == "decay":
            return self.eta > 0 and self.e is None
        return self.eta >= 0 and self.e is not None and self.e >= 0

    def as_array(self, shape: RateShape) -> np.ndarray:
        vals = [self.alpha, self.beta, self.eta]
        if shape.variant == "quad":
            vals.append(self.e)
        return np.array(vals, dtype=float)

    @classmethod
    def from_array(cls, shape: RateShape, values) -> "NhppHyperParams":
        values = [float(v) for v in values]
        return cls(*values[:3], e=values[3] if shape.variant == "quad" else None)


def integrated_intensity(shape: RateShape, params: NhppHyperParams, delta):
    """Integral of the unit-rate shape over ``(0, delta]``; vectorized in ``delta``."""
    s = params.eta + shape.epsilon_offset
    delta = np.asarray(delta, dtype=float)
    if shape.variant == "decay":
        out = -np.expm1(-s * delta) / s
    else:
        root = math.sqrt(s)
        a = -params.e / root
        b = (delta - params.e) / root
        # Phi(b) - Phi(a) written to avoid cancellation in the upper tail
        if a > 0:
            out = _SQRT_2PI * root * (ndtr(-a) - ndtr(-b))
        else:
            out = _SQRT_2PI * root * (ndtr(b) - ndtr(a))
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def log_shape(shape: RateShape, params: NhppHyperParams, t):
    """log g(t) for times ``t`` measured from the country start-up."""
    s = params.eta + shape.epsilon_offset
    t = np.asarray(t, dtype=float)
    if shape.variant == "decay":
        return -s * t
    return -((t - params.e) ** 2) / (2.0 * s)


# --------------------------------------------------------------------------
# Data summaries
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CountryActivationStats:
    country: str
    n_total: int
    windows: tuple  # (u, u') per combination

    @property
    def deltas(self) -> np.ndarray:
        return np.array([b - a for a, b in self.windows], dtype=float)


@dataclass(eq=False)
class ActivationData:
    """Flattened activation data for all combinations."""

    n: np.ndarray
    delta: np.ndarray
    times: np.ndarray  # offsets relative to start-up, all combinations
    owner: np.ndarray  # combination index of each entry in ``times``
    country_idx: np.ndarray
    startups: np.ndarray
    countries: tuple

    @classmethod
    def from_windows(cls, windows, countries=None) -> "ActivationData":
        """Build from ``(country, u, u_end, activation_offsets)`` tuples."""
        windows = list(windows)
        if countries is None:
            countries = tuple(sorted({w[0] for w in windows}))
        pos = {c: i for i, c in enumerate(countries)}
        n = np.array([len(w[3]) for w in windows], dtype=float)
        starts = np.array([w[1] for w in windows], dtype=float)
        delta = np.array([w[2] - w[1] for w in windows], dtype=float)
        times = [np.asarray(w[3], dtype=float) - w[1] for w in windows]
        owner = np.repeat(np.arange(len(windows)), [len(t) for t in times])
        return cls(
            n=n,
            delta=delta,
            times=np.concatenate(times) if times else np.empty(0),
            owner=owner,
            country_idx=np.array([pos[w[0]] for w in windows], dtype=int),
            startups=starts,
            countries=tuple(countries),
        )

    @classmethod
    def from_dataset(cls, dataset: HistoricalDataset) -> "ActivationData":
        return cls.from_windows(
            (
                (dataset.countries[c.country_index], c.startup_time, c.activation_end, c.activation_offsets)
                for c in dataset.combinations
            ),
            countries=dataset.countries,
        )

    def country_stats(self) -> dict:
        out = {}
        for k, code in enumerate(self.countries):
            sel = np.flatnonzero(self.country_idx == k)
            out[code] = CountryActivationStats(
                country=code,
                n_total=int(self.n[sel].sum()),
                windows=tuple(
                    (float(self.startups[i]), float(self.startups[i] + self.delta[i])) for i in sel
                ),
            )
        return out


def _as_data(data) -> ActivationData:
    if isinstance(data, ActivationData):
        return data
    if isinstance(data, HistoricalDataset):
        return ActivationData.from_dataset(data)
    return ActivationData.from_windows(data)


# --------------------------------------------------------------------------
# Likelihood and priors
# --------------------------------------------------------------------------

def combination_log_likelihoods(shape: RateShape, params: NhppHyperParams, data) -> np.ndarray:
    """Per-combination log marginal likelihood with ``Lambda`` integrated out."""
    d = _as_data(data)
    a, b = params.alpha, params.beta
    I = integrated_intensity(shape, params, d.delta)
    out = gammaln(d.n + a) - gammaln(a) + d.n * math.log(b) - (d.n + a) * np.log1p(b * I)
    if d.times.size:
        out = out + np.bincount(d.owner, weights=log_shape(shape, params, d.times), minlength=len(d.n))
    # activations cannot fall inside an empty window
    return np.where((d.n > 0) & (d.delta <= 0), -np.inf, out)


def log_marginal_likelihood(shape: RateShape, params: NhppHyperParams, data) -> float:
    d = _as_data(data)
    if d.n.size == 0:
        return 0.0
    terms = combination_log_likelihoods(shape, params, d)
    total = float(terms.sum())
    if not math.isfinite(total):
        bad = int(np.flatnonzero(~np.isfinite(terms))[0])
        raise NonFiniteLikelihood(bad)
    return total


@dataclass(frozen=True)
class Prior:
    """Univariate prior on (0, inf): gamma(shape, scale), exponential(mean),
    lognormal(mu, sigma) or flat (improper, density 1)."""

    family: str
    params: tuple = ()

    @classmethod
    def gamma(cls, shape, scale):
        return cls("gamma", (float(shape), float(scale)))

    @classmethod
    def exponential(cls, mean):
        return cls("exponential", (float(mean),))

    @classmethod
    def lognormal(cls, mu, sigma):
        return cls("lognormal", (float(mu), float(sigma)))

    @classmethod
    def flat(cls):
        return cls("flat", ())

    def __post_init__(self):
        expected = {"gamma": 2, "exponential": 1, "lognormal": 2, "flat": 0}
        if self.family not in expected:
            raise ValueError(f"unknown prior family {self.family!r}")
        if len(self.params) != expected[self.family] or any(p <= 0 for p in self.params[-1:]):
            raise ValueError(f"bad parameters for {self.family} prior: {self.params}")

    def logpdf(self, x: float) -> float:
        if not x > 0:
            return -math.inf
        if self.family == "gamma":
            k, theta = self.params
            return (k - 1.0) * math.log(x) - x / theta - math.lgamma(k) - k * math.log(theta)
        if self.family == "exponential":
            (mean,) = self.params
            return -x / mean - math.log(mean)
        if self.family == "lognormal":
            mu, sigma = self.params
            z = (math.log(x) - mu) / sigma
            return -0.5 * z * z - math.log(x * sigma) - 0.5 * math.log(2 * math.pi)
        return 0.0

    def mean(self) -> float:
        if self.family == "gamma":
            return self.params[0] * self.params[1]
        if self.family == "exponential":
            return self.params[0]
        if self.family == "lognormal":
            return math.exp(self.params[0] + 0.5 * self.params[1] ** 2)
        return math.inf

    def sample(self, rng: np.random.Generator) -> float:
        if self.family == "gamma":
            return float(rng.gamma(self.params[0], self.params[1]))
        if self.family == "exponential":
            return float(rng.exponential(self.params[0]))
        if self.family == "lognormal":
            return float(rng.lognormal(*self.params))
        raise ValueError("cannot sample an improper flat prior")

    def to_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d) -> "Prior":
        return cls(d["family"], tuple(float(p) for p in d["params"]))


@dataclass(frozen=True)
class PriorSpec:
    alpha: Prior = Prior.gamma(2.0, 2.0)
    beta: Prior = Prior.gamma(2.0, 2.0)
    eta: Prior = Prior.exponential(1.0)
    e: Prior = Prior.exponential(6.0)

    @classmethod
    def flat(cls) -> "PriorSpec":
        f = Prior.flat()
        return cls(f, f, f, f)

    def for_shape(self, shape: RateShape) -> tuple:
        return tuple(getattr(self, name) for name in shape.param_names)

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in ("alpha", "beta", "eta", "e")}

    @classmethod
    def from_dict(cls, d) -> "PriorSpec":
        return cls(**{name: Prior.from_dict(v) for name, v in d.items()})


def log_posterior(shape: RateShape, params: NhppHyperParams, data, priors: PriorSpec = PriorSpec()) -> float:
    """Unnormalized log posterior; ``-inf`` outside the support."""
    if not params.in_support(shape):
        return -math.inf
    lp = sum(prior.logpdf(v) for prior, v in zip(priors.for_shape(shape), params.as_array(shape)))
    if not math.isfinite(lp):
        return -math.inf
    return log_marginal_likelihood(shape, params, data) + lp


# --------------------------------------------------------------------------
# Metropolis sampler
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 20000
    burn_in: int = 5000
    thin: int = 15
    seed: int = 0
    initial: Optional[tuple] = None
    step_scales: Optional[tuple] = None
    adapt_every: int = 100

    def __post_init__(self):
        if self.iterations <= self.burn_in:
            raise ValueError("iterations must exceed burn_in")
        if self.thin < 1 or self.adapt_every < 1:
            raise ValueError("thin and adapt_every must be positive")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "burn_in": self.burn_in,
            "thin": self.thin,
            "seed": self.seed,
            "initial": list(self.initial) if self.initial is not None else None,
            "step_scales": list(self.step_scales) if self.step_scales is not None else None,
            "adapt_every": self.adapt_every,
        }


def effective_sample_size(x) -> float:
    """Autocorrelation-based ESS with Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        return float(n)
    xc = x - x.mean()
    var = xc @ xc / n
    if var == 0:
        return float(n)
    f = np.fft.rfft(xc, 2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n] / (n * var)
    pair_sums = acf[0 : n - 1 : 2] + acf[1:n:2]
    tau = -1.0
    running = math.inf
    for p in pair_sums:
        if p <= 0:
            break
        running = min(running, p)
        tau += 2.0 * running
    return float(n / max(tau, 1e-12))


def split_rhat(x) -> float:
    x = np.asarray(x, dtype=float)
    half = len(x) // 2
    if half < 2:
        return math.nan
    chains = np.stack([x[:half], x[half : 2 * half]])
    w = chains.var(axis=1, ddof=1).mean()
    b = half * chains.mean(axis=1).var(ddof=1)
    if w == 0:
        return 1.0
    return float(math.sqrt(((half - 1) / half * w + b / half) / w))


@dataclass(frozen=True)
class NhppPosterior:
    shape: RateShape
    chains: np.ndarray = field(repr=False)
    acceptance_rate: float
    country_stats: dict = field(repr=False)
    priors: PriorSpec = PriorSpec()
    config: McmcConfig = McmcConfig()
    diagnostics: dict = field(default_factory=dict)

    @property
    def countries(self) -> tuple:
        return tuple(self.country_stats)

    @property
    def n_samples(self) -> int:
        return self.chains.shape[0]

    def sample(self, index: int) -> NhppHyperParams:
        return NhppHyperParams.from_array(self.shape, self.chains[index])

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "site_activation_nhpp",
            "shape": self.shape.variant,
            "epsilon_offset": self.shape.epsilon_offset,
            "param_names": list(self.shape.param_names),
            "chains": [[float(v) for v in row] for row in self.chains],
            "acceptance_rate": self.acceptance_rate,
            "priors": self.priors.to_dict(),
            "mcmc": self.config.to_dict(),
            "diagnostics": self.diagnostics,
            "country_stats": {
                code: {"n_total": st.n_total, "windows": [list(w) for w in st.windows]}
                for code, st in self.country_stats.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NhppPosterior":
        if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "site_activation_nhpp":
            raise ValueError("not a version-1 site activation posterior document")
        shape = RateShape(d["shape"], d["epsilon_offset"])
        m = d["mcmc"]
        config = McmcConfig(
            iterations=m["iterations"],
            burn_in=m["burn_in"],
            thin=m["thin"],
            seed=m["seed"],
            initial=tuple(m["initial"]) if m.get("initial") is not None else None,
            step_scales=tuple(m["step_scales"]) if m.get("step_scales") is not None else None,
            adapt_every=m.get("adapt_every", 100),
        )
        stats = {
            code: CountryActivationStats(code, int(v["n_total"]), tuple(tuple(w) for w in v["windows"]))
            for code, v in d["country_stats"].items()
        }
        chains = np.array(d["chains"], dtype=float).reshape(-1, len(shape.param_names))
        return cls(shape, chains, float(d["acceptance_rate"]), stats, PriorSpec.from_dict(d["priors"]), config, d.get("diagnostics", {}))


def _default_initial(shape: RateShape, data: ActivationData) -> np.ndarray:
    init = [1.0, 1.0, 0.5]
    if shape.variant == "quad":
        init.append(1.0)
    if data.n.size and data.delta.sum() > 0:
        # crude rate guess: events per month of exposure, split between alpha and beta
        init[1] = max(float(data.n.sum() / data.delta.sum()), 0.05)
    return np.array(init)


def run_metropolis(
    shape: RateShape,
    data,
    priors: PriorSpec = PriorSpec(),
    config: McmcConfig = McmcConfig(),
) -> NhppPosterior:
    """Random-walk Metropolis over log-parameters with adaptive proposals.

    During burn-in the global step size is rescaled every ``adapt_every``
    iterations toward an acceptance rate of 0.3 and the proposal covariance
    is re-estimated from the burn-in path.  The kernel is frozen afterwards.
    """
    d = _as_data(data)
    names = shape.param_names
    dim = len(names)
    rng = np.random.default_rng(config.seed)
    start = np.asarray(config.initial, dtype=float) if config.initial is not None else _default_initial(shape, d)
    if start.shape != (dim,) or not np.all((start > 0) & np.isfinite(start)):
        raise ValueError(f"initial point must hold {dim} positive values for {names}")
    x = np.log(start)

    def log_target(z):
        p = NhppHyperParams.from_array(shape, np.exp(z))
        try:
            lp = log_posterior(shape, p, d, priors)
        except NonFiniteLikelihood:
            return -math.inf
        # Jacobian of the exp transform
        return lp + float(z.sum()) if math.isfinite(lp) else -math.inf

    # evaluated unguarded so impossible data surfaces as NonFiniteLikelihood with its index
    log_posterior(shape, NhppHyperParams.from_array(shape, start), d, priors)
    current = log_target(x)
    if not math.isfinite(current):
        raise ValueError("initial point lies outside the posterior support")

    steps = np.asarray(config.step_scales, dtype=float) if config.step_scales is not None else np.full(dim, 0.3)
    factor = np.diag(steps)
    scale = 1.0
    n_keep = (config.iterations - config.burn_in) // config.thin
    kept = np.empty((n_keep, dim))
    history = np.empty((config.burn_in, dim))
    window_acc = 0
    post_acc = 0
    stored = 0
    for it in range(config.iterations):
        proposal = x + scale * (factor @ rng.standard_normal(dim))
        cand = log_target(proposal)
        accepted = math.log(rng.random()) < cand - current
        if accepted:
            x, current = proposal, cand
        if it < config.burn_in:
            history[it] = x
            window_acc += accepted
            if (it + 1) % config.adapt_every == 0:
                rate = window_acc / config.adapt_every
                scale *= math.exp(2.0 * (rate - 0.3))
                window_acc = 0
                if it + 1 >= 500 and it + 1 <= 0.8 * config.burn_in:
                    recent = history[(it + 1) // 2 : it + 1]
                    cov = np.cov(recent, rowvar=False) + 1e-8 * np.eye(dim)
                    try:
                        factor = np.linalg.cholesky(cov) * (2.38 / math.sqrt(dim))
                        scale = 1.0
                    except np.linalg.LinAlgError:
                        pass
        else:
            post_acc += accepted
            if (it - config.burn_in + 1) % config.thin == 0 and stored < n_keep:
                kept[stored] = x
                stored += 1

    acceptance = post_acc / (config.iterations - config.burn_in)
    if acceptance < 0.01:
        raise StuckChain(f"acceptance rate {acceptance:.4f} after adaptation")
    samples = np.exp(kept)
    rhat = {name: split_rhat(samples[:, i]) for i, name in enumerate(names)}
    ess = {name: effective_sample_size(samples[:, i]) for i, name in enumerate(names)}
    bad = [n for n, r in rhat.items() if r > 1.1]
    if bad:
        warnings.warn(f"split R-hat above 1.1 for {', '.join(bad)}; consider a longer chain", stacklevel=2)
    return NhppPosterior(
        shape=shape,
        chains=samples,
        acceptance_rate=float(acceptance),
        country_stats=d.country_stats(),
        priors=priors,
        config=config,
        diagnostics={"split_rhat": rhat, "ess": ess},
    )


# --------------------------------------------------------------------------
# Country rates and event simulation
# --------------------------------------------------------------------------

def lambda_conditional_gamma(shape: RateShape, params: NhppHyperParams, stats: CountryActivationStats) -> tuple:
    """(shape, scale) of the conditional Gamma for a country's base rate."""
    total_I = float(np.sum(integrated_intensity(shape, params, stats.deltas))) if stats.windows else 0.0
    return stats.n_total + params.alpha, params.beta / (params.beta * total_I + 1.0)


def sample_lambda_conditional(
    shape: RateShape,
    params: NhppHyperParams,
    stats: CountryActivationStats,
    rng: np.random.Generator,
) -> float:
    k, theta = lambda_conditional_gamma(shape, params, stats)
    return float(rng.gamma(k, theta))


def simulate_site_activations(
    shape: RateShape,
    params: NhppHyperParams,
    lambda_k: float,
    start: float,
    horizon: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Activation times on ``(start, start + horizon]`` by thinning.

    Both unit shapes are bounded by 1, so a homogeneous process at rate
    ``lambda_k`` dominates the intensity.  The first site of the country
    (at ``start``) is not included.
    """
    if lambda_k <= 0 or horizon <= 0:
        return np.empty(0)
    n = rng.poisson(lambda_k * horizon)
    t = horizon - rng.uniform(0.0, horizon, n)  # (0, horizon]
    keep = rng.random(n) < np.exp(log_shape(shape, params, t))
    return start + np.sort(t[keep])
