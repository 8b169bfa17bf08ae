import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trial_horizon.data_model import export_dataset, ingest_historical
from trial_horizon.nhpp import (
    QUADRATIC,
    TIME_DECAY,
    CountryActivationStats,
    McmcConfig,
    NhppHyperParams,
    RateShape,
    lambda_conditional_gamma,
    log_marginal_likelihood,
    ActivationData,
    sample_lambda_conditional,
)
from trial_horizon.simulator import SimulationConfig
from trial_horizon.synth import (
    GroundTruth,
    binomial_band,
    calibration_experiment,
    degenerate_truth,
    generate_history,
    oracle_grid_posterior_lambda,
    oracle_nhpp_marginal,
    simulate_true_trial,
)

M = 30.4375


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------

def test_degenerate_history_has_identical_startups():
    truth = GroundTruth(
        csu_sigma_gamma=0.0, csu_sigma_beta=0.0, csu_sigma_eps=0.0, csu_alpha=(0.0, 0.0, 0.0),
        nhpp_lambdas=(2.0,) * 8, enroll_sigma_gamma=0.0,
    )
    dataset, _, effects = generate_history(truth, seed=4)
    startups = {c.startup_time for c in dataset.combinations}
    assert len(startups) == 1
    assert startups.pop() == pytest.approx(4.0, abs=1 / M)
    np.testing.assert_array_equal(effects.lambdas, np.full(8, 2.0))


def test_round_trip_through_csv(tmp_path):
    dataset, _, _ = generate_history(GroundTruth(), seed=21)
    export_dataset(dataset, tmp_path / "h.csv")
    again = ingest_historical(tmp_path / "h.csv")
    for a, b in zip(dataset.combinations, again.combinations):
        assert a.startup_time == pytest.approx(b.startup_time, abs=1e-9)
        assert a.activation_offsets == pytest.approx(b.activation_offsets, abs=1e-9)
        assert [e.duration for e in a.site_exposures] == pytest.approx([e.duration for e in b.site_exposures], abs=1e-9)
    assert again == dataset


def test_dates_fall_on_whole_days():
    dataset, _, _ = generate_history(GroundTruth(), seed=22)
    days = np.array([c.startup_time * M for c in dataset.combinations])
    np.testing.assert_allclose(days, np.round(days), atol=1e-9)
    assert all(c.startup_time > 0 for c in dataset.combinations)


def test_no_activations_in_empty_windows():
    # seed [0, 53, 0] once floored a second same-day site into a window of length zero
    for seed in ([0, 53, 0], 1, 2, 3):
        data = ActivationData.from_dataset(generate_history(GroundTruth(), seed=seed)[0])
        assert not np.any((data.n > 0) & (data.delta <= 0))


# [DERIVED] moment check over 200 countries
def test_country_effect_spread():
    truth = GroundTruth(
        n_countries=200, countries_per_study=(200, 200), n_studies=3,
        csu_sigma_gamma=0.5, csu_sigma_beta=0.0, csu_sigma_eps=0.0, csu_alpha=(0.0, 0.0, 0.0),
    )
    dataset, _, _ = generate_history(truth, seed=5)
    logs = {}
    for c in dataset.combinations:
        logs.setdefault(c.country_index, []).append(math.log(c.startup_time))
    means = np.array([np.mean(v) for v in logs.values()])
    assert len(means) == 200
    assert means.std(ddof=1) == pytest.approx(0.5, rel=0.10)


def test_truth_round_trip_and_validation():
    truth = GroundTruth(nhpp_shape=QUADRATIC, nhpp_e=2.0, nhpp_lambdas=tuple(range(1, 9)))
    assert GroundTruth.from_dict(truth.to_dict()) == truth
    with pytest.raises(ValueError):
        GroundTruth(csu_sigma_eps=-1.0)
    with pytest.raises(ValueError):
        GroundTruth(nhpp_shape=QUADRATIC)  # missing peak time
    with pytest.raises(ValueError):
        GroundTruth(countries_per_study=(3, 9))


def test_true_trial_uses_effects(rng):
    truth = GroundTruth()
    dataset, _, effects = generate_history(truth, seed=6)
    trial = simulate_true_trial(truth, effects, truth.planned_study, 60.0, rng, countries=dataset.countries)
    assert trial.countries == dataset.countries
    assert sum(trial.country_site_counts.values()) <= truth.planned_sites


# --------------------------------------------------------------------------
# oracles
# --------------------------------------------------------------------------

def test_empty_combination_oracle():
    p = NhppHyperParams(2.0, 1.5, 0.5)
    assert oracle_nhpp_marginal(TIME_DECAY, p, (0.0, [])) == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ValueError):
        oracle_nhpp_marginal(TIME_DECAY, p, (0.0, []), grid_size=1000)


# [DERIVED] the grid oracle against the closed-form likelihood
@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.3, 10), st.floats(0.05, 5), st.floats(0.01, 2), st.floats(0, 8), st.floats(0.1, 40),
    st.integers(0, 30), st.sampled_from(["decay", "quad"]), st.randoms(use_true_random=False),
)
def test_oracle_agrees_with_closed_form(a, b, eta, e, delta, n, variant, rnd):
    shape = RateShape(variant)
    p = NhppHyperParams(a, b, eta, e if variant == "quad" else None)
    offsets = sorted(rnd.uniform(0, delta) for _ in range(n))
    exact = log_marginal_likelihood(shape, p, ActivationData.from_windows([("X", 0.0, delta, offsets)]))
    oracle = oracle_nhpp_marginal(shape, p, (delta, offsets), grid_size=100_001)
    assert oracle == pytest.approx(exact, rel=1e-6, abs=1e-9)


# [DERIVED] grid doubling
def test_oracle_grid_refinement():
    p = NhppHyperParams(2.0, 1.0, 0.3 - 1e-5)
    combo = (12.0, [0.5, 1.0, 4.0, 7.5])
    coarse = oracle_nhpp_marginal(TIME_DECAY, p, combo, grid_size=100_001)
    fine = oracle_nhpp_marginal(TIME_DECAY, p, combo, grid_size=200_001)
    assert abs(fine - coarse) < 1e-8


def test_posterior_oracle_without_data():
    p = NhppHyperParams(3.0, 0.7, 0.4)
    mean, var = oracle_grid_posterior_lambda(TIME_DECAY, p, CountryActivationStats("X", 0, ()))
    assert mean == pytest.approx(2.1, rel=1e-6)
    assert var == pytest.approx(3.0 * 0.49, rel=1e-6)


STATS = CountryActivationStats("X", 9, ((0.0, 6.0), (2.0, 20.0)))


# [DERIVED] closed-form Gamma algebra
@pytest.mark.parametrize("shape, p", [(TIME_DECAY, NhppHyperParams(3.0, 0.7, 0.4)), (QUADRATIC, NhppHyperParams(2.0, 1.5, 0.5, 3.0))])
def test_posterior_oracle_matches_conjugate_moments(shape, p):
    k, scale = lambda_conditional_gamma(shape, p, STATS)
    mean, var = oracle_grid_posterior_lambda(shape, p, STATS)
    assert mean == pytest.approx(k * scale, rel=1e-6)
    assert var == pytest.approx(k * scale**2, rel=1e-6)


def test_posterior_oracle_matches_sampler():
    p = NhppHyperParams(3.0, 0.7, 0.4)
    mean, var = oracle_grid_posterior_lambda(TIME_DECAY, p, STATS)
    rng = np.random.default_rng(31)
    draws = np.array([sample_lambda_conditional(TIME_DECAY, p, STATS, rng) for _ in range(100_000)])
    assert draws.mean() == pytest.approx(mean, rel=0.005)
    # a sample variance from 1e5 gamma draws has relative SE near 0.5%,
    # so the variance is checked on a longer run
    more = np.array([sample_lambda_conditional(TIME_DECAY, p, STATS, rng) for _ in range(900_000)])
    assert np.concatenate([draws, more]).var() == pytest.approx(var, rel=0.005)


# --------------------------------------------------------------------------
# calibration
# --------------------------------------------------------------------------

# [DERIVED] exact binomial quantiles from scipy, frozen
def test_binomial_bands():
    lo, hi = binomial_band(200, 0.95)
    assert (lo, hi) == (0.92, 0.98)
    assert 0.91 <= lo and hi <= 0.98
    lo, hi = binomial_band(200, 0.5)
    assert (lo, hi) == (0.43, 0.57)
    assert 0.42 <= lo and hi <= 0.58


def test_degenerate_truth_always_covers():
    with pytest.warns(UserWarning, match="fewer than 100"):
        result = calibration_experiment(
            degenerate_truth(), n_replicates=4, sim_config=SimulationConfig(n_trials=20),
            seed=2, mcmc=McmcConfig(iterations=3000, burn_in=1000, thin=2),
        )
    assert result.n_failed == 0
    assert all(row.coverage == 1.0 and row.n == 4 for row in result.rows)
    assert all(math.isinf(t) for t in result.true_lsfd)
    header, *rows = result.to_csv_rows()
    assert header[0] == "nominal" and len(rows) == 4


def test_calibration_is_seeded():
    kwargs = dict(
        n_replicates=3, sim_config=SimulationConfig(n_trials=30), seed=9,
        mcmc=McmcConfig(iterations=2000, burn_in=500, thin=3),
    )
    with pytest.warns(UserWarning):
        a = calibration_experiment(GroundTruth(), **kwargs)
    with pytest.warns(UserWarning):
        b = calibration_experiment(GroundTruth(), **kwargs)
    assert a.true_lsfd == b.true_lsfd
    assert a.rows == b.rows
