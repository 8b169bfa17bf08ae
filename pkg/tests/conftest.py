import datetime as dt
import warnings

import numpy as np
import pytest

from trial_horizon.data_model import SiteRecord
from trial_horizon.enroll_glmm import fit_enroll
from trial_horizon.lmm import fit_csu
from trial_horizon.nhpp import ActivationData, McmcConfig, TIME_DECAY, run_metropolis
from trial_horizon.simulator import FittedModels
from trial_horizon.synth import GroundTruth, generate_history

# a shorter chain keeps the shared fixtures quick
FAST_MCMC = McmcConfig(iterations=6000, burn_in=2000, thin=4, seed=7)


def site(study, country, site_id, approval, activation, last=None, n=0, ta="oncology"):
    as_date = lambda x: dt.date.fromisoformat(x) if isinstance(x, str) else x
    return SiteRecord(
        study_id=study,
        therapeutic_area=ta,
        country_code=country,
        site_id=site_id,
        protocol_approval_date=as_date(approval),
        site_activation_date=as_date(activation),
        last_subject_enrolled_date=as_date(last) if last else None,
        n_subjects_enrolled=n,
    )


@pytest.fixture(scope="session")
def history():
    dataset, truth, effects = generate_history(GroundTruth(), seed=3)
    return dataset, truth, effects


@pytest.fixture(scope="session")
def fitted_models(history):
    dataset = history[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        csu = fit_csu(dataset)
        post = run_metropolis(TIME_DECAY, ActivationData.from_dataset(dataset), config=FAST_MCMC)
        enroll = fit_enroll(dataset)
    return FittedModels(csu, post, enroll)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
