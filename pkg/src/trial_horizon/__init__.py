"""Enrollment forecasting for planned clinical studies.

Three models are fitted to site-level history: a log-normal mixed model for
country start-up times, a hierarchical non-homogeneous Poisson process for
site activation, and a Poisson mixed model for subject enrollment.  A Monte
Carlo simulator combines them into forecasts of the last-subject date.
"""

__version__ = "0.1.0"

from .data_model import (
    HistoricalDataset,
    IngestOptions,
    PlannedStudy,
    SiteRecord,
    StudyFilter,
    ingest_historical,
    select_studies,
)
from .enroll_glmm import FittedEnrollModel, fit_enroll
from .lmm import CsuModelSpec, FittedCsuModel, fit_csu
from .nhpp import McmcConfig, NhppPosterior, PriorSpec, RateShape, run_metropolis
from .simulator import FittedModels, ForecastResult, SimulationConfig, run_forecast

__all__ = [
    "CsuModelSpec",
    "FittedCsuModel",
    "FittedEnrollModel",
    "FittedModels",
    "ForecastResult",
    "HistoricalDataset",
    "IngestOptions",
    "McmcConfig",
    "NhppPosterior",
    "PlannedStudy",
    "PriorSpec",
    "RateShape",
    "SimulationConfig",
    "SiteRecord",
    "StudyFilter",
    "fit_csu",
    "fit_enroll",
    "ingest_historical",
    "run_forecast",
    "run_metropolis",
    "select_studies",
]
