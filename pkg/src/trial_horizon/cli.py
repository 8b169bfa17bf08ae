"""Command-line entry point: ``trial-horizon fit|forecast|synth|validate``.

Options come from three layers: command-line flags override a TOML file
given by ``--config``, which overrides built-in defaults.  The TOML file may
hold top-level keys shared by every command and per-command tables
(``[fit]``, ``[forecast]``, ``[synth]``, ``[validate]``); keys use the flag
names with dashes replaced by underscores.  NHPP priors go in a
``[priors]`` table and synthetic ground truth in a ``[truth]`` table.

Exit codes: 0 success, 2 data or input errors, 3 model fitting failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .data_model import IngestOptions, PlannedStudy, StudyFilter, ingest_historical, select_studies, write_records
from .enroll_glmm import FittedEnrollModel, fit_enroll
from .errors import DataError, FitError, TrialHorizonError
from .lmm import CsuModelSpec, FittedCsuModel, fit_csu
from .nhpp import ActivationData, McmcConfig, NhppPosterior, PriorSpec, RateShape, run_metropolis
from .simulator import DEFAULT_QUANTILES, FittedModels, SimulationConfig, quantile_with_censoring, run_forecast
from .synth import DEFAULT_NOMINAL_LEVELS, GroundTruth, calibration_experiment, degenerate_truth, generate_history

MODEL_FILES = {"csu": "csu.json", "nhpp": "nhpp.json", "enroll": "enroll.json"}

DEFAULTS = {
    "seed": 0,
    "nhpp_shape": "decay",
    "activation_end": "study",
    "m_days_per_month": 30.4375,
    "no_study_effect": False,
    "iterations": 20000,
    "burn_in": 5000,
    "thin": 15,
    "n_trials": 1000,
    "horizon_months": 60.0,
    "quantiles": list(DEFAULT_QUANTILES),
    "pi_level": 0.95,
    "therapeutic_area": "general medicine",
    "indication": "",
    "replicates": 200,
    "levels": list(DEFAULT_NOMINAL_LEVELS),
    "jobs": 1,
    "degenerate": False,
}
# calibration runs one forecast per replicate, so it uses fewer trials
COMMAND_DEFAULTS = {"validate": {"n_trials": 200}}


class UsageError(Exception):
    """Bad or missing option; reported with exit code 2."""


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list:
    return [x.strip() for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trial-horizon", description="Clinical trial enrollment forecasting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    # every option defaults to None so that unset flags fall through to the config file
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML configuration file")
    common.add_argument("--seed", type=int, help="master random seed (default 0)")
    common.add_argument("--out", type=Path, help="output directory")

    fitlike = argparse.ArgumentParser(add_help=False)
    fitlike.add_argument("--nhpp-shape", choices=("decay", "quad"))
    fitlike.add_argument("--activation-end", choices=("study", "country"))
    fitlike.add_argument("--m-days-per-month", type=float)
    fitlike.add_argument("--no-study-effect", action="store_true", default=None)
    fitlike.add_argument("--mcmc-iters", "--iterations", dest="iterations", type=int, help="MCMC iterations")
    fitlike.add_argument("--mcmc-burnin", "--burn-in", dest="burn_in", type=int)
    fitlike.add_argument("--mcmc-thin", "--thin", dest="thin", type=int)

    forecastlike = argparse.ArgumentParser(add_help=False)
    forecastlike.add_argument("--n-trials", type=int)
    forecastlike.add_argument("--horizon-months", type=float)

    p = sub.add_parser("fit", parents=[common, fitlike], help="fit the three models to a historical CSV")
    p.add_argument("--data", type=Path, help="historical site-level CSV")
    p.add_argument("--filter-ta", type=_str_list, help="keep studies in these therapeutic areas")
    p.add_argument("--filter-indication", type=_str_list)
    p.add_argument("--start-year-min", type=int)
    p.add_argument("--start-year-max", type=int)

    p = sub.add_parser("forecast", parents=[common, forecastlike], help="simulate a planned study")
    p.add_argument("--models", type=Path, help="directory holding fitted model JSON files")
    p.add_argument("--target-subjects", type=int)
    p.add_argument("--target-sites", type=int)
    p.add_argument("--therapeutic-area")
    p.add_argument("--indication")
    p.add_argument("--countries", type=_str_list, help="candidate countries (default: whole pool)")
    p.add_argument("--quantiles", type=_float_list)
    p.add_argument("--pi-level", type=float, help="prediction interval echoed to stdout (default 0.95)")

    p = sub.add_parser("synth", parents=[common, fitlike], help="generate a synthetic history")
    p.add_argument("--n-studies", type=int)
    p.add_argument("--n-countries", type=int)

    p = sub.add_parser("validate", parents=[common, fitlike, forecastlike], help="coverage calibration experiment")
    p.add_argument("--replicates", type=int)
    p.add_argument("--levels", type=_float_list, help="nominal interval levels")
    p.add_argument("--jobs", type=int, help="worker processes")
    p.add_argument("--degenerate", action="store_true", default=None, help="zero-variance truth with unreachable target")
    return parser


def _load_toml(path) -> dict:
    if path is None:
        return {}
    try:
        with Path(path).open("rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"--config: file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"--config {path}: {exc}") from None


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge flags over the TOML file over defaults."""
    doc = _load_toml(args.config)
    opts = dict(DEFAULTS)
    opts.update(COMMAND_DEFAULTS.get(args.command, {}))
    opts.update({k: v for k, v in doc.items() if not isinstance(v, dict)})
    opts.update(doc.get(args.command, {}))
    opts["priors"] = doc.get("priors", {})
    opts["truth"] = doc.get("truth", {})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    return opts


def _require(opts: dict, *names):
    missing = [n for n in names if opts.get(n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _write_json(path: Path, doc: dict) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _mcmc(opts: dict) -> McmcConfig:
    return McmcConfig(
        iterations=int(opts["iterations"]),
        burn_in=int(opts["burn_in"]),
        thin=int(opts["thin"]),
        seed=int(opts["seed"]),
    )


def _fmt_months(x: float) -> str:
    return "Inf" if math.isinf(x) else f"{x:.2f}"


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_fit(opts: dict) -> int:
    _require(opts, "data", "out")
    dataset = ingest_historical(
        opts["data"], IngestOptions(float(opts["m_days_per_month"]), opts["activation_end"])
    )
    flt = StudyFilter(
        therapeutic_areas=frozenset(opts["filter_ta"]) if opts.get("filter_ta") else None,
        indications=frozenset(opts["filter_indication"]) if opts.get("filter_indication") else None,
        start_year_min=opts.get("start_year_min"),
        start_year_max=opts.get("start_year_max"),
    )
    dataset = select_studies(dataset, flt)
    shape = RateShape(opts["nhpp_shape"])
    priors = PriorSpec.from_dict(opts["priors"]) if opts["priors"] else PriorSpec()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        csu = fit_csu(dataset, CsuModelSpec(include_study_effect=not opts["no_study_effect"]))
        post = run_metropolis(shape, ActivationData.from_dataset(dataset), priors, _mcmc(opts))
        enroll = fit_enroll(dataset)
    FittedModels(csu, post, enroll)  # pool consistency check

    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / MODEL_FILES["csu"], csu.to_dict())
    _write_json(out / MODEL_FILES["nhpp"], post.to_dict())
    _write_json(out / MODEL_FILES["enroll"], enroll.to_dict())
    report = {
        "schema_version": 1,
        "data": {
            "n_studies": dataset.n_studies,
            "n_countries": dataset.n_countries,
            "n_combinations": dataset.n_combinations,
            "filter": flt.describe(),
        },
        "country_startup": {
            "reml_criterion": csu.reml_value,
            "mu": csu.mu_hat,
            "sigma_gamma": csu.sigma_gamma,
            "sigma_beta": csu.sigma_beta,
            "sigma_eps": csu.sigma_eps,
        },
        "site_activation": {
            "shape": shape.variant,
            "acceptance_rate": post.acceptance_rate,
            "n_samples": post.n_samples,
            "diagnostics": post.diagnostics,
        },
        "subject_enrollment": {
            "loglik": enroll.loglik,
            "mu_en": enroll.mu_en_hat,
            "mu_en_se": enroll.mu_en_se,
            "sigma_en_gamma": enroll.sigma_en_gamma,
        },
        "warnings": sorted({str(w.message) for w in caught}),
    }
    _write_json(out / "fit_report.json", report)
    print(
        f"fitted {dataset.n_studies} studies, {dataset.n_countries} countries; "
        f"REML {csu.reml_value:.4f}, MCMC acceptance {post.acceptance_rate:.3f}, GLMM loglik {enroll.loglik:.4f}"
    )
    for w in report["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def load_models(directory) -> FittedModels:
    directory = Path(directory)
    docs = {}
    for key, name in MODEL_FILES.items():
        path = directory / name
        try:
            docs[key] = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"missing model artifact {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
    try:
        return FittedModels(
            FittedCsuModel.from_dict(docs["csu"]),
            NhppPosterior.from_dict(docs["nhpp"]),
            FittedEnrollModel.from_dict(docs["enroll"]),
        )
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{directory}: incompatible model artifacts ({exc})") from None


def cmd_forecast(opts: dict) -> int:
    _require(opts, "models", "out", "target_subjects", "target_sites")
    models = load_models(opts["models"])
    plan = PlannedStudy(
        target_subjects=int(opts["target_subjects"]),
        target_sites=int(opts["target_sites"]),
        therapeutic_area=opts["therapeutic_area"],
        indication=opts["indication"],
        candidate_countries=tuple(opts["countries"]) if opts.get("countries") else None,
    )
    config = SimulationConfig(
        n_trials=int(opts["n_trials"]),
        horizon=float(opts["horizon_months"]),
        master_seed=int(opts["seed"]),
        quantile_levels=tuple(opts["quantiles"]),
    )
    result = run_forecast(models, plan, config)
    result.write(opts["out"])
    level = float(opts["pi_level"])
    lo, hi = result.prediction_interval(level)
    median = quantile_with_censoring(result.lsfd_values, 0.5)
    print(
        f"median LSFD {_fmt_months(median)} months; {level:.0%} PI ({_fmt_months(lo)}, {_fmt_months(hi)}); "
        f"censored {result.n_censored}/{config.n_trials}"
    )
    return 0


def _truth(opts: dict) -> GroundTruth:
    fields = dict(opts["truth"])
    for flag, key in (("n_studies", "n_studies"), ("n_countries", "n_countries")):
        if opts.get(flag) is not None:
            fields[key] = int(opts[flag])
    if opts.get("nhpp_shape") and "nhpp_shape" not in fields:
        fields["nhpp_shape"] = opts["nhpp_shape"]
    if fields.get("nhpp_shape") == "quad" and fields.get("nhpp_e") is None:
        fields["nhpp_e"] = 2.0
    fields.setdefault("m_days_per_month", float(opts["m_days_per_month"]))
    if opts.get("degenerate"):
        return degenerate_truth(**fields)
    return GroundTruth.from_dict(fields)


def cmd_synth(opts: dict) -> int:
    _require(opts, "out")
    truth = _truth(opts)
    dataset, _, effects = generate_history(truth, seed=int(opts["seed"]))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_records(dataset.records, out / "history.csv")
    doc = {
        "schema_version": 1,
        "seed": int(opts["seed"]),
        "truth": truth.to_dict(),
        "country_effects": {
            code: {
                "csu_gamma": float(effects.csu_gamma[k]),
                "lambda": float(effects.lambdas[k]),
                "enroll_gamma": float(effects.enroll_gamma[k]),
            }
            for k, code in enumerate(truth.countries)
        },
    }
    _write_json(out / "truth.json", doc)
    print(f"wrote {len(dataset.records)} site records from {dataset.n_studies} studies to {out / 'history.csv'}")
    return 0


def cmd_validate(opts: dict) -> int:
    _require(opts, "out")
    truth = _truth(opts)
    sim = SimulationConfig(
        n_trials=int(opts["n_trials"]),
        horizon=float(opts["horizon_months"]),
    )
    priors = PriorSpec.from_dict(opts["priors"]) if opts["priors"] else PriorSpec()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = calibration_experiment(
            truth,
            n_replicates=int(opts["replicates"]),
            sim_config=sim,
            seed=int(opts["seed"]),
            levels=tuple(opts["levels"]),
            mcmc=_mcmc(opts),
            priors=priors,
            n_jobs=int(opts["jobs"]),
        )
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    with (out / "coverage.csv").open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(result.to_csv_rows())
    for row in result.rows:
        print(f"nominal {row.nominal:.2f}: coverage {row.coverage:.3f} ({row.covered}/{row.n})")
    if result.n_failed:
        print(f"{result.n_failed} replicate(s) failed to fit and were excluded", file=sys.stderr)
    return 0


COMMANDS = {"fit": cmd_fit, "forecast": cmd_forecast, "synth": cmd_synth, "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except (DataError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return 3
    except (TrialHorizonError, ValueError, OSError) as exc:
        # unknown countries, model mismatches and invalid option values
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
