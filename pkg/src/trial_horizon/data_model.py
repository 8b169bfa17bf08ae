"""Domain types and ingestion of site-level historical enrollment data.

A historical CSV holds one row per activated site.  Ingestion validates the
rows, then groups them into study-country combinations carrying the derived
quantities the three models consume:

* start-up time ``u`` -- first site activation in the country, measured from
  the study's protocol approval date;
* activation window end ``u'`` -- last site activation in the study (or in the
  study-country, if configured);
* activation offsets of the remaining sites;
* per-site enrollment exposures ``d`` -- study last-subject date minus site
  activation date.

All times are in months: day differences divided by ``m`` days per month.
"""

from __future__ import annotations

import csv
import datetime as dt
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

from .errors import (
    DuplicateSite,
    EmptyDataset,
    InvariantViolation,
    MalformedRow,
    UnknownCountry,
)

DEFAULT_DAYS_PER_MONTH = 30.4375

GENERAL_MEDICINE = "general medicine"
THERAPEUTIC_AREAS = ("general medicine", "immunology", "oncology", "neurology")
_TA_ALIASES = {
    "general_medicine": GENERAL_MEDICINE,
    "general-medicine": GENERAL_MEDICINE,
    "neuroscience": "neurology",
}

CSV_COLUMNS = (
    "study_id",
    "therapeutic_area",
    "country_code",
    "site_id",
    "protocol_approval_date",
    "site_activation_date",
    "last_subject_enrolled_date",
    "n_subjects_enrolled",
)
OPTIONAL_COLUMNS = ("indication",)

ACTIVATION_END_RULES = ("study", "country")


def normalize_ta(value: str) -> str:
    """Canonical lower-case therapeutic area name; raises ValueError if unknown."""
    key = " ".join(value.strip().lower().split())
    key = _TA_ALIASES.get(key, key)
    if key not in THERAPEUTIC_AREAS:
        raise ValueError(
            f"unknown therapeutic area {value!r}; expected one of {', '.join(THERAPEUTIC_AREAS)}"
        )
    return key


@dataclass(frozen=True)
class SiteRecord:
    study_id: str
    therapeutic_area: str
    country_code: str
    site_id: str
    protocol_approval_date: dt.date
    site_activation_date: dt.date
    last_subject_enrolled_date: Optional[dt.date]
    n_subjects_enrolled: int
    indication: str = ""


@dataclass(frozen=True)
class SiteExposure:
    site_id: str
    duration: float
    n_subjects: int


@dataclass(frozen=True)
class StudyCountryCombination:
    """One country's participation in one historical study.

    ``activation_offsets`` holds the activation times of every site except
    the first, on the same clock as ``startup_time`` (months since protocol
    approval).  ``site_exposures`` covers all sites, the first included.
    """

    index: int
    study_index: int
    country_index: int
    startup_time: float
    activation_end: float
    activation_offsets: tuple
    site_exposures: tuple

    @property
    def n_in(self) -> int:
        return len(self.activation_offsets)

    @property
    def window(self) -> float:
        return self.activation_end - self.startup_time


@dataclass(frozen=True)
class Study:
    study_id: str
    therapeutic_area: str
    protocol_approval_date: dt.date
    lsfd_date: Optional[dt.date]
    indication: str = ""


@dataclass(frozen=True)
class IngestOptions:
    m_days_per_month: float = DEFAULT_DAYS_PER_MONTH
    activation_end: str = "study"

    def __post_init__(self):
        if not self.m_days_per_month > 0:
            raise ValueError("m_days_per_month must be positive")
        if self.activation_end not in ACTIVATION_END_RULES:
            raise ValueError(f"activation_end must be one of {ACTIVATION_END_RULES}")


@dataclass(frozen=True)
class HistoricalDataset:
    studies: tuple
    countries: tuple
    combinations: tuple
    m: float
    activation_end: str
    records: tuple = field(repr=False)

    @property
    def n_studies(self) -> int:
        return len(self.studies)

    @property
    def n_countries(self) -> int:
        return len(self.countries)

    @property
    def n_combinations(self) -> int:
        return len(self.combinations)

    def country_index(self, code: str) -> int:
        try:
            return self.countries.index(code)
        except ValueError:
            raise UnknownCountry(f"country {code!r} is not in the historical pool") from None

    def combination_ta(self, combo: StudyCountryCombination) -> str:
        return self.studies[combo.study_index].therapeutic_area


@dataclass(frozen=True)
class PlannedStudy:
    target_subjects: int
    target_sites: int
    therapeutic_area: str = GENERAL_MEDICINE
    indication: str = ""
    candidate_countries: Optional[tuple] = None

    def __post_init__(self):
        if self.target_subjects < 1:
            raise ValueError("target_subjects must be at least 1")
        if self.target_sites < 1:
            raise ValueError("target_sites must be at least 1")
        object.__setattr__(self, "therapeutic_area", normalize_ta(self.therapeutic_area))
        if self.candidate_countries is not None:
            object.__setattr__(self, "candidate_countries", tuple(self.candidate_countries))

    def resolve_countries(self, pool: Sequence[str]) -> tuple:
        """Candidate countries in pool order."""
        if self.candidate_countries is None:
            return tuple(pool)
        unknown = sorted(set(self.candidate_countries) - set(pool))
        if unknown:
            raise UnknownCountry(f"candidate countries not in the historical pool: {unknown}")
        wanted = set(self.candidate_countries)
        return tuple(c for c in pool if c in wanted)


# --------------------------------------------------------------------------
# CSV parsing
# --------------------------------------------------------------------------

def _parse_date(text, row, column):
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise MalformedRow(row, f"{column}: invalid ISO-8601 date {text!r}") from None


def _parse_row(raw: dict, row: int) -> SiteRecord:
    for col in CSV_COLUMNS:
        if raw.get(col) is None:
            raise MalformedRow(row, f"missing column {col!r}")
    for col in ("study_id", "country_code", "site_id"):
        if not raw[col].strip():
            raise MalformedRow(row, f"{col} is empty")
    try:
        ta = normalize_ta(raw["therapeutic_area"])
    except ValueError as exc:
        raise MalformedRow(row, str(exc)) from None
    approval = _parse_date(raw["protocol_approval_date"], row, "protocol_approval_date")
    activation = _parse_date(raw["site_activation_date"], row, "site_activation_date")
    last_text = raw["last_subject_enrolled_date"].strip()
    last = _parse_date(last_text, row, "last_subject_enrolled_date") if last_text else None
    try:
        n = int(raw["n_subjects_enrolled"].strip())
    except ValueError:
        raise MalformedRow(row, f"n_subjects_enrolled: not an integer {raw['n_subjects_enrolled']!r}") from None
    if n < 0:
        raise MalformedRow(row, "n_subjects_enrolled is negative")

    if activation < approval:
        raise InvariantViolation(row, "site_activation_date precedes protocol_approval_date")
    if last is not None and last < activation:
        raise InvariantViolation(row, "last_subject_enrolled_date precedes site_activation_date")
    if (n == 0) != (last is None):
        raise InvariantViolation(
            row, "last_subject_enrolled_date must be empty exactly when n_subjects_enrolled is 0"
        )
    return SiteRecord(
        study_id=raw["study_id"].strip(),
        therapeutic_area=ta,
        country_code=raw["country_code"].strip().upper(),
        site_id=raw["site_id"].strip(),
        protocol_approval_date=approval,
        site_activation_date=activation,
        last_subject_enrolled_date=last,
        n_subjects_enrolled=n,
        indication=(raw.get("indication") or "").strip(),
    )


def read_records(csv_path: Union[str, Path]) -> list:
    """Parse and validate every row of a historical CSV file."""
    path = Path(csv_path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise MalformedRow(1, f"header is missing columns {missing}")
        for line, raw in enumerate(reader, start=2):
            records.append((line, _parse_row(raw, line)))
    _check_cross_row(records)
    return [rec for _, rec in records]


def _check_cross_row(numbered: Iterable) -> None:
    seen = {}
    per_study = {}
    for line, rec in numbered:
        key = (rec.study_id, rec.site_id)
        if key in seen:
            raise DuplicateSite(line, rec.study_id, rec.site_id)
        seen[key] = line
        first = per_study.setdefault(rec.study_id, (line, rec))
        ref = first[1]
        if rec.protocol_approval_date != ref.protocol_approval_date:
            raise InvariantViolation(
                line,
                f"protocol_approval_date differs from row {first[0]} within study {rec.study_id!r}",
            )
        if rec.therapeutic_area != ref.therapeutic_area:
            raise InvariantViolation(
                line, f"therapeutic_area differs from row {first[0]} within study {rec.study_id!r}"
            )


def write_records(records: Iterable[SiteRecord], csv_path: Union[str, Path]) -> None:
    """Write records in the ingestion schema (the round-trip exporter)."""
    records = list(records)
    with_indication = any(r.indication for r in records)
    columns = CSV_COLUMNS + (OPTIONAL_COLUMNS if with_indication else ())
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in records:
            row = [
                r.study_id,
                r.therapeutic_area,
                r.country_code,
                r.site_id,
                r.protocol_approval_date.isoformat(),
                r.site_activation_date.isoformat(),
                r.last_subject_enrolled_date.isoformat() if r.last_subject_enrolled_date else "",
                str(r.n_subjects_enrolled),
            ]
            if with_indication:
                row.append(r.indication)
            writer.writerow(row)


# --------------------------------------------------------------------------
# Derivation
# --------------------------------------------------------------------------

def _record_key(rec: SiteRecord):
    return (rec.study_id, rec.country_code, rec.site_activation_date, rec.site_id)


def build_dataset(records: Iterable[SiteRecord], options: IngestOptions = IngestOptions()) -> HistoricalDataset:
    """Derive study-country combinations from validated site records."""
    records = sorted(records, key=_record_key)
    if not records:
        raise EmptyDataset("no site records")
    _check_cross_row(enumerate(records, start=1))
    m = float(options.m_days_per_month)

    by_study = defaultdict(list)
    for rec in records:
        by_study[rec.study_id].append(rec)

    study_ids = sorted(by_study)
    countries = tuple(sorted({rec.country_code for rec in records}))
    country_pos = {c: i for i, c in enumerate(countries)}

    studies = []
    combinations = []
    for j, sid in enumerate(study_ids):
        sites = by_study[sid]
        first = sites[0]
        t0 = first.protocol_approval_date
        last_dates = [r.last_subject_enrolled_date for r in sites if r.last_subject_enrolled_date]
        lsfd = max(last_dates) if last_dates else None
        studies.append(
            Study(
                study_id=sid,
                therapeutic_area=first.therapeutic_area,
                protocol_approval_date=t0,
                lsfd_date=lsfd,
                indication=first.indication,
            )
        )
        study_end = max(r.site_activation_date for r in sites)

        by_country = defaultdict(list)
        for rec in sites:
            by_country[rec.country_code].append(rec)
        for code in sorted(by_country, key=country_pos.get):
            group = by_country[code]  # already sorted by activation date, site id
            startup = (group[0].site_activation_date - t0).days / m
            if options.activation_end == "study":
                end_date = study_end
            else:
                end_date = group[-1].site_activation_date
            offsets = tuple((r.site_activation_date - t0).days / m for r in group[1:])
            exposures = tuple(
                SiteExposure(
                    site_id=r.site_id,
                    # sites opened after the study's last subject had no exposure
                    duration=max((lsfd - r.site_activation_date).days, 0) / m if lsfd else 0.0,
                    n_subjects=r.n_subjects_enrolled,
                )
                for r in group
            )
            combinations.append(
                StudyCountryCombination(
                    index=len(combinations),
                    study_index=j,
                    country_index=country_pos[code],
                    startup_time=startup,
                    activation_end=(end_date - t0).days / m,
                    activation_offsets=offsets,
                    site_exposures=exposures,
                )
            )

    return HistoricalDataset(
        studies=tuple(studies),
        countries=countries,
        combinations=tuple(combinations),
        m=m,
        activation_end=options.activation_end,
        records=tuple(records),
    )


def ingest_historical(csv_path: Union[str, Path], options: IngestOptions = IngestOptions()) -> HistoricalDataset:
    """Read, validate and derive a :class:`HistoricalDataset` from a CSV file."""
    records = read_records(csv_path)
    if not records:
        raise EmptyDataset(f"{csv_path}: no data rows")
    return build_dataset(records, options)


def export_dataset(dataset: HistoricalDataset, csv_path: Union[str, Path]) -> None:
    write_records(dataset.records, csv_path)


# --------------------------------------------------------------------------
# Study selection
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyFilter:
    """Study-level predicate; ``None`` fields do not constrain."""

    therapeutic_areas: Optional[frozenset] = None
    indications: Optional[frozenset] = None
    start_year_min: Optional[int] = None
    start_year_max: Optional[int] = None

    def __post_init__(self):
        if self.therapeutic_areas is not None:
            object.__setattr__(
                self, "therapeutic_areas", frozenset(normalize_ta(t) for t in self.therapeutic_areas)
            )
        if self.indications is not None:
            object.__setattr__(
                self, "indications", frozenset(i.strip().lower() for i in self.indications)
            )

    def __call__(self, study: Study) -> bool:
        if self.therapeutic_areas is not None and study.therapeutic_area not in self.therapeutic_areas:
            return False
        if self.indications is not None and study.indication.lower() not in self.indications:
            return False
        year = study.protocol_approval_date.year
        if self.start_year_min is not None and year < self.start_year_min:
            return False
        if self.start_year_max is not None and year > self.start_year_max:
            return False
        return True

    def describe(self) -> str:
        parts = []
        if self.therapeutic_areas is not None:
            parts.append("therapeutic_area in " + ",".join(sorted(self.therapeutic_areas)))
        if self.indications is not None:
            parts.append("indication in " + ",".join(sorted(self.indications)))
        if self.start_year_min is not None:
            parts.append(f"start year >= {self.start_year_min}")
        if self.start_year_max is not None:
            parts.append(f"start year <= {self.start_year_max}")
        return "; ".join(parts) or "no constraints"


def select_studies(dataset: HistoricalDataset, predicate: Callable[[Study], bool]) -> HistoricalDataset:
    """Keep the studies accepted by ``predicate`` and rebuild pools and indices."""
    keep = {s.study_id for s in dataset.studies if predicate(s)}
    if not keep:
        desc = predicate.describe() if hasattr(predicate, "describe") else repr(predicate)
        raise EmptyDataset(f"no study satisfies the filter ({desc})")
    records = [r for r in dataset.records if r.study_id in keep]
    return build_dataset(
        records, IngestOptions(m_days_per_month=dataset.m, activation_end=dataset.activation_end)
    )
