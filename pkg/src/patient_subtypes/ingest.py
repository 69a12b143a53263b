"""Admission/vitals parsing and cohort inclusion rules.

Inclusion follows the study protocol:

* stays shorter than two hours are routine appointments and dropped;
* only the first complete set of the six vitals taken within 24 hours of
  admission is kept;
* re-admissions of the same patient are independent rows.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, TextIO

import numpy as np

log = logging.getLogger(__name__)

ADMISSION_COLUMNS = [
    "admission_id", "patient_id", "gender", "age", "admit_ts",
    "discharge_ts", "outcome", "icd10_primary",
]
VITALS_COLUMNS = [
    "admission_id", "ts", "temperature", "sbp", "heart_rate", "sats",
    "resp_rate", "consciousness", "news",
]
VITAL_NAMES = ["temperature", "sbp", "heart_rate", "sats", "resp_rate", "consciousness"]

GENDERS = {"F", "M", "NK", "NS"}
OUTCOMES = {"survived", "died"}
CONSCIOUSNESS_LEVELS = {"alert", "limited"}

# inclusive physiological bounds, enforced at parse time
VITAL_BOUNDS = {
    "temperature": (25.0, 45.0),
    "sbp": (30.0, 300.0),
    "heart_rate": (10.0, 300.0),
    "sats": (0.0, 100.0),
    "resp_rate": (1.0, 90.0),
}

ICD10_PATTERN = re.compile(r"^[A-Z][0-9]{2}(\.?[0-9A-Z]{1,4})?$")

MIN_STAY_SECONDS = 2 * 3600
VITALS_WINDOW_SECONDS = 24 * 3600


class IngestError(ValueError):
    """Fatal input problem (bad header, duplicate ids, empty cohort)."""


@dataclass(frozen=True)
class AdmissionRecord:
    admission_id: str
    patient_id: str
    gender: str
    age: int
    admit_ts: int
    discharge_ts: int
    outcome: str
    icd10_primary: str

    @property
    def stay_hours(self) -> float:
        return (self.discharge_ts - self.admit_ts) / 3600.0

    @property
    def died(self) -> bool:
        return self.outcome == "died"


@dataclass(frozen=True)
class VitalsSet:
    admission_id: str
    ts: int
    temperature: float
    sbp: float
    heart_rate: float
    sats: float
    resp_rate: float
    consciousness: str
    news: int | None = None

    @property
    def limited(self) -> bool:
        return self.consciousness == "limited"


@dataclass(frozen=True)
class RowReject:
    source: str
    line: int
    reason: str


@dataclass
class Cohort:
    records: list[tuple[AdmissionRecord, VitalsSet]]
    filter_log: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def admission_ids(self) -> list[str]:
        return [adm.admission_id for adm, _ in self.records]

    def subset(self, mask: Iterable[bool]) -> "Cohort":
        kept = [rec for rec, keep in zip(self.records, mask) if keep]
        return Cohort(kept, dict(self.filter_log))


# --------------------------------------------------------------------------
# timestamps
# --------------------------------------------------------------------------

def parse_timestamp(text: str) -> int:
    """ISO-8601 string to integer UTC seconds. Naive inputs are taken as UTC."""
    text = text.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(math.floor(dt.timestamp()))


def format_timestamp(seconds: int) -> str:
    return datetime.fromtimestamp(int(seconds), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


# --------------------------------------------------------------------------
# parsing
# --------------------------------------------------------------------------

def _as_text(stream: TextIO | str) -> TextIO:
    return io.StringIO(stream) if isinstance(stream, str) else stream


def _read_header(reader, expected: list[str], source: str) -> None:
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != expected:
        raise IngestError(f"{source}: missing or malformed header, expected {','.join(expected)}")


def _parse_admission(row: list[str]) -> AdmissionRecord:
    if len(row) != len(ADMISSION_COLUMNS):
        raise ValueError(f"expected {len(ADMISSION_COLUMNS)} fields, got {len(row)}")
    values = dict(zip(ADMISSION_COLUMNS, (v.strip() for v in row)))
    if not values["admission_id"]:
        raise ValueError("empty admission_id")
    if values["gender"] not in GENDERS:
        raise ValueError(f"invalid gender {values['gender']!r}")
    if values["outcome"] not in OUTCOMES:
        raise ValueError(f"invalid outcome {values['outcome']!r}")
    age = int(values["age"])
    if age < 0:
        raise ValueError("negative age")
    if not ICD10_PATTERN.match(values["icd10_primary"]):
        raise ValueError(f"invalid icd10 code {values['icd10_primary']!r}")
    try:
        admit = parse_timestamp(values["admit_ts"])
        discharge = parse_timestamp(values["discharge_ts"])
    except ValueError as exc:
        raise ValueError(f"bad timestamp: {exc}") from None
    if discharge < admit:
        raise ValueError("negative stay")
    return AdmissionRecord(
        admission_id=values["admission_id"],
        patient_id=values["patient_id"],
        gender=values["gender"],
        age=age,
        admit_ts=admit,
        discharge_ts=discharge,
        outcome=values["outcome"],
        icd10_primary=values["icd10_primary"],
    )


def _parse_vitals(row: list[str]) -> VitalsSet:
    if len(row) != len(VITALS_COLUMNS):
        raise ValueError(f"expected {len(VITALS_COLUMNS)} fields, got {len(row)}")
    values = dict(zip(VITALS_COLUMNS, (v.strip() for v in row)))
    if any(values[name] == "" for name in VITAL_NAMES):
        raise ValueError("incomplete vitals")
    numeric = {}
    for name, (lo, hi) in VITAL_BOUNDS.items():
        x = float(values[name])
        if not (lo <= x <= hi):
            raise ValueError(f"out of bounds: {name}={values[name]}")
        numeric[name] = x
    if values["consciousness"] not in CONSCIOUSNESS_LEVELS:
        raise ValueError(f"invalid consciousness {values['consciousness']!r}")
    news = int(values["news"]) if values["news"] else None
    if news is not None and not 0 <= news <= 20:
        raise ValueError(f"out of bounds: news={news}")
    try:
        ts = parse_timestamp(values["ts"])
    except ValueError as exc:
        raise ValueError(f"bad timestamp: {exc}") from None
    return VitalsSet(
        admission_id=values["admission_id"],
        ts=ts,
        consciousness=values["consciousness"],
        news=news,
        **numeric,
    )


def parse_admissions(
    admissions_stream: TextIO | str,
    vitals_stream: TextIO | str,
) -> tuple[list[AdmissionRecord], list[VitalsSet], list[RowReject]]:
    """Parse the two CSV streams.

    Malformed rows are skipped and reported as ``RowReject`` (line numbers
    are 1-based and count the header). A bad header or a repeated
    admission_id is fatal.
    """
    records: list[AdmissionRecord] = []
    vitals: list[VitalsSet] = []
    rejects: list[RowReject] = []

    reader = csv.reader(_as_text(admissions_stream))
    _read_header(reader, ADMISSION_COLUMNS, "admissions")
    seen: set[str] = set()
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        if row[0].strip() in seen:
            raise IngestError(f"admissions line {line_no}: duplicate admission_id {row[0].strip()!r}")
        try:
            rec = _parse_admission(row)
        except ValueError as exc:
            rejects.append(RowReject("admissions", line_no, str(exc)))
            if row[0].strip():
                seen.add(row[0].strip())
            continue
        seen.add(rec.admission_id)
        records.append(rec)

    reader = csv.reader(_as_text(vitals_stream))
    _read_header(reader, VITALS_COLUMNS, "vitals")
    for line_no, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            vitals.append(_parse_vitals(row))
        except ValueError as exc:
            rejects.append(RowReject("vitals", line_no, str(exc)))

    if rejects:
        log.info("parse rejected %d rows", len(rejects))
    return records, vitals, rejects


# --------------------------------------------------------------------------
# cohort rules
# --------------------------------------------------------------------------

def filter_cohort(
    records: Iterable[AdmissionRecord],
    vitals_sets: Iterable[VitalsSet],
) -> Cohort:
    """Apply the inclusion rules, attaching the earliest in-window vitals set.

    The short-stay rule is checked before the vitals-window rule, so an
    admission failing both counts only under ``short_stay``. Equal vitals
    timestamps keep the set that appeared first in the input.
    """
    by_admission: dict[str, list[VitalsSet]] = {}
    for vs in vitals_sets:
        by_admission.setdefault(vs.admission_id, []).append(vs)

    filter_log = {"short_stay": 0, "no_vitals_24h": 0}
    kept: list[tuple[AdmissionRecord, VitalsSet]] = []
    for rec in records:
        if rec.discharge_ts - rec.admit_ts < MIN_STAY_SECONDS:
            filter_log["short_stay"] += 1
            continue
        chosen = None
        for vs in by_admission.get(rec.admission_id, ()):
            if rec.admit_ts <= vs.ts <= rec.admit_ts + VITALS_WINDOW_SECONDS:
                if chosen is None or vs.ts < chosen.ts:
                    chosen = vs
        if chosen is None:
            filter_log["no_vitals_24h"] += 1
            continue
        kept.append((rec, chosen))

    if not kept:
        raise IngestError(f"empty cohort after filtering; filter_log={filter_log}")
    return Cohort(kept, filter_log)


def refilter(cohort: Cohort) -> Cohort:
    """Run the inclusion rules again over an existing cohort."""
    records = [adm for adm, _ in cohort.records]
    vitals = [vs for _, vs in cohort.records]
    return filter_cohort(records, vitals)


# --------------------------------------------------------------------------
# summary table
# --------------------------------------------------------------------------

def _mean_sd(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std(ddof=0))


def cohort_summary(cohort: Cohort) -> dict:
    """Population-level characteristics, mean and population sd (divisor n)."""
    if len(cohort) == 0:
        raise IngestError("cohort_summary needs a non-empty cohort")
    adm = [a for a, _ in cohort.records]
    vit = [v for _, v in cohort.records]
    n = len(adm)
    summary = {
        "n_patients": len({a.patient_id for a in adm}),
        "n_admissions": n,
        "pct_female": 100.0 * sum(a.gender == "F" for a in adm) / n,
        "mortality_pct": 100.0 * sum(a.died for a in adm) / n,
        "pct_limited_consciousness": 100.0 * sum(v.limited for v in vit) / n,
    }
    columns = {
        "age": [a.age for a in adm],
        "los_hours": [a.stay_hours for a in adm],
        "news": [v.news for v in vit if v.news is not None],
        "temperature": [v.temperature for v in vit],
        "sbp": [v.sbp for v in vit],
        "heart_rate": [v.heart_rate for v in vit],
        "sats": [v.sats for v in vit],
        "resp_rate": [v.resp_rate for v in vit],
    }
    for name, values in columns.items():
        mean, sd = _mean_sd(values)
        summary[f"{name}_mean"] = mean
        summary[f"{name}_sd"] = sd
    return summary


def cohort_frame(cohort: Cohort):
    """Flatten a cohort into a pandas DataFrame, one row per admission."""
    import pandas as pd

    rows = []
    for adm, vs in cohort.records:
        rows.append({
            "admission_id": adm.admission_id,
            "patient_id": adm.patient_id,
            "gender": adm.gender,
            "age": adm.age,
            "admit_ts": adm.admit_ts,
            "discharge_ts": adm.discharge_ts,
            "los_hours": adm.stay_hours,
            "outcome": adm.outcome,
            "died": int(adm.died),
            "icd10_primary": adm.icd10_primary,
            "vitals_ts": vs.ts,
            "temperature": vs.temperature,
            "sbp": vs.sbp,
            "heart_rate": vs.heart_rate,
            "sats": vs.sats,
            "resp_rate": vs.resp_rate,
            "consciousness": vs.consciousness,
            "limited": int(vs.limited),
            "news": np.nan if vs.news is None else vs.news,
        })
    return pd.DataFrame(rows)


def cohort_to_csv(cohort: Cohort) -> tuple[str, str]:
    """Write a cohort back out in the input schema, one vitals row per
    admission. Floats use repr so parsing the text gives the same values."""
    adm_out = io.StringIO()
    vit_out = io.StringIO()
    adm_w = csv.writer(adm_out, lineterminator="\n")
    vit_w = csv.writer(vit_out, lineterminator="\n")
    adm_w.writerow(ADMISSION_COLUMNS)
    vit_w.writerow(VITALS_COLUMNS)
    for adm, vs in cohort.records:
        adm_w.writerow([adm.admission_id, adm.patient_id, adm.gender, adm.age,
                        format_timestamp(adm.admit_ts), format_timestamp(adm.discharge_ts),
                        adm.outcome, adm.icd10_primary])
        vit_w.writerow([vs.admission_id, format_timestamp(vs.ts), repr(vs.temperature), repr(vs.sbp),
                        repr(vs.heart_rate), repr(vs.sats), repr(vs.resp_rate), vs.consciousness,
                        "" if vs.news is None else vs.news])
    return adm_out.getvalue(), vit_out.getvalue()


def load_cohort(admissions_csv: str, vitals_csv: str, filter_log: dict[str, int] | None = None) -> Cohort:
    """Read a cohort written by ``cohort_to_csv``. Any row that no longer
    parses or passes the inclusion rules is an error."""
    records, vitals, rejects = parse_admissions(admissions_csv, vitals_csv)
    if rejects:
        raise IngestError(f"stored cohort has {len(rejects)} invalid rows; first: {rejects[0]}")
    cohort = filter_cohort(records, vitals)
    if any(cohort.filter_log.values()):
        raise IngestError(f"stored cohort fails inclusion rules: {cohort.filter_log}")
    return Cohort(cohort.records, dict(filter_log or {}))
