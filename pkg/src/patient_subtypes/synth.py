"""Synthetic admissions with planted subtypes.

The default spec mirrors the published per-cluster characterisation of
the hospital cohort: five subtypes separated mainly by SATS stratum and
level of consciousness, with matching shares, mortality, length of stay
and leading ICD10 codes.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
from scipy.stats import truncnorm

from .ingest import ADMISSION_COLUMNS, VITAL_BOUNDS, VITALS_COLUMNS, format_timestamp

STUDY_START = int(datetime(2017, 11, 1, tzinfo=timezone.utc).timestamp())
STUDY_END = int(datetime(2021, 3, 31, tzinfo=timezone.utc).timestamp())

# NEWS2 single-parameter bands, (upper bound inclusive, points); the last
# band catches everything above. Oxygen supplementation is not modelled
# (all readings are on air) so it never scores.
NEWS2_BANDS = {
    "resp_rate": [(8, 3), (11, 1), (20, 0), (24, 2), (math.inf, 3)],
    "sats": [(91, 3), (93, 2), (95, 1), (math.inf, 0)],
    "sbp": [(90, 3), (100, 2), (110, 1), (219, 0), (math.inf, 3)],
    "heart_rate": [(40, 3), (50, 1), (90, 0), (110, 1), (130, 2), (math.inf, 3)],
    "temperature": [(35.0, 3), (36.0, 1), (38.0, 0), (39.0, 1), (math.inf, 2)],
}
NEWS2_LIMITED_CONSCIOUSNESS = 3
# values are banded at the precision they are charted with
NEWS2_PRECISION = {"resp_rate": 0, "sats": 0, "sbp": 0, "heart_rate": 0, "temperature": 1}


@dataclass
class Dist:
    """Normal(mean, sd) truncated to [lo, hi]; sd == 0 is a point mass."""
    mean: float
    sd: float
    lo: float = -math.inf
    hi: float = math.inf

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if size == 0:
            return np.empty(0)
        if self.sd == 0:
            return np.full(size, float(np.clip(self.mean, self.lo, self.hi)))
        a = (self.lo - self.mean) / self.sd
        b = (self.hi - self.mean) / self.sd
        return truncnorm.rvs(a, b, loc=self.mean, scale=self.sd, size=size, random_state=rng)

    def expected_mean(self) -> float:
        if self.sd == 0:
            return float(np.clip(self.mean, self.lo, self.hi))
        a = (self.lo - self.mean) / self.sd
        b = (self.hi - self.mean) / self.sd
        return float(truncnorm.mean(a, b, loc=self.mean, scale=self.sd))

    def expected_sd(self) -> float:
        if self.sd == 0:
            return 0.0
        a = (self.lo - self.mean) / self.sd
        b = (self.hi - self.mean) / self.sd
        return float(truncnorm.std(a, b, loc=self.mean, scale=self.sd))


@dataclass
class SubtypeSpec:
    name: str
    share: float
    vitals: dict[str, Dist]
    p_limited: float
    p_death: float
    los_mean_hours: float
    los_sd_hours: float
    icd10: dict[str, float]
    age: Dist
    p_female: float
    # published mean NEWS for reference; generated NEWS comes from the vitals
    news_mean: float | None = None

    def __post_init__(self):
        for p in (self.share, self.p_limited, self.p_death, self.p_female):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{self.name}: probabilities must lie in [0, 1]")
        total = sum(self.icd10.values())
        if total <= 0:
            raise ValueError(f"{self.name}: empty ICD10 distribution")
        self.icd10 = {k: v / total for k, v in self.icd10.items()}
        for name in VITAL_BOUNDS:
            dist = self.vitals[name]
            lo, hi = VITAL_BOUNDS[name]
            self.vitals[name] = replace(dist, lo=max(dist.lo, lo), hi=min(dist.hi, hi))

    def los_lognormal(self) -> tuple[float, float]:
        """(mu, sigma) of the log-normal excess over the 2 h minimum stay."""
        m = self.los_mean_hours - 2.0
        s2 = math.log1p((self.los_sd_hours / m) ** 2)
        return math.log(m) - s2 / 2.0, math.sqrt(s2)


@dataclass
class CohortSpec:
    n_admissions: int
    subtypes: list[SubtypeSpec]
    readmission_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_admissions <= 0:
            raise ValueError("n_admissions must be positive")
        if not 0.0 <= self.readmission_rate < 1.0:
            raise ValueError("readmission_rate must lie in [0, 1)")
        total = sum(s.share for s in self.subtypes)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"subtype shares sum to {total}, expected 1")

    def shares(self) -> np.ndarray:
        p = np.array([s.share for s in self.subtypes])
        return p / p.sum()


# ---------------------------------------------------------------------------
# default spec
# ---------------------------------------------------------------------------

PAPER_ADMISSIONS = [453, 8713, 61022, 10080, 15557]
PAPER_TOTAL_ADMISSIONS = 95_825
PAPER_TOTAL_PATIENTS = 60_731
# admission shares rounded to 4 dp, last one adjusted so they sum to 1
PAPER_SHARES = [0.0047, 0.0909, 0.6368, 0.1052, 0.1624]

_ICD10 = [
    {"A41.9": .20, "J18.9": .10, "J44.1": .05, "F05.9": .08, "G40.9": .08, "I63.9": .07,
     "I251": .05, "R40.2": .07, "K92.2": .03, "C34.9": .03, "N39.0": .06, "S06.0": .06,
     "E87.1": .06, "T42.4": .06},
    {"R10.3": .14, "O99.8": .06, "O26.8": .054, "K35.8": .07, "K80.2": .06, "N39.0": .06,
     "R07.4": .06, "I251": .05, "C50.9": .05, "S72.0": .05, "M54.5": .05, "J18.9": .04,
     "R51": .04, "N20.0": .04, "G43.9": .04, "F10.0": .03, "D50.9": .03, "E11.9": .03,
     "L03.1": .046},
    {"I251": .10, "I48.9": .06, "I50.9": .05, "I10": .02, "J18.9": .06, "J44.1": .05,
     "J22": .032, "C34.9": .05, "C18.9": .04, "K57.3": .05, "K92.2": .03, "R07.4": .07,
     "R55": .05, "N39.0": .05, "S72.0": .04, "M54.5": .03, "E11.9": .03, "A41.9": .02,
     "F05.9": .02, "G40.9": .02, "D64.9": .02, "L03.1": .028, "Z51.1": .05, "H81.1": .03},
    {"I251": .12, "I48.9": .05, "I10": .04, "R10.3": .07, "K80.2": .06, "K35.8": .04,
     "C50.9": .05, "C61": .04, "R07.4": .06, "N39.0": .05, "J18.9": .03, "J45.9": .02,
     "S82.8": .05, "M17.1": .05, "O80": .03, "E11.9": .03, "G43.9": .03, "F32.9": .02,
     "D50.9": .03, "L03.1": .03, "Z51.1": .04, "H81.1": .03, "R55": .03},
    {"I251": .13, "I48.9": .05, "I50.9": .03, "I10": .03, "R10.3": .05, "K57.3": .05,
     "K80.2": .04, "C18.9": .05, "C50.9": .04, "R07.4": .07, "N39.0": .05, "J18.9": .03,
     "J44.1": .02, "S72.0": .05, "M54.5": .04, "E11.9": .03, "G40.9": .02, "F10.0": .02,
     "D64.9": .03, "L03.1": .03, "Z51.1": .04, "O80": .02, "H81.1": .02, "R55": .02,
     "A41.9": .02, "T39.1": .02},
]

# published share of limited consciousness outside the unconscious cluster
PAPER_MINOR_LIMITED = [1.0, 0.0018, 0.0012, 0.0006, 0.0003]

# SATS ceiling of the "below 98" stratum so that strata stay disjoint
LOW_SATS_CEILING = 97.0
# underlying mean chosen so the capped distribution has the published mean 95.53
LOW_SATS_MU = 97.4146


def default_paper_spec(n_admissions: int = PAPER_TOTAL_ADMISSIONS, seed: int = 0,
                       include_minor_limited: bool = False) -> CohortSpec:
    """Five subtypes calibrated on the published per-cluster table.

    By default limited consciousness is confined to subtype 0; set
    ``include_minor_limited`` to also plant the small published rates in
    the other subtypes.
    """
    shares = PAPER_SHARES
    limited = PAPER_MINOR_LIMITED if include_minor_limited else [1.0, 0.0, 0.0, 0.0, 0.0]
    rows = [
        # name, female, age, los, mortality, news, temp, sbp, hr, sats, rr
        ("unconscious", .477, (69.9, 18.0), (74.5, 162.8), .21, 5.78,
         (36.68, .68), (121, 26.33), (79.18, 15.86), Dist(95.72, 3.13), (18.14, 4.60)),
        ("sats_100", .636, (49.6, 21.6), (40.5, 102.5), .02, 0.99,
         (36.79, .56), (126, 21.09), (78.10, 16.23), Dist(100.0, 0.02), (16.72, 2.47)),
        ("sats_low", .483, (64.1, 18.9), (52.2, 112.6), .04, 1.65,
         (36.85, .62), (130, 23.13), (81.62, 17.53), Dist(LOW_SATS_MU, 2.02, hi=LOW_SATS_CEILING), (17.53, 2.95)),
        ("sats_99", .573, (52.3, 21.6), (38.1, 90.6), .01, 0.78,
         (36.75, .46), (128, 21.19), (77.04, 14.91), Dist(99.0, 0.0), (16.63, 2.11)),
        ("sats_98", .511, (56.2, 21.0), (40.2, 94.6), .01, 0.69,
         (36.73, .44), (129, 20.54), (76.54, 13.82), Dist(98.0, 0.09), (16.63, 2.06)),
    ]
    subtypes = []
    for i, (name, female, age, los, death, news, temp, sbp, hr, sats, rr) in enumerate(rows):
        subtypes.append(SubtypeSpec(
            name=name,
            share=shares[i],
            vitals={
                "temperature": Dist(*temp),
                "sbp": Dist(*sbp),
                "heart_rate": Dist(*hr),
                "sats": sats,
                "resp_rate": Dist(*rr),
            },
            p_limited=limited[i],
            p_death=death,
            los_mean_hours=los[0],
            los_sd_hours=los[1],
            icd10=dict(_ICD10[i]),
            age=Dist(age[0], age[1], lo=16, hi=105),
            p_female=female,
            news_mean=news,
        ))
    readmission = 1.0 - PAPER_TOTAL_PATIENTS / PAPER_TOTAL_ADMISSIONS
    return CohortSpec(n_admissions, subtypes, readmission_rate=readmission, seed=seed)


# ---------------------------------------------------------------------------
# NEWS
# ---------------------------------------------------------------------------

def _band(value: float, bands) -> int:
    for upper, points in bands:
        if value <= upper:
            return points
    return bands[-1][1]


def news2_score(temperature, sbp, heart_rate, sats, resp_rate, limited: bool,
                bands=NEWS2_BANDS) -> int:
    """Aggregate NEWS2 from one set of readings (air, SpO2 scale 1)."""
    values = {"temperature": temperature, "sbp": sbp, "heart_rate": heart_rate,
              "sats": sats, "resp_rate": resp_rate}
    score = 0
    for name, value in values.items():
        v = round(float(value), NEWS2_PRECISION[name])
        score += _band(v, bands[name])
    return score + (NEWS2_LIMITED_CONSCIOUSNESS if limited else 0)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _fmt(x: float, digits: int = 2) -> str:
    return f"{x:.{digits}f}"


def generate_cohort(spec: CohortSpec) -> tuple[str, str, str]:
    """Return (admissions.csv, vitals.csv, planted_labels.csv) as text."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_admissions
    subtype = rng.choice(len(spec.subtypes), size=n, p=spec.shares())

    temp = np.empty(n)
    sbp = np.empty(n)
    hr = np.empty(n)
    sats = np.empty(n)
    rr = np.empty(n)
    limited = np.zeros(n, dtype=bool)
    died = np.zeros(n, dtype=bool)
    los = np.empty(n)
    age = np.empty(n)
    female = np.zeros(n, dtype=bool)
    icd = np.empty(n, dtype=object)

    for k, st in enumerate(spec.subtypes):
        rows = np.flatnonzero(subtype == k)
        m = rows.size
        temp[rows] = st.vitals["temperature"].sample(rng, m)
        sbp[rows] = st.vitals["sbp"].sample(rng, m)
        hr[rows] = st.vitals["heart_rate"].sample(rng, m)
        sats[rows] = st.vitals["sats"].sample(rng, m)
        rr[rows] = st.vitals["resp_rate"].sample(rng, m)
        limited[rows] = rng.random(m) < st.p_limited
        died[rows] = rng.random(m) < st.p_death
        mu, sigma = st.los_lognormal()
        los[rows] = 2.0 + rng.lognormal(mu, sigma, size=m)
        age[rows] = st.age.sample(rng, m)
        female[rows] = rng.random(m) < st.p_female
        codes = list(st.icd10)
        icd[rows] = np.asarray(codes, dtype=object)[rng.choice(len(codes), size=m, p=list(st.icd10.values()))]

    other_gender = rng.choice(np.array(["M", "NK", "NS"]), size=n, p=[0.98, 0.01, 0.01])
    admit = rng.integers(STUDY_START, STUDY_END, size=n)
    vitals_offset = rng.integers(0, 2 * 3600, size=n)
    readmit = rng.random(n) < spec.readmission_rate
    readmit_pick = rng.random(n)

    width = max(6, len(str(n)))
    adm_out = io.StringIO()
    vit_out = io.StringIO()
    lab_out = io.StringIO()
    adm_w = csv.writer(adm_out, lineterminator="\n")
    vit_w = csv.writer(vit_out, lineterminator="\n")
    adm_w.writerow(ADMISSION_COLUMNS)
    vit_w.writerow(VITALS_COLUMNS)
    lab_out.write("admission_id,subtype\n")

    patients: list[tuple[str, str, int]] = []
    for i in range(n):
        aid = f"ADM{i + 1:0{width}d}"
        if patients and readmit[i]:
            pid, gender, patient_age = patients[int(readmit_pick[i] * len(patients))]
        else:
            pid = f"PAT{len(patients) + 1:0{width}d}"
            gender = "F" if female[i] else str(other_gender[i])
            patient_age = int(round(age[i]))
            patients.append((pid, gender, patient_age))
        admit_ts = int(admit[i])
        discharge_ts = admit_ts + int(math.ceil(los[i] * 3600.0))
        adm_w.writerow([aid, pid, gender, patient_age, format_timestamp(admit_ts),
                        format_timestamp(discharge_ts), "died" if died[i] else "survived", icd[i]])

        vals = [round(temp[i], 2), round(sbp[i], 2), round(hr[i], 2), round(sats[i], 2), round(rr[i], 2)]
        news = news2_score(*vals, limited=bool(limited[i]))
        vit_w.writerow([aid, format_timestamp(admit_ts + int(vitals_offset[i])),
                        *(_fmt(v) for v in vals), "limited" if limited[i] else "alert", news])
        lab_out.write(f"{aid},{int(subtype[i])}\n")
    return adm_out.getvalue(), vit_out.getvalue(), lab_out.getvalue()


# ---------------------------------------------------------------------------
# defects
# ---------------------------------------------------------------------------

@dataclass
class DegradationManifest:
    short_stay: list[str] = field(default_factory=list)
    incomplete_vitals: list[str] = field(default_factory=list)

    def expected_filter_log(self) -> dict[str, int]:
        return {"short_stay": len(self.short_stay), "no_vitals_24h": len(self.incomplete_vitals)}

    def to_dict(self) -> dict:
        return {
            "short_stay": list(self.short_stay),
            "incomplete_vitals": list(self.incomplete_vitals),
            "expected_filter_log": self.expected_filter_log(),
        }


BLANKABLE = ["temperature", "sbp", "heart_rate", "sats", "resp_rate", "consciousness"]


def degrade_cohort(admissions_csv: str, vitals_csv: str, missing_rate: float, short_stay_rate: float,
                   seed: int = 0) -> tuple[str, str, DegradationManifest]:
    """Inject defects the ingest filters must catch.

    round(rate * n) admissions are picked for each defect, the two sets
    disjoint: short-stay admissions get a discharge under 2 h after admit,
    incomplete ones have one vitals field blanked in every vitals row.
    Untouched lines are passed through verbatim.
    """
    for r in (missing_rate, short_stay_rate):
        if not 0.0 <= r < 1.0:
            raise ValueError("rates must lie in [0, 1)")
    adm_lines = admissions_csv.splitlines(keepends=True)
    vit_lines = vitals_csv.splitlines(keepends=True)
    n = len(adm_lines) - 1
    n_short = int(round(short_stay_rate * n))
    n_missing = int(round(missing_rate * n))
    if n_short + n_missing > n:
        raise ValueError("defect counts exceed the number of admissions")
    manifest = DegradationManifest()
    if n_short == 0 and n_missing == 0:
        return admissions_csv, vitals_csv, manifest

    rng = np.random.default_rng([seed, 0xDE6])
    perm = rng.permutation(n)
    short_rows = np.sort(perm[:n_short])
    missing_rows = np.sort(perm[n_short:n_short + n_missing])

    a_idx = ADMISSION_COLUMNS.index
    for r in short_rows:
        line = adm_lines[r + 1]
        fields = next(csv.reader([line]))
        admit = datetime.fromisoformat(fields[a_idx("admit_ts")].replace("Z", "+00:00"))
        stay = int(rng.integers(0, 2 * 3600))
        fields[a_idx("discharge_ts")] = format_timestamp(int(admit.timestamp()) + stay)
        adm_lines[r + 1] = ",".join(fields) + ("\n" if line.endswith("\n") else "")
        manifest.short_stay.append(fields[0])

    missing_ids = {}
    for r in missing_rows:
        aid = next(csv.reader([adm_lines[r + 1]]))[0]
        missing_ids[aid] = BLANKABLE[int(rng.integers(len(BLANKABLE)))]
        manifest.incomplete_vitals.append(aid)

    v_idx = VITALS_COLUMNS.index
    for i in range(1, len(vit_lines)):
        line = vit_lines[i]
        aid = line.split(",", 1)[0]
        if aid in missing_ids:
            fields = next(csv.reader([line]))
            fields[v_idx(missing_ids[aid])] = ""
            vit_lines[i] = ",".join(fields) + ("\n" if line.endswith("\n") else "")
    return "".join(adm_lines), "".join(vit_lines), manifest
