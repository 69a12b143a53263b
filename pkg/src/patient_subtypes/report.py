"""Cluster characterisation artifacts.

Per-cluster clinical table, percent difference of cluster means against
the population mean with 95% intervals, ICD10 chapter heatmap data,
embedding overlays and clinician sample packs.
"""
from __future__ import annotations

import json
import logging
import math
import re
import warnings
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from .hdbscan_cluster import ClusterLabels
from .ingest import Cohort, cohort_frame, cohort_summary, format_timestamp
from .umap_embed import Embedding2D

log = logging.getLogger(__name__)

Z_95 = 1.96

# (group, first letter, first number, last letter, last number)
ICD10_GROUPS = [
    ("Infectious/parasitic (A00-B99)", "A", 0, "B", 99),
    ("Neoplasms (C00-D49)", "C", 0, "D", 49),
    ("Neuropsychiatric (F01-F99)", "F", 1, "F", 99),
    ("Nervous system (G00-G99)", "G", 0, "G", 99),
    ("Circulatory system (I00-I99)", "I", 0, "I", 99),
    ("Respiratory system (J00-J99)", "J", 0, "J", 99),
    ("Digestive system (K00-K95)", "K", 0, "K", 95),
    ("MSK (M00-M99)", "M", 0, "M", 99),
    ("Pregnancy (O00-O9A)", "O", 0, "O", 99),
    ("Not elsewhere classified (R00-R99)", "R", 0, "R", 99),
    ("Injury (S00-T88)", "S", 0, "T", 88),
]
OTHER_GROUP = "Other"
GROUP_NAMES = [g[0] for g in ICD10_GROUPS] + [OTHER_GROUP]

_ICD_HEAD = re.compile(r"^([A-Z])([0-9])([0-9A-Z])")

PERCENT_DIFF_MEASURES = ["news", "temperature", "sbp", "heart_rate", "sats", "resp_rate",
                         "limited", "los_hours"]
PROPORTION_MEASURES = {"limited"}
RARE_SHARE = 0.05


class UnparseableCodeWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# ICD10
# --------------------------------------------------------------------------

def icd10_group(code: str) -> str:
    """Chapter group of an ICD10 code by leading letter and number. Codes
    that cannot be read fall into "Other" with a warning."""
    m = _ICD_HEAD.match(code.strip().upper())
    if not m:
        warnings.warn(f"unparseable ICD10 code {code!r}", UnparseableCodeWarning, stacklevel=2)
        return OTHER_GROUP
    letter, d1, d2 = m.groups()
    if letter == "O" and d1 == "9" and d2 == "A":
        number = 99  # O9A sorts after O99 for range purposes
    elif d2.isdigit():
        number = int(d1 + d2)
    else:
        warnings.warn(f"unparseable ICD10 code {code!r}", UnparseableCodeWarning, stacklevel=2)
        return OTHER_GROUP
    key = (letter, number)
    for name, l0, n0, l1, n1 in ICD10_GROUPS:
        if (l0, n0) <= key <= (l1, n1):
            return name
    return OTHER_GROUP


@dataclass
class Icd10Heatmap:
    table: pd.DataFrame  # groups x clusters, percent of cluster admissions
    retained: list[str]
    threshold: float

    def retained_table(self) -> pd.DataFrame:
        return self.table.loc[self.retained]

    def to_csv(self) -> str:
        df = self.table.copy()
        df.insert(0, "retained", [g in self.retained for g in df.index])
        df.index.name = "group"
        return df.to_csv()


def icd10_heatmap(cohort: Cohort, labels: ClusterLabels, threshold: float = 2.0) -> Icd10Heatmap:
    lab = np.asarray(labels.labels)
    groups = [icd10_group(adm.icd10_primary) for adm, _ in cohort.records]
    clusters = sorted(k for k in set(lab.tolist()) if k >= 0)
    table = pd.DataFrame(0.0, index=GROUP_NAMES, columns=clusters)
    for k in clusters:
        members = np.flatnonzero(lab == k)
        counts = Counter(groups[i] for i in members)
        for g, c in counts.items():
            table.loc[g, k] = 100.0 * c / members.size
    retained = [g for g in GROUP_NAMES if (table.loc[g] >= threshold).any()]
    return Icd10Heatmap(table, retained, threshold)


# --------------------------------------------------------------------------
# cluster table
# --------------------------------------------------------------------------

@dataclass
class ClusterSummary:
    cluster: int
    is_noise: bool
    n_patients: int
    n_admissions: int
    pct_female: float
    age_mean: float
    age_sd: float
    los_hours_mean: float
    los_hours_sd: float
    mortality_pct: float
    icd10_top: str
    news_mean: float
    news_sd: float
    temperature_mean: float
    temperature_sd: float
    sbp_mean: float
    sbp_sd: float
    heart_rate_mean: float
    heart_rate_sd: float
    sats_mean: float
    sats_sd: float
    resp_rate_mean: float
    resp_rate_sd: float
    pct_limited_consciousness: float


def _top_code(codes) -> str:
    counts = Counter(codes)
    best = max(counts.values())
    return min(c for c, n in counts.items() if n == best)


def summarize_clusters(cohort: Cohort, labels: ClusterLabels) -> list[ClusterSummary]:
    """One row per cluster, plus a trailing noise row when noise exists."""
    lab = np.asarray(labels.labels)
    if lab.shape[0] != len(cohort):
        raise ValueError("labels are not aligned with the cohort")
    out = []
    keys = sorted(k for k in set(lab.tolist()) if k >= 0)
    if (lab < 0).any():
        keys.append(-1)
    for k in keys:
        sub = cohort.subset(lab == k)
        s = cohort_summary(sub)
        out.append(ClusterSummary(
            cluster=k,
            is_noise=k < 0,
            n_patients=s["n_patients"],
            n_admissions=s["n_admissions"],
            pct_female=s["pct_female"],
            age_mean=s["age_mean"], age_sd=s["age_sd"],
            los_hours_mean=s["los_hours_mean"], los_hours_sd=s["los_hours_sd"],
            mortality_pct=s["mortality_pct"],
            icd10_top=_top_code(adm.icd10_primary for adm, _ in sub.records),
            news_mean=s["news_mean"], news_sd=s["news_sd"],
            temperature_mean=s["temperature_mean"], temperature_sd=s["temperature_sd"],
            sbp_mean=s["sbp_mean"], sbp_sd=s["sbp_sd"],
            heart_rate_mean=s["heart_rate_mean"], heart_rate_sd=s["heart_rate_sd"],
            sats_mean=s["sats_mean"], sats_sd=s["sats_sd"],
            resp_rate_mean=s["resp_rate_mean"], resp_rate_sd=s["resp_rate_sd"],
            pct_limited_consciousness=s["pct_limited_consciousness"],
        ))
    return out


def summaries_frame(summaries: list[ClusterSummary]) -> pd.DataFrame:
    return pd.DataFrame([asdict(s) for s in summaries])


# --------------------------------------------------------------------------
# percent difference vs population
# --------------------------------------------------------------------------

@dataclass
class PercentDiffRow:
    cluster: int | None
    measure: str | None
    diff_pct: float
    ci_half_width: float
    n_cluster: int
    population_n: int
    defined: bool = True
    rare_event: bool = False


def percent_diff_ci(cluster_values, population_mean: float, population_n: int,
                    cluster: int | None = None, measure: str | None = None) -> PercentDiffRow:
    """100 * (cluster mean - population mean) / |population mean| with a
    normal-approximation 95% half-width 100 * 1.96 * SEM / |population mean|.
    SEM uses the population sd of the cluster values."""
    x = np.asarray(cluster_values, dtype=np.float64)
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError("cluster_values must be non-empty")
    binary = bool(np.all((x == 0) | (x == 1)))
    rare = binary and measure in PROPORTION_MEASURES and 0 <= population_mean < RARE_SHARE
    if population_mean == 0:
        return PercentDiffRow(cluster, measure, float("nan"), float("nan"), int(x.size),
                              int(population_n), defined=False, rare_event=rare)
    scale = 100.0 / abs(population_mean)
    diff = (x.mean() - population_mean) * scale
    half = Z_95 * (x.std(ddof=0) / math.sqrt(x.size)) * scale
    return PercentDiffRow(cluster, measure, float(diff), float(half), int(x.size), int(population_n),
                          defined=True, rare_event=rare)


def percent_diff_table(cohort: Cohort, labels: ClusterLabels,
                       measures=PERCENT_DIFF_MEASURES) -> list[PercentDiffRow]:
    """Noise is left out: only real clusters are compared to the population."""
    df = cohort_frame(cohort)
    lab = np.asarray(labels.labels)
    rows = []
    for measure in measures:
        col = df[measure].to_numpy(dtype=np.float64)
        valid = ~np.isnan(col)
        pop_mean = float(col[valid].mean())
        pop_n = int(valid.sum())
        for k in sorted(k for k in set(lab.tolist()) if k >= 0):
            vals = col[(lab == k) & valid]
            if vals.size == 0:
                continue
            rows.append(percent_diff_ci(vals, pop_mean, pop_n, cluster=k, measure=measure))
    return rows


# --------------------------------------------------------------------------
# overlays and sample packs
# --------------------------------------------------------------------------

OVERLAY_COLUMNS = ["admission_id", "x", "y", "cluster", "gender", "age", "news", "temperature",
                   "sbp", "heart_rate", "sats", "resp_rate", "consciousness"]


def export_overlays(cohort: Cohort, embedding: Embedding2D, labels: ClusterLabels) -> pd.DataFrame:
    ids = cohort.admission_ids
    if list(embedding.row_ids) != ids or list(labels.row_ids) != ids:
        raise ValueError("embedding, labels and cohort must share row order")
    rows = []
    for (adm, vs), (x, y), k in zip(cohort.records, embedding.coords, labels.labels):
        rows.append((adm.admission_id, float(x), float(y), int(k), adm.gender, adm.age,
                     vs.news, vs.temperature, vs.sbp, vs.heart_rate, vs.sats, vs.resp_rate,
                     vs.consciousness))
    df = pd.DataFrame(rows, columns=OVERLAY_COLUMNS)
    df["news"] = df["news"].astype("Int64")
    return df


def _admission_dict(adm, vs) -> dict:
    return {
        "admission_id": adm.admission_id,
        "patient_id": adm.patient_id,
        "gender": adm.gender,
        "age": adm.age,
        "admit_ts": format_timestamp(adm.admit_ts),
        "discharge_ts": format_timestamp(adm.discharge_ts),
        "los_hours": adm.stay_hours,
        "outcome": adm.outcome,
        "icd10_primary": adm.icd10_primary,
        "vitals": {
            "ts": format_timestamp(vs.ts),
            "temperature": vs.temperature,
            "sbp": vs.sbp,
            "heart_rate": vs.heart_rate,
            "sats": vs.sats,
            "resp_rate": vs.resp_rate,
            "consciousness": vs.consciousness,
            "news": vs.news,
        },
    }


def sample_for_clinicians(cohort: Cohort, labels: ClusterLabels, per_cluster: int = 10, seed: int = 0,
                          embedding: Embedding2D | None = None,
                          summaries: list[ClusterSummary] | None = None) -> dict[int, dict]:
    """Uniform draw without replacement per cluster.

    Members are sorted by admission_id before drawing, so the pack depends
    only on the seed and cluster membership, not on cohort row order.
    """
    lab = np.asarray(labels.labels)
    by_id = {adm.admission_id: i for i, (adm, _) in enumerate(cohort.records)}
    coords = {}
    if embedding is not None:
        coords = {rid: (float(x), float(y)) for rid, (x, y) in zip(embedding.row_ids, embedding.coords)}
    header = {s.cluster: asdict(s) for s in summaries} if summaries else {}
    packs = {}
    for k in sorted(k for k in set(lab.tolist()) if k >= 0):
        members = sorted(cohort.records[i][0].admission_id for i in np.flatnonzero(lab == k))
        if len(members) < per_cluster:
            warnings.warn(f"cluster {k} has only {len(members)} members; returning all", RuntimeWarning,
                          stacklevel=2)
            chosen = members
        else:
            rng = np.random.default_rng([seed, k])
            picks = rng.choice(len(members), size=per_cluster, replace=False)
            chosen = [members[i] for i in sorted(picks)]
        patients = []
        for aid in chosen:
            adm, vs = cohort.records[by_id[aid]]
            entry = _admission_dict(adm, vs)
            if aid in coords:
                entry["embedding"] = {"x": coords[aid][0], "y": coords[aid][1]}
            patients.append(entry)
        packs[k] = {
            "cluster": k,
            "seed": seed,
            "per_cluster": per_cluster,
            "n_members": len(members),
            "summary": header.get(k),
            "patients": patients,
        }
    return packs


# --------------------------------------------------------------------------
# plots
# --------------------------------------------------------------------------

def plot_overlays(overlays: pd.DataFrame, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 7))
    noise = overlays["cluster"] < 0
    ax.scatter(overlays.loc[noise, "x"], overlays.loc[noise, "y"], s=1, c="lightgrey")
    ax.scatter(overlays.loc[~noise, "x"], overlays.loc[~noise, "y"], s=1,
               c=overlays.loc[~noise, "cluster"], cmap="tab10")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_percent_diff(rows: pd.DataFrame, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    measures = list(dict.fromkeys(rows["measure"]))
    clusters = sorted(set(rows["cluster"]))
    fig, axes = plt.subplots(1, len(measures), figsize=(2.2 * len(measures), 3), sharey=False)
    for ax, m in zip(np.atleast_1d(axes), measures):
        sub = rows[rows["measure"] == m].set_index("cluster").reindex(clusters)
        ax.bar(range(len(clusters)), sub["diff_pct"], yerr=sub["ci_half_width"], color="grey")
        ax.axhline(0, color="black", lw=0.8)
        ax.set_title(m, fontsize=8)
        ax.set_xticks(range(len(clusters)), [str(c) for c in clusters])
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_json(path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")
