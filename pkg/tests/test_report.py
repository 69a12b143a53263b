import io
import math
from dataclasses import asdict

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patient_subtypes import report as rpt
from patient_subtypes.hdbscan_cluster import ClusterLabels
from patient_subtypes.ingest import cohort_frame, cohort_summary, filter_cohort, parse_admissions
from patient_subtypes.synth import default_paper_spec, generate_cohort
from patient_subtypes.umap_embed import Embedding2D


@pytest.fixture(scope="module")
def data():
    adm, vit, planted = generate_cohort(default_paper_spec(3000, seed=8))
    cohort = filter_cohort(*parse_admissions(adm, vit)[:2])
    sub = dict(line.split(",") for line in planted.strip().splitlines()[1:])
    lab = np.array([int(sub[a]) for a in cohort.admission_ids])
    lab[::50] = -1  # some noise
    labels = ClusterLabels(cohort.admission_ids, lab)
    coords = np.random.default_rng(0).normal(size=(len(cohort), 2))
    return cohort, labels, Embedding2D(cohort.admission_ids, coords)


# ---- percent difference ----------------------------------------------------

def test_percent_diff_identity():
    row = rpt.percent_diff_ci([3.0, 5.0], 4.0, 100)
    assert row.diff_pct == 0.0 and row.ci_half_width > 0


def test_percent_diff_news_example():
    row = rpt.percent_diff_ci([5.78], 1.53, 95825)
    assert row.diff_pct == pytest.approx(100 * (5.78 - 1.53) / 1.53)
    assert row.diff_pct == pytest.approx(277.8, abs=0.1)


def test_percent_diff_half_width_example():
    row = rpt.percent_diff_ci([8.0, 12.0, 8.0, 12.0], 10.0, 100)
    assert row.ci_half_width == pytest.approx(19.6, abs=1e-12)
    assert row.diff_pct == 0.0


def test_percent_diff_negative_population_mean_uses_abs():
    row = rpt.percent_diff_ci([-1.0], -2.0, 10)
    assert row.diff_pct == pytest.approx(50.0)


def test_percent_diff_undefined_and_rare():
    row = rpt.percent_diff_ci([1.0, 0.0], 0.0, 10)
    assert not row.defined and math.isnan(row.diff_pct)
    rare = rpt.percent_diff_ci([0, 0, 1, 0], 0.0084, 1000, measure="limited")
    assert rare.rare_event and rare.defined
    assert not rpt.percent_diff_ci([0, 1], 0.3, 10, measure="limited").rare_event


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=50), st.floats(0.1, 50))
def test_half_width_non_negative(values, pop):
    assert rpt.percent_diff_ci(values, pop, 100).ci_half_width >= 0


def test_percent_diff_table_excludes_noise(data):
    cohort, labels, _ = data
    rows = rpt.percent_diff_table(cohort, labels)
    assert {r.cluster for r in rows} == set(range(5))
    assert {r.measure for r in rows} == set(rpt.PERCENT_DIFF_MEASURES)
    limited = [r for r in rows if r.measure == "limited"]
    assert all(r.rare_event for r in limited)


# ---- cluster table ---------------------------------------------------------

def test_single_cluster_reduces_to_cohort_summary(data):
    cohort, _, _ = data
    one = ClusterLabels(cohort.admission_ids, np.zeros(len(cohort), dtype=np.int64))
    (s,) = rpt.summarize_clusters(cohort, one)
    ref = cohort_summary(cohort)
    d = asdict(s)
    for key, value in ref.items():
        assert d[key] == value, key


def test_two_admissions_one_death():
    from conftest import ADM_HEADER, VIT_HEADER, adm_row, vit_row
    cohort = filter_cohort(*parse_admissions(ADM_HEADER + adm_row("A1") + adm_row("A2", outcome="died"),
                                             VIT_HEADER + vit_row("A1") + vit_row("A2"))[:2])
    (s,) = rpt.summarize_clusters(cohort, ClusterLabels(cohort.admission_ids, np.array([0, 0])))
    assert s.mortality_pct == 50.0


def test_summary_rows_and_invariants(data):
    cohort, labels, _ = data
    rows = rpt.summarize_clusters(cohort, labels)
    assert [r.cluster for r in rows] == [0, 1, 2, 3, 4, -1]
    assert rows[-1].is_noise and not any(r.is_noise for r in rows[:-1])
    for r in rows:
        assert r.n_patients <= r.n_admissions
        for pct in (r.pct_female, r.mortality_pct, r.pct_limited_consciousness):
            assert 0 <= pct <= 100
    assert rows[0].pct_limited_consciousness == 100.0
    assert all(r.pct_limited_consciousness == 0 for r in rows[1:-1])


def test_weighted_cluster_means_reproduce_population(data):
    cohort, labels, _ = data
    rows = rpt.summarize_clusters(cohort, labels)
    ref = cohort_summary(cohort)
    n = sum(r.n_admissions for r in rows)
    for m in ["age", "los_hours", "news", "temperature", "sbp", "heart_rate", "sats", "resp_rate"]:
        weighted = math.fsum(getattr(r, f"{m}_mean") * r.n_admissions for r in rows) / n
        assert weighted == pytest.approx(ref[f"{m}_mean"], rel=1e-9, abs=1e-9), m
    for pct in ["pct_female", "mortality_pct", "pct_limited_consciousness"]:
        weighted = math.fsum(getattr(r, pct) * r.n_admissions for r in rows) / n
        assert weighted == pytest.approx(ref[pct], rel=1e-9, abs=1e-9)


def test_icd_top_ties_lexicographic(data):
    assert rpt._top_code(["I251", "A41.9", "A41.9", "I251", "Z00"]) == "A41.9"


# ---- ICD10 -----------------------------------------------------------------

@pytest.mark.parametrize("code,group", [
    ("A41.9", "Infectious/parasitic (A00-B99)"),
    ("B99", "Infectious/parasitic (A00-B99)"),
    ("I251", "Circulatory system (I00-I99)"),
    ("C34.9", "Neoplasms (C00-D49)"),
    ("D49.9", "Neoplasms (C00-D49)"),
    ("D50.9", "Other"),
    ("F01", "Neuropsychiatric (F01-F99)"),
    ("F00", "Other"),
    ("K95", "Digestive system (K00-K95)"),
    ("K96", "Other"),
    ("O9A.1", "Pregnancy (O00-O9A)"),
    ("O80", "Pregnancy (O00-O9A)"),
    ("S72.0", "Injury (S00-T88)"),
    ("T88.9", "Injury (S00-T88)"),
    ("T89", "Other"),
    ("R55", "Not elsewhere classified (R00-R99)"),
    ("Z51.1", "Other"),
])
def test_icd10_groups(code, group):
    assert rpt.icd10_group(code) == group


def test_unparseable_code_goes_to_other():
    with pytest.warns(rpt.UnparseableCodeWarning):
        assert rpt.icd10_group("??") == "Other"


def _icd_cohort(codes):
    from conftest import ADM_HEADER, VIT_HEADER, adm_row, vit_row
    adm = ADM_HEADER + "".join(adm_row(f"A{i:03d}", icd=c) for i, c in enumerate(codes))
    vit = VIT_HEADER + "".join(vit_row(f"A{i:03d}") for i in range(len(codes)))
    return filter_cohort(*parse_admissions(adm, vit)[:2])


def test_heatmap_boundary_inclusive():
    codes = ["J18.9"] + ["I251"] * 49 + ["I251"] * 50
    cohort = _icd_cohort(codes)
    labels = ClusterLabels(cohort.admission_ids, np.repeat([0, 1], 50))
    heat = rpt.icd10_heatmap(cohort, labels, threshold=2.0)
    assert heat.table.loc["Respiratory system (J00-J99)", 0] == 2.0
    assert "Respiratory system (J00-J99)" in heat.retained
    assert "Neoplasms (C00-D49)" not in heat.retained
    assert ((heat.table >= 0) & (heat.table <= 100)).all().all()
    heat3 = rpt.icd10_heatmap(cohort, labels, threshold=2.01)
    assert "Respiratory system (J00-J99)" not in heat3.retained


def test_heatmap_retention_monotone(data):
    cohort, labels, _ = data
    tables = {t: set(rpt.icd10_heatmap(cohort, labels, t).retained) for t in (0, 1, 2, 5, 10, 30, 100)}
    ts = sorted(tables)
    for lo, hi in zip(ts, ts[1:]):
        assert tables[hi] <= tables[lo]
    heat = rpt.icd10_heatmap(cohort, labels)
    assert list(heat.table.columns) == [0, 1, 2, 3, 4]
    df = pd.read_csv(io.StringIO(heat.to_csv()))
    assert "retained" in df.columns


# ---- sample packs ----------------------------------------------------------

def test_sample_packs(data):
    cohort, labels, emb = data
    summaries = rpt.summarize_clusters(cohort, labels)
    packs = rpt.sample_for_clinicians(cohort, labels, 5, seed=3, embedding=emb, summaries=summaries)
    again = rpt.sample_for_clinicians(cohort, labels, 5, seed=3, embedding=emb, summaries=summaries)
    assert packs == again
    lab = dict(zip(labels.row_ids, labels.labels))
    for k, pack in packs.items():
        ids = [p["admission_id"] for p in pack["patients"]]
        assert len(ids) == len(set(ids)) == 5
        assert all(lab[i] == k for i in ids)
        assert pack["summary"]["cluster"] == k and "embedding" in pack["patients"][0]
        assert set(pack["patients"][0]["vitals"]) >= {"temperature", "sbp", "heart_rate", "sats", "resp_rate",
                                                      "consciousness"}
    assert rpt.sample_for_clinicians(cohort, labels, 5, seed=4) != rpt.sample_for_clinicians(cohort, labels, 5, seed=3)


def test_sample_packs_invariant_to_row_order(data):
    cohort, labels, _ = data
    perm = np.random.default_rng(1).permutation(len(cohort))
    shuffled = cohort.subset([True] * len(cohort))
    shuffled.records = [cohort.records[i] for i in perm]
    lab2 = ClusterLabels([labels.row_ids[i] for i in perm], labels.labels[perm])
    a = rpt.sample_for_clinicians(cohort, labels, 5, seed=9)
    b = rpt.sample_for_clinicians(shuffled, lab2, 5, seed=9)
    assert a == b


def test_small_cluster_returns_all_with_warning(data):
    cohort, _, _ = data
    lab = np.full(len(cohort), -1)
    lab[:7] = 0
    with pytest.warns(RuntimeWarning):
        packs = rpt.sample_for_clinicians(cohort, ClusterLabels(cohort.admission_ids, lab), 10, seed=0)
    assert len(packs[0]["patients"]) == 7


# ---- overlays --------------------------------------------------------------

def test_overlays(data):
    cohort, labels, emb = data
    df = rpt.export_overlays(cohort, emb, labels)
    assert len(df) == len(cohort)
    assert list(df.columns) == ["admission_id", "x", "y", "cluster", "gender", "age", "news", "temperature", "sbp",
                                "heart_rate", "sats", "resp_rate", "consciousness"]
    back = pd.read_csv(io.StringIO(df.to_csv(index=False)), float_precision="round_trip")
    ref = cohort_frame(cohort)
    for col in ["temperature", "sbp", "heart_rate", "sats", "resp_rate", "age"]:
        assert back[col].tolist() == ref[col].tolist()
    assert back["x"].tolist() == emb.coords[:, 0].tolist()
    assert back["cluster"].tolist() == labels.labels.tolist()


def test_overlays_need_alignment(data):
    cohort, labels, emb = data
    bad = Embedding2D(list(reversed(emb.row_ids)), emb.coords)
    with pytest.raises(ValueError):
        rpt.export_overlays(cohort, bad, labels)
