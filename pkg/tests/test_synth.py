import csv
import io
import math

import numpy as np
import pytest

from patient_subtypes.ingest import cohort_summary, filter_cohort, parse_admissions
from patient_subtypes.synth import (PAPER_ADMISSIONS, PAPER_TOTAL_ADMISSIONS, CohortSpec, Dist, SubtypeSpec,
                                    default_paper_spec, degrade_cohort, generate_cohort, news2_score)

VITALS = ["temperature", "sbp", "heart_rate", "sats", "resp_rate"]


@pytest.fixture(scope="module")
def spec():
    return default_paper_spec(20_000, seed=0)


def test_default_spec_marginals(spec):
    shares = [s.share for s in spec.subtypes]
    assert abs(sum(shares) - 1) < 1e-6
    assert shares == [0.0047, 0.0909, 0.6368, 0.1052, 0.1624]
    for share, count in zip(shares, PAPER_ADMISSIONS):
        assert share == pytest.approx(count / PAPER_TOTAL_ADMISSIONS, abs=1.5e-4)
    assert [s.p_death for s in spec.subtypes] == [0.21, 0.02, 0.04, 0.01, 0.01]
    assert [s.p_limited for s in spec.subtypes] == [1.0, 0.0, 0.0, 0.0, 0.0]
    assert [s.news_mean for s in spec.subtypes] == [5.78, 0.99, 1.65, 0.78, 0.69]
    # location parameters; the 100% ceiling pulls the realised means of
    # subtypes 0 and 1 slightly below them
    assert [s.vitals["sats"].mean for s in spec.subtypes] == [95.72, 100.0, 97.4146, 99.0, 98.0]
    assert spec.subtypes[2].vitals["sats"].expected_mean() == pytest.approx(95.53, abs=0.01)
    assert all(s.vitals["sats"].hi <= 100.0 for s in spec.subtypes)
    one = spec.subtypes[1].vitals["sats"]
    assert (one.mean, one.sd) == (100.0, 0.02)
    tops = [max(s.icd10, key=s.icd10.get) for s in spec.subtypes]
    assert tops == ["A41.9", "R10.3", "I251", "I251", "I251"]


def test_low_sats_stratum_stays_below_the_others(spec):
    low = spec.subtypes[2].vitals["sats"]
    assert low.hi == 97.0
    rng = np.random.default_rng(0)
    assert low.sample(rng, 10_000).max() <= 97.0


def test_spec_validation():
    base = default_paper_spec(10)
    with pytest.raises(ValueError):
        CohortSpec(0, base.subtypes)
    with pytest.raises(ValueError):
        CohortSpec(10, base.subtypes[:2])
    with pytest.raises(ValueError):
        SubtypeSpec("x", 1.0, base.subtypes[0].vitals, 1.5, 0, 10, 5, {"A41.9": 1}, Dist(50, 10), 0.5)


def test_one_admission():
    adm, vit, lab = generate_cohort(default_paper_spec(1, seed=1))
    assert adm.count("\n") == 2 and vit.count("\n") == 2 and lab.count("\n") == 2


def test_same_seed_identical(spec):
    small = default_paper_spec(500, seed=4)
    assert generate_cohort(small) == generate_cohort(default_paper_spec(500, seed=4))
    assert generate_cohort(small) != generate_cohort(default_paper_spec(500, seed=5))


def test_mortality_of_20k_draw(spec):
    adm, _, _ = generate_cohort(spec)
    outcomes = [row["outcome"] for row in csv.DictReader(io.StringIO(adm))]
    mortality = 100 * outcomes.count("died") / len(outcomes)
    assert abs(mortality - 2.84) <= 0.5


def test_generated_rows_pass_ingest(spec):
    adm, vit, _ = generate_cohort(default_paper_spec(3000, seed=2))
    recs, vits, rejects = parse_admissions(adm, vit)
    assert rejects == []
    cohort = filter_cohort(recs, vits)
    assert len(cohort) == 3000 and sum(cohort.filter_log.values()) == 0
    assert len({a.patient_id for a, _ in cohort.records}) < 3000


def test_no_label_leakage(spec):
    adm, vit, lab = generate_cohort(default_paper_spec(2000, seed=3))
    assert "subtype" not in adm.splitlines()[0] and "subtype" not in vit.splitlines()[0]
    planted = [line.split(",")[1] for line in lab.strip().splitlines()[1:]]
    for text in (adm, vit):
        rows = list(csv.reader(io.StringIO(text)))[1:]
        for col in range(1, len(rows[0])):
            assert [r[col] for r in rows] != planted


def test_per_subtype_means_within_three_se():
    spec = default_paper_spec(50_000, seed=11)
    adm, vit, lab = generate_cohort(spec)
    sub = np.array([int(line.split(",")[1]) for line in lab.strip().splitlines()[1:]])
    rows = list(csv.DictReader(io.StringIO(vit)))
    values = {v: np.array([float(r[v]) for r in rows]) for v in VITALS}
    for k, st in enumerate(spec.subtypes):
        mask = sub == k
        n = int(mask.sum())
        for v in VITALS:
            d = st.vitals[v]
            x = values[v][mask]
            if d.sd == 0:
                assert np.all(x == d.expected_mean())
                continue
            se = d.expected_sd() / math.sqrt(n)
            # values are written at 2 dp; allow the rounding half-step on top
            assert abs(x.mean() - d.expected_mean()) <= 3 * se + 0.005, (st.name, v)


def test_news2_bands():
    assert news2_score(37.0, 120, 70, 97, 16, False) == 0
    assert news2_score(37.0, 120, 70, 97, 16, True) == 3
    assert news2_score(35.0, 90, 40, 91, 8, False) == 15
    assert news2_score(39.1, 220, 131, 96, 25, True) == 2 + 3 + 3 + 0 + 3 + 3
    assert news2_score(38.06, 100.4, 90.4, 93.4, 20.4, False) == 1 + 2 + 0 + 2 + 0
    assert news2_score(36.0, 110, 50, 95, 11, False) == 1 + 1 + 1 + 1 + 1


def test_degrade_identity_and_determinism():
    adm, vit, _ = generate_cohort(default_paper_spec(1000, seed=1))
    a2, v2, m = degrade_cohort(adm, vit, 0.0, 0.0, seed=3)
    assert (a2, v2) == (adm, vit) and m.expected_filter_log() == {"short_stay": 0, "no_vitals_24h": 0}
    first = degrade_cohort(adm, vit, 0.1, 0.05, seed=3)
    assert first == degrade_cohort(adm, vit, 0.1, 0.05, seed=3)
    assert first[2].expected_filter_log() == {"short_stay": 50, "no_vitals_24h": 100}
    assert not set(first[2].short_stay) & set(first[2].incomplete_vitals)
    with pytest.raises(ValueError):
        degrade_cohort(adm, vit, 1.0, 0.0)


def test_degrade_round_trip_through_ingest():
    adm, vit, _ = generate_cohort(default_paper_spec(4000, seed=6))
    a2, v2, manifest = degrade_cohort(adm, vit, 0.03, 0.08, seed=1)
    recs, vits, rejects = parse_admissions(a2, v2)
    cohort = filter_cohort(recs, vits)
    assert cohort.filter_log == manifest.expected_filter_log()
    assert len(cohort) == 4000 - 120 - 320
    assert {r.reason for r in rejects} == {"incomplete vitals"}


@pytest.fixture(scope="module")
def reference_cohort():
    adm, vit, lab = generate_cohort(default_paper_spec(seed=0))
    recs, vits, _ = parse_admissions(adm, vit)
    cohort = filter_cohort(recs, vits)
    planted = np.array([int(line.split(",")[1]) for line in lab.strip().splitlines()[1:]])
    return cohort, planted


def test_reference_cohort_mortality(reference_cohort):
    cohort, _ = reference_cohort
    summary = cohort_summary(cohort)
    assert summary["n_admissions"] == PAPER_TOTAL_ADMISSIONS
    spec = default_paper_spec()
    expected = 100 * sum(s.share * s.p_death for s in spec.subtypes)
    # the rounded per-subtype rates put the mixture at 3.095%, inside the band
    assert abs(expected - 2.84) <= 0.3
    # a single draw scatters around that expectation
    se = 100 * math.sqrt(expected / 100 * (1 - expected / 100) / summary["n_admissions"])
    assert abs(summary["mortality_pct"] - expected) <= 3 * se


def test_reference_unconscious_subtype(reference_cohort):
    cohort, planted = reference_cohort
    summary = cohort_summary(cohort.subset(planted == 0))
    n = summary["n_admissions"]
    se = 100 * math.sqrt(0.21 * 0.79 / n)
    assert abs(summary["mortality_pct"] - 21.0) <= 3 * se
    assert summary["pct_limited_consciousness"] == 100.0
