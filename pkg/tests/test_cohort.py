import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import SURGERY, make_event, make_patient
from stayline.cohort import (ABNORMAL, FIG1_LOS_PMF, LOS_MAX, CohortTable, RowError, SchemaError, SynthConfig,
                             cohort_summary, events_csv, generate_cohort, load_cohort, load_cohort_jsonl,
                             patients_csv, quota_counts, temporal_bonus, write_cohort, write_cohort_jsonl)
from stayline.numerics import DomainError

PATIENT_HEADER = "patient_id,age,sex,race,zip_region,surgery_code,diagnosis_codes,surgery_date,discharge_date\n"
EVENT_HEADER = "patient_id,event_date,lab_type,value,flag,reference_normal\n"


def write(tmp_path, patients, events):
    pp, ep = tmp_path / "patients.csv", tmp_path / "events.csv"
    pp.write_text(PATIENT_HEADER + patients)
    ep.write_text(EVENT_HEADER + events)
    return pp, ep


def test_post_surgery_event_dropped(tmp_path):
    pp, ep = write(
        tmp_path,
        "P1,60,male,White,1,22612,M89.9,2020-03-10,2020-03-12\n"
        "P2,70,female,Asian,2,63030,,2020-04-01,2020-04-01\n",
        "P1,2020-03-01,Sodium,140,normal,true\n"
        "P1,2020-03-11,Sodium,141,normal,true\n"
        "P2,2020-03-30,Potassium,,missing,false\n",
    )
    table = load_cohort(pp, ep)
    assert table.dropped_events == 1
    assert [e.event_date for e in table.events] == [dt.date(2020, 3, 1), dt.date(2020, 3, 30)]
    assert table.los_days == {"P1": 2, "P2": 0}
    assert table.patients[0].event_count == 1


def test_missing_column_is_schema_error(tmp_path):
    pp, ep = tmp_path / "p.csv", tmp_path / "e.csv"
    pp.write_text("patient_id,age\nP1,60\n")
    ep.write_text(EVENT_HEADER)
    with pytest.raises(SchemaError):
        load_cohort(pp, ep)


def test_bad_date_reports_line(tmp_path):
    pp, ep = write(tmp_path, "P1,60,male,White,1,22612,,2020-03-10,2020-03-12\n"
                             "P2,60,male,White,1,22612,,2020-13-40,2020-03-12\n", "")
    with pytest.raises(RowError) as err:
        load_cohort(pp, ep)
    assert err.value.line == 3


@pytest.mark.parametrize("row", [
    "P1,17,male,White,1,22612,,2020-03-10,2020-03-12\n",   # under 18
    "P1,60,other,White,1,22612,,2020-03-10,2020-03-12\n",  # sex domain
    "P1,60,male,White,1,22612,,2020-03-10,2020-03-09\n",   # discharge before surgery
])
def test_invalid_patient_rows(tmp_path, row):
    pp, ep = write(tmp_path, row, "")
    with pytest.raises(RowError):
        load_cohort(pp, ep)


def test_missing_flag_must_match_empty_value(tmp_path):
    pp, ep = write(tmp_path, "P1,60,male,White,1,22612,,2020-03-10,2020-03-12\n",
                   "P1,2020-03-01,Sodium,140,missing,false\n")
    with pytest.raises(RowError):
        load_cohort(pp, ep)


def test_repeat_admissions_become_separate_records(tmp_path):
    pp, ep = write(
        tmp_path,
        "P1,60,male,White,1,22612,,2020-03-10,2020-03-12\n"
        "P1,60,male,White,1,22612,,2021-01-05,2021-01-09\n",
        "P1,2020-03-01,Sodium,140,normal,true\n"
        "P1,2020-12-30,Sodium,150,high,false\n",
    )
    table = load_cohort(pp, ep)
    ids = [p.patient_id for p in table.patients]
    assert ids == ["P1@2020-03-10", "P1@2021-01-05"]
    assert [e.patient_id for e in table.events] == ids
    assert table.dropped_events == 0


def test_day1_share_on_100_patient_file(tmp_path):
    # 21 of 100 patients discharged on day 1
    rows = []
    for i in range(100):
        los = 1 if i < 21 else 3 + i % 5
        end = SURGERY + dt.timedelta(days=los)
        rows.append(f"P{i:03d},50,male,White,1,22612,,{SURGERY.isoformat()},{end.isoformat()}\n")
    pp, ep = write(tmp_path, "".join(rows), "")
    summary = cohort_summary(load_cohort(pp, ep))
    assert summary.los_histogram[1] == 21
    assert summary.fraction(1) == 0.21


def test_csv_round_trip_is_byte_identical(tmp_path):
    table = generate_cohort(SynthConfig(n_patients=30, seed=4))
    write_cohort(table, tmp_path / "a")
    again = load_cohort(tmp_path / "a" / "patients.csv", tmp_path / "a" / "events.csv")
    write_cohort(again, tmp_path / "b")
    for name in ("patients.csv", "events.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert again.patients == table.patients
    assert again.events == table.events


def test_jsonl_round_trip(tmp_path):
    table = generate_cohort(SynthConfig(n_patients=12, seed=5))
    back = load_cohort_jsonl(write_cohort_jsonl(table, tmp_path / "c.jsonl"))
    assert patients_csv(back) == patients_csv(table)
    assert events_csv(back) == events_csv(table)


def test_generator_constant_base():
    table = generate_cohort(SynthConfig(n_patients=50, seed=1, noise_sd=0.0, base_days=3.0))
    assert set(table.los_days.values()) == {3}


def test_generator_planted_twin_difference():
    table = generate_cohort(SynthConfig(n_patients=300, seed=2, noise_sd=0.0,
                                        planted_effects={"chronic_kidney_disease": 2.0}))
    los = {("N18.3" in p.diagnosis_codes): set() for p in table.patients}
    for p in table.patients:
        los["N18.3" in p.diagnosis_codes].add(p.los_days)
    assert los == {True: {5}, False: {3}}


def test_generator_ols_recovers_planted_effect():
    table = generate_cohort(SynthConfig(n_patients=10_000, seed=3, noise_sd=1.0,
                                        planted_effects={"chronic_kidney_disease": 2.0}))
    x = np.array([float("N18.3" in p.diagnosis_codes) for p in table.patients])
    y = np.array([p.los_days for p in table.patients], dtype=float)
    X = np.column_stack([np.ones_like(x), x])
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    assert abs(beta[1] - 2.0) <= 0.2


def test_generator_invariants_and_demographics():
    cfg = SynthConfig(n_patients=2077, seed=9)
    table = generate_cohort(cfg)
    assert generate_cohort(cfg) == table
    summary = cohort_summary(table)
    assert summary.sex == {"female": 831, "male": 1246}
    assert all(0 <= v <= LOS_MAX for v in table.los_days.values())
    surgery = {p.patient_id: p.surgery_date for p in table.patients}
    assert all(e.event_date <= surgery[e.patient_id] for e in table.events)
    assert all(p.age >= 18 for p in table.patients)
    assert all((e.flag == "missing") == (e.value is None) for e in table.events)
    counts = [p.event_count for p in table.patients]
    assert 13 <= np.quantile(counts, 0.75) <= 15


def test_generator_fig1_calibration():
    table = generate_cohort(SynthConfig(n_patients=2077, seed=10, noise_sd=0.0, base_days="fig1"))
    summary = cohort_summary(table)
    assert abs(summary.fraction(1) - 0.21) < 0.005
    assert abs(summary.fraction(3) - 0.17) < 0.005
    assert abs(summary.fraction(5) - 0.12) < 0.005
    assert math.isclose(sum(FIG1_LOS_PMF), 1.0)


def test_temporal_bonus_rules():
    cfg = SynthConfig(temporal_signal="last_event", temporal_effect=4.0)
    evs = [make_event(flag="normal"), make_event(flag="high")]
    assert temporal_bonus(cfg, evs) == 4.0
    assert temporal_bonus(cfg, evs[::-1]) == 0.0
    assert temporal_bonus(cfg, []) == 0.0
    uniform = SynthConfig(temporal_signal="uniform", temporal_effect=4.0)
    assert temporal_bonus(uniform, evs) == 2.0
    assert set(ABNORMAL) == {"high", "low"}


@pytest.mark.parametrize("bad", [
    {"n_patients": 0}, {"noise_sd": -1.0}, {"temporal_signal": "sometimes"},
    {"planted_effects": {"gout": 1.0}}, {"base_days": "paper"}, {"preop_lab": "Unobtainium"},
])
def test_synth_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig.from_dict(bad)


def test_synth_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"n_patients": 3, "colour": "blue"})


@given(st.integers(1, 500), st.lists(st.floats(0.01, 1.0), min_size=1, max_size=8))
def test_quota_counts_exact_total(n, weights):
    probs = np.array(weights) / sum(weights)
    counts = quota_counts(n, probs)
    assert counts.sum() == n
    assert np.all(np.abs(counts - n * probs) < 1.0)


def test_summary_examples():
    single = CohortTable([make_patient("A", los=5)], [])
    assert cohort_summary(single).los_histogram == {5: 1}
    outlier = CohortTable([make_patient("A", los=5), make_patient("B", los=25)], [])
    s = cohort_summary(outlier)
    assert s.outliers == 1 and s.los_histogram == {5: 1}
    with pytest.raises(DomainError):
        cohort_summary(CohortTable([], []))
