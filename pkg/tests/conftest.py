import datetime as dt

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stayline.cohort import ClinicalEvent, CohortTable, PatientRecord

settings.register_profile("stayline", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("stayline")

SURGERY = dt.date(2020, 3, 10)


def make_patient(pid="P1", age=60, sex="male", los=3, codes=(), cpt="22612", race="White", zip_region=1,
                 surgery=SURGERY, n_events=0):
    return PatientRecord(pid, age, sex, race, zip_region, cpt, tuple(codes), surgery,
                         surgery + dt.timedelta(days=los), n_events)


def make_event(pid="P1", day=-1, lab="Sodium", value=140.0, flag="normal", surgery=SURGERY):
    return ClinicalEvent(pid, surgery + dt.timedelta(days=day), lab, value, flag, flag == "normal")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_table():
    """Three patients with 0, 5 and 16 events."""
    patients = [make_patient("A", los=1), make_patient("B", los=4, sex="female", codes=("M89.9",)),
                make_patient("C", los=7, age=80)]
    events = []
    for k in range(5):
        events.append(make_event("B", day=-20 + k, value=130.0 + k, flag="low" if k % 2 else "normal"))
    for k in range(16):
        events.append(make_event("C", day=-40 + 2 * k, lab="Potassium" if k % 3 else "Sodium",
                                 value=4.0 + 0.1 * k, flag="high" if k == 15 else "normal"))
    events.sort(key=lambda e: (e.patient_id, e.event_date))
    return CohortTable(patients, events)


# --- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        previous = _CRITERIA.get(n, (title, "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and previous == "PASS" else "FAIL"
        _CRITERIA[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")
