"""Patients, pre-surgery clinical events, CSV/JSONL ingestion and a synthetic
cohort generator with planted, recoverable LOS effects."""
from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import DomainError, Prng

log = logging.getLogger(__name__)

LOS_MAX = 20
FLAGS = ("high", "low", "normal", "missing")
ABNORMAL = ("high", "low")

PATIENT_COLUMNS = (
    "patient_id", "age", "sex", "race", "zip_region", "surgery_code",
    "diagnosis_codes", "surgery_date", "discharge_date",
)
EVENT_COLUMNS = ("patient_id", "event_date", "lab_type", "value", "flag", "reference_normal")

# Eligible spine-surgery CPT codes (duplicates in the source list removed).
CPT_CODES = (
    "22840", "22842", "22876", "22844", "22848", "22845", "22590", "22595",
    "22600", "22614", "22610", "22612", "22630", "22633", "22846", "22847",
    "22853", "22854", "22859", "22551", "22552", "22554", "22585", "63081",
    "63082", "22856", "63050", "63001", "63015", "63003", "63016", "63005",
    "63017", "63045", "63046", "63047", "63020", "63030", "22558", "2280",
)

CPT_LABELS = {
    "22840": "Spinal instrumentation", "22842": "Spinal instrumentation",
    "22844": "Spinal instrumentation", "22845": "Anterior instrumentation",
    "22846": "Anterior instrumentation", "22847": "Anterior instrumentation",
    "22848": "Pelvic fixation", "22876": "Spinal instrumentation",
    "22590": "Cervical fusion", "22595": "Cervical fusion", "22600": "Cervical fusion",
    "22610": "Thoracic fusion", "22612": "Lumbar fusion", "22614": "Additional spinal fusion",
    "22630": "Lumbar interbody fusion", "22633": "Lumbar spinal fusion",
    "22551": "Anterior cervical fusion", "22552": "Anterior cervical fusion",
    "22554": "Anterior cervical fusion", "22558": "Anterior lumbar fusion",
    "22585": "Additional anterior fusion", "22853": "Interbody device",
    "22854": "Interbody device", "22859": "Interbody device",
    "22856": "Cervical disc arthroplasty", "63001": "Cervical laminectomy",
    "63003": "Thoracic laminectomy", "63005": "Lumbar laminectomy",
    "63015": "Cervical laminectomy", "63016": "Thoracic laminectomy",
    "63017": "Lumbar laminectomy", "63020": "Cervical decompression",
    "63030": "Lumbar decompression", "63045": "Cervical decompression",
    "63046": "Thoracic decompression", "63047": "Lumbar decompression",
    "63050": "Cervical laminoplasty", "63081": "Cervical corpectomy",
    "63082": "Additional corpectomy", "2280": "Spinal procedure, other",
}

# ICD-10 comorbidities with the prevalence used by the generator.
ICD_CODES = {
    "M89.9": ("Bone disorder", 0.10),
    "N18.3": ("Chronic kidney disease", 0.15),
    "H43.9": ("Vitreous disorder", 0.05),
    "L02.91": ("Skin abscess", 0.04),
    "E66.9": ("Obesity", 0.25),
    "C79.51": ("Cancer metastasis", 0.04),
    "R53.83": ("Fatigue", 0.12),
    "C90.00": ("Multiple myeloma", 0.02),
    "G93.9": ("Brain disorder", 0.03),
    "E11.9": ("Type 2 diabetes", 0.20),
    "I10": ("Hypertension", 0.40),
    "M48.06": ("Lumbar spinal stenosis", 0.35),
    "M51.26": ("Lumbar disc displacement", 0.25),
    "Z68.41": ("BMI 40 or more", 0.08),
}

# Named features usable as planted effects -> codes that activate them.
FEATURE_CODES = {
    "bone_disorder": {"M89.9"},
    "chronic_kidney_disease": {"N18.3"},
    "vitreous_disorder": {"H43.9"},
    "skin_abscess": {"L02.91"},
    "obesity": {"E66.9"},
    "cancer_metastasis": {"C79.51"},
    "fatigue": {"R53.83"},
    "multiple_myeloma": {"C90.00"},
    "brain_disorder": {"G93.9"},
    "diabetes": {"E11.9"},
    "hypertension": {"I10"},
    "lumbar_fusion": {"22612", "22630", "22633", "22558"},
    "lumbar_decompression": {"63030", "63047", "63005", "63017"},
    "cervical_fusion": {"22551", "22552", "22554", "22590", "22595", "22600"},
    "spinal_instrumentation": {"22840", "22842", "22844", "22876"},
}

RACES = {
    "White": 0.727, "Asian": 0.108, "Other Race": 0.090,
    "Black or African American": 0.049, "Unknown": 0.018,
    "American Indian or Alaska Native": 0.004,
    "Native Hawaiian or Other Pacific Islander": 0.003,
}

# (low, high) inclusive age bands and their share of the cohort.
AGE_BANDS = ((18, 39, 0.085), (40, 60, 0.250), (61, 75, 0.413), (76, 81, 0.161), (82, 90, 0.091))

# LOS distribution used when base_days == "fig1": peaks at days 1, 3 and 5.
FIG1_LOS_PMF = (
    0.055, 0.21, 0.12, 0.17, 0.09, 0.12, 0.05, 0.04, 0.03, 0.025, 0.02,
    0.015, 0.012, 0.01, 0.008, 0.006, 0.005, 0.004, 0.004, 0.003, 0.003,
)

# name, reference low, reference high
LAB_TYPES = (
    ("Sodium", 135, 145), ("Potassium", 3.5, 5.1), ("Chloride", 98, 107),
    ("CO2", 22, 29), ("BUN", 7, 20), ("Creatinine", 0.6, 1.3), ("Glucose", 70, 99),
    ("Calcium", 8.6, 10.3), ("Hemoglobin", 12, 17), ("Hematocrit", 36, 50),
    ("WBC", 4, 11), ("Platelets", 150, 400), ("RBC", 4.2, 5.9), ("MCV", 80, 100),
    ("MCH", 27, 33), ("MCHC", 32, 36), ("RDW", 11.5, 14.5), ("INR", 0.8, 1.2),
    ("PT", 11, 13.5), ("PTT", 25, 35), ("Albumin", 3.5, 5.0), ("Total Protein", 6, 8.3),
    ("ALT", 7, 56), ("AST", 10, 40), ("Alk Phos", 44, 147), ("Bilirubin", 0.1, 1.2),
    ("Magnesium", 1.7, 2.2), ("Phosphorus", 2.5, 4.5), ("HbA1c", 4, 5.6), ("eGFR", 60, 120),
    ("Anion Gap", 3, 11), ("Lymphocytes", 20, 40), ("Neutrophils", 40, 60),
    ("Monocytes", 2, 8), ("Eosinophils", 1, 4), ("Basophils", 0.5, 1),
    ("MPV", 7.5, 11.5), ("Type and Screen", 0, 1), ("CRP", 0, 10), ("ESR", 0, 20),
    ("Ferritin", 24, 336), ("Iron", 60, 170), ("TSH", 0.4, 4), ("Vitamin D", 30, 100),
    ("Lactate", 0.5, 2.2), ("Troponin", 0, 0.04), ("BNP", 0, 100), ("Urine pH", 4.5, 8),
    ("Urine SG", 1.005, 1.03), ("Lipase", 10, 140), ("Amylase", 30, 110),
    ("Cholesterol", 125, 200), ("Triglycerides", 0, 150), ("LDL", 0, 100),
    ("HDL", 40, 60), ("Uric Acid", 3.4, 7), ("Prealbumin", 15, 36), ("Cortisol", 5, 25),
    ("Vitamin B1", 70, 180),
)
ALWAYS_MISSING_LAB = "Vitamin B1"
LAB_INDEX = {name: i for i, (name, _, _) in enumerate(LAB_TYPES)}

EPOCH = dt.date(2018, 1, 1)


class SchemaError(ValueError):
    pass


class RowError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: int
    sex: str
    race: str
    zip_region: int
    surgery_code: str
    diagnosis_codes: tuple[str, ...]
    surgery_date: dt.date
    discharge_date: dt.date
    event_count: int = 0

    @property
    def los_days(self) -> int:
        return (self.discharge_date - self.surgery_date).days

    def codes(self) -> set[str]:
        return set(self.diagnosis_codes) | {self.surgery_code}


@dataclass(frozen=True)
class ClinicalEvent:
    patient_id: str
    event_date: dt.date
    lab_type: str
    value: float | None
    flag: str
    reference_normal: bool


@dataclass
class CohortTable:
    patients: list[PatientRecord]
    events: list[ClinicalEvent]
    dropped_events: int = 0

    @property
    def los_days(self) -> dict[str, int]:
        return {p.patient_id: p.los_days for p in self.patients}

    def events_by_patient(self) -> dict[str, list[ClinicalEvent]]:
        out: dict[str, list[ClinicalEvent]] = {p.patient_id: [] for p in self.patients}
        for e in self.events:
            out[e.patient_id].append(e)
        return out

    def subset(self, patient_ids: Iterable[str]) -> "CohortTable":
        keep = set(patient_ids)
        return CohortTable(
            [p for p in self.patients if p.patient_id in keep],
            [e for e in self.events if e.patient_id in keep],
        )


@dataclass
class SynthConfig:
    n_patients: int = 2077
    seed: int = 0
    planted_effects: dict[str, float] = field(default_factory=dict)
    interaction_effects: dict[str, float] = field(default_factory=dict)
    temporal_signal: str = "none"
    temporal_effect: float = 4.0
    noise_sd: float = 1.0
    base_days: float | str = 3.0
    event_mean: float = 11.0
    event_sd: float = 4.5
    event_max: int = 20
    missing_rate: float = 0.05
    preop_lab: str | None = None

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if self.temporal_signal not in ("none", "last_event", "uniform"):
            raise ValueError(f"unknown temporal_signal {self.temporal_signal!r}")
        if self.preop_lab is not None and self.preop_lab not in LAB_INDEX:
            raise ValueError(f"unknown lab {self.preop_lab!r}")
        if isinstance(self.base_days, str) and self.base_days != "fig1":
            raise ValueError("base_days must be a number or 'fig1'")
        for name in list(self.planted_effects) + [
            part for key in self.interaction_effects for part in key.split("*")
        ]:
            if name not in FEATURE_CODES and name not in ("sex_female", "age_over_75"):
                raise ValueError(f"unknown planted feature {name!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg


# --- ingestion ---------------------------------------------------------------


def _parse_date(text: str, path, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise RowError(path, line, f"unparseable date {text!r}") from None


def _check_columns(fieldnames, required, path):
    missing = [c for c in required if c not in (fieldnames or ())]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")


def _parse_bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "t")


def _parse_patient(row: dict, path, line: int) -> PatientRecord:
    try:
        codes = tuple(sorted(c for c in row["diagnosis_codes"].split("|") if c))
        rec = PatientRecord(
            patient_id=row["patient_id"],
            age=int(row["age"]),
            sex=row["sex"].strip().lower(),
            race=row["race"],
            zip_region=int(row["zip_region"]),
            surgery_code=row["surgery_code"].strip(),
            diagnosis_codes=codes,
            surgery_date=_parse_date(row["surgery_date"], path, line),
            discharge_date=_parse_date(row["discharge_date"], path, line),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, RowError):
            raise
        raise RowError(path, line, str(exc)) from None
    if rec.sex not in ("male", "female"):
        raise RowError(path, line, f"sex must be male/female, got {rec.sex!r}")
    if rec.discharge_date < rec.surgery_date:
        raise RowError(path, line, "discharge_date precedes surgery_date")
    if rec.age < 18:
        raise RowError(path, line, f"age {rec.age} below inclusion threshold 18")
    return rec


def _parse_event(row: dict, path, line: int) -> ClinicalEvent:
    raw = (row.get("value") or "").strip()
    try:
        value = float(raw) if raw else None
    except ValueError:
        raise RowError(path, line, f"bad value {raw!r}") from None
    flag = (row.get("flag") or "").strip().lower() or ("missing" if value is None else "normal")
    if flag not in FLAGS:
        raise RowError(path, line, f"unknown flag {flag!r}")
    if (flag == "missing") != (value is None):
        raise RowError(path, line, "flag=missing must coincide with an empty value")
    return ClinicalEvent(
        patient_id=row["patient_id"],
        event_date=_parse_date(row["event_date"], path, line),
        lab_type=row["lab_type"],
        value=value,
        flag=flag,
        reference_normal=_parse_bool(row.get("reference_normal") or ""),
    )


def _assemble(patients: list[PatientRecord], events: list[ClinicalEvent]) -> CohortTable:
    # Repeat surgeries of one patient become independent admissions keyed by date.
    counts: dict[str, int] = {}
    for p in patients:
        counts[p.patient_id] = counts.get(p.patient_id, 0) + 1
    admissions: dict[str, list[PatientRecord]] = {}
    renamed = []
    for p in patients:
        if counts[p.patient_id] > 1:
            key = f"{p.patient_id}@{p.surgery_date.isoformat()}"
            admissions.setdefault(p.patient_id, []).append(p)
            p = _replace(p, patient_id=key)
        renamed.append(p)
    for lst in admissions.values():
        lst.sort(key=lambda r: r.surgery_date)

    surgery = {p.patient_id: p.surgery_date for p in renamed}
    kept: list[ClinicalEvent] = []
    dropped = 0
    for e in events:
        pid = e.patient_id
        if pid in admissions:
            owner = next((a for a in admissions[pid] if e.event_date <= a.surgery_date), None)
            if owner is None:
                dropped += 1
                continue
            pid = f"{pid}@{owner.surgery_date.isoformat()}"
            e = _replace(e, patient_id=pid)
        if pid not in surgery:
            dropped += 1
            continue
        if e.event_date > surgery[pid]:
            dropped += 1
            continue
        kept.append(e)
    kept.sort(key=lambda e: (e.patient_id, e.event_date))
    n_events: dict[str, int] = {}
    for e in kept:
        n_events[e.patient_id] = n_events.get(e.patient_id, 0) + 1
    final = sorted(
        (_replace(p, event_count=n_events.get(p.patient_id, 0)) for p in renamed),
        key=lambda p: p.patient_id,
    )
    if dropped:
        log.info("dropped %d event(s) dated after surgery or without an admission", dropped)
    return CohortTable(final, kept, dropped)


def _replace(obj, **changes):
    d = {f: getattr(obj, f) for f in obj.__dataclass_fields__}
    d.update(changes)
    return type(obj)(**d)


def _read_csv(path) -> tuple[list[str], list[tuple[int, dict]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = [(reader.line_num, row) for row in reader]
        return list(reader.fieldnames or ()), rows


def load_cohort(patients_path, events_path) -> CohortTable:
    """Read ``patients.csv`` and ``events.csv``.

    Events dated after their admission's surgery are dropped; the number
    dropped is kept on ``CohortTable.dropped_events``.
    """
    fields, rows = _read_csv(patients_path)
    _check_columns(fields, PATIENT_COLUMNS, patients_path)
    patients = [_parse_patient(r, patients_path, ln) for ln, r in rows]
    fields, rows = _read_csv(events_path)
    _check_columns(fields, EVENT_COLUMNS, events_path)
    events = [_parse_event(r, events_path, ln) for ln, r in rows]
    return _assemble(patients, events)


def load_cohort_jsonl(path) -> CohortTable:
    patients, events = [], []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            evs = obj.pop("events", [])
            _check_columns(list(obj), PATIENT_COLUMNS, path)
            if isinstance(obj["diagnosis_codes"], list):
                obj["diagnosis_codes"] = "|".join(obj["diagnosis_codes"])
            row = {k: "" if v is None else str(v) for k, v in obj.items()}
            patients.append(_parse_patient(row, path, ln))
            for ev in evs:
                ev = {"patient_id": obj["patient_id"], **ev}
                _check_columns(list(ev), EVENT_COLUMNS, path)
                ev_row = {k: "" if v is None else str(v) for k, v in ev.items()}
                events.append(_parse_event(ev_row, path, ln))
    return _assemble(patients, events)


def _fmt_value(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def patients_csv(table: CohortTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PATIENT_COLUMNS)
    for p in table.patients:
        w.writerow([
            p.patient_id, p.age, p.sex, p.race, p.zip_region, p.surgery_code,
            "|".join(p.diagnosis_codes), p.surgery_date.isoformat(), p.discharge_date.isoformat(),
        ])
    return buf.getvalue()


def events_csv(table: CohortTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for e in table.events:
        w.writerow([
            e.patient_id, e.event_date.isoformat(), e.lab_type, _fmt_value(e.value),
            e.flag, "true" if e.reference_normal else "false",
        ])
    return buf.getvalue()


def write_cohort(table: CohortTable, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pp, ep = out / "patients.csv", out / "events.csv"
    pp.write_text(patients_csv(table), encoding="utf-8")
    ep.write_text(events_csv(table), encoding="utf-8")
    return pp, ep


def write_cohort_jsonl(table: CohortTable, path) -> Path:
    by_patient = table.events_by_patient()
    lines = []
    for p in table.patients:
        obj = {
            "patient_id": p.patient_id, "age": p.age, "sex": p.sex, "race": p.race,
            "zip_region": p.zip_region, "surgery_code": p.surgery_code,
            "diagnosis_codes": list(p.diagnosis_codes),
            "surgery_date": p.surgery_date.isoformat(),
            "discharge_date": p.discharge_date.isoformat(),
            "events": [
                {
                    "event_date": e.event_date.isoformat(), "lab_type": e.lab_type,
                    "value": e.value, "flag": e.flag, "reference_normal": e.reference_normal,
                }
                for e in by_patient[p.patient_id]
            ],
        }
        lines.append(json.dumps(obj, sort_keys=True))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


# --- synthetic generator -----------------------------------------------------


def quota_counts(n: int, probs) -> np.ndarray:
    """Largest-remainder allocation of n items to categories with given shares."""
    p = np.asarray(probs, dtype=float)
    p = p / p.sum()
    raw = n * p
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _quota_draw(rng: np.random.Generator, n: int, probs) -> np.ndarray:
    counts = quota_counts(n, probs)
    labels = np.repeat(np.arange(len(counts)), counts)
    rng.shuffle(labels)
    return labels


def feature_active(name: str, patient: PatientRecord) -> bool:
    if name == "sex_female":
        return patient.sex == "female"
    if name == "age_over_75":
        return patient.age > 75
    return bool(FEATURE_CODES[name] & patient.codes())


def temporal_bonus(cfg: SynthConfig, events: list[ClinicalEvent]) -> float:
    """Days added by the temporal signal, given a patient's date-sorted events."""
    if cfg.temporal_signal == "none" or not events:
        return 0.0
    if cfg.temporal_signal == "last_event":
        return cfg.temporal_effect if events[-1].flag in ABNORMAL else 0.0
    return cfg.temporal_effect * sum(e.flag in ABNORMAL for e in events) / len(events)


def planted_mean(cfg: SynthConfig, patient: PatientRecord, events, base: float) -> float:
    """Noise-free LOS before rounding/clipping."""
    total = base
    for name, days in cfg.planted_effects.items():
        if feature_active(name, patient):
            total += days
    for key, days in cfg.interaction_effects.items():
        if all(feature_active(part, patient) for part in key.split("*")):
            total += days
    return total + temporal_bonus(cfg, events)


def generate_cohort(cfg: SynthConfig) -> CohortTable:
    """Deterministic synthetic cohort; a pure function of ``cfg``."""
    cfg.validate()
    root = Prng(cfg.seed)
    n = cfg.n_patients
    demo = root.split("demographics").numpy()

    sex = np.where(_quota_draw(demo, n, [0.6, 0.4]) == 0, "male", "female")
    race_names = list(RACES)
    races = _quota_draw(demo, n, list(RACES.values()))
    bands = _quota_draw(demo, n, [b[2] for b in AGE_BANDS])
    ages = np.array([demo.integers(AGE_BANDS[b][0], AGE_BANDS[b][1] + 1) for b in bands])
    zips = demo.integers(1, 16, size=n)

    codes_rng = root.split("codes").numpy()
    cpt = codes_rng.integers(0, len(CPT_CODES), size=n)
    icd_names = list(ICD_CODES)
    icd_prev = np.array([ICD_CODES[c][1] for c in icd_names])
    icd_on = codes_rng.random((n, len(icd_names))) < icd_prev
    surg_offset = codes_rng.integers(0, 6 * 365, size=n)

    ev_rng = root.split("events").numpy()
    # 75th percentile of mean + 0.674 * sd = 14 events with the defaults
    counts = np.clip(np.rint(ev_rng.normal(cfg.event_mean, cfg.event_sd, size=n)), 0, cfg.event_max)
    lab_w = 1.0 / np.arange(1, len(LAB_TYPES) + 1) ** 0.8
    lab_w /= lab_w.sum()

    if cfg.base_days == "fig1":
        base = _quota_draw(root.split("base").numpy(), n, FIG1_LOS_PMF).astype(float)
    else:
        base = np.full(n, float(cfg.base_days))
    noise = root.split("noise").numpy().normal(0.0, 1.0, size=n) * cfg.noise_sd

    width = len(str(n - 1))
    patients: list[PatientRecord] = []
    events: list[ClinicalEvent] = []
    for i in range(n):
        pid = f"P{i:0{width}d}"
        sdate = EPOCH + dt.timedelta(days=int(surg_offset[i]))
        n_ev = int(counts[i])
        # history spread over prior months; the final event is pre-admission testing
        rel = np.sort(-np.floor(ev_rng.exponential(30.0, size=n_ev)).astype(int) - 1)
        if n_ev:
            rel[-1] = -int(ev_rng.integers(0, 2))
        labs = ev_rng.choice(len(LAB_TYPES), size=n_ev, p=lab_w)
        if n_ev and cfg.preop_lab is not None:
            labs[-1] = LAB_INDEX[cfg.preop_lab]
        z = ev_rng.normal(0.0, 1.0, size=n_ev)
        miss = ev_rng.random(n_ev) < cfg.missing_rate
        pevents = []
        for k in range(n_ev):
            name, lo, hi = LAB_TYPES[labs[k]]
            if miss[k] or name == ALWAYS_MISSING_LAB:
                value, flag = None, "missing"
            else:
                # sd of half the reference width: about 16% high, 16% low
                value = round((lo + hi) / 2 + z[k] * (hi - lo) / 2, 4)
                flag = "high" if value > hi else "low" if value < lo else "normal"
            pevents.append(ClinicalEvent(
                pid, sdate + dt.timedelta(days=int(rel[k])), name, value, flag, flag == "normal",
            ))
        rec = PatientRecord(
            patient_id=pid,
            age=int(ages[i]),
            sex=str(sex[i]),
            race=race_names[races[i]],
            zip_region=int(zips[i]),
            surgery_code=CPT_CODES[cpt[i]],
            diagnosis_codes=tuple(sorted(c for c, on in zip(icd_names, icd_on[i]) if on)),
            surgery_date=sdate,
            discharge_date=sdate,
            event_count=n_ev,
        )
        mean = planted_mean(cfg, rec, pevents, base[i])
        los = int(min(max(math.floor(mean + noise[i] + 0.5), 0), LOS_MAX))
        patients.append(_replace(rec, discharge_date=sdate + dt.timedelta(days=los)))
        events.extend(pevents)
    events.sort(key=lambda e: (e.patient_id, e.event_date))
    return CohortTable(patients, events)


# --- summaries ---------------------------------------------------------------


def age_band(age: int) -> str:
    for lo, hi, _ in AGE_BANDS:
        if lo <= age <= hi:
            return f"{lo}-{hi}"
    return f"{AGE_BANDS[-1][1] + 1}+" if age > AGE_BANDS[-1][1] else f"<{AGE_BANDS[0][0]}"


@dataclass
class CohortSummary:
    n: int
    los_histogram: dict[int, int]
    outliers: int
    sex: dict[str, int]
    race: dict[str, int]
    age_bands: dict[str, int]

    def fraction(self, day: int) -> float:
        return self.los_histogram.get(day, 0) / self.n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["los_histogram"] = {str(k): v for k, v in self.los_histogram.items()}
        return d


def cohort_summary(table: CohortTable) -> CohortSummary:
    if not table.patients:
        raise DomainError("cohort_summary of an empty table")
    hist: dict[int, int] = {}
    outliers = 0
    sex: dict[str, int] = {}
    race: dict[str, int] = {}
    bands: dict[str, int] = {}
    for p in table.patients:
        los = p.los_days
        if los > LOS_MAX:
            outliers += 1
        else:
            hist[los] = hist.get(los, 0) + 1
        sex[p.sex] = sex.get(p.sex, 0) + 1
        race[p.race] = race.get(p.race, 0) + 1
        b = age_band(p.age)
        bands[b] = bands.get(b, 0) + 1
    return CohortSummary(
        len(table.patients), dict(sorted(hist.items())), outliers,
        dict(sorted(sex.items())), dict(sorted(race.items())), dict(sorted(bands.items())),
    )
