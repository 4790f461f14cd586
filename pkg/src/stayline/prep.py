"""Preprocessing: imputation, encoding, scaling, windowing, splits, rebalancing.

Everything that is *fitted* here (imputation rules, selected labs, scalers,
categorical levels) must be fitted on training patients only; the ``apply``
side (``build_windows``, ``encode_static``) never touches the statistics.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .cohort import (
    CPT_LABELS, ICD_CODES, LOS_MAX, ClinicalEvent, CohortTable, PatientRecord,
    quota_counts,
)
from .numerics import Prng, quantile

log = logging.getLogger(__name__)

SEQ_LEN = 14
LAB_LEVELS = ("high", "low", "normal", "missing")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ImputeRule:
    rule: str  # mean | median | dropped
    value: float | None = None


def fit_impute(events_by_lab: dict[str, Sequence[ClinicalEvent]]) -> dict[str, ImputeRule]:
    """Per lab: mean if most observed results sit in the normal reference range,
    median otherwise; labs with no observed value at all are dropped."""
    rules = {}
    for lab in sorted(events_by_lab):
        observed = [e for e in events_by_lab[lab] if e.value is not None]
        if not observed:
            rules[lab] = ImputeRule("dropped")
            continue
        vals = np.array([e.value for e in observed], dtype=float)
        n_normal = sum(e.reference_normal for e in observed)
        if n_normal > len(observed) / 2:
            rules[lab] = ImputeRule("mean", float(vals.mean()))
        else:
            rules[lab] = ImputeRule("median", float(quantile(vals, 0.5)))
    return rules


def group_by_lab(events: Iterable[ClinicalEvent]) -> dict[str, list[ClinicalEvent]]:
    out: dict[str, list[ClinicalEvent]] = {}
    for e in events:
        out.setdefault(e.lab_type, []).append(e)
    return out


def robust_scaler(values) -> tuple[float, float]:
    """(median, IQR) with the degenerate IQR=0 mapped to 1."""
    vals = [float(v) for v in values]
    if not vals:
        return 0.0, 1.0
    med = quantile(vals, 0.5)
    iqr = quantile(vals, 0.75) - quantile(vals, 0.25)
    return med, (iqr if iqr > 0 else 1.0)


@dataclass
class FeatureSpec:
    names: list[str]
    kinds: list[str]
    scalers: dict[str, tuple[float, float]]
    impute: dict[str, ImputeRule]
    labs: list[str]
    races: list[str]
    zips: list[int]
    icd: list[str]
    cpt: list[str]
    _index: dict[str, int] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("feature names must be unique")
        self._index = {n: i for i, n in enumerate(self.names)}

    @property
    def dim(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def scale(self, name: str, value: float) -> float:
        med, iqr = self.scalers[name]
        return (value - med) / iqr

    def to_dict(self) -> dict:
        return {
            "names": self.names,
            "kinds": self.kinds,
            "scalers": {k: list(v) for k, v in sorted(self.scalers.items())},
            "impute": {k: {"rule": r.rule, "value": r.value} for k, r in sorted(self.impute.items())},
            "labs": self.labs,
            "races": self.races,
            "zips": self.zips,
            "icd": self.icd,
            "cpt": self.cpt,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(
            names=list(d["names"]),
            kinds=list(d["kinds"]),
            scalers={k: (float(v[0]), float(v[1])) for k, v in d["scalers"].items()},
            impute={k: ImputeRule(v["rule"], v["value"]) for k, v in d["impute"].items()},
            labs=list(d["labs"]),
            races=list(d["races"]),
            zips=[int(z) for z in d["zips"]],
            icd=list(d["icd"]),
            cpt=list(d["cpt"]),
        )

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def fit_feature_spec(table: CohortTable, top_k_labs: int = 50) -> FeatureSpec:
    if top_k_labs < 1:
        raise ConfigError("top_k_labs must be >= 1")
    if not table.patients:
        raise ConfigError("cannot fit a feature spec on an empty table")
    impute = fit_impute(group_by_lab(table.events))
    freq = Counter(e.lab_type for e in table.events if impute[e.lab_type].rule != "dropped")
    labs = sorted(freq, key=lambda lab: (-freq[lab], lab))[:top_k_labs]

    races = sorted({p.race for p in table.patients})
    zips = sorted({p.zip_region for p in table.patients})
    icd = sorted({c for p in table.patients for c in p.diagnosis_codes})
    cpt = sorted({p.surgery_code for p in table.patients})

    names, kinds = ["age", "sex"], ["continuous", "binary"]
    names += [f"race={r}" for r in races]
    names += [f"zip={z}" for z in zips]
    kinds += ["one_hot_level"] * (len(races) + len(zips))
    names += [f"icd:{c}" for c in icd] + [f"cpt:{c}" for c in cpt]
    kinds += ["binary"] * (len(icd) + len(cpt))
    names.append("rel_day")
    kinds.append("continuous")
    names += [f"event_flag={lv}" for lv in LAB_LEVELS]
    kinds += ["one_hot_level"] * len(LAB_LEVELS)
    for lab in labs:
        names += [f"lab:{lab}={lv}" for lv in LAB_LEVELS]
        kinds += ["one_hot_level"] * len(LAB_LEVELS)
        names.append(f"lab:{lab}:value")
        kinds.append("continuous")

    surgery = {p.patient_id: p.surgery_date for p in table.patients}
    scalers = {
        "age": robust_scaler(p.age for p in table.patients),
        "rel_day": robust_scaler((e.event_date - surgery[e.patient_id]).days for e in table.events),
    }
    by_lab = group_by_lab(table.events)
    for lab in labs:
        scalers[f"lab:{lab}:value"] = robust_scaler(e.value for e in by_lab[lab] if e.value is not None)
    return FeatureSpec(names, kinds, scalers, impute, labs, races, zips, icd, cpt)


def feature_label(name: str) -> str:
    """Human-readable label for a feature column (codes mapped to conditions)."""
    if name.startswith("icd:"):
        code = name[4:]
        return f"{ICD_CODES[code][0]} ({code})" if code in ICD_CODES else f"ICD-10 {code}"
    if name.startswith("cpt:"):
        code = name[4:]
        return f"{CPT_LABELS[code]} ({code})" if code in CPT_LABELS else f"CPT {code}"
    if name.startswith("lab:"):
        lab, _, rest = name[4:].rpartition(":")
        if rest == "value" and lab:
            return f"{lab} value"
        lab, _, level = name[4:].rpartition("=")
        return f"{lab} {level}"
    if name.startswith("event_flag="):
        return f"Any lab {name[11:]}"
    if name.startswith("zip="):
        return f"Zip region {name[4:]}"
    if name.startswith("race="):
        return f"Race: {name[5:]}"
    return {"age": "Age", "sex": "Sex (female)", "rel_day": "Days before surgery"}.get(name, name)


# --- encoding ----------------------------------------------------------------


def encode_static(spec: FeatureSpec, p: PatientRecord) -> np.ndarray:
    v = np.zeros(spec.dim)
    v[spec.index("age")] = spec.scale("age", p.age)
    v[spec.index("sex")] = 1.0 if p.sex == "female" else 0.0
    for name in (f"race={p.race}", f"zip={p.zip_region}", f"cpt:{p.surgery_code}"):
        if name in spec._index:
            v[spec.index(name)] = 1.0
    for c in p.diagnosis_codes:
        if f"icd:{c}" in spec._index:
            v[spec.index(f"icd:{c}")] = 1.0
    return v


def decode_static(spec: FeatureSpec, v: np.ndarray) -> dict:
    """Recover categorical levels from an encoded row (inverse of ``encode_static``)."""
    def active(prefix):
        return [n[len(prefix):] for n in spec.names if n.startswith(prefix) and v[spec.index(n)] == 1.0]

    races = active("race=")
    zips = active("zip=")
    cpts = active("cpt:")
    return {
        "sex": "female" if v[spec.index("sex")] == 1.0 else "male",
        "race": races[0] if races else None,
        "zip_region": int(zips[0]) if zips else None,
        "surgery_code": cpts[0] if cpts else None,
        "diagnosis_codes": tuple(sorted(active("icd:"))),
        "age": v[spec.index("age")] * spec.scalers["age"][1] + spec.scalers["age"][0],
    }


def _lab_value(spec: FeatureSpec, e: ClinicalEvent) -> float:
    rule = spec.impute.get(e.lab_type)
    raw = e.value if e.value is not None else (rule.value if rule else None)
    if raw is None:
        return 0.0
    return spec.scale(f"lab:{e.lab_type}:value", raw)


def encode_event(spec: FeatureSpec, row: np.ndarray, e: ClinicalEvent) -> None:
    """Write one event's columns into ``row`` in place.

    The lab-agnostic ``event_flag`` one-hot is always set; per-lab columns only
    for selected labs.
    """
    row[spec.index(f"event_flag={e.flag}")] = 1.0
    if f"lab:{e.lab_type}:value" not in spec._index:
        return
    for lv in LAB_LEVELS:
        row[spec.index(f"lab:{e.lab_type}={lv}")] = 0.0
    row[spec.index(f"lab:{e.lab_type}={e.flag}")] = 1.0
    row[spec.index(f"lab:{e.lab_type}:value")] = _lab_value(spec, e)


def event_steps(spec: FeatureSpec, p: PatientRecord, events: Sequence[ClinicalEvent]) -> tuple[np.ndarray, np.ndarray]:
    """Step matrix (one row per event, chronological) and relative days.

    A patient without events gets one demographics-only step at day 0.
    """
    static = encode_static(spec, p)
    n = max(1, len(events))
    steps = np.tile(static, (n, 1))
    rel = np.zeros(n, dtype=int)
    ri = spec.index("rel_day")
    for k, e in enumerate(events):
        rel[k] = (e.event_date - p.surgery_date).days
        encode_event(spec, steps[k], e)
    steps[:, ri] = [spec.scale("rel_day", r) for r in rel]
    return steps, rel


@dataclass
class SequenceWindow:
    x: np.ndarray
    mask: np.ndarray
    rel_day: np.ndarray
    y: float
    patient_id: str
    window_index: int

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def patient_windows(steps: np.ndarray, rel: np.ndarray, y: float, pid: str, seq_len: int = SEQ_LEN) -> list[SequenceWindow]:
    n = steps.shape[0]
    if n >= seq_len:
        mask = np.ones(seq_len, dtype=bool)
        return [
            SequenceWindow(steps[t:t + seq_len], mask, rel[t:t + seq_len], y, pid, t)
            for t in range(n - seq_len + 1)
        ]
    x = np.zeros((seq_len, steps.shape[1]))
    x[seq_len - n:] = steps
    r = np.zeros(seq_len, dtype=int)
    r[seq_len - n:] = rel
    mask = np.zeros(seq_len, dtype=bool)
    mask[seq_len - n:] = True
    return [SequenceWindow(x, mask, r, y, pid, 0)]


def build_windows(table: CohortTable, spec: FeatureSpec, seq_len: int = SEQ_LEN) -> list[SequenceWindow]:
    """Stride-1 windows of ``seq_len`` events per patient; shorter histories are
    pre-padded so the latest pre-surgery event always sits at the last index."""
    by_patient = table.events_by_patient()
    out = []
    for p in sorted(table.patients, key=lambda p: p.patient_id):
        steps, rel = event_steps(spec, p, by_patient[p.patient_id])
        out.extend(patient_windows(steps, rel, float(p.los_days), p.patient_id, seq_len))
    return out


def final_windows(windows: Sequence[SequenceWindow]) -> list[SequenceWindow]:
    """The latest window of each patient, in patient order."""
    last: dict[str, SequenceWindow] = {}
    for w in windows:
        if w.patient_id not in last or w.window_index > last[w.patient_id].window_index:
            last[w.patient_id] = w
    return [last[k] for k in sorted(last)]


def windows_csv(windows: Sequence[SequenceWindow], spec: FeatureSpec) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "window_index", "step", "mask", "rel_day", *spec.names, "y"])
    for win in windows:
        for t in range(win.x.shape[0]):
            w.writerow([
                win.patient_id, win.window_index, t, int(win.mask[t]), int(win.rel_day[t]),
                *(repr(float(v)) for v in win.x[t]), repr(float(win.y)),
            ])
    return buf.getvalue()


def read_windows_csv(text: str, n_features: int) -> list[SequenceWindow]:
    reader = csv.reader(io.StringIO(text))
    next(reader)
    groups: dict[tuple[str, int], list[list[str]]] = {}
    for row in reader:
        groups.setdefault((row[0], int(row[1])), []).append(row)
    out = []
    for (pid, idx), rows in groups.items():
        rows.sort(key=lambda r: int(r[2]))
        x = np.array([[float(v) for v in r[5:5 + n_features]] for r in rows])
        out.append(SequenceWindow(
            x, np.array([r[3] == "1" for r in rows]), np.array([int(r[4]) for r in rows]),
            float(rows[0][-1]), pid, idx,
        ))
    return out


# --- splits and rebalancing --------------------------------------------------


def los_bin(y: float) -> int:
    return int(min(max(round(y), 0), LOS_MAX))


@dataclass
class SplitPlan:
    mode: str  # holdout | kfold
    assignment: dict[str, str | int]
    strata: dict[str, int]
    seed: int
    ratios: tuple[float, ...] = ()

    def members(self, key) -> list[str]:
        return sorted(p for p, a in self.assignment.items() if a == key)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "seed": self.seed, "ratios": list(self.ratios),
            "assignment": dict(sorted(self.assignment.items())),
            "strata": dict(sorted(self.strata.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(d["mode"], dict(d["assignment"]), {k: int(v) for k, v in d["strata"].items()},
                   int(d["seed"]), tuple(d.get("ratios", ())))


def _merge_small_bins(strata: dict[str, int], k: int) -> dict[str, int]:
    strata = dict(strata)
    while True:
        counts = Counter(strata.values())
        small = sorted(b for b, c in counts.items() if c < k)
        if not small or len(counts) == 1:
            return strata
        b = small[0]
        others = sorted(o for o in counts if o != b)
        higher = [o for o in others if o > b]
        target = higher[0] if higher else others[-1]
        warnings.warn(f"LOS bin {b} has {counts[b]} patient(s) < {k} folds; merged into bin {target}")
        strata = {p: (target if s == b else s) for p, s in strata.items()}


def _max_flow(cap: np.ndarray, src: int, sink: int) -> np.ndarray:
    """Edmonds-Karp on a dense integer capacity matrix; returns the flow matrix."""
    n = len(cap)
    flow = np.zeros_like(cap)
    while True:
        parent = [-1] * n
        parent[src] = src
        queue = [src]
        for u in queue:
            for v in np.flatnonzero(cap[u] - flow[u] > 0):
                if parent[v] < 0:
                    parent[v] = u
                    queue.append(int(v))
        if parent[sink] < 0:
            return flow
        v, push = sink, None
        while v != src:
            u = parent[v]
            push = cap[u, v] - flow[u, v] if push is None else min(push, cap[u, v] - flow[u, v])
            v = u
        v = sink
        while v != src:
            u = parent[v]
            flow[u, v] += push
            flow[v, u] -= push
            v = u


def _controlled_rounding(sizes: Sequence[int], ratios: Sequence[float]) -> np.ndarray:
    """Integer stratum x split counts with exact row sums, exact global split
    totals (``quota_counts``), and every cell the floor or ceiling of its
    prorated share.

    Floors first; the leftover units per stratum then go to splits whose share
    was rounded down, at most one each, as a max-flow from strata to splits.
    A controlled rounding of a two-way table always exists, so the flow is full.
    """
    sizes = np.asarray(sizes)
    ratios = np.asarray(ratios, float) / float(np.sum(ratios))
    totals = quota_counts(int(sizes.sum()), ratios)
    expected = sizes[:, None] * ratios[None, :]
    cells = np.floor(expected + 1e-9).astype(int)
    B, S = cells.shape
    src, sink = B + S, B + S + 1
    cap = np.zeros((B + S + 2, B + S + 2), dtype=np.int64)
    cap[src, :B] = sizes - cells.sum(axis=1)
    cap[:B, B:B + S] = expected - cells > 1e-9
    cap[B:B + S, sink] = totals - cells.sum(axis=0)
    flow = _max_flow(cap, src, sink)
    if flow[src].sum() != cap[src].sum():
        raise RuntimeError("controlled rounding failed")
    return cells + flow[:B, B:B + S]


def make_split(
    patient_bins: dict[str, int],
    ratios: Sequence[float] = (0.70, 0.15, 0.15),
    seed: int = 0,
    mode: str = "holdout",
    k: int = 5,
) -> SplitPlan:
    """Patient-level stratified assignment.

    ``patient_bins`` maps patient id to its stratum (an LOS bin). In holdout
    mode every patient goes to train/val/test with exact global totals; in
    kfold mode patients receive fold ids 0..k-1.
    """
    if not patient_bins:
        raise ConfigError("no patients to split")
    rng = Prng(seed).split("split").numpy()
    strata = dict(patient_bins)
    if mode == "kfold":
        strata = _merge_small_bins(strata, k)
    blocks = []
    for b in sorted(set(strata.values())):
        members = sorted(p for p, s in strata.items() if s == b)
        rng.shuffle(members)
        blocks.append(members)
    if mode == "kfold":
        order = [p for members in blocks for p in members]
        assignment = {p: i % k for i, p in enumerate(order)}
        return SplitPlan("kfold", assignment, strata, seed, ())
    if mode != "holdout":
        raise ConfigError(f"unknown split mode {mode!r}")
    cells = _controlled_rounding([len(m) for m in blocks], ratios)
    assignment = {}
    for members, row in zip(blocks, cells):
        start = 0
        for s, c in enumerate(row):
            for p in members[start:start + c]:
                assignment[p] = SPLITS[s]
            start += c
    return SplitPlan("holdout", assignment, strata, seed, tuple(ratios))


def table_bins(table: CohortTable) -> dict[str, int]:
    return {p.patient_id: los_bin(p.los_days) for p in table.patients}


def oversample(windows: Sequence[SequenceWindow], seed: int = 0) -> list[SequenceWindow]:
    """Duplicate minority LOS-bin windows (with replacement) up to the largest bin."""
    rng = Prng(seed).split("oversample").numpy()
    bins: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        bins.setdefault(los_bin(w.y), []).append(i)
    if not bins:
        return []
    target = max(len(v) for v in bins.values())
    out = list(windows)
    for b in sorted(bins):
        idx = bins[b]
        extra = target - len(idx)
        if extra > 0:
            out.extend(windows[idx[j]] for j in rng.integers(0, len(idx), size=extra))
    return out


def class_weights(bin_counts: dict[int, int]) -> dict[int, float]:
    """w_c = N / (K * n_c); empty bins are excluded."""
    counts = {b: c for b, c in bin_counts.items() if c > 0}
    n = sum(counts.values())
    k = len(counts)
    return {b: n / (k * c) for b, c in counts.items()}


def window_bin_counts(windows: Sequence[SequenceWindow]) -> dict[int, int]:
    return dict(sorted(Counter(los_bin(w.y) for w in windows).items()))
