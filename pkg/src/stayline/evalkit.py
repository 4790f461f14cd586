"""Metrics, the six-model benchmark and residual diagnostics."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import baselines as bl
from .cohort import CohortTable, SynthConfig, events_csv, patients_csv
from .model import Hyper, SurgeryLstmParams, predict
from .prep import (SPLITS, FeatureSpec, SequenceWindow, SplitPlan, build_windows, class_weights, final_windows,
                   fit_feature_spec, make_split, oversample, table_bins, window_bin_counts)
from .train import TrainingDiverged, train

log = logging.getLogger(__name__)

MODELS = ("linreg", "rf", "svr", "gbrt", "bilstm_noattn", "surgery_lstm")
DISPLAY = {
    "linreg": "Linear Regression",
    "rf": "Random Forest",
    "svr": "Linear SVR",
    "gbrt": "Gradient Boosted Trees",
    "bilstm_noattn": "BiLSTM (no attention)",
    "surgery_lstm": "SurgeryLSTM",
}


# --- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    rmse: float
    r2: float
    r2_defined: bool = True

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "rmse": self.rmse,
                "r2": None if not self.r2_defined else self.r2, "r2_defined": self.r2_defined}


def metrics(y_true, y_pred) -> Metrics:
    """MAE, MSE, RMSE and R². A constant target leaves R² undefined (NaN, flagged)."""
    y = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise ValueError(f"need equal non-empty 1-D arrays, got {y.shape} and {p.shape}")
    e = y - p
    mse = float(np.mean(e * e))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    defined = ss_tot > 0
    r2 = 1.0 - float(np.sum(e * e)) / ss_tot if defined else math.nan
    return Metrics(float(np.mean(np.abs(e))), mse, math.sqrt(mse), r2, defined)


# --- residuals ---------------------------------------------------------------


@dataclass
class ResidualHistogram:
    bins: list[tuple[int, int]]  # (center, count), non-empty bins only
    mean: float
    skew: float
    n: int

    def to_dict(self) -> dict:
        return {"bins": [list(b) for b in self.bins], "mean": self.mean, "skew": self.skew, "n": self.n}


def residual_histogram(residuals) -> ResidualHistogram:
    """Unit-width bins centered on integers; bin k holds residuals in [k-0.5, k+0.5)."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise ValueError("no residuals")
    centers = np.floor(r + 0.5).astype(int)
    keys, counts = np.unique(centers, return_counts=True)
    mean = float(r.mean())
    m2 = float(np.mean((r - mean) ** 2))
    skew = float(np.mean((r - mean) ** 3)) / m2 ** 1.5 if m2 > 0 else 0.0
    return ResidualHistogram([(int(k), int(c)) for k, c in zip(keys, counts)], mean, skew, int(r.size))


# --- benchmark configuration -------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    mode: str = "holdout"
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    k: int = 5
    top_k_labs: int = 50
    models: tuple[str, ...] = MODELS
    hyper: Hyper = Hyper()
    oversample: bool = True
    rf_trees: int = 100
    gbrt_trees: int = 200
    gbrt_depth: int = 6
    gbrt_shrinkage: float = 0.1
    gbrt_lambda: float = 1.0
    svr_eps: float = 0.1
    svr_c: float = 1.0
    svr_epochs: int = 200

    def validate(self) -> None:
        if self.mode not in ("holdout", "kfold"):
            raise ValueError(f"mode must be holdout or kfold, got {self.mode!r}")
        unknown = set(self.models) - set(MODELS)
        if unknown:
            raise ValueError(f"unknown models: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hyper"] = self.hyper.to_dict()
        d["ratios"] = list(self.ratios)
        d["models"] = list(self.models)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown benchmark keys: {sorted(unknown)}")
        d = dict(d)
        if "hyper" in d:
            d["hyper"] = Hyper.from_dict(d["hyper"]) if isinstance(d["hyper"], dict) else d["hyper"]
        for key in ("ratios", "models"):
            if key in d:
                d[key] = tuple(d[key])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def hash(self) -> str:
        return sha256_text(json.dumps(self.to_dict(), sort_keys=True))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def cohort_hash(table: CohortTable) -> str:
    return sha256_text(patients_csv(table) + events_csv(table))


# --- preparation -------------------------------------------------------------


@dataclass
class Prepared:
    """Everything the models see for one train/val/test assignment."""

    spec: FeatureSpec
    plan: SplitPlan
    flat: bl.FlatDataset
    windows: dict[str, list[SequenceWindow]]
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]


def prepare(table: CohortTable, plan: SplitPlan, top_k_labs: int = 50, spec: FeatureSpec | None = None,
            fold: int | None = None) -> Prepared:
    """Fit the feature spec on training patients and build both representations.

    In k-fold mode ``fold`` is held out as test and the rest is training data.
    """
    if fold is None:
        groups = {s: plan.members(s) for s in SPLITS}
    else:
        groups = {
            "train": sorted(p for p, f in plan.assignment.items() if f != fold),
            "val": [],
            "test": plan.members(fold),
        }
    if spec is None:
        spec = fit_feature_spec(table.subset(groups["train"]), top_k_labs)
    flat = bl.flatten(table, spec)
    wins = build_windows(table, spec)
    where = {p: s for s, ids in groups.items() for p in ids}
    windows = {s: [w for w in wins if where.get(w.patient_id) == s] for s in SPLITS}
    return Prepared(spec, plan, flat, windows, groups["train"], groups["val"], groups["test"])


# --- fitting -----------------------------------------------------------------


@dataclass
class Fitted:
    models: dict[str, object] = field(default_factory=dict)
    logs: dict[str, dict] = field(default_factory=dict)
    failures: dict[str, str] = field(default_factory=dict)


def lstm_training_set(prep: Prepared, cfg: BenchmarkConfig) -> tuple[list[SequenceWindow], dict[int, float]]:
    wins = prep.windows["train"]
    if cfg.oversample:
        wins = oversample(wins, cfg.seed)
    return wins, class_weights(window_bin_counts(wins))


def fit_one(name: str, prep: Prepared, cfg: BenchmarkConfig):
    """Fit one benchmark model. Returns (model, log dict)."""
    tr = prep.flat.subset(prep.train_ids)
    if name == "linreg":
        return bl.linreg_fit(tr.X, tr.y), {}
    if name == "rf":
        return bl.rf_fit(tr.X, tr.y, n_trees=cfg.rf_trees, seed=cfg.seed, names=tr.names), {}
    if name == "gbrt":
        m = bl.gbrt_fit(tr.X, tr.y, cfg.gbrt_trees, cfg.gbrt_depth, cfg.gbrt_shrinkage, cfg.gbrt_lambda,
                        seed=cfg.seed, names=tr.names)
        return m, {"train_loss": m.train_loss}
    if name == "svr":
        m = bl.svr_fit(tr.X, tr.y, cfg.svr_eps, cfg.svr_c, cfg.svr_epochs, seed=cfg.seed)
        return m, {"objective": m.history}
    hyper = replace(cfg.hyper, attention=(name == "surgery_lstm"))
    wins, weights = lstm_training_set(prep, cfg)
    params, tlog = train(wins, prep.windows["val"] or None, hyper, seed=cfg.seed, weights=weights)
    d = tlog.to_dict()
    d.pop("wall_time")
    return params, d


def fit_models(prep: Prepared, cfg: BenchmarkConfig) -> Fitted:
    out = Fitted()
    for name in cfg.models:
        try:
            out.models[name], out.logs[name] = fit_one(name, prep, cfg)
        except TrainingDiverged as exc:
            log.error("%s diverged: %s", name, exc)
            out.failures[name] = f"diverged: {exc}"
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            log.error("%s failed: %s", name, exc)
            out.failures[name] = f"{type(exc).__name__}: {exc}"
    return out


def predict_model(name: str, model, prep: Prepared, patient_ids: Sequence[str]) -> np.ndarray:
    """Per-patient predictions; sequence models use each patient's final window."""
    if isinstance(model, SurgeryLstmParams):
        wanted = set(patient_ids)
        fw = {w.patient_id: w for w in final_windows(
            [w for s in SPLITS for w in prep.windows[s] if w.patient_id in wanted])}
        y_hat, _ = predict([fw[p] for p in patient_ids], model)
        return y_hat
    return model.predict(prep.flat.subset(patient_ids).X)


# --- reports -----------------------------------------------------------------


@dataclass
class ModelReport:
    name: str
    metrics: Metrics
    residuals: list[float]
    curves: dict
    fold_r2: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "model": self.name,
            "display_name": DISPLAY[self.name],
            "metrics": self.metrics.to_dict(),
            "residuals": self.residuals,
            "residual_histogram": residual_histogram(self.residuals).to_dict(),
            "curves": self.curves,
        }
        if self.fold_r2:
            d["fold_r2"] = self.fold_r2
            d["fold_r2_mean"] = float(np.mean(self.fold_r2))
            d["fold_r2_sd"] = float(np.std(self.fold_r2, ddof=1)) if len(self.fold_r2) > 1 else 0.0
        return d


@dataclass
class BenchmarkReport:
    models: dict[str, ModelReport]
    failures: dict[str, str]
    split: dict
    config: BenchmarkConfig
    provenance: dict

    @property
    def complete(self) -> bool:
        return not self.failures

    def r2(self, name: str) -> float:
        return self.models[name].metrics.r2

    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "config": self.config.to_dict(),
            "split": self.split,
            "models": {n: self.models[n].to_dict() for n in MODELS if n in self.models},
            "failures": self.failures,
            "complete": self.complete,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def table1_csv(report: BenchmarkReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Model", "MAE", "MSE", "RMSE", "R2"])
    for name in MODELS:
        if name in report.models:
            m = report.models[name].metrics
            r2 = f"{m.r2:.4f}" if m.r2_defined else "NaN"
            w.writerow([DISPLAY[name], f"{m.mae:.4f}", f"{m.mse:.4f}", f"{m.rmse:.4f}", r2])
        elif name in report.failures:
            w.writerow([DISPLAY[name], "failed", "failed", "failed", "failed"])
    return buf.getvalue()


def evaluate_fitted(prep: Prepared, fitted: Fitted) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """(y_true, y_pred) on test patients for each fitted model."""
    y = prep.flat.subset(prep.test_ids).y
    return {name: (y, predict_model(name, m, prep, prep.test_ids)) for name, m in fitted.models.items()}


def assemble_report(outcomes: dict[str, tuple[np.ndarray, np.ndarray]], logs: dict[str, dict],
                    failures: dict[str, str], plan: SplitPlan, cfg: BenchmarkConfig, provenance: dict,
                    fold_r2: dict[str, list[float]] | None = None) -> BenchmarkReport:
    reports = {}
    for name in MODELS:
        if name not in outcomes:
            continue
        y, p = outcomes[name]
        reports[name] = ModelReport(name, metrics(y, p), [float(v) for v in y - p], logs.get(name, {}),
                                    (fold_r2 or {}).get(name, []))
    split = {"mode": plan.mode, "seed": plan.seed, "ratios": list(plan.ratios),
             "evaluated_on": "test split" if plan.mode == "holdout" else "pooled out-of-fold predictions",
             "sizes": {str(k): c for k, c in sorted(Counter(plan.assignment.values()).items(), key=lambda kv: str(kv[0]))}}
    return BenchmarkReport(reports, failures, split, cfg, provenance)


def run_benchmark(table: CohortTable, cfg: BenchmarkConfig = BenchmarkConfig(),
                  plan: SplitPlan | None = None) -> BenchmarkReport:
    """Train and evaluate every configured model on one shared patient split."""
    cfg.validate()
    if plan is None:
        plan = make_split(table_bins(table), cfg.ratios, seed=cfg.seed, mode=cfg.mode, k=cfg.k)
    provenance = {"cohort_sha256": cohort_hash(table), "config_sha256": cfg.hash(), "seed": cfg.seed}
    if plan.mode == "holdout":
        prep = prepare(table, plan, cfg.top_k_labs)
        fitted = fit_models(prep, cfg)
        return assemble_report(evaluate_fitted(prep, fitted), fitted.logs, fitted.failures, plan, cfg, provenance)

    folds = sorted({v for v in plan.assignment.values()})
    ys: dict[str, list] = {}
    ps: dict[str, list] = {}
    fold_r2: dict[str, list[float]] = {}
    failures: dict[str, str] = {}
    for k in folds:
        prep = prepare(table, plan, cfg.top_k_labs, fold=k)
        fitted = fit_models(prep, cfg)
        for name, msg in fitted.failures.items():
            failures[name] = f"fold {k}: {msg}"
        for name, (y, p) in evaluate_fitted(prep, fitted).items():
            ys.setdefault(name, []).append(y)
            ps.setdefault(name, []).append(p)
            fold_r2.setdefault(name, []).append(metrics(y, p).r2)
    outcomes = {n: (np.concatenate(ys[n]), np.concatenate(ps[n])) for n in ys if n not in failures}
    return assemble_report(outcomes, {}, failures, plan, cfg, provenance, fold_r2)


# --- named synthetic cohorts -------------------------------------------------


def temporal_cohort(n: int = 2000, seed: int = 7) -> SynthConfig:
    """Static planted effects plus +4 days when the latest pre-surgery lab is abnormal."""
    return SynthConfig(
        n_patients=n, seed=seed, noise_sd=0.5, event_max=14,
        planted_effects={"bone_disorder": 4.0, "chronic_kidney_disease": 3.0, "lumbar_fusion": 2.0, "obesity": 1.0},
        temporal_signal="last_event", temporal_effect=4.0,
    )


def linear_cohort(n: int = 1000, seed: int = 12) -> SynthConfig:
    """Noise-free additive indicator effects: exactly linear in the features."""
    return SynthConfig(
        n_patients=n, seed=seed, noise_sd=0.0,
        planted_effects={"bone_disorder": 4.0, "chronic_kidney_disease": 3.0, "obesity": 2.0, "hypertension": 1.0},
    )


def nonlinear_cohort(n: int = 1000, seed: int = 11) -> SynthConfig:
    """Pure interaction effects that no additive model can represent."""
    return SynthConfig(
        n_patients=n, seed=seed, noise_sd=0.5, planted_effects={"bone_disorder": 2.0},
        interaction_effects={"hypertension*obesity": 5.0, "sex_female*age_over_75": 5.0},
    )


def planted_cohort(n: int = 2000, seed: int = 13) -> SynthConfig:
    """One planted comorbidity (bone disorder, +3 days) under unit noise."""
    return SynthConfig(n_patients=n, seed=seed, noise_sd=1.0, planted_effects={"bone_disorder": 3.0})
