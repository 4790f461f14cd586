"""Shapley attributions, tree gain importance and attention profiles.

The Shapley value function is interventional: for a coalition S,
v(S) = mean over background rows b of f(z), where z takes x on S (and on every
non-attributed column) and b elsewhere.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baselines import Boosted, Forest, NotFittedError
from .model import SurgeryLstmParams, forward_batch, predict
from .numerics import Prng
from .prep import SequenceWindow, feature_label

MAX_EXACT = 12

Predict = Callable[[np.ndarray], np.ndarray]


@dataclass
class Attribution:
    base_value: float
    phi: np.ndarray
    prediction: float
    method: str
    features: list[int]
    x: np.ndarray
    se: np.ndarray | None = None
    instance_id: str = ""

    @property
    def additivity_gap(self) -> float:
        return abs(self.base_value + float(np.sum(self.phi)) - self.prediction)


def _players(x: np.ndarray, features, groups) -> list[np.ndarray]:
    if groups is not None:
        return [np.atleast_1d(np.asarray(g, dtype=int)) for g in groups]
    feats = range(x.shape[0]) if features is None else features
    return [np.array([int(j)]) for j in feats]


def _coalition_rows(x, background, players, masks) -> np.ndarray:
    """Rows for each (mask, background row): x on the players in the mask and on
    every column no player owns, background elsewhere."""
    owned = np.zeros(x.shape[0], dtype=bool)
    for p in players:
        owned[p] = True
    base = np.where(owned, background, x)  # (n_bg, D)
    out = np.repeat(base[None], len(masks), axis=0)
    for m_i, mask in enumerate(masks):
        for k, p in enumerate(players):
            if mask >> k & 1:
                out[m_i][:, p] = x[p]
    return out.reshape(-1, x.shape[0])


def coalition_values(f: Predict, x, background, players, chunk: int = 256) -> np.ndarray:
    """v(S) for all 2^|F| coalitions, indexed by bitmask."""
    n_masks = 1 << len(players)
    values = np.empty(n_masks)
    n_bg = background.shape[0]
    for s in range(0, n_masks, chunk):
        masks = list(range(s, min(n_masks, s + chunk)))
        preds = np.asarray(f(_coalition_rows(x, background, players, masks)), dtype=float)
        values[s:s + len(masks)] = preds.reshape(len(masks), n_bg).mean(axis=1)
    return values


def shapley_exact(f: Predict, x, background, features: Sequence[int] | None = None,
                  groups: Sequence[Sequence[int]] | None = None, instance_id: str = "") -> Attribution:
    """Exact interventional Shapley values by enumerating every coalition.

    Players are single columns (``features``, default all) or column groups.
    Columns outside every player stay fixed at x.
    """
    x = np.asarray(x, dtype=float)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if background.shape[0] == 0:
        raise ValueError("background set is empty")
    players = _players(x, features, groups)
    F = len(players)
    if F > MAX_EXACT:
        raise ValueError(f"{F} players exceed the exact limit of {MAX_EXACT}; use shapley_sampled")
    v = coalition_values(f, x, background, players)
    weight = [math.factorial(s) * math.factorial(F - s - 1) / math.factorial(F) for s in range(F)]
    size = np.array([bin(m).count("1") for m in range(1 << F)])
    phi = np.zeros(F)
    for i in range(F):
        bit = 1 << i
        without = np.array([m for m in range(1 << F) if not m & bit], dtype=int)
        w = np.array([weight[s] for s in size[without]])
        phi[i] = float(np.sum(w * (v[without | bit] - v[without])))
    pred = float(np.asarray(f(x[None]), dtype=float)[0])
    return Attribution(float(v[0]), phi, pred, "exact", [int(p[0]) for p in players], x, None, instance_id)


def shapley_sampled(f: Predict, x, background, n_perms: int, seed: int = 0,
                    features: Sequence[int] | None = None, groups: Sequence[Sequence[int]] | None = None,
                    instance_id: str = "") -> Attribution:
    """Permutation-sampling estimator with per-player standard errors.

    Each sample draws a player order and a background row, then walks the
    order switching players from background to x; the prediction change at
    each switch is that player's marginal contribution.
    """
    if n_perms < 1:
        raise ValueError("n_perms must be >= 1")
    x = np.asarray(x, dtype=float)
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if background.shape[0] == 0:
        raise ValueError("background set is empty")
    players = _players(x, features, groups)
    F = len(players)
    owned = np.zeros(x.shape[0], dtype=bool)
    for p in players:
        owned[p] = True
    rng = Prng(seed).split("shapley").numpy()
    contrib = np.zeros((n_perms, F))
    for s in range(n_perms):
        order = rng.permutation(F)
        b = background[rng.integers(background.shape[0])]
        z = np.where(owned, b, x)
        rows = np.empty((F + 1, x.shape[0]))
        rows[0] = z
        for k, i in enumerate(order):
            z[players[i]] = x[players[i]]
            rows[k + 1] = z
        preds = np.asarray(f(rows), dtype=float)
        contrib[s, order] = np.diff(preds)
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / math.sqrt(n_perms) if n_perms > 1 else np.full(F, np.nan)
    base_rows = np.where(owned, background, x)
    base = float(np.mean(np.asarray(f(base_rows), dtype=float)))
    pred = float(np.asarray(f(x[None]), dtype=float)[0])
    return Attribution(base, phi, pred, f"sampled({n_perms})", [int(p[0]) for p in players], x, se, instance_id)


# --- tree importance ---------------------------------------------------------


@dataclass
class Importance:
    feature: int
    name: str
    label: str
    gain: float


def tree_gain_importance(model: Forest | Boosted, names: Sequence[str]) -> list[Importance]:
    """Total split gain per feature, normalized to sum 1, descending.

    Unused features appear with zero importance. Ties keep column order.
    """
    trees = getattr(model, "trees", None)
    if not trees:
        raise NotFittedError("model has no fitted trees")
    total = np.zeros(len(names))
    for t in trees:
        for j, g in zip(t.feature, t.gain):
            if j >= 0:
                total[j] += g
    s = total.sum()
    if s > 0:
        total = total / s
    order = sorted(range(len(names)), key=lambda j: (-total[j], j))
    return [Importance(j, names[j], feature_label(names[j]), float(total[j])) for j in order]


def importance_csv(rows: Sequence[Importance]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "feature", "label", "importance"])
    for r, imp in enumerate(rows, 1):
        w.writerow([r, imp.name, imp.label, repr(imp.gain)])
    return buf.getvalue()


# --- attention ---------------------------------------------------------------


@dataclass
class AttentionProfile:
    mean_alpha: np.ndarray
    rows: np.ndarray
    valid_counts: np.ndarray

    def to_csv(self) -> str:
        T = self.mean_alpha.shape[0]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "offset_from_last", "mean_alpha", "n_valid"])
        for t in range(T):
            w.writerow([t, t - (T - 1), repr(float(self.mean_alpha[t])), int(self.valid_counts[t])])
        return buf.getvalue()


def attention_profile(params: SurgeryLstmParams, windows: Sequence[SequenceWindow]) -> AttentionProfile:
    """Attention rows for each window and their per-step mean over windows
    where that step is valid."""
    if not windows:
        raise ValueError("no windows")
    _, alpha = predict(windows, params)
    M = np.stack([w.mask for w in windows])
    counts = M.sum(axis=0)
    with np.errstate(invalid="ignore"):
        mean = np.where(counts > 0, (alpha * M).sum(axis=0) / np.maximum(counts, 1), 0.0)
    return AttentionProfile(mean, alpha, counts)


# --- sequence model on a flattened window ------------------------------------


def lstm_flat_predictor(params: SurgeryLstmParams, window: SequenceWindow) -> tuple[Predict, np.ndarray, list[np.ndarray]]:
    """Flatten a window's valid steps into one vector.

    Returns (f, x_flat, step_groups): ``f`` rebuilds windows from flat rows and
    predicts; masked steps are not part of the feature set. Each group holds
    one step's columns, for step-level attributions.
    """
    valid = np.flatnonzero(window.mask)
    D = window.x.shape[1]
    x_flat = window.x[valid].ravel()

    def f(rows):
        rows = np.atleast_2d(rows)
        X = np.repeat(window.x[None], rows.shape[0], axis=0)
        X[:, valid] = rows.reshape(rows.shape[0], len(valid), D)
        M = np.repeat(window.mask[None], rows.shape[0], axis=0)
        out = []
        for s in range(0, rows.shape[0], 512):
            out.append(forward_batch(X[s:s + 512], M[s:s + 512], params)[0])
        return np.concatenate(out)

    groups = [np.arange(k * D, (k + 1) * D) for k in range(len(valid))]
    return f, x_flat, groups


def lstm_step_attribution(params: SurgeryLstmParams, window: SequenceWindow,
                          background: Sequence[SequenceWindow], n_perms: int, seed: int = 0) -> Attribution | None:
    """Sampled Shapley values with one player per valid step of ``window``.

    Background rows are the last k valid steps of background windows that
    have at least k valid steps (k = steps in ``window``). Returns None when
    no background window is long enough.
    """
    f, x_flat, groups = lstm_flat_predictor(params, window)
    k = len(groups)
    rows = [w.x[np.flatnonzero(w.mask)[-k:]].ravel() for w in background if w.n_valid >= k]
    if not rows:
        return None
    att = shapley_sampled(f, x_flat, np.array(rows), n_perms, seed=seed, groups=groups,
                          instance_id=window.patient_id)
    att.features = [int(t) for t in np.flatnonzero(window.mask)]  # players are step indices
    return att


# --- summary and decision tables ---------------------------------------------


@dataclass
class SummaryData:
    top: list[int]
    mean_abs: dict[int, float]
    scatter: list[tuple[str, int, float, float]] = field(default_factory=list)  # (instance, feature, value, phi)
    paths: list[tuple[str, int, int, float]] = field(default_factory=list)  # (instance, step, feature, cumulative)


def summary_and_decision_data(attributions: Sequence[Attribution], top_k: int = 20, n_paths: int = 30,
                              seed: int = 0) -> SummaryData:
    """Scatter rows for the top-k features by mean |φ| and cumulative decision
    paths for up to ``n_paths`` seeded instances.

    Paths start at the base value and add φ in descending mean |φ| order, so
    they end at base + Σφ (the prediction, for exact attributions).
    """
    if not attributions:
        raise ValueError("need at least one attribution")
    feats = attributions[0].features
    Phi = np.array([a.phi for a in attributions])
    mean_abs = np.abs(Phi).mean(axis=0)
    order = sorted(range(len(feats)), key=lambda k: (-mean_abs[k], feats[k]))
    top = order[:top_k]
    data = SummaryData([feats[k] for k in top], {feats[k]: float(mean_abs[k]) for k in range(len(feats))})
    for a in attributions:
        for k in top:
            data.scatter.append((a.instance_id, feats[k], float(a.x[feats[k]]), float(a.phi[k])))
    n = len(attributions)
    picks = sorted(Prng(seed).split("decision").numpy().choice(n, size=min(n_paths, n), replace=False))
    for i in picks:
        a = attributions[i]
        cum = a.base_value
        data.paths.append((a.instance_id, 0, -1, cum))
        for step, k in enumerate(order, 1):
            cum += float(a.phi[k])
            data.paths.append((a.instance_id, step, feats[k], cum))
    return data


def summary_csvs(data: SummaryData, names: Sequence[str]) -> tuple[str, str]:
    """(shap_summary.csv, decision_paths.csv) contents."""
    s = io.StringIO()
    w = csv.writer(s, lineterminator="\n")
    w.writerow(["feature", "label", "value", "phi", "instance_id"])
    for inst, j, value, phi in data.scatter:
        w.writerow([names[j], feature_label(names[j]), repr(value), repr(phi), inst])
    d = io.StringIO()
    w = csv.writer(d, lineterminator="\n")
    w.writerow(["instance_id", "step", "feature", "cumulative"])
    for inst, step, j, cum in data.paths:
        w.writerow([inst, step, "base" if j < 0 else names[j], repr(cum)])
    return s.getvalue(), d.getvalue()
