"""Static comparator regressors on one flattened feature vector per patient.

Linear ridge regression, a CART random forest, second-order gradient boosted
trees and a linear epsilon-insensitive SVR, all in plain numpy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cohort import CohortTable
from .numerics import Prng, ShapeError
from .prep import LAB_LEVELS, FeatureSpec, encode_event, encode_static

log = logging.getLogger(__name__)


class NotFittedError(RuntimeError):
    pass


# --- flattening --------------------------------------------------------------


@dataclass
class FlatDataset:
    X: np.ndarray
    y: np.ndarray
    names: list[str]
    patient_ids: list[str]

    def __post_init__(self):
        if self.X.shape != (len(self.y), len(self.names)):
            raise ShapeError(f"X {self.X.shape} does not match {len(self.y)} rows x {len(self.names)} names")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("flat features must be finite")

    def subset(self, patient_ids) -> "FlatDataset":
        pos = {p: i for i, p in enumerate(self.patient_ids)}
        rows = [pos[p] for p in patient_ids]
        return FlatDataset(self.X[rows], self.y[rows], self.names, [self.patient_ids[i] for i in rows])


def flatten_patient(spec: FeatureSpec, patient, events) -> np.ndarray:
    """One static row in FeatureSpec column order.

    Lab columns hold the last observed flag and (imputed, scaled) value; labs
    never measured read as missing with the imputed value. ``event_flag=*``
    holds the share of events at each flag level and ``rel_day`` the day of
    the latest event.
    """
    row = encode_static(spec, patient)
    for lab in spec.labs:
        row[spec.index(f"lab:{lab}=missing")] = 1.0
        rule = spec.impute.get(lab)
        if rule is not None and rule.value is not None:
            row[spec.index(f"lab:{lab}:value")] = spec.scale(f"lab:{lab}:value", rule.value)
    for e in events:
        encode_event(spec, row, e)
    for lv in LAB_LEVELS:
        share = sum(e.flag == lv for e in events) / len(events) if events else 0.0
        row[spec.index(f"event_flag={lv}")] = share
    last = (events[-1].event_date - patient.surgery_date).days if events else 0
    row[spec.index("rel_day")] = spec.scale("rel_day", last)
    return row


def flatten(table: CohortTable, spec: FeatureSpec) -> FlatDataset:
    by_patient = table.events_by_patient()
    patients = sorted(table.patients, key=lambda p: p.patient_id)
    X = np.array([flatten_patient(spec, p, by_patient[p.patient_id]) for p in patients]).reshape(len(patients), spec.dim)
    y = np.array([float(p.los_days) for p in patients])
    return FlatDataset(X, y, list(spec.names), [p.patient_id for p in patients])


# --- linear regression -------------------------------------------------------


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float
    ridge: float
    history: list[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.coef + self.intercept

    def to_dict(self) -> dict:
        return {"kind": "linear", "coef": self.coef.tolist(), "intercept": self.intercept, "ridge": self.ridge}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearModel":
        return cls(np.array(d["coef"], dtype=float), float(d["intercept"]), float(d["ridge"]))


def _canonical_rows(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row order independent of input order, so sums are reproduced bit for bit."""
    keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)]
    return np.lexsort(keys)


def linreg_fit(X, y, ridge: float = 0.0) -> LinearModel:
    """Ridge regression with an unpenalized intercept, solved by Cholesky.

    Slopes solve (XcᵀXc + λI)w = Xcᵀyc on centered data. A non positive
    definite system bumps λ (to 1e-8 first, then by factors of 10).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise ShapeError(f"bad shapes X {X.shape}, y {y.shape}")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    order = _canonical_rows(X, y)
    X, y = X[order], y[order]
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    A = Xc.T @ Xc
    b = Xc.T @ yc
    lam = float(ridge)
    while True:
        try:
            L = np.linalg.cholesky(A + lam * np.eye(A.shape[0]))
            break
        except np.linalg.LinAlgError:
            new = 1e-8 if lam == 0.0 else lam * 10.0
            log.warning("normal equations not positive definite at ridge=%g; retrying with %g", lam, new)
            lam = new
    w = np.linalg.solve(L.T, np.linalg.solve(L, b))
    return LinearModel(w, y_mean - float(x_mean @ w), lam)


# --- trees -------------------------------------------------------------------


@dataclass
class Tree:
    """Flat array tree. ``feature[k] == -1`` marks a leaf; samples with
    ``x[feature] <= threshold`` go left."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    gain: list[float] = field(default_factory=list)
    n_samples: list[int] = field(default_factory=list)
    depth: list[int] = field(default_factory=list)

    def _add(self, value: float, n: int, depth: int) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        self.gain.append(0.0)
        self.n_samples.append(int(n))
        self.depth.append(depth)
        return len(self.feature) - 1

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        feat = np.array(self.feature)
        thr = np.array(self.threshold)
        left = np.array(self.left)
        right = np.array(self.right)
        val = np.array(self.value)
        node = np.zeros(X.shape[0], dtype=int)
        active = feat[node] >= 0
        while np.any(active):
            k = node[active]
            go_left = X[active, feat[k]] <= thr[k]
            node[active] = np.where(go_left, left[k], right[k])
            active = feat[node] >= 0
        return val[node]

    def leaf_ids(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.empty(X.shape[0], dtype=int)
        for i, x in enumerate(X):
            k = 0
            while self.feature[k] >= 0:
                k = self.left[k] if x[self.feature[k]] <= self.threshold[k] else self.right[k]
            out[i] = k
        return out

    def to_dict(self, names: list[str] | None = None, k: int = 0) -> dict:
        if self.feature[k] < 0:
            return {"leaf": self.value[k], "n": self.n_samples[k]}
        j = self.feature[k]
        return {
            "feature": j,
            "name": names[j] if names else None,
            "threshold": self.threshold[k],
            "gain": self.gain[k],
            "n": self.n_samples[k],
            "left": self.to_dict(names, self.left[k]),
            "right": self.to_dict(names, self.right[k]),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        tree = cls()

        def walk(node, depth):
            k = tree._add(node.get("leaf", 0.0), node.get("n", 0), depth)
            if "leaf" not in node:
                tree.feature[k] = int(node["feature"])
                tree.threshold[k] = float(node["threshold"])
                tree.gain[k] = float(node["gain"])
                tree.left[k] = walk(node["left"], depth + 1)
                tree.right[k] = walk(node["right"], depth + 1)
            return k

        walk(d, 0)
        return tree


@dataclass(frozen=True)
class _SplitRule:
    lam: float
    factor: float
    min_gain: float
    min_leaf: int
    max_depth: int | None
    mtry: int | None
    leaf: Callable[[np.ndarray, np.ndarray], float]


def best_split(Xn: np.ndarray, g: np.ndarray, h: np.ndarray, lam: float, factor: float,
               features: np.ndarray, min_leaf: int = 1) -> tuple[int, float, float]:
    """Best (feature, threshold, gain) among ``features`` for one node.

    gain = factor * [G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)]. Thresholds are
    midpoints between consecutive distinct values. Ties go to the lowest
    feature index, then the lowest threshold. Returns (-1, nan, -inf) when no
    admissible split exists.
    """
    n = Xn.shape[0]
    if n < 2 * min_leaf or len(features) == 0:
        return -1, math.nan, -math.inf
    feats = np.sort(np.asarray(features))
    cols = Xn[:, feats]
    G = float(g.sum())
    H = float(h.sum())
    parent = G**2 / (H + lam)
    best_gain = np.full(len(feats), -np.inf)
    best_thr = np.full(len(feats), math.nan)

    # 0/1 indicator columns have a single candidate threshold, 0.5
    binary = np.all((cols == 0.0) | (cols == 1.0), axis=0)
    if np.any(binary):
        B = cols[:, binary]
        n_right = B.sum(axis=0)
        GR = g @ B
        HR = h @ B
        GL, HL = G - GR, H - HR
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = factor * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - parent)
        ok = (n_right >= min_leaf) & (n - n_right >= min_leaf) & np.isfinite(gain)
        best_gain[binary] = np.where(ok, gain, -np.inf)
        best_thr[binary] = 0.5

    other = np.flatnonzero(~binary)
    other = other[np.ptp(cols[:, other], axis=0) > 0]  # constant columns cannot split
    if len(other):
        C = cols[:, other]
        order = np.argsort(C, axis=0, kind="stable")
        xs = np.take_along_axis(C, order, axis=0)
        GL = np.cumsum(g[order], axis=0)[:-1]
        HL = np.cumsum(h[order], axis=0)[:-1]
        GR, HR = G - GL, H - HL
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = factor * (GL**2 / (HL + lam) + GR**2 / (HR + lam) - parent)
        count = np.arange(1, n)[:, None]
        ok = (xs[1:] > xs[:-1]) & (count >= min_leaf) & (n - count >= min_leaf) & np.isfinite(gain)
        gain = np.where(ok, gain, -np.inf)
        r = np.argmax(gain, axis=0)  # first maximum: lowest threshold
        c = np.arange(len(other))
        best_gain[other] = gain[r, c]
        lo, hi = xs[r, c], xs[np.minimum(r + 1, n - 1), c]
        mid = 0.5 * (lo + hi)
        best_thr[other] = np.where(mid < hi, mid, lo)  # guard against the midpoint rounding onto hi

    k = int(np.argmax(best_gain))  # first maximum: lowest feature index
    if not np.isfinite(best_gain[k]):
        return -1, math.nan, -math.inf
    return int(feats[k]), float(best_thr[k]), float(best_gain[k])


def grow_tree(X: np.ndarray, g: np.ndarray, h: np.ndarray, rule: _SplitRule,
              rng: np.random.Generator | None = None) -> Tree:
    tree = Tree()
    D = X.shape[1]
    stack = [(np.arange(X.shape[0]), 0, None)]  # (rows, depth, (parent, side))
    while stack:
        rows, depth, link = stack.pop()
        gn, hn = g[rows], h[rows]
        k = tree._add(rule.leaf(gn, hn), len(rows), depth)
        if link is not None:
            parent, side = link
            (tree.left if side == 0 else tree.right)[parent] = k
        if (rule.max_depth is not None and depth >= rule.max_depth) or np.ptp(gn) == 0.0:
            continue
        if rule.mtry is not None and rule.mtry < D:
            feats = rng.choice(D, size=rule.mtry, replace=False)
        else:
            feats = np.arange(D)
        j, thr, gain = best_split(X[rows], gn, hn, rule.lam, rule.factor, feats, rule.min_leaf)
        if j < 0 or not gain > 0.0 or gain < rule.min_gain:
            continue
        tree.feature[k] = j
        tree.threshold[k] = thr
        tree.gain[k] = gain
        go_left = X[rows, j] <= thr
        # push right first so the left subtree is numbered first
        stack.append((rows[~go_left], depth + 1, (k, 1)))
        stack.append((rows[go_left], depth + 1, (k, 0)))
    return tree


def _mean_leaf(g, h):
    # g = -y; a constant node returns its value exactly
    return float(-g[0]) if np.ptp(g) == 0.0 else float(-g.sum() / h.sum())


def cart_fit(X, y, max_depth: int | None = None, min_leaf: int = 1, mtry: int | None = None,
             min_gain: float = 0.0, rng: np.random.Generator | None = None) -> Tree:
    """Variance-reduction regression tree (gain = reduction in squared error)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    rule = _SplitRule(0.0, 1.0, min_gain, min_leaf, max_depth, mtry, _mean_leaf)
    return grow_tree(X, -y, np.ones_like(y), rule, rng)


@dataclass
class Forest:
    trees: list[Tree]
    names: list[str] | None = None

    def predict(self, X) -> np.ndarray:
        if not self.trees:
            raise NotFittedError("forest has no trees")
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def to_dict(self) -> dict:
        return {"kind": "forest", "trees": [t.to_dict(self.names) for t in self.trees], "names": self.names}

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        return cls([Tree.from_dict(t) for t in d["trees"]], d.get("names"))


def rf_fit(X, y, n_trees: int = 100, mtry: int | None = None, seed: int = 0, max_depth: int | None = None,
           min_leaf: int = 1, bootstrap: bool = True, names: list[str] | None = None) -> Forest:
    """Random forest; ``mtry`` defaults to ceil(D/3). Tree t draws from stream ``tree{t}``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("random forest needs at least 2 rows")
    D = X.shape[1]
    m = math.ceil(D / 3) if mtry is None else int(mtry)
    root = Prng(seed)
    trees = []
    for t in range(n_trees):
        rng = root.split(f"tree{t}").numpy()
        rows = rng.integers(0, X.shape[0], size=X.shape[0]) if bootstrap else np.arange(X.shape[0])
        trees.append(cart_fit(X[rows], y[rows], max_depth, min_leaf, m, rng=rng))
    return Forest(trees, names)


@dataclass
class Boosted:
    base: float
    shrinkage: float
    trees: list[Tree]
    names: list[str] | None = None
    train_loss: list[float] = field(default_factory=list)

    def predict(self, X, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.base)
        for t in self.trees[:n_trees]:
            out += self.shrinkage * t.predict(X)
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "boosted", "base": self.base, "shrinkage": self.shrinkage,
            "trees": [t.to_dict(self.names) for t in self.trees], "names": self.names,
            "train_loss": self.train_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Boosted":
        return cls(float(d["base"]), float(d["shrinkage"]), [Tree.from_dict(t) for t in d["trees"]],
                   d.get("names"), list(d.get("train_loss", [])))


def gbrt_fit(X, y, n_trees: int = 200, depth: int = 6, shrinkage: float = 0.1, lam: float = 1.0,
             seed: int = 0, min_gain: float = 0.0, names: list[str] | None = None) -> Boosted:
    """Second-order boosting on squared loss (g = ŷ − y, h = 1).

    Leaves take w = −G/(H+λ). ``seed`` is accepted for interface symmetry; no
    row or column subsampling is done, so the fit is deterministic anyway.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("boosting needs at least 2 rows")
    rule = _SplitRule(lam, 0.5, min_gain, 1, depth, None, lambda g, h: float(-g.sum() / (h.sum() + lam)))
    model = Boosted(float(y.mean()), shrinkage, [], names)
    pred = np.full(y.shape, model.base)
    h = np.ones_like(y)
    model.train_loss.append(float(np.mean((pred - y) ** 2)))
    for _ in range(n_trees):
        tree = grow_tree(X, pred - y, h, rule)
        pred = pred + shrinkage * tree.predict(X)
        model.trees.append(tree)
        model.train_loss.append(float(np.mean((pred - y) ** 2)))
    return model


# --- linear SVR --------------------------------------------------------------


def svr_objective(w, b, X, y, eps: float, C: float) -> float:
    r = np.abs(X @ w + b - y) - eps
    return 0.5 * float(w @ w) + C * float(np.sum(np.maximum(r, 0.0)))


def svr_fit(X, y, eps: float = 0.1, C: float = 1.0, epochs: int = 200, seed: int = 0,
            batch_size: int = 32, step: float | None = None) -> LinearModel:
    """Linear SVR by minibatch subgradient descent on ½‖w‖² + C·Σ max(0, |wᵀx+b−y|−ε).

    The full objective is evaluated after every epoch. An improving epoch is
    kept; otherwise the iterate reverts and the step is halved. The accepted
    objective is therefore non-increasing and never exceeds its value at
    w = 0, b = 0. ``history`` on the result
    records the accepted objective per epoch.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    N, D = X.shape
    if step is None:
        step = 10.0 / (C * (float(np.mean(np.sum(X * X, axis=1))) + 1.0))
    rng = Prng(seed).split("svr").numpy()
    w = np.zeros(D)
    b = 0.0
    best = (w.copy(), b, svr_objective(w, b, X, y, eps, C))
    history = [best[2]]
    for _ in range(epochs):
        order = rng.permutation(N)
        for s in range(0, N, batch_size):
            idx = order[s:s + batch_size]
            r = X[idx] @ w + b - y[idx]
            sgn = np.sign(r) * (np.abs(r) > eps)
            # per-batch estimate of the full gradient
            gw = w + C * (N / len(idx)) * (X[idx].T @ sgn)
            gb = C * (N / len(idx)) * float(sgn.sum())
            w = w - step * gw / N
            b = b - step * gb / N
        obj = svr_objective(w, b, X, y, eps, C)
        if obj < best[2]:
            best = (w.copy(), b, obj)
        else:
            step *= 0.5
            w, b = best[0].copy(), best[1]
        history.append(best[2])
    return LinearModel(best[0], float(best[1]), 0.0, history)
