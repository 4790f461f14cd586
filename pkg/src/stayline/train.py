"""Adam training loop with best-validation checkpointing, and randomized search."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .model import Hyper, SurgeryLstmParams, init_params, loss, loss_and_grads, predict, stack
from .numerics import Prng
from .prep import SequenceWindow, final_windows, los_bin, make_split

log = logging.getLogger(__name__)

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    seed: int = 0
    best_epoch: int = -1
    params_hash: str = ""
    stopped_reason: str = "completed"
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs, "seed": self.seed, "best_epoch": self.best_epoch,
            "params_hash": self.params_hash, "stopped_reason": self.stopped_reason,
            "wall_time": self.wall_time,
        }


class Adam:
    def __init__(self, params: SurgeryLstmParams, lr: float):
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}

    def step(self, params: SurgeryLstmParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - ADAM_B1 ** self.t
        c2 = 1.0 - ADAM_B2 ** self.t
        for k, g in grads.items():
            self.m[k] = ADAM_B1 * self.m[k] + (1 - ADAM_B1) * g
            self.v[k] = ADAM_B2 * self.v[k] + (1 - ADAM_B2) * g * g
            params.tensors[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + ADAM_EPS)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def evaluate(windows: Sequence[SequenceWindow], params: SurgeryLstmParams) -> tuple[float, float]:
    """(MSE, MAE) in inference mode."""
    y_hat, _ = predict(windows, params)
    y = np.array([w.y for w in windows])
    return loss(y_hat, y), float(np.mean(np.abs(y_hat - y)))


def train(
    train_windows: Sequence[SequenceWindow],
    val_windows: Sequence[SequenceWindow] | None = None,
    hyper: Hyper = Hyper(),
    seed: int = 0,
    weights: dict[int, float] | None = None,
    init: SurgeryLstmParams | None = None,
) -> tuple[SurgeryLstmParams, TrainLog]:
    """Fit SurgeryLSTM; returns the parameters with the best validation MAE.

    ``weights`` maps LOS bins to loss weights. Validation uses each patient's
    final window. Without validation data the last epoch is returned.
    """
    if not train_windows:
        raise ValueError("no training windows")
    if val_windows:
        overlap = {w.patient_id for w in train_windows} & {w.patient_id for w in val_windows}
        if overlap:
            raise ValueError(f"train/val share {len(overlap)} patient(s)")
    start = time.perf_counter()
    root = Prng(seed)
    params = init.copy() if init is not None else init_params(train_windows[0].x.shape[1], hyper, seed)
    if init is None:
        out_bias = f"head.b{len(hyper.dense)}"
        params.tensors[out_bias][:] = np.mean([w.y for w in train_windows])
    opt = Adam(params, hyper.lr)
    shuffle_rng = root.split("shuffle").numpy()
    drop_rng = root.split("dropout").numpy()
    val_final = final_windows(val_windows) if val_windows else []
    sw = np.array([weights.get(los_bin(w.y), 1.0) if weights else 1.0 for w in train_windows])

    log_ = TrainLog(seed=seed)
    best_mae = np.inf
    best = params.copy()
    n = len(train_windows)
    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(n)
        tot_loss = tot_abs = 0.0
        for s in range(0, n, hyper.batch_size):
            idx = order[s:s + hyper.batch_size]
            X, M, y = stack([train_windows[i] for i in idx])
            value, grads, y_hat = loss_and_grads(X, M, y, params, sw[idx], mode="train", rng=drop_rng)
            if not np.isfinite(value):
                raise TrainingDiverged(epoch)
            clip_global_norm(grads, hyper.clip_norm)
            opt.step(params, grads)
            tot_loss += value * len(idx)
            tot_abs += float(np.sum(np.abs(y_hat - y)))
        row = {"epoch": epoch + 1, "train_loss": tot_loss / n, "train_mae": tot_abs / n}
        if val_final:
            vl, vm = evaluate(val_final, params)
            if not np.isfinite(vl):
                raise TrainingDiverged(epoch)
            row.update(val_loss=vl, val_mae=vm)
            if vm < best_mae:
                best_mae = vm
                best = params.copy()
                log_.best_epoch = epoch + 1
        log_.epochs.append(row)
        log.debug("epoch %d %s", epoch + 1, row)
    if not val_final:
        best = params
        log_.best_epoch = hyper.epochs
    log_.params_hash = best.content_hash()
    log_.wall_time = time.perf_counter() - start
    return best, log_


# --- randomized search -------------------------------------------------------

SEARCH_AXES = ("hidden", "dense", "dropout", "lr", "batch_size", "epochs")


@dataclass
class SearchResult:
    best: Hyper
    candidates: list[Hyper]
    scores: list[float]

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "candidates": [{"hyper": c.to_dict(), "mean_val_mae": s} for c, s in zip(self.candidates, self.scores)],
        }


def sample_candidates(space: dict, n_iter: int, seed: int, base: Hyper = Hyper()) -> list[Hyper]:
    missing = [a for a in SEARCH_AXES if not space.get(a)]
    if missing:
        raise ValueError(f"search space needs values for: {', '.join(missing)}")
    rng = Prng(seed).split("search").numpy()
    out = []
    for _ in range(n_iter):
        pick = {a: space[a][int(rng.integers(len(space[a])))] for a in SEARCH_AXES}
        pick["dense"] = tuple(pick["dense"]) if isinstance(pick["dense"], (list, tuple)) else (int(pick["dense"]),)
        out.append(replace(base, **pick))
    return out


def random_search(
    windows: Sequence[SequenceWindow],
    space: dict,
    n_iter: int = 10,
    folds: int = 3,
    seed: int = 0,
    base: Hyper = Hyper(),
    weights: dict[int, float] | None = None,
) -> SearchResult:
    """Score = mean held-out-fold MAE (final windows) over patient-level stratified folds."""
    candidates = sample_candidates(space, n_iter, seed, base)
    bins = {}
    for w in windows:
        bins[w.patient_id] = los_bin(w.y)
    plan = make_split(bins, seed=seed, mode="kfold", k=folds)
    scores = []
    for ci, hyper in enumerate(candidates):
        maes = []
        for k in range(folds):
            held = set(plan.members(k))
            tr = [w for w in windows if w.patient_id not in held]
            te = final_windows([w for w in windows if w.patient_id in held])
            params, _ = train(tr, None, hyper, seed=seed + ci, weights=weights)
            maes.append(evaluate(te, params)[1])
        scores.append(float(np.mean(maes)))
    best_i = int(np.argmin(scores))  # first minimum: ties go to the lower index
    return SearchResult(candidates[best_i], candidates, scores)


def ablate_no_attention(hyper: Hyper) -> Hyper:
    """Same configuration with attention replaced by mean-pooling over valid steps."""
    return replace(hyper, attention=False)
