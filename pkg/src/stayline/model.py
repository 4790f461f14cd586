"""SurgeryLSTM: masked bidirectional LSTM, additive attention, dense regression head.

Forward and backward passes are written out by hand and operate on batches of
windows shaped (B, T, D) with a boolean validity mask (B, T). Gate blocks are
fused in the order [i, f, o, g] for the matrix products.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import NumericError, Prng

GATES = ("i", "f", "o", "g")
DIRECTIONS = ("fwd", "bwd")
CHECKPOINT_FORMAT = "stayline-surgery-lstm"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Hyper:
    hidden: int = 64
    attn: int = 32
    dense: tuple[int, ...] = (32,)
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 30
    attention: bool = True
    clip_norm: float = 5.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense"] = list(self.dense)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyper":
        d = dict(d)
        if "dense" in d:
            d["dense"] = tuple(int(v) for v in d["dense"])
        return cls(**d)


@dataclass
class SurgeryLstmParams:
    tensors: dict[str, np.ndarray]
    hyper: Hyper
    input_dim: int
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "SurgeryLstmParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def fused(self, direction: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = self.tensors
        W = np.concatenate([t[f"{direction}.W_{g}"] for g in GATES], axis=1)
        U = np.concatenate([t[f"{direction}.U_{g}"] for g in GATES], axis=1)
        b = np.concatenate([t[f"{direction}.b_{g}"] for g in GATES])
        return W, U, b

    def check(self) -> None:
        H, D = self.hyper.hidden, self.input_dim
        for d in DIRECTIONS:
            for g in GATES:
                _expect(self, f"{d}.W_{g}", (D, H))
                _expect(self, f"{d}.U_{g}", (H, H))
                _expect(self, f"{d}.b_{g}", (H,))
        if self.hyper.attention:
            _expect(self, "attn.W", (2 * H, self.hyper.attn))
            _expect(self, "attn.b", (self.hyper.attn,))
            _expect(self, "attn.v", (self.hyper.attn,))
        sizes = [2 * H, *self.hyper.dense, 1]
        for k in range(len(sizes) - 1):
            _expect(self, f"head.W{k}", (sizes[k], sizes[k + 1]))
            _expect(self, f"head.b{k}", (sizes[k + 1],))
        for name, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite values in {name}")

    def save(self, path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "input_dim": self.input_dim,
            "seed": self.seed,
            "hyper": self.hyper.to_dict(),
            "shapes": {k: list(v.shape) for k, v in self.tensors.items()},
            "tensors": {k: v.ravel().tolist() for k, v in self.tensors.items()},
            "hash": self.content_hash(),
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SurgeryLstmParams":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} SurgeryLSTM checkpoint")
        tensors = {
            k: np.array(doc["tensors"][k], dtype=np.float64).reshape(doc["shapes"][k])
            for k in doc["shapes"]
        }
        params = cls(tensors, Hyper.from_dict(doc["hyper"]), int(doc["input_dim"]), int(doc["seed"]))
        params.check()
        if params.content_hash() != doc["hash"]:
            raise ValueError(f"{path}: checkpoint hash mismatch")
        return params


def _expect(params, name, shape):
    if name not in params.tensors:
        raise ValueError(f"missing parameter block {name}")
    if params.tensors[name].shape != tuple(shape):
        raise ValueError(f"{name}: shape {params.tensors[name].shape} != {tuple(shape)}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=(fan_in, fan_out))


def init_params(input_dim: int, hyper: Hyper = Hyper(), seed: int = 0) -> SurgeryLstmParams:
    """Glorot-uniform weights, zero biases, forget-gate bias 1."""
    rng = Prng(seed).split("init").numpy()
    H = hyper.hidden
    t: dict[str, np.ndarray] = {}
    for d in DIRECTIONS:
        for g in GATES:
            t[f"{d}.W_{g}"] = _glorot(rng, input_dim, H)
        for g in GATES:
            t[f"{d}.U_{g}"] = _glorot(rng, H, H)
        for g in GATES:
            t[f"{d}.b_{g}"] = np.ones(H) if g == "f" else np.zeros(H)
    if hyper.attention:
        t["attn.W"] = _glorot(rng, 2 * H, hyper.attn)
        t["attn.b"] = np.zeros(hyper.attn)
        t["attn.v"] = _glorot(rng, hyper.attn, 1).ravel()
    sizes = [2 * H, *hyper.dense, 1]
    for k in range(len(sizes) - 1):
        t[f"head.W{k}"] = _glorot(rng, sizes[k], sizes[k + 1])
        t[f"head.b{k}"] = np.zeros(sizes[k + 1])
    return SurgeryLstmParams(t, hyper, input_dim, seed)


def sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


# --- single-window reference operations -------------------------------------


def lstm_cell_forward(x_t, h_prev, c_prev, params: SurgeryLstmParams, direction: str = "fwd"):
    x_t = np.asarray(x_t, dtype=float)
    if not (np.all(np.isfinite(x_t)) and np.all(np.isfinite(h_prev)) and np.all(np.isfinite(c_prev))):
        raise NumericError("non-finite input to lstm_cell_forward")
    p = params.tensors
    pre = {g: x_t @ p[f"{direction}.W_{g}"] + h_prev @ p[f"{direction}.U_{g}"] + p[f"{direction}.b_{g}"] for g in GATES}
    i, f, o = sigmoid(pre["i"]), sigmoid(pre["f"]), sigmoid(pre["o"])
    g = np.tanh(pre["g"])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c


def bilstm_forward(x, mask, params: SurgeryLstmParams) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("window has no valid step")
    H_seq, _ = _bilstm(np.asarray(x, dtype=float)[None], mask[None], params)
    return H_seq[0]


def attention(H_seq, mask, params: SurgeryLstmParams) -> tuple[np.ndarray, np.ndarray]:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("window has no valid step")
    ctx, alpha, _ = _attend(np.asarray(H_seq, dtype=float)[None], mask[None], params)
    return ctx[0], alpha[0]


def forward(window, params: SurgeryLstmParams, mode: str = "infer", rng: np.random.Generator | None = None):
    """Predict one window. Returns (y_hat, alpha)."""
    y, alpha, _ = forward_batch(window.x[None], window.mask[None], params, mode=mode, rng=rng)
    return float(y[0]), alpha[0]


# --- batched forward ---------------------------------------------------------


def _direction_forward(XW, M, U, reverse):
    B, T, H4 = XW.shape
    H = H4 // 4
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    steps = []
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        z = XW[:, t] + h @ U
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        o = sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        cn = f * c + i * g
        tc = np.tanh(cn)
        hn = o * tc
        m = M[:, t, None]
        out[:, t] = np.where(m, hn, 0.0)
        steps.append((t, h, c, i, f, o, g, tc))
        h = np.where(m, hn, h)
        c = np.where(m, cn, c)
    return out, steps


def _bilstm(X, M, params):
    B, T, D = X.shape
    Xz = np.where(M[:, :, None], X, 0.0)
    flat = Xz.reshape(B * T, D)
    outs, caches = [], {}
    for d in DIRECTIONS:
        W, U, b = params.fused(d)
        XW = (flat @ W).reshape(B, T, -1) + b
        out, steps = _direction_forward(XW, M, U, reverse=(d == "bwd"))
        outs.append(out)
        caches[d] = (U, steps)
    return np.concatenate(outs, axis=2), {"Xz": Xz, "dirs": caches}


def masked_softmax(e, M):
    shifted = np.where(M, e, -np.inf)
    top = shifted.max(axis=1, keepdims=True)
    ex = np.where(M, np.exp(np.where(M, e - top, 0.0)), 0.0)
    return ex / ex.sum(axis=1, keepdims=True)


def _attend(Hs, M, params):
    if params.hyper.attention:
        p = params.tensors
        S = np.tanh(Hs @ p["attn.W"] + p["attn.b"])
        e = S @ p["attn.v"]
        alpha = masked_softmax(e, M)
        cache = {"S": S}
    else:
        alpha = M / M.sum(axis=1, keepdims=True)
        cache = {}
    ctx = np.einsum("bt,btk->bk", alpha, Hs)
    return ctx, alpha, cache


def _head_forward(ctx, params, drop_mask):
    p = params.tensors
    n_layers = len(params.hyper.dense) + 1
    a = ctx if drop_mask is None else ctx * drop_mask
    acts = [a]
    for k in range(n_layers):
        z = a @ p[f"head.W{k}"] + p[f"head.b{k}"]
        a = np.maximum(z, 0.0) if k < n_layers - 1 else z
        acts.append(a)
    return a[:, 0], acts


def forward_batch(X, M, params: SurgeryLstmParams, mode: str = "infer", rng: np.random.Generator | None = None,
                  drop_mask: np.ndarray | None = None):
    """Batched forward pass. Returns (y_hat (B,), alpha (B, T), cache)."""
    X = np.asarray(X, dtype=float)
    M = np.asarray(M, dtype=bool)
    if not M.any(axis=1).all():
        raise ValueError("every window needs at least one valid step")
    Hs, lstm_cache = _bilstm(X, M, params)
    ctx, alpha, attn_cache = _attend(Hs, M, params)
    rate = params.hyper.dropout
    if mode == "train" and drop_mask is None and rate > 0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        drop_mask = (rng.random(ctx.shape) >= rate) / (1.0 - rate)
    elif mode != "train":
        drop_mask = None
    y, acts = _head_forward(ctx, params, drop_mask)
    cache = {"X": X, "M": M, "Hs": Hs, "lstm": lstm_cache, "attn": attn_cache,
             "alpha": alpha, "ctx": ctx, "drop": drop_mask, "acts": acts}
    return y, alpha, cache


# --- loss and backward -------------------------------------------------------


def loss(y_hat, y, sample_weight=None) -> float:
    """Mean of w * (y_hat - y)^2."""
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    return float(np.mean(w * (y_hat - y) ** 2))


def loss_grad(y_hat, y, sample_weight=None) -> np.ndarray:
    y_hat = np.asarray(y_hat, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(y) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    return 2.0 * w * (y_hat - y) / y.size


def _direction_backward(dOut, M, U, steps, H):
    B, T, _ = dOut.shape
    dZ = np.zeros((B, T, 4 * H))
    dU = np.zeros_like(U)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t, h_prev, c_prev, i, f, o, g, tc in reversed(steps):
        m = M[:, t, None]
        dhn = np.where(m, dh + dOut[:, t], 0.0)
        dcn = np.where(m, dc + dhn * o * (1.0 - tc * tc), 0.0)
        dz = np.concatenate([
            dcn * g * i * (1.0 - i),
            dcn * c_prev * f * (1.0 - f),
            dhn * tc * o * (1.0 - o),
            dcn * i * (1.0 - g * g),
        ], axis=1)
        dZ[:, t] = dz
        dU += h_prev.T @ dz
        dh = np.where(m, dz @ U.T, dh)
        dc = np.where(m, dcn * f, dc)
    return dZ, dU


def backward_batch(cache, dy, params: SurgeryLstmParams) -> dict[str, np.ndarray]:
    """Gradients of sum(dy * y_hat) with respect to every parameter block."""
    p = params.tensors
    hyper = params.hyper
    H = hyper.hidden
    grads: dict[str, np.ndarray] = {}
    acts = cache["acts"]
    n_layers = len(hyper.dense) + 1
    da = np.asarray(dy, dtype=float)[:, None]
    for k in range(n_layers - 1, -1, -1):
        if k < n_layers - 1:
            da = da * (acts[k + 1] > 0)
        grads[f"head.W{k}"] = acts[k].T @ da
        grads[f"head.b{k}"] = da.sum(axis=0)
        da = da @ p[f"head.W{k}"].T
    dctx = da if cache["drop"] is None else da * cache["drop"]

    Hs, M, alpha = cache["Hs"], cache["M"], cache["alpha"]
    dHs = alpha[:, :, None] * dctx[:, None, :]
    if hyper.attention:
        S = cache["attn"]["S"]
        dalpha = np.einsum("btk,bk->bt", Hs, dctx)
        de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
        grads["attn.v"] = np.einsum("bt,bta->a", de, S)
        dpre = de[:, :, None] * p["attn.v"] * (1.0 - S * S)
        grads["attn.W"] = np.einsum("btk,bta->ka", Hs, dpre)
        grads["attn.b"] = dpre.sum(axis=(0, 1))
        dHs = dHs + dpre @ p["attn.W"].T

    Xz = cache["lstm"]["Xz"]
    B, T, D = Xz.shape
    flat = Xz.reshape(B * T, D)
    for j, d in enumerate(DIRECTIONS):
        U, steps = cache["lstm"]["dirs"][d]
        dOut = dHs[:, :, j * H:(j + 1) * H]
        dZ, dU = _direction_backward(dOut, M, U, steps, H)
        dW = flat.T @ dZ.reshape(B * T, 4 * H)
        db = dZ.sum(axis=(0, 1))
        for k, g in enumerate(GATES):
            sl = slice(k * H, (k + 1) * H)
            grads[f"{d}.W_{g}"] = dW[:, sl]
            grads[f"{d}.U_{g}"] = dU[:, sl]
            grads[f"{d}.b_{g}"] = db[sl]
    return {name: grads[name] for name in params.tensors}


def loss_and_grads(X, M, y, params, sample_weight=None, mode="infer", rng=None, drop_mask=None):
    y_hat, _, cache = forward_batch(X, M, params, mode=mode, rng=rng, drop_mask=drop_mask)
    value = loss(y_hat, y, sample_weight)
    grads = backward_batch(cache, loss_grad(y_hat, y, sample_weight), params)
    return value, grads, y_hat


def stack(windows: Sequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.stack([w.x for w in windows])
    M = np.stack([w.mask for w in windows])
    y = np.array([w.y for w in windows], dtype=float)
    return X, M, y


def predict(windows: Sequence, params: SurgeryLstmParams, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode predictions and attention rows for a list of windows."""
    ys, alphas = [], []
    for s in range(0, len(windows), batch_size):
        X, M, _ = stack(windows[s:s + batch_size])
        y, a, _ = forward_batch(X, M, params)
        ys.append(y)
        alphas.append(a)
    if not ys:
        return np.zeros(0), np.zeros((0, 0))
    return np.concatenate(ys), np.concatenate(alphas)
