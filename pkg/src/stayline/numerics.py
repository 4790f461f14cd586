"""Dense linear algebra helpers, a portable seeded PRNG and a gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
add the shape/finiteness checks the rest of the package relies on.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class DomainError(ValueError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite entries in matmul result")
    return out


def quantile(values: Sequence[float], q: float) -> float:
    """Linear-interpolation quantile: h = q*(n-1), interpolate floor/ceil."""
    if len(values) == 0:
        raise DomainError("quantile of an empty list")
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"q must lie in [0, 1], got {q}")
    xs = sorted(float(v) for v in values)
    h = q * (len(xs) - 1)
    lo = math.floor(h)
    hi = math.ceil(h)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic_grad,
    point,
    step: float = 1e-6,
) -> float:
    """Max over coordinates of |g_fd - g_an| / max(1, |g_fd|, |g_an|).

    ``g_fd`` uses central differences. ``f`` receives a copy of the point.
    """
    if not 0.0 < step <= 1e-2:
        raise DomainError(f"step must lie in (0, 1e-2], got {step}")
    x = np.array(point, dtype=np.float64).ravel()
    g_an = np.asarray(analytic_grad, dtype=np.float64).ravel()
    if g_an.shape != x.shape:
        raise ShapeError(f"gradient shape {g_an.shape} != point shape {x.shape}")
    worst = 0.0
    for k in range(x.size):
        xp = x.copy()
        xp[k] += step
        xm = x.copy()
        xm[k] -= step
        fp = float(f(xp))
        fm = float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite objective at coordinate {k}")
        g_fd = (fp - fm) / (2.0 * step)
        err = abs(g_fd - g_an[k]) / max(1.0, abs(g_fd), abs(g_an[k]))
        worst = max(worst, err)
    return worst


# --- seeded randomness -------------------------------------------------------


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def label_hash(label: str) -> int:
    """64-bit FNV-1a of the UTF-8 label."""
    h = 0xCBF29CE484222325
    for byte in label.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Prng:
    """xoshiro256** seeded from a 64-bit seed through splitmix64.

    Sub-streams are derived with ``split(label)``: the child seed is
    ``seed ^ label_hash(label)``. Bulk array draws go through ``numpy()``,
    which seeds a PCG64 generator from the next output of this stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def integers(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise DomainError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def normal(self) -> float:
        u1 = self.random()
        while u1 <= 0.0:
            u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def permutation(self, n: int) -> list[int]:
        out = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def split(self, label: str) -> "Prng":
        return Prng(self.seed ^ label_hash(label))

    def numpy(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.next_u64()))
