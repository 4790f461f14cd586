import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stayline.numerics import (DomainError, NumericError, Prng, ShapeError, grad_check, label_hash, matmul,
                               quantile, splitmix64)

finite = st.floats(-1e3, 1e3, allow_nan=False)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            out[i][j] = sum(a[i][k] * b[k][j] for k in range(len(b)))
    return out


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 4))
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_example():
    assert matmul([[1, 2], [3, 4]], [[1], [1]]).tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_rejects_overflow():
    with pytest.raises(NumericError):
        matmul([[1e300]], [[1e300]])


def test_matmul_associative(rng):
    for _ in range(20):
        a, b, c = rng.normal(size=(4, 5)), rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
        lhs, rhs = matmul(matmul(a, b), c), matmul(a, matmul(b, c))
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(lhs)))


def test_quantile_examples():
    assert quantile([1, 2, 3, 4], 0.5) == 2.5
    assert quantile([7], 0.3) == 7
    # h = 0.75 * 4 = 3 -> the fourth sorted value
    assert quantile([1, 2, 3, 4, 100], 0.75) == 4


def test_quantile_errors():
    with pytest.raises(DomainError):
        quantile([], 0.5)
    with pytest.raises(DomainError):
        quantile([1.0], 1.5)


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_quantile_properties(values, q1, q2):
    assert quantile(values, 0) == min(values)
    assert quantile(values, 1) == max(values)
    lo, hi = sorted((q1, q2))
    assert quantile(values, lo) <= quantile(values, hi) + 1e-9


@given(st.lists(finite, min_size=1, max_size=30), st.floats(0, 1))
def test_quantile_matches_numpy_linear(values, q):
    assert math.isclose(quantile(values, q), float(np.quantile(values, q)), rel_tol=1e-9, abs_tol=1e-9)


def test_grad_check_quadratic():
    err = grad_check(lambda x: float(x[0] ** 2), [6.0], [3.0])
    assert err < 1e-8


def test_grad_check_constant():
    assert grad_check(lambda x: 5.0, [0.0, 0.0], [1.0, 2.0]) == 0.0


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
def test_grad_check_polynomial(point):
    def f(x):
        return float(x[0] ** 3 + 2 * x[0] * x[1] - x[2] ** 2)

    x = np.array(point)
    g = [3 * x[0] ** 2 + 2 * x[1], 2 * x[0], -2 * x[2]]
    assert grad_check(f, g, x, step=1e-5) < 1e-8


def test_grad_check_detects_wrong_gradient():
    assert grad_check(lambda x: float(x[0] ** 2), [5.0], [3.0]) > 0.1


def test_grad_check_errors():
    with pytest.raises(DomainError):
        grad_check(lambda x: 0.0, [0.0], [0.0], step=0.1)
    with pytest.raises(NumericError):
        grad_check(lambda x: float("nan"), [0.0], [0.0])
    with pytest.raises(ShapeError):
        grad_check(lambda x: 0.0, [0.0, 1.0], [0.0])


def test_splitmix64_reference_vector():
    # first output of the reference splitmix64 for seed 1234567
    _, out = splitmix64(1234567)
    assert out == 6457827717110365317


def test_label_hash_is_fnv1a():
    assert label_hash("") == 0xCBF29CE484222325
    assert label_hash("a") == 0xAF63DC4C8601EC8C


def test_prng_determinism():
    a, b = Prng(42), Prng(42)
    assert [a.next_u64() for _ in range(10_000)] == [b.next_u64() for _ in range(10_000)]
    assert Prng(43).next_u64() != Prng(42).next_u64()


def test_prng_split_derivation():
    root = Prng(99)
    child = root.split("shuffle")
    assert child.seed == 99 ^ label_hash("shuffle")
    assert child.next_u64() == Prng(99 ^ label_hash("shuffle")).next_u64()
    assert root.split("a").next_u64() != root.split("b").next_u64()


@given(st.integers(0, 2**64 - 1), st.integers(1, 1000))
def test_prng_integers_in_range(seed, n):
    p = Prng(seed)
    assert all(0 <= p.integers(n) < n for _ in range(20))


def test_prng_uniform_and_normal_moments():
    p = Prng(7)
    u = np.array([p.random() for _ in range(20_000)])
    z = np.array([p.normal() for _ in range(20_000)])
    assert 0.0 <= u.min() and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03


def test_prng_permutation_and_numpy_stream():
    assert sorted(Prng(3).permutation(50)) == list(range(50))
    assert np.array_equal(Prng(3).numpy().random(5), Prng(3).numpy().random(5))
