import csv
import io
import itertools
import math

import numpy as np
import pytest

from stayline.baselines import Boosted, Forest, NotFittedError, cart_fit, flatten, gbrt_fit
from stayline.cohort import generate_cohort
from stayline.evalkit import planted_cohort
from stayline.explain import (MAX_EXACT, Attribution, attention_profile, importance_csv, lstm_flat_predictor,
                              lstm_step_attribution,
                              shapley_exact, shapley_sampled, summary_and_decision_data, summary_csvs,
                              tree_gain_importance)
from stayline.model import Hyper, forward, init_params
from stayline.prep import SequenceWindow, fit_feature_spec


def brute_shapley(f, x, background):
    """Shapley values from the permutation definition: average marginal
    contribution over all |F|! orders (independent of the subset formula)."""
    F = len(x)

    def v(S):
        rows = background.copy()
        rows[:, list(S)] = x[list(S)]
        return float(np.mean(f(rows)))

    phi = np.zeros(F)
    perms = list(itertools.permutations(range(F)))
    for order in perms:
        S = []
        for i in order:
            before = v(S)
            S.append(i)
            phi[i] += v(S) - before
    return phi / len(perms)


def test_linear_model_zero_background():
    f = lambda X: 3 * X[:, 0] + 2 * X[:, 1]
    a = shapley_exact(f, np.array([1.0, 2.0]), np.zeros((1, 2)))
    np.testing.assert_allclose(a.phi, [3.0, 4.0], atol=1e-12)
    assert a.base_value == 0.0 and a.prediction == 7.0 and a.method == "exact"


def test_symmetric_features_share_credit():
    f = lambda X: X[:, 0] * X[:, 1] + np.sin(X[:, 0]) + np.sin(X[:, 1])
    bg = np.random.default_rng(0).normal(size=(20, 1)).repeat(2, axis=1)
    a = shapley_exact(f, np.array([1.5, 1.5]), bg)
    assert a.phi[0] == pytest.approx(a.phi[1], abs=1e-12)


def test_dummy_feature_gets_zero_and_additivity():
    f = lambda X: X[:, 0] ** 2 - 3 * X[:, 2]
    rng = np.random.default_rng(1)
    a = shapley_exact(f, rng.normal(size=4), rng.normal(size=(30, 4)))
    assert a.phi[1] == 0.0 and a.phi[3] == 0.0
    assert a.additivity_gap < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_exact_matches_permutation_oracle_on_tree(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 5))
    y = X[:, 0] * (X[:, 1] > 0) + X[:, 2] ** 2 + rng.normal(0, 0.1, 60)
    tree = cart_fit(X, y, max_depth=4)
    bg = X[:15]
    x = X[40]
    a = shapley_exact(tree.predict, x, bg)
    np.testing.assert_allclose(a.phi, brute_shapley(tree.predict, x, bg), atol=1e-10)
    assert a.additivity_gap < 1e-8


def test_frozen_columns_and_groups():
    f = lambda X: X[:, 0] + 10 * X[:, 1] + 100 * X[:, 2]
    x, bg = np.array([1.0, 1.0, 1.0]), np.zeros((1, 3))
    a = shapley_exact(f, x, bg, features=[0, 2])
    np.testing.assert_allclose(a.phi, [1.0, 100.0])
    assert a.base_value == 10.0  # column 1 frozen at x
    g = shapley_exact(f, x, bg, groups=[[0, 1], [2]])
    np.testing.assert_allclose(g.phi, [11.0, 100.0])


def test_too_many_players_points_to_sampling():
    with pytest.raises(ValueError, match="shapley_sampled"):
        shapley_exact(lambda X: X.sum(axis=1), np.zeros(MAX_EXACT + 1), np.zeros((1, MAX_EXACT + 1)))


def _six_feature_model():
    rng = np.random.default_rng(4)
    w = rng.normal(size=6)
    f = lambda X: X @ w + X[:, 0] * X[:, 1] + np.tanh(X[:, 3] * X[:, 4])
    return f, rng.normal(size=6), rng.normal(size=(25, 6))


def test_sampled_converges_within_three_se():
    f, x, bg = _six_feature_model()
    exact = shapley_exact(f, x, bg)
    est = shapley_sampled(f, x, bg, n_perms=2000, seed=1)
    assert np.all(np.abs(est.phi - exact.phi) <= 3 * est.se)
    assert est.method == "sampled(2000)"


def test_sampled_unbiased_over_50_runs():
    f, x, bg = _six_feature_model()
    exact = shapley_exact(f, x, bg)
    runs = [shapley_sampled(f, x, bg, n_perms=20, seed=s) for s in range(50)]
    mean = np.mean([r.phi for r in runs], axis=0)
    pooled = np.sqrt(np.mean([r.se ** 2 for r in runs], axis=0) / 50)
    z = (mean - exact.phi) / pooled
    # six per-feature 2-SE checks would fail a quarter of the time with no bias,
    # so the 2-SE bound applies to the RMS over features; each feature gets 3 SE
    assert math.sqrt(np.mean(z ** 2)) <= 2.0
    assert np.all(np.abs(z) <= 3.0)


def test_sampled_reproducible_and_constant_model():
    f, x, bg = _six_feature_model()
    a, b = shapley_sampled(f, x, bg, 1, seed=7), shapley_sampled(f, x, bg, 1, seed=7)
    assert np.array_equal(a.phi, b.phi) and np.all(np.isnan(a.se))
    c = shapley_sampled(lambda X: np.full(len(X), 2.0), x, bg, 10)
    assert np.all(c.phi == 0)
    with pytest.raises(ValueError):
        shapley_sampled(f, x, bg, 0)


# --- tree importance ---------------------------------------------------------


def test_single_split_importance():
    X = np.array([[0.0, 5.0], [0.0, 5.0], [1.0, 5.0], [1.0, 5.0]])
    tree = cart_fit(X, np.array([0.0, 0.0, 1.0, 1.0]))
    rows = tree_gain_importance(Forest([tree]), ["a", "b"])
    assert [(r.name, r.gain) for r in rows] == [("a", 1.0), ("b", 0.0)]
    text = importance_csv(rows)
    assert text.splitlines()[0] == "rank,feature,label,importance"


def test_unfitted_importance_raises():
    with pytest.raises(NotFittedError):
        tree_gain_importance(Boosted(0.0, 0.1, []), ["a"])


def test_planted_feature_ranks_top3():
    table = generate_cohort(planted_cohort(n=600, seed=13))
    spec = fit_feature_spec(table)
    flat = flatten(table, spec)
    model = gbrt_fit(flat.X, flat.y, n_trees=40, depth=3, names=flat.names)
    rows = tree_gain_importance(model, flat.names)
    top = [r.name for r in rows[:3]]
    assert "icd:M89.9" in top
    assert rows[0].label == "Bone disorder (M89.9)"
    assert sum(r.gain for r in rows) == pytest.approx(1.0)


# --- attention ---------------------------------------------------------------


def _windows(n, n_valid, D=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        mask = np.arange(14) >= 14 - n_valid[i % len(n_valid)]
        out.append(SequenceWindow(np.where(mask[:, None], rng.normal(size=(14, D)), 0.0), mask,
                                  np.zeros(14, int), 3.0, f"P{i}", 0))
    return out


def test_zero_attention_params_are_uniform():
    params = init_params(4, Hyper(hidden=4, attn=3, dense=(4,)), seed=1)
    params.tensors["attn.v"][:] = 0.0
    prof = attention_profile(params, _windows(6, [3, 7, 14]))
    for row, w in zip(prof.rows, _windows(6, [3, 7, 14])):
        np.testing.assert_allclose(row[w.mask], 1 / w.mask.sum())
    np.testing.assert_allclose(prof.rows.sum(axis=1), 1.0)


def test_single_step_profile_mass_at_last_index():
    params = init_params(4, Hyper(hidden=4, attn=3, dense=(4,)), seed=2)
    prof = attention_profile(params, _windows(5, [1]))
    assert prof.mean_alpha[-1] == 1.0 and np.all(prof.mean_alpha[:-1] == 0)
    rows = list(csv.DictReader(io.StringIO(prof.to_csv())))
    assert rows[-1]["offset_from_last"] == "0" and rows[-1]["n_valid"] == "5"
    assert rows[0]["n_valid"] == "0"


def test_lstm_flat_predictor_round_trip():
    params = init_params(3, Hyper(hidden=4, attn=3, dense=(4,)), seed=3)
    (w,) = _windows(1, [4], D=3)
    f, x_flat, groups = lstm_flat_predictor(params, w)
    assert x_flat.shape == (12,) and len(groups) == 4
    assert f(x_flat[None])[0] == pytest.approx(forward(w, params)[0], abs=1e-14)
    a = shapley_exact(f, x_flat, np.zeros((2, 12)), groups=groups)
    assert a.additivity_gap < 1e-8


# --- summary / decision data -------------------------------------------------


def test_single_instance_single_feature_path():
    a = Attribution(1.0, np.array([2.5]), 3.5, "exact", [0], np.array([9.0]), instance_id="P1")
    data = summary_and_decision_data([a])
    assert data.paths == [("P1", 0, -1, 1.0), ("P1", 1, 0, 3.5)]
    summary, paths = summary_csvs(data, ["age"])
    assert summary.splitlines()[1].startswith("age,Age,9.0,2.5,P1")
    assert paths.splitlines()[1] == "P1,0,base,1.0"


def test_paths_end_at_prediction_and_top_order():
    f = lambda X: X @ np.arange(1.0, 6.0)
    rng = np.random.default_rng(5)
    bg = rng.normal(size=(10, 5))
    atts = [shapley_exact(f, rng.normal(size=5), bg, instance_id=f"I{i}") for i in range(40)]
    data = summary_and_decision_data(atts, top_k=3, n_paths=30, seed=2)
    mean_abs = np.abs([a.phi for a in atts]).mean(axis=0)
    assert data.top == list(np.argsort(-mean_abs)[:3])
    ends = {inst: cum for inst, step, _, cum in data.paths if step == 5}
    assert len(ends) == 30
    pred = {a.instance_id: a.prediction for a in atts}
    for inst, cum in ends.items():
        assert math.isclose(cum, pred[inst], abs_tol=1e-9)
    assert data == summary_and_decision_data(atts, top_k=3, n_paths=30, seed=2)


def test_lstm_step_attribution_players_are_steps():
    params = init_params(3, Hyper(hidden=4, attn=3, dense=(4,)), seed=6)
    (w,) = _windows(1, [3], D=3, seed=1)
    bg = _windows(6, [2, 5], D=3, seed=2)
    att = lstm_step_attribution(params, w, bg, n_perms=400, seed=1)
    assert att.features == [11, 12, 13] and att.instance_id == "P0"
    f, x_flat, groups = lstm_flat_predictor(params, w)
    rows = np.array([b.x[np.flatnonzero(b.mask)[-3:]].ravel() for b in bg if b.n_valid >= 3])
    exact = shapley_exact(f, x_flat, rows, groups=groups)
    assert np.all(np.abs(att.phi - exact.phi) <= 3 * att.se + 1e-12)
    assert lstm_step_attribution(params, w, _windows(2, [2], D=3), n_perms=3) is None
