import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stayline.cohort import SynthConfig, generate_cohort
from stayline.evalkit import (MODELS, BenchmarkConfig, linear_cohort, metrics, residual_histogram, run_benchmark,
                              table1_csv)
from stayline.model import Hyper

FAST = BenchmarkConfig(seed=3, rf_trees=5, gbrt_trees=10, gbrt_depth=3, svr_epochs=20, top_k_labs=5,
                       hyper=Hyper(hidden=6, attn=4, dense=(6,), epochs=2, batch_size=64))


def test_metric_examples():
    m = metrics([1.0, 3.0], [2.0, 4.0])
    assert (m.mae, m.mse, m.rmse, m.r2) == (1.0, 1.0, 1.0, 0.0)
    y = np.array([2.0, 5.0, 9.0])
    assert metrics(y, y).r2 == 1.0 and metrics(y, y).mae == 0.0
    assert metrics(y, np.full(3, y.mean())).r2 == pytest.approx(0.0, abs=1e-15)


def test_constant_target_flags_r2():
    m = metrics([4.0, 4.0], [3.0, 5.0])
    assert not m.r2_defined and math.isnan(m.r2)
    assert m.to_dict()["r2"] is None
    with pytest.raises(ValueError):
        metrics([], [])
    with pytest.raises(ValueError):
        metrics([1.0], [1.0, 2.0])


@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_metric_identities(seed, shift):
    rng = np.random.default_rng(seed)
    y, p = rng.normal(5, 3, 30), rng.normal(5, 3, 30)
    m = metrics(y, p)
    assert abs(m.rmse ** 2 - m.mse) <= 1e-9
    assert m.mae <= m.rmse + 1e-15
    assert m.r2 <= 1.0
    assert metrics(y + shift, p + shift).r2 == pytest.approx(m.r2, abs=1e-9)


def test_residual_histogram_examples():
    h = residual_histogram([0.0, 0.0, 0.1])
    assert h.bins == [(0, 3)]
    s = residual_histogram([-1.0, 1.0])
    assert s.bins == [(-1, 1), (1, 1)] and s.mean == 0.0 and s.skew == 0.0
    assert residual_histogram([0.49, 0.5, -0.5]).bins == [(0, 2), (1, 1)]
    with pytest.raises(ValueError):
        residual_histogram([])


def test_config_round_trip_and_validation():
    d = json.loads(json.dumps(FAST.to_dict()))
    assert BenchmarkConfig.from_dict(d) == FAST
    assert BenchmarkConfig.from_dict(d).hash() == FAST.hash()
    with pytest.raises(ValueError):
        BenchmarkConfig.from_dict({"models": ["knn"]})
    with pytest.raises(ValueError):
        BenchmarkConfig.from_dict({"mode": "bootstrap"})
    with pytest.raises(ValueError):
        BenchmarkConfig.from_dict({"learning": 1})


@pytest.fixture(scope="module")
def small_table():
    return generate_cohort(SynthConfig(n_patients=120, seed=8, planted_effects={"bone_disorder": 3.0}))


def test_holdout_benchmark_is_deterministic(small_table):
    a = run_benchmark(small_table, FAST)
    b = run_benchmark(small_table, FAST)
    assert a.to_json() == b.to_json()
    assert table1_csv(a) == table1_csv(b)
    assert a.complete and list(a.models) == list(MODELS)
    assert a.split["sizes"] == {"test": 18, "train": 84, "val": 18}
    rows = table1_csv(a).splitlines()
    assert rows[0] == "Model,MAE,MSE,RMSE,R2" and len(rows) == 7
    doc = json.loads(a.to_json())
    assert doc["provenance"]["config_sha256"] == FAST.hash()
    for name in MODELS:
        assert len(doc["models"][name]["residuals"]) == 18


def test_kfold_benchmark_pools_out_of_fold(small_table):
    cfg = BenchmarkConfig.from_dict({**FAST.to_dict(), "mode": "kfold", "k": 3, "models": ["linreg", "gbrt"]})
    with pytest.warns(UserWarning, match="merged"):
        rep = run_benchmark(small_table, cfg)
    for name in ("linreg", "gbrt"):
        d = rep.models[name].to_dict()
        assert len(d["residuals"]) == 120
        assert len(d["fold_r2"]) == 3
        assert d["fold_r2_mean"] == pytest.approx(np.mean(d["fold_r2"]))
    assert rep.split["evaluated_on"] == "pooled out-of-fold predictions"


def test_linear_cohort_is_realizable():
    table = generate_cohort(linear_cohort())
    rep = run_benchmark(table, BenchmarkConfig(models=("linreg",)))
    assert rep.r2("linreg") > 1 - 1e-6


def test_divergence_gives_partial_report(small_table):
    cfg = BenchmarkConfig.from_dict({**FAST.to_dict(), "models": ["linreg", "surgery_lstm"],
                                     "hyper": {**FAST.hyper.to_dict(), "lr": 1e200}})
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        rep = run_benchmark(small_table, cfg)
    assert not rep.complete
    assert "surgery_lstm" in rep.failures and "linreg" in rep.models
    assert "failed" in table1_csv(rep)

