import csv
import json

import pytest

from stayline.cli import EXIT_DIVERGED, EXIT_INPUT, EXIT_OK, EXIT_PARTIAL, EXIT_VERIFY, main, resolve_seed, verify_dir

FAST_BENCH = {
    "rf_trees": 3, "gbrt_trees": 5, "gbrt_depth": 2, "svr_epochs": 5, "top_k_labs": 5,
    "hyper": {"hidden": 4, "attn": 3, "dense": [4], "epochs": 2, "batch_size": 64},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def synth_dir(tmp_path):
    cfg = write_json(tmp_path / "synth.json", {"n_patients": 60, "planted_effects": {"bone_disorder": 3.0}})
    out = tmp_path / "run"
    assert main(["synth", "--config", cfg, "--out", str(out), "--seed", "4"]) == EXIT_OK
    return out


@pytest.fixture
def bench_cfg(tmp_path):
    return write_json(tmp_path / "bench.json", FAST_BENCH)


def test_synth_minimal_config(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"n_patients": 10})
    out = tmp_path / "a"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "patients.csv").open()))
    assert len(rows) == 10
    assert (out / "los_histogram.svg").read_text().startswith("<svg")


def test_synth_byte_identical(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"n_patients": 25, "seed": 3})
    for d in ("a", "b"):
        assert main(["synth", "--config", cfg, "--out", str(tmp_path / d)]) == EXIT_OK
    for name in ("patients.csv", "events.csv", "synth.json", "los_histogram.svg", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_synth_config_exit_2(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"n_patients": -1})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "x")]) == EXIT_INPUT
    assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "x")]) == EXIT_INPUT
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) == EXIT_INPUT
    assert "error:" in capsys.readouterr().err


def test_eval_without_train_names_missing_file(synth_dir, bench_cfg, capsys):
    assert main(["prep", "--config", bench_cfg, "--out", str(synth_dir)]) == EXIT_OK
    assert main(["eval", "--out", str(synth_dir)]) == EXIT_INPUT
    err = capsys.readouterr().err
    assert "missing input" in err and "train_log.json" in err


def test_prep_without_cohort_exit_2(tmp_path, capsys):
    assert main(["prep", "--out", str(tmp_path / "empty")]) == EXIT_INPUT
    assert "patients.csv" in capsys.readouterr().err


def test_pipeline_verify_and_tamper(synth_dir, bench_cfg):
    out = str(synth_dir)
    assert main(["prep", "--config", bench_cfg, "--out", out]) == EXIT_OK
    assert main(["train", "--out", out]) == EXIT_OK
    assert main(["eval", "--out", out]) == EXIT_OK
    assert main(["explain", "--out", out, "--instances", "3", "--n-perms", "2", "--background", "5"]) == EXIT_OK
    assert verify_dir(synth_dir) == []
    assert main(["verify", out]) == EXIT_OK
    table = synth_dir / "table1.csv"
    table.write_text(table.read_text().replace("Random Forest", "Random Forrest"))
    assert any("table1.csv" in p for p in verify_dir(synth_dir))
    assert main(["verify", out]) == EXIT_VERIFY


def test_report_regenerates_identical_svgs(synth_dir, bench_cfg):
    out = str(synth_dir)
    for argv in (["prep", "--config", bench_cfg, "--out", out], ["train", "--out", out], ["eval", "--out", out],
                 ["explain", "--out", out, "--instances", "2", "--n-perms", "2", "--background", "4"]):
        assert main(argv) == EXIT_OK
    svgs = sorted(p.name for p in synth_dir.glob("*.svg"))
    assert svgs == ["attention_profile.svg", "importance.svg", "los_histogram.svg", "residual_histogram.svg",
                    "training_curves.svg"]
    before = {n: (synth_dir / n).read_bytes() for n in svgs}
    for n in svgs:
        (synth_dir / n).unlink()
    assert main(["report", "--out", out]) == EXIT_OK
    assert {n: (synth_dir / n).read_bytes() for n in svgs} == before
    assert main(["verify", out]) == EXIT_OK


def test_report_on_empty_dir_exit_2(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == EXIT_INPUT


def test_divergence_exit_3(synth_dir, tmp_path):
    cfg = write_json(tmp_path / "div.json", {**FAST_BENCH, "hyper": {**FAST_BENCH["hyper"], "lr": 1e200}})
    out = str(synth_dir)
    assert main(["prep", "--config", cfg, "--out", out]) == EXIT_OK
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--out", out, "--models", "linreg,surgery_lstm"])
    assert code == EXIT_DIVERGED
    log = json.loads((synth_dir / "train_log.json").read_text())
    assert "surgery_lstm" in log["failures"]
    assert main(["eval", "--out", out]) == EXIT_PARTIAL
    assert "failed" in (synth_dir / "table1.csv").read_text()


@pytest.mark.filterwarnings("ignore:LOS bin:UserWarning")
def test_kfold_mode_flag(synth_dir, bench_cfg):
    out = str(synth_dir)
    assert main(["prep", "--config", bench_cfg, "--out", out, "--mode", "kfold"]) == EXIT_OK
    plan = json.loads((synth_dir / "split_plan.json").read_text())
    assert plan["mode"] == "kfold"
    assert sorted(p.name for p in synth_dir.glob("fold*")) == [f"fold{k}" for k in range(5)]


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv("STAYLINE_SEED", raising=False)
    assert resolve_seed(None, {}) == 0
    monkeypatch.setenv("STAYLINE_SEED", "9")
    assert resolve_seed(None, {}) == 9
    assert resolve_seed(None, {"seed": 5}) == 5
    assert resolve_seed(3, {"seed": 5}) == 3
    monkeypatch.setenv("STAYLINE_SEED", "x")
    with pytest.raises(Exception) as err:
        resolve_seed(None, {})
    assert getattr(err.value, "code", None) == EXIT_INPUT


def test_env_seed_reaches_artifacts(tmp_path, monkeypatch):
    monkeypatch.setenv("STAYLINE_SEED", "21")
    cfg = write_json(tmp_path / "c.json", {"n_patients": 5})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_OK
    doc = json.loads((tmp_path / "r" / "synth.json").read_text())
    assert doc["config"]["seed"] == 21 and doc["provenance"]["seed"] == 21
