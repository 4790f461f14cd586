"""``stayline`` command line: synth, prep, train, eval, explain, report, verify.

Every stage works inside one run directory. It reads upstream artifacts from
there, writes its own, and records each file in ``manifest.json`` with its
sha256, config hash and seed. JSON and SVG artifacts also embed that
provenance; ``verify`` recomputes everything.

Exit codes: 0 ok, 1 verification failure, 2 missing input or bad config,
3 model divergence, 4 partial benchmark.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import charts
from .baselines import Boosted, Forest, LinearModel
from .cohort import RowError, SchemaError, SynthConfig, cohort_summary, generate_cohort, load_cohort, write_cohort
from .evalkit import (MODELS, BenchmarkConfig, Fitted, assemble_report, cohort_hash, evaluate_fitted,
                      fit_models, metrics, prepare, sha256_text, table1_csv)
from .explain import (attention_profile, importance_csv, lstm_step_attribution, shapley_sampled,
                      summary_and_decision_data, summary_csvs, tree_gain_importance)
from .model import SurgeryLstmParams
from .numerics import Prng
from .prep import FeatureSpec, SplitPlan, final_windows, make_split, table_bins, windows_csv

log = logging.getLogger("stayline")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_DIVERGED, EXIT_PARTIAL = 0, 1, 2, 3, 4
MANIFEST = "manifest.json"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


class RunDir:
    """Artifact directory with a provenance manifest."""

    def __init__(self, root, stage: str, config_sha256: str = "", seed: int = 0):
        self.root = Path(root)
        self.stage = stage
        self.config_sha256 = config_sha256
        self.seed = seed

    @property
    def provenance(self) -> dict:
        return {"stage": self.stage, "config_sha256": self.config_sha256, "seed": self.seed}

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, *names: str) -> list[Path]:
        paths = [self.path(n) for n in names]
        for p in paths:
            if not p.is_file():
                raise CliError(EXIT_INPUT, f"missing input: {p}")
        return paths

    def read_json(self, name: str) -> dict:
        (p,) = self.require(name)
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_INPUT, f"{p}: invalid JSON ({exc})") from exc

    def write_text(self, name: str, text: str) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self._record(name, p)
        return p

    def write_json(self, name: str, obj: dict) -> Path:
        return self.write_text(name, canonical_json({**obj, "provenance": self.provenance}))

    def write_svg(self, name: str, render) -> Path:
        return self.write_text(name, render(self.provenance))

    def _record(self, name: str, p: Path) -> None:
        mp = self.path(MANIFEST)
        doc = json.loads(mp.read_text(encoding="utf-8")) if mp.is_file() else {"artifacts": {}}
        doc["artifacts"][name] = {"sha256": sha256_file(p), **self.provenance}
        mp.write_text(canonical_json(doc), encoding="utf-8")


# --- configuration -----------------------------------------------------------


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_INPUT, f"missing input: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CliError(EXIT_INPUT, f"{p}: config must be a JSON object")
    return doc


def resolve_seed(flag: int | None, config: dict) -> int:
    """--seed, then the config file, then STAYLINE_SEED, then 0."""
    if flag is not None:
        return flag
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("STAYLINE_SEED")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise CliError(EXIT_INPUT, f"STAYLINE_SEED must be an integer, got {env!r}") from exc
    return 0


def _load_table(run: RunDir):
    pp, ep = run.require("patients.csv", "events.csv")
    try:
        return load_cohort(pp, ep)
    except (SchemaError, RowError) as exc:
        raise CliError(EXIT_INPUT, str(exc)) from exc


def _run_config(run: RunDir) -> BenchmarkConfig:
    doc = run.read_json("run_config.json")
    try:
        return BenchmarkConfig.from_dict(doc["benchmark"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad run_config.json: {exc}") from exc


def _parts(plan: SplitPlan) -> list[int | None]:
    return [None] if plan.mode == "holdout" else sorted({int(v) for v in plan.assignment.values()})


def _part_dir(part) -> str:
    return "holdout" if part is None else f"fold{part}"


def _reopen(args, stage: str) -> tuple[RunDir, BenchmarkConfig]:
    probe = RunDir(args.out, stage)
    cfg = _run_config(probe)
    return RunDir(args.out, stage, cfg.hash(), cfg.seed), cfg


# --- charts (shared by the stages and `report`) ------------------------------


def render_los_histogram(summary: dict):
    hist = {int(k): v for k, v in summary["los_histogram"].items()}
    days = list(range(0, max(hist, default=0) + 1))
    n = summary["n"]
    return lambda prov: charts.bar_chart([str(d) for d in days], [hist.get(d, 0) / n for d in days],
                                         "Length of stay distribution", "LOS (days)", "share of patients", prov)


def render_curves(train_log: dict):
    series = {}
    for name in ("surgery_lstm", "bilstm_noattn"):
        rows = train_log.get("logs", {}).get(name, {}).get("epochs", [])
        if rows:
            series[f"{name} train MAE"] = [r["train_mae"] for r in rows]
            if "val_mae" in rows[0]:
                series[f"{name} val MAE"] = [r["val_mae"] for r in rows]
    return lambda prov: charts.line_chart(series, "Training curves", "epoch", "MAE (days)", prov)


def render_residuals(report: dict, model: str = "surgery_lstm"):
    entry = report["models"].get(model) or next(iter(report["models"].values()))
    bins = entry["residual_histogram"]["bins"]
    lo, hi = (bins[0][0], bins[-1][0]) if bins else (0, 0)
    counts = dict((c, k) for c, k in bins)
    centers = list(range(lo, hi + 1))
    return lambda prov: charts.bar_chart([str(c) for c in centers], [counts.get(c, 0) for c in centers],
                                         f"Residuals ({entry['display_name']})", "observed - predicted (days)",
                                         "patients", prov)


def render_importance(csv_text: str, top: int = 20):
    rows = list(csv.DictReader(io.StringIO(csv_text)))[:top]
    return lambda prov: charts.hbar_chart([r["label"] for r in rows], [float(r["importance"]) for r in rows],
                                          "Gain importance (gradient boosted trees)", prov)


def render_attention(csv_text: str):
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    xs = [int(r["offset_from_last"]) for r in rows]
    ys = [float(r["mean_alpha"]) for r in rows]
    return lambda prov: charts.line_chart({"mean attention": ys}, "Attention by step", "steps before last event",
                                          "mean alpha", prov, x_values=xs)


# --- stages ------------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = load_config(args.config)
    doc["seed"] = resolve_seed(args.seed, doc)
    try:
        cfg = SynthConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad synth config: {exc}") from exc
    cfg_dict = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    run = RunDir(args.out, "synth", sha256_text(json.dumps(cfg_dict, sort_keys=True)), cfg.seed)
    table = generate_cohort(cfg)
    pp, ep = write_cohort(table, run.root)
    run._record("patients.csv", pp)
    run._record("events.csv", ep)
    summary = cohort_summary(table).to_dict()
    run.write_json("synth.json", {"config": cfg_dict, "summary": summary, "cohort_sha256": cohort_hash(table)})
    run.write_svg("los_histogram.svg", render_los_histogram(summary))
    print(f"synth: {len(table.patients)} patients, {len(table.events)} events -> {run.root}")
    return EXIT_OK


def cmd_prep(args) -> int:
    doc = load_config(args.config)
    doc = dict(doc.get("benchmark", doc))
    doc["seed"] = resolve_seed(args.seed, doc)
    if args.mode:
        doc["mode"] = args.mode
    try:
        cfg = BenchmarkConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad benchmark config: {exc}") from exc
    run = RunDir(args.out, "prep", cfg.hash(), cfg.seed)
    table = _load_table(run)
    plan = make_split(table_bins(table), cfg.ratios, seed=cfg.seed, mode=cfg.mode, k=cfg.k)
    run.write_json("run_config.json", {"benchmark": cfg.to_dict(), "cohort_sha256": cohort_hash(table)})
    run.write_json("split_plan.json", plan.to_dict())
    for part in _parts(plan):
        prep = prepare(table, plan, cfg.top_k_labs, fold=part)
        run.write_json(f"{_part_dir(part)}/feature_spec.json", prep.spec.to_dict())
        if args.windows and part is None:
            run.write_text("windows.csv", windows_csv([w for ws in prep.windows.values() for w in ws], prep.spec))
    print(f"prep: {plan.mode} split of {len(plan.assignment)} patients -> {run.root}")
    return EXIT_OK


def _prepared(run: RunDir, cfg: BenchmarkConfig):
    table = _load_table(run)
    plan = SplitPlan.from_dict(run.read_json("split_plan.json"))
    for part in _parts(plan):
        spec = FeatureSpec.from_dict(run.read_json(f"{_part_dir(part)}/feature_spec.json"))
        yield part, prepare(table, plan, cfg.top_k_labs, spec=spec, fold=part)


def _save_model(run: RunDir, name: str, model) -> None:
    if isinstance(model, SurgeryLstmParams):
        # reuse the checkpoint writer, then re-emit with provenance
        path = run.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save(path)
        run.write_json(name, json.loads(path.read_text(encoding="utf-8")))
    else:
        run.write_json(name, model.to_dict())


def load_model(path: Path):
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") == "stayline-surgery-lstm":
        return SurgeryLstmParams.load(path)
    kind = doc.get("kind")
    loader = {"linear": LinearModel, "forest": Forest, "boosted": Boosted}.get(kind)
    if loader is None:
        raise CliError(EXIT_INPUT, f"{path}: unknown model kind {kind!r}")
    return loader.from_dict(doc)


def cmd_train(args) -> int:
    run, cfg = _reopen(args, "train")
    if args.models:
        cfg = replace(cfg, models=tuple(args.models.split(",")))
        cfg.validate()
    logs, failures = {}, {}
    for part, prep in _prepared(run, cfg):
        fitted = fit_models(prep, cfg)
        for name, model in fitted.models.items():
            _save_model(run, f"models/{_part_dir(part)}/{name}.json", model)
        tag = "" if part is None else f"fold {part}: "
        failures.update({n: tag + msg for n, msg in fitted.failures.items()})
        if part is None or part == 0:
            logs = fitted.logs
    trained = [n for n in cfg.models if n not in failures]
    run.write_json("train_log.json", {"models": trained, "logs": logs, "failures": failures})
    run.write_svg("training_curves.svg", render_curves({"logs": logs}))
    print(f"train: {len(trained)}/{len(cfg.models)} models -> {run.root / 'models'}")
    if any("diverged" in msg for msg in failures.values()):
        print(f"error: model divergence: {failures}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args) -> int:
    run, cfg = _reopen(args, "eval")
    tlog = run.read_json("train_log.json")
    plan = SplitPlan.from_dict(run.read_json("split_plan.json"))
    table = _load_table(run)
    outcomes_parts = []
    for part, prep in _prepared(run, cfg):
        fitted = Fitted()
        for name in tlog["models"]:
            (p,) = run.require(f"models/{_part_dir(part)}/{name}.json")
            fitted.models[name] = load_model(p)
        outcomes_parts.append(evaluate_fitted(prep, fitted))
    provenance = {"cohort_sha256": cohort_hash(table), "config_sha256": cfg.hash(), "seed": cfg.seed}
    if plan.mode == "holdout":
        report = assemble_report(outcomes_parts[0], tlog.get("logs", {}), tlog["failures"], plan, cfg, provenance)
    else:
        outcomes, fold_r2 = {}, {}
        for name in tlog["models"]:
            ys = [o[name][0] for o in outcomes_parts]
            ps = [o[name][1] for o in outcomes_parts]
            outcomes[name] = (np.concatenate(ys), np.concatenate(ps))
            fold_r2[name] = [metrics(y, p).r2 for y, p in zip(ys, ps)]
        report = assemble_report(outcomes, {}, tlog["failures"], plan, cfg, provenance, fold_r2)
    doc = report.to_dict()
    run.write_text("report.json", canonical_json(doc))
    run.write_text("table1.csv", table1_csv(report))
    run.write_svg("residual_histogram.svg", render_residuals(doc))
    print(table1_csv(report), end="")
    if not report.complete:
        print(f"error: partial benchmark, failed models: {sorted(report.failures)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _lstm_step_csv(params, prep, test_windows, args, seed: int) -> str:
    """Step-level Shapley values on test final windows (one player per valid step)."""
    rng = Prng(seed).split("explain-lstm").numpy()
    train_final = final_windows(prep.windows["train"])
    bg = [train_final[i] for i in np.sort(rng.choice(len(train_final), size=min(args.background, len(train_final)),
                                                      replace=False))]
    picks = np.sort(rng.choice(len(test_windows), size=min(args.instances, len(test_windows)), replace=False))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance_id", "step", "offset_from_last", "phi", "se"])
    T = test_windows[0].x.shape[0] if test_windows else 0
    for i in picks:
        att = lstm_step_attribution(params, test_windows[i], bg, args.n_perms, seed=seed + int(i))
        if att is None:
            continue
        for step, phi, se in zip(att.features, att.phi, att.se):
            w.writerow([att.instance_id, step, step - (T - 1), repr(float(phi)), repr(float(se))])
    return buf.getvalue()


def cmd_explain(args) -> int:
    run, cfg = _reopen(args, "explain")
    tlog = run.read_json("train_log.json")
    part, prep = next(iter(_prepared(run, cfg)))
    mdir = f"models/{_part_dir(part)}"
    notes = []
    if "gbrt" in tlog["models"]:
        (p,) = run.require(f"{mdir}/gbrt.json")
        gbrt = load_model(p)
        imp_csv = importance_csv(tree_gain_importance(gbrt, prep.flat.names))
        run.write_text("importance.csv", imp_csv)
        run.write_svg("importance.svg", render_importance(imp_csv))
        train_flat = prep.flat.subset(prep.train_ids)
        test_flat = prep.flat.subset(prep.test_ids)
        rng = Prng(cfg.seed).split("explain").numpy()
        bg_rows = rng.choice(len(train_flat.y), size=min(args.background, len(train_flat.y)), replace=False)
        background = train_flat.X[np.sort(bg_rows)]
        picks = np.sort(rng.choice(len(test_flat.y), size=min(args.instances, len(test_flat.y)), replace=False))
        attributions = [
            shapley_sampled(gbrt.predict, test_flat.X[i], background, args.n_perms, seed=cfg.seed + int(i),
                            instance_id=test_flat.patient_ids[i])
            for i in picks
        ]
        data = summary_and_decision_data(attributions, top_k=20, n_paths=30, seed=cfg.seed)
        summary, paths = summary_csvs(data, prep.flat.names)
        run.write_text("shap_summary.csv", summary)
        run.write_text("decision_paths.csv", paths)
    else:
        notes.append("gbrt not trained: importance and Shapley tables skipped")
    if "surgery_lstm" in tlog["models"]:
        (p,) = run.require(f"{mdir}/surgery_lstm.json")
        params = load_model(p)
        test_ids = set(prep.test_ids)
        wins = final_windows([w for w in prep.windows["test"] if w.patient_id in test_ids])
        prof_csv = attention_profile(params, wins).to_csv()
        run.write_text("attention_profile.csv", prof_csv)
        run.write_svg("attention_profile.svg", render_attention(prof_csv))
        run.write_text("lstm_step_shap.csv", _lstm_step_csv(params, prep, wins, args, cfg.seed))
    else:
        notes.append("surgery_lstm not trained: attention profile skipped")
    run.write_json("explain.json", {"n_perms": args.n_perms, "instances": args.instances,
                                    "background": args.background, "value_function": "interventional",
                                    "lstm_step_shap": "extension: step-level attributions for the sequence model",
                                    "notes": notes})
    for n in notes:
        print(f"explain: {n}")
    print(f"explain: outputs -> {run.root}")
    return EXIT_OK


def cmd_report(args) -> int:
    """Re-render every chart from the stored tables."""
    root = Path(args.out)
    written = []
    if (root / "synth.json").is_file():
        synth = json.loads((root / "synth.json").read_text(encoding="utf-8"))
        prov = synth["provenance"]
        RunDir(root, "synth", prov["config_sha256"], prov["seed"]).write_svg(
            "los_histogram.svg", render_los_histogram(synth["summary"]))
        written.append("los_histogram.svg")
    if (root / "run_config.json").is_file():
        run, _ = _reopen(args, "train")
        if run.path("train_log.json").is_file():
            run.write_svg("training_curves.svg", render_curves(run.read_json("train_log.json")))
            written.append("training_curves.svg")
        run.stage = "eval"
        if run.path("report.json").is_file():
            run.write_svg("residual_histogram.svg", render_residuals(run.read_json("report.json")))
            written.append("residual_histogram.svg")
        run.stage = "explain"
        if run.path("importance.csv").is_file():
            run.write_svg("importance.svg", render_importance(run.path("importance.csv").read_text(encoding="utf-8")))
            written.append("importance.svg")
        if run.path("attention_profile.csv").is_file():
            run.write_svg("attention_profile.svg",
                          render_attention(run.path("attention_profile.csv").read_text(encoding="utf-8")))
            written.append("attention_profile.svg")
    if not written:
        raise CliError(EXIT_INPUT, f"missing input: nothing to report in {root}")
    print(f"report: rendered {', '.join(written)}")
    return EXIT_OK


def verify_dir(root) -> list[str]:
    """Problems found in a run directory (empty when everything checks out)."""
    root = Path(root)
    mp = root / MANIFEST
    if not mp.is_file():
        return [f"missing {mp}"]
    problems = []
    for name, entry in sorted(json.loads(mp.read_text(encoding="utf-8"))["artifacts"].items()):
        p = root / name
        if not p.is_file():
            problems.append(f"{name}: missing")
            continue
        if sha256_file(p) != entry["sha256"]:
            problems.append(f"{name}: sha256 mismatch")
            continue
        text = p.read_text(encoding="utf-8")
        if name.endswith(".json") and name != "report.json":
            prov = json.loads(text).get("provenance", {})
            if prov.get("config_sha256") != entry["config_sha256"] or prov.get("seed") != entry["seed"]:
                problems.append(f"{name}: embedded provenance disagrees with the manifest")
        elif name == "report.json":
            prov = json.loads(text).get("provenance", {})
            if prov.get("config_sha256") != entry["config_sha256"]:
                problems.append(f"{name}: embedded config hash disagrees with the manifest")
        elif name.endswith(".svg"):
            if f"config_sha256={entry['config_sha256']}" not in text or f"seed={entry['seed']}" not in text:
                problems.append(f"{name}: embedded provenance disagrees with the manifest")
    return problems


def cmd_verify(args) -> int:
    problems = verify_dir(args.dir)
    for p in problems:
        print(f"FAIL {p}")
    if problems:
        return EXIT_VERIFY
    n = len(json.loads((Path(args.dir) / MANIFEST).read_text(encoding="utf-8"))["artifacts"])
    print(f"verify: {n} artifacts OK")
    return EXIT_OK


# --- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stayline", description="LOS prediction pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mode", choices=("holdout", "kfold"), default=None)
        if config:
            p.add_argument("--config", default=None, help="JSON config file")

    common(sub.add_parser("synth", help="generate a synthetic cohort"))
    p = sub.add_parser("prep", help="split patients and fit feature specs")
    common(p)
    p.add_argument("--windows", action="store_true", help="also export windows.csv")
    p = sub.add_parser("train", help="fit the benchmark models")
    common(p, config=False)
    p.add_argument("--models", default=None, help=f"comma list from {','.join(MODELS)}")
    common(sub.add_parser("eval", help="score models on held-out patients"), config=False)
    p = sub.add_parser("explain", help="importance, Shapley and attention tables")
    common(p, config=False)
    p.add_argument("--n-perms", type=int, default=10)
    p.add_argument("--instances", type=int, default=30)
    p.add_argument("--background", type=int, default=100)
    common(sub.add_parser("report", help="re-render charts from stored tables"), config=False)
    p = sub.add_parser("verify", help="check artifact hashes and provenance")
    p.add_argument("dir")
    return parser


COMMANDS = {
    "synth": cmd_synth, "prep": cmd_prep, "train": cmd_train, "eval": cmd_eval,
    "explain": cmd_explain, "report": cmd_report, "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
