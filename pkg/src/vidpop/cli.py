"""Command-line pipeline driver.

Subcommands: synth, prepare, train-tabular, train-fusion, ablate, predict,
report. Every command requires an explicit --seed (reproducibility is part
of the contract; there is no wall-clock default) and writes its artifacts
under one --out run directory. Exit codes: 0 ok, 2 bad input, 3 missing
pipeline state, 4 numeric failure. Failures also leave a machine-readable
error.json in the run directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import ablate as ablate_mod
from . import evaluate as ev
from .errors import MissingArtifact, VidpopError
from .features import (
    DaypartBounds,
    FeatureMatrix,
    assemble_feature_matrix,
    fit_median_stats,
    fit_tag_frequency,
    iqr_keep_rows,
    log1p_value,
    to_raw_predictions,
    train_time_range,
)
from .fusion import (
    TrainConfig,
    build_fusion_net,
    load_fusion,
    make_branch_spec,
    predict_fusion,
    save_fusion,
    train_fusion,
)
from .gbdt import (
    GbdtParams,
    cross_validate,
    feature_importance,
    fit_gbdt,
    load_gbdt,
    predict_gbdt,
    save_gbdt,
    tune_gbdt,
)
from .ingest import TARGETS, generate_synthetic, validate_bundle, write_bundle
from .util import derive_seed, dump_json, load_json

DEFAULT_CONFIG = {
    "synth": {"n_train": 240, "n_test": 60, "dims": None},
    "daypart": {"sleep_end": 7, "work_start": 9, "work_end": 17},
    "iqr_k": 1.5,
    "tag_corpus": "train_test",
    "gbdt": {},
    "tune": {"budget": 0, "space": None, "n_folds": 10},
    "cv_folds": 10,
    "fusion": {
        "unified_width": 256,
        "head_widths": [512, 128, 32, 1],
        "learning_rate": 1e-3,
        "batch_size": 32,
        "max_epochs": 200,
        "patience": 10,
        "val_fraction": 0.2,
        "dropout_rate": 0.3,
    },
    "ablation": {
        "mode": "all",
        "labels_file": None,
        "targets": list(TARGETS),
        "unified_width": 64,
        "head_widths": [32, 8, 1],
    },
    "report_split": "test",
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def resolve_config(config_arg: str | None) -> dict:
    if not config_arg:
        return json.loads(json.dumps(DEFAULT_CONFIG))
    if config_arg.strip().startswith("{"):
        override = json.loads(config_arg)
    else:
        override = load_json(config_arg)
    return _merge(DEFAULT_CONFIG, override)


def _record_run(out: Path, command: str, seed: int, config: dict) -> None:
    path = out / "run.json"
    doc = load_json(path) if path.exists() else {"commands": {}}
    doc["commands"][command] = {"seed": seed, "config": config}
    dump_json(doc, path)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(str(path), hint)
    return path


def _daypart_bounds(config: dict) -> DaypartBounds:
    d = config["daypart"]
    return DaypartBounds(
        sleep_end=int(d["sleep_end"]), work_start=int(d["work_start"]), work_end=int(d["work_end"])
    )


def _write_targets_csv(path: Path, ids: list[str], by_target: dict[str, np.ndarray]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id"] + list(TARGETS))
        for i, vid in enumerate(ids):
            writer.writerow([vid] + [repr(float(by_target[t][i])) for t in TARGETS])


def _read_targets_csv(path: Path) -> tuple[list[str], dict[str, np.ndarray]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        ids, cols = [], {t: [] for t in header[1:]}
        for row in reader:
            ids.append(row[0])
            for t, v in zip(header[1:], row[1:]):
                cols[t].append(float(v))
    return ids, {t: np.asarray(v, dtype=np.float64) for t, v in cols.items()}


# --- commands -----------------------------------------------------------------


def cmd_synth(args, config) -> int:
    out = Path(args.out)
    synth = config["synth"]
    dims = synth.get("dims")
    if dims is not None:
        dims = {int(k): int(v) for k, v in dims.items()}
    bundle = generate_synthetic(
        seed=args.seed, n_train=int(synth["n_train"]), n_test=int(synth["n_test"]), dims=dims
    )
    manifest = write_bundle(bundle, out / "data")
    _record_run(out, "synth", args.seed, config)
    print(f"wrote synthetic bundle: {manifest}")
    return 0


def cmd_prepare(args, config) -> int:
    out = Path(args.out)
    bundle = validate_bundle(args.manifest)
    bounds = _daypart_bounds(config)

    stats = fit_median_stats(bundle.train)
    captions = [r.caption for r in bundle.train.rows]
    if config["tag_corpus"] == "train_test":
        captions += [r.caption for r in bundle.test.rows]
    freq = fit_tag_frequency(captions)
    t_range = train_time_range(bundle.train)

    keep, flagged = iqr_keep_rows(bundle.train, k=float(config["iqr_k"]))
    train_ids = bundle.train.ids()
    kept_ids = [train_ids[i] for i in np.flatnonzero(keep)]
    dropped_ids = [train_ids[i] for i in np.flatnonzero(~keep)]

    x_train = assemble_feature_matrix(bundle.train, stats, freq, t_range, bounds)
    x_test = assemble_feature_matrix(bundle.test, stats, freq, t_range, bounds)

    prep = out / "prep"
    dump_json(stats.to_json(), prep / "median_stats.json")
    dump_json(freq.to_json(), prep / "tag_frequency.json")
    x_train.to_csv(prep / "features_train.csv")
    x_test.to_csv(prep / "features_test.csv")
    _write_targets_csv(
        prep / "targets_train.csv", train_ids, {t: bundle.train.target_vector(t) for t in TARGETS}
    )
    test_has_targets = len(bundle.test) > 0 and all(r.targets is not None for r in bundle.test.rows)
    if test_has_targets:
        _write_targets_csv(
            prep / "targets_test.csv",
            bundle.test.ids(),
            {t: bundle.test.target_vector(t) for t in TARGETS},
        )
    dump_json(
        {
            "k": float(config["iqr_k"]),
            "kept_ids": kept_ids,
            "dropped_ids": dropped_ids,
            "flagged_per_target": flagged,
        },
        prep / "iqr_report.json",
    )
    dump_json(
        {
            "n_train": len(bundle.train),
            "n_test": len(bundle.test),
            "rows_kept": len(kept_ids),
            "rows_dropped": len(dropped_ids),
            "time_range": {"train_min": t_range[0], "train_max": t_range[1]},
            "daypart": config["daypart"],
            "tag_corpus": config["tag_corpus"],
            "embedding_coverage": bundle.coverage_report(),
        },
        prep / "prep_report.json",
    )
    _record_run(out, "prepare", args.seed, config)
    print(f"prepared features: {len(kept_ids)} train rows kept, {len(dropped_ids)} dropped")
    return 0


def _load_prep(out: Path):
    prep = out / "prep"
    hint = "run `vidpop prepare` first"
    x_train = FeatureMatrix.from_csv(_require(prep / "features_train.csv", hint))
    x_test = FeatureMatrix.from_csv(_require(prep / "features_test.csv", hint))
    train_ids, y_train = _read_targets_csv(_require(prep / "targets_train.csv", hint))
    iqr = load_json(_require(prep / "iqr_report.json", hint))
    return x_train, x_test, train_ids, y_train, iqr


def cmd_train_tabular(args, config) -> int:
    out = Path(args.out)
    x_train, _, train_ids, y_train, iqr = _load_prep(out)
    kept = set(iqr["kept_ids"])
    keep_mask = np.asarray([vid in kept for vid in train_ids], dtype=bool)
    x_kept = x_train.subset(keep_mask)

    tune_cfg = config["tune"]
    n_folds = int(config["cv_folds"])
    metrics = {}
    models_dir = out / "models"
    for target in TARGETS:
        y = log1p_value(y_train[target][keep_mask])
        tuned = False
        params = GbdtParams(seed=derive_seed(args.seed, "gbdt", target), **config["gbdt"])
        if int(tune_cfg["budget"]) > 0 and tune_cfg["space"]:
            result = tune_gbdt(
                x_kept,
                y,
                space=tune_cfg["space"],
                budget=int(tune_cfg["budget"]),
                seed=derive_seed(args.seed, "tune", target),
                n_folds=n_folds,
                base=params,
            )
            params = result.best
            tuned = True
        model = fit_gbdt(x_kept, y, params)
        save_gbdt(model, models_dir / f"gbdt_{target}.json")
        cv = cross_validate(x_kept, y, params, n_folds=n_folds, seed=derive_seed(args.seed, "cv", target))
        metrics[target] = {
            "cv_mape_mean": cv["mape_mean"],
            "cv_mse_mean": cv["mse_mean"],
            "folds": cv["folds"],
            "params": params.__dict__,
            "tuned": tuned,
            "note": None if tuned else "tune budget 0: defaults used",
            "n_rows": int(keep_mask.sum()),
        }
    dump_json(metrics, models_dir / "metrics_tabular.json")
    _record_run(out, "train-tabular", args.seed, config)
    for target in TARGETS:
        print(f"tabular {target}: cv MAPE {metrics[target]['cv_mape_mean']:.2f}%")
    return 0


def cmd_train_fusion(args, config) -> int:
    out = Path(args.out)
    bundle = validate_bundle(args.manifest)
    _, _, train_ids, y_train, iqr = _load_prep(out)
    kept = set(iqr["kept_ids"])

    source_ids = sorted(bundle.embeddings)
    usable_idx = [
        i
        for i, vid in enumerate(train_ids)
        if vid in kept
        and all(vid in bundle.embeddings[sid].vectors for sid in source_ids)
    ]
    dropped_missing = int(len(kept)) - len(usable_idx)
    if len(usable_idx) < 10:
        raise MissingArtifact(
            str(args.manifest), f"only {len(usable_idx)} rows have full embedding coverage"
        )
    usable_ids = [train_ids[i] for i in usable_idx]
    feats = {
        sid: np.stack([bundle.embeddings[sid].vectors[vid] for vid in usable_ids])
        for sid in source_ids
    }

    fcfg = config["fusion"]
    specs = [
        make_branch_spec(sid, bundle.embeddings[sid].dim, int(fcfg["unified_width"]))
        for sid in source_ids
    ]
    models_dir = out / "models"
    metrics = {}
    for target in TARGETS:
        seed_t = derive_seed(args.seed, "fusion", target)
        cfg = TrainConfig(
            learning_rate=float(fcfg["learning_rate"]),
            batch_size=int(fcfg["batch_size"]),
            max_epochs=int(fcfg["max_epochs"]),
            patience=int(fcfg["patience"]),
            val_fraction=float(fcfg["val_fraction"]),
            dropout_rate=float(fcfg["dropout_rate"]),
            seed=seed_t,
        )
        net = build_fusion_net(
            specs, list(fcfg["head_widths"]), seed=seed_t, dropout_rate=cfg.dropout_rate
        )
        y_raw = y_train[target][usable_idx]
        result = train_fusion(net, feats, log1p_value(y_raw), cfg)
        save_fusion(result["net"], models_dir / f"fusion_{target}.json")
        val_idx = result["val_indices"]
        val_batch = {sid: feats[sid][val_idx] for sid in feats}
        val_mape = ev.mape(y_raw[val_idx], predict_fusion(result["net"], val_batch))
        metrics[target] = {
            "best_val_mse": result["best_val_mse"],
            "best_epoch": result["history"]["best_epoch"],
            "epochs_run": len(result["history"]["val_mse"]),
            "val_mape": val_mape,
            "n_rows": len(usable_ids),
            "n_dropped_missing_embedding": dropped_missing,
        }
    dump_json(metrics, models_dir / "metrics_fusion.json")
    _record_run(out, "train-fusion", args.seed, config)
    for target in TARGETS:
        print(
            f"fusion {target}: val MAPE {metrics[target]['val_mape']:.2f}% "
            f"(best epoch {metrics[target]['best_epoch']})"
        )
    return 0


def cmd_ablate(args, config) -> int:
    out = Path(args.out)
    bundle = validate_bundle(args.manifest)
    _, _, _, _, iqr = _load_prep(out)
    acfg = config["ablation"]
    subsets = ablate_mod.enumerate_subsets(
        set(bundle.embeddings), mode=acfg["mode"], labels_file=acfg.get("labels_file")
    )
    fcfg = config["fusion"]
    cfg = TrainConfig(
        learning_rate=float(fcfg["learning_rate"]),
        batch_size=int(fcfg["batch_size"]),
        max_epochs=int(fcfg["max_epochs"]),
        patience=int(fcfg["patience"]),
        val_fraction=float(fcfg["val_fraction"]),
        dropout_rate=float(fcfg["dropout_rate"]),
        seed=args.seed,
    )
    table = ablate_mod.run_ablation(
        bundle,
        subsets,
        targets=tuple(acfg["targets"]),
        cfg=cfg,
        seed=args.seed,
        unified_width=int(acfg["unified_width"]),
        head_widths=list(acfg["head_widths"]),
        checkpoint_dir=out / "ablation" / "cells",
        keep_ids=set(iqr["kept_ids"]),
    )
    table.to_csv(out / "ablation" / "ablation.csv")
    best = ablate_mod.highlight_best(table)
    dump_json(best, out / "ablation" / "best.json")
    _record_run(out, "ablate", args.seed, config)
    print(f"ablation grid: {len(table.rows)} subsets x {len(acfg['targets'])} targets")
    for col, info in best.items():
        print(f"  best {col}: {info['label']} ({info['mape']:.2f}%)")
    return 0


def _predict_split(out: Path, config: dict, manifest: str, split: str) -> Path:
    bundle = validate_bundle(manifest)
    x_train, x_test, _, _, _ = _load_prep(out)
    x = x_train if split == "train" else x_test
    table = bundle.train if split == "train" else bundle.test

    models_dir = out / "models"
    hint = "run `vidpop train-tabular` and `vidpop train-fusion` first"
    gbdt_models = {t: load_gbdt(_require(models_dir / f"gbdt_{t}.json", hint)) for t in TARGETS}
    fusion_nets = {t: load_fusion(_require(models_dir / f"fusion_{t}.json", hint)) for t in TARGETS}

    source_ids = sorted(bundle.embeddings)
    ids = x.row_ids
    covered = [
        i for i, vid in enumerate(ids)
        if all(vid in bundle.embeddings[sid].vectors for sid in source_ids)
    ]
    covered_set = set(covered)
    feats = {
        sid: np.stack([bundle.embeddings[sid].vectors[ids[i]] for i in covered]) if covered else None
        for sid in source_ids
    }

    tab_preds = {t: to_raw_predictions(predict_gbdt(gbdt_models[t], x)) for t in TARGETS}
    fus_preds = {}
    for t in TARGETS:
        if covered:
            fus_preds[t] = predict_fusion(fusion_nets[t], feats)
        else:
            fus_preds[t] = np.zeros(0)

    path = out / f"predictions_{split}.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "target", "pred_tabular", "pred_fusion", "pred_ensemble"])
        pos_in_covered = {row_i: k for k, row_i in enumerate(covered)}
        for i, vid in enumerate(ids):
            for t in TARGETS:
                tab = float(tab_preds[t][i])
                if i in covered_set:
                    fus = float(fus_preds[t][pos_in_covered[i]])
                    ens = (tab + fus) / 2.0
                    writer.writerow([vid, t, repr(tab), repr(fus), repr(ens)])
                else:
                    # no embedding vector for this row: ensemble falls back to tabular
                    writer.writerow([vid, t, repr(tab), "", repr(tab)])
    return path


def cmd_predict(args, config) -> int:
    out = Path(args.out)
    path = _predict_split(out, config, args.manifest, args.split)
    _record_run(out, f"predict-{args.split}", args.seed, config)
    print(f"wrote {path}")
    return 0


def _read_predictions(path: Path):
    rows: dict[str, dict[str, dict[str, float | None]]] = {}
    order: list[str] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for vid, target, tab, fus, ens in reader:
            if vid not in rows:
                rows[vid] = {}
                order.append(vid)
            rows[vid][target] = {
                "tabular": float(tab),
                "fusion": float(fus) if fus != "" else None,
                "ensemble": float(ens),
            }
    return order, rows


def cmd_report(args, config) -> int:
    out = Path(args.out)
    split = config["report_split"]
    pred_path = _require(out / f"predictions_{split}.csv", "run `vidpop predict` first")
    order, preds = _read_predictions(pred_path)

    targets_path = _require(
        out / "prep" / f"targets_{split}.csv",
        f"split {split!r} has no targets; choose a labelled split",
    )
    tids, y = _read_targets_csv(targets_path)
    y_index = {vid: i for i, vid in enumerate(tids)}

    # leaderboard rows are restricted to ids with a fusion prediction so the
    # three model rows are computed over the same sample
    full_ids = [
        vid for vid in order
        if vid in y_index and all(preds[vid][t]["fusion"] is not None for t in TARGETS)
    ]
    reports = []
    for label, key in (("Video", "fusion"), ("Tabular", "tabular"), ("Final Fusion", "ensemble")):
        per_target = {}
        for t in TARGETS:
            y_true = np.asarray([y[t][y_index[vid]] for vid in full_ids])
            y_pred = np.asarray([preds[vid][t][key] for vid in full_ids])
            per_target[t] = {"mape": ev.mape(y_true, y_pred), "mse": ev.mse(y_true, y_pred)}
        reports.append(ev.MetricReport(label=label, per_target=per_target, n_rows=len(full_ids)))

    reports_dir = out / "reports"
    ev.write_leaderboard_csv(reports, reports_dir / "leaderboard.csv")
    text = ev.render_leaderboard(reports)
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "leaderboard.txt").write_text(text + "\n", encoding="utf-8")
    print(text)

    # density export over whichever splits have predictions
    series: dict[str, np.ndarray] = {}
    for s in ("train", "test"):
        p = out / f"predictions_{s}.csv"
        if not p.exists():
            continue
        s_order, s_preds = _read_predictions(p)
        for key in ("tabular", "fusion", "ensemble"):
            vals = [
                s_preds[vid][t][key]
                for vid in s_order
                for t in TARGETS
                if s_preds[vid][t][key] is not None
            ]
            if vals:
                series[f"{s}/{key}"] = np.asarray(vals, dtype=np.float64)
    if series:
        ev.write_density_csv(series, reports_dir / "density.csv")

    models_dir = out / "models"
    for t in TARGETS:
        model_path = models_dir / f"gbdt_{t}.json"
        if not model_path.exists():
            continue
        report = feature_importance(load_gbdt(model_path))
        with open(reports_dir / f"importance_{t}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["feature", "gain", "split_count"])
            for name, gain, count in report.sorted_rows():
                writer.writerow([name, repr(float(gain)), count])

    _record_run(out, "report", args.seed, config)
    return 0


# --- entry point -----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vidpop",
        description="Short-video engagement prediction pipeline (batch, seeded).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, needs_manifest=False, needs_split=False):
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="run directory for all artifacts")
        p.add_argument("--seed", required=True, type=int, help="explicit seed (no default)")
        p.add_argument("--config", default=None, help="JSON file path or inline JSON overrides")
        if needs_manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest JSON")
        if needs_split:
            p.add_argument("--split", choices=("train", "test"), default="test")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth)
    add("prepare", cmd_prepare, needs_manifest=True)
    add("train-tabular", cmd_train_tabular)
    add("train-fusion", cmd_train_fusion, needs_manifest=True)
    add("ablate", cmd_ablate, needs_manifest=True)
    add("predict", cmd_predict, needs_manifest=True, needs_split=True)
    add("report", cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.config)
        return args.func(args, config)
    except Exception as exc:
        exit_code = exc.exit_code if isinstance(exc, VidpopError) else 1
        payload = {
            "command": args.command,
            "error_type": type(exc).__name__,
            "message": str(exc),
            "exit_code": exit_code,
        }
        try:
            dump_json(payload, Path(args.out) / "error.json")
        except OSError:
            pass
        print(f"error: {exc}", file=sys.stderr)
        return exit_code


if __name__ == "__main__":
    sys.exit(main())
