"""Command-line surface: gen-data, train, eval, select, gradcheck, bench.

Every run resolves its configuration from defaults, an optional TOML file
(``--config``) and command-line overrides, in that precedence order, and
echoes the resolved values next to its outputs so any report can be
regenerated.  Exit codes: 0 success, 1 validation/usage error, 2 internal
error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import estimator, metrics, models, numerics as nm, workload
from .encoding import EncodingError, encode_raw
from .estimator import EstimatorError, Predictor, TrainConfig
from .metrics import MetricsError
from .models import ModelError, ModelConfig
from .plans import PlanValidationError
from .workload import GenConfig, WorkloadError

VALIDATION_ERRORS = (
    PlanValidationError, EncodingError, ModelError, EstimatorError,
    MetricsError, WorkloadError, nm.NumericsError, FileNotFoundError, ValueError,
)


class _Parser(argparse.ArgumentParser):
    # Usage problems are validation errors (exit 1), not internal errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# Config plumbing


def _load_config_file(path):
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if v is None:
        return '""'
    return repr(v)


def _toml_dumps(data):
    lines = []
    for key, value in data.items():
        if not isinstance(value, dict):
            lines.append(f"{key} = {_toml_value(value)}")
    for key, value in data.items():
        if isinstance(value, dict):
            lines.append("")
            lines.append(f"[{key}]")
            for k2, v2 in value.items():
                lines.append(f"{k2} = {_toml_value(v2)}")
    return "\n".join(lines) + "\n"


def _write_resolved_config(out_dir, resolved):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved-config.toml").write_text(_toml_dumps(resolved))


def _merge(defaults, file_section, overrides):
    merged = dict(defaults)
    merged.update({k: v for k, v in file_section.items() if k in merged})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _pairs(config_obj):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in config_obj.to_dict().items()}


def _gen_config(args, file_cfg):
    base = GenConfig()
    section = file_cfg.get("gen", {})
    merged = _merge(base.to_dict(), section, {
        "seed": args.seed,
        "n_tables": getattr(args, "tables", None),
        "max_joins": getattr(args, "max_joins", None),
        "min_joins": getattr(args, "min_joins", None),
        "noise_sigma": getattr(args, "noise", None),
    })
    merged["columns_per_table"] = tuple(merged["columns_per_table"])
    merged["row_count_range"] = tuple(merged["row_count_range"])
    merged["join_type_mix"] = tuple(merged["join_type_mix"])
    return GenConfig(**merged)


def _model_config(args, file_cfg):
    section = dict(file_cfg.get("model", {}))
    if "kind" in section:
        section["model_kind"] = section.pop("kind")
    merged = _merge(ModelConfig().to_dict(), section, {
        "model_kind": getattr(args, "model", None),
        "layers": getattr(args, "layers", None),
        "hidden_dim": getattr(args, "hidden_dim", None),
        "heads": getattr(args, "heads", None),
        "dropout": getattr(args, "dropout", None),
        "d_type": getattr(args, "d_type", None),
        "d_col": getattr(args, "d_col", None),
    })
    merged["head_dims"] = tuple(merged["head_dims"])
    return ModelConfig(**merged)


def _train_config(args, file_cfg):
    defaults = {
        "learning_rate": 1e-3, "batch_size": 32, "max_epochs": 200,
        "patience": 20, "dropout": None, "seed": 0, "folds": 10,
    }
    merged = _merge(defaults, file_cfg.get("train", {}), {
        "learning_rate": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "max_epochs": getattr(args, "epochs", None),
        "patience": getattr(args, "patience", None),
        "seed": args.seed,
        "folds": getattr(args, "kfold", None),
    })
    return TrainConfig(**merged)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args):
    file_cfg = _load_config_file(args.config)
    config = _gen_config(args, file_cfg)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise WorkloadError(f"output directory {out} exists (use --force to overwrite)")
    catalog = workload.gen_catalog(config)
    manifest = workload.gen_dataset(
        out, catalog, config, n_queries=args.queries,
        split=tuple(args.split), candidates_per_query=args.candidates_per_query)
    _write_resolved_config(out, {
        "command": "gen-data",
        "queries": args.queries,
        "candidates_per_query": args.candidates_per_query,
        "split": list(args.split),
        "gen": _pairs(config),
    })
    print(f"wrote {out}/plans.jsonl ({manifest['n_queries']} queries, "
          f"{'candidate sets of ' + str(args.candidates_per_query) if args.candidates_per_query else 'one plan each'})")
    return 0


def _train_one(train_trees, val_trees, catalog, model_cfg, train_cfg):
    train_samples = estimator.prepare_samples(train_trees, catalog, model_cfg.model_kind)
    val_samples = estimator.prepare_samples(val_trees, catalog, model_cfg.model_kind)
    return estimator.fit(train_samples, val_samples, catalog, model_cfg, train_cfg)


def _curve_csv(history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss_sum", "val_loss_sum"])
    for h in history:
        writer.writerow([h.epoch, h.train_loss_sum, h.val_loss_sum])
    return buf.getvalue()


def _evaluate_checkpoint(checkpoint, trees, catalog):
    predictor = Predictor(checkpoint, catalog)
    samples = estimator.prepare_samples(trees, catalog, checkpoint.model_config.model_kind)
    predicted = [predictor.predict_raw(s.raw) for s in samples]
    actual = [s.latency_ms for s in samples]
    kind = checkpoint.model_config.model_kind
    return metrics.evaluate_estimates(kind, models.EDGE_DIRECTION[kind], predicted, actual)


def _fold_worker(payload):
    data_dir, fold_index, model_cfg_dict, train_cfg_dict, out_dir = payload
    catalog, splits, _ = workload.load_dataset(data_dir)
    trees = splits["train"] + splits["validation"] + splits["test"]
    model_cfg = ModelConfig.from_dict(model_cfg_dict)
    train_cfg = TrainConfig(**train_cfg_dict)
    folds = estimator.kfold(trees, train_cfg.folds, train_cfg.seed)
    train_idx, test_idx = folds[fold_index]
    # Carve a query-grouped validation slice (one fold's worth) out of train.
    subset = [trees[i] for i in train_idx]
    inner_fit, inner_val = estimator.kfold(subset, train_cfg.folds, train_cfg.seed + 1)[0]
    fit_idx = [train_idx[i] for i in inner_fit]
    val_idx = [train_idx[i] for i in inner_val]
    fold_cfg = replace(train_cfg, seed=train_cfg.seed + fold_index)
    result = _train_one([trees[i] for i in fit_idx], [trees[i] for i in val_idx],
                        catalog, model_cfg, fold_cfg)
    fold_dir = Path(out_dir) / f"fold{fold_index:02d}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    estimator.save_checkpoint(result.checkpoint, fold_dir / "checkpoint.bin")
    (fold_dir / "curve.csv").write_text(_curve_csv(result.history))
    report = _evaluate_checkpoint(result.checkpoint, [trees[i] for i in test_idx], catalog)
    return fold_index, report


def cmd_train(args):
    file_cfg = _load_config_file(args.config)
    model_cfg = _model_config(args, file_cfg)
    train_cfg = _train_config(args, file_cfg)
    if args.dropout is not None:
        train_cfg = replace(train_cfg, dropout=args.dropout)
    catalog, splits, manifest = workload.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, {
        "command": "train",
        "data": str(args.data),
        "kfold": bool(args.kfold),
        "model": _pairs(model_cfg),
        "train": {k: ("" if v is None else v) for k, v in vars(train_cfg).items()},
    })

    if args.kfold:
        jobs = max(1, args.jobs)
        payloads = [(str(args.data), f, model_cfg.to_dict(), vars(train_cfg), str(out))
                    for f in range(train_cfg.folds)]
        if jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
                results = sorted(pool.map(_fold_worker, payloads))
        else:
            results = [_fold_worker(p) for p in payloads]
        reports = [r for (_, r) in results]
        mean_median = float(np.mean([r.q_error_summary.median for r in reports]))
        (out / "report.csv").write_text(metrics.reports_to_csv(reports))
        (out / "report.json").write_text(json.dumps({
            "folds": [r.to_json_dict() for r in reports],
            "mean_median_qerror": mean_median,
            "mean_spearman": float(np.mean([r.spearman for r in reports])),
        }, indent=2, sort_keys=True) + "\n")
        print(f"cross-validation mean median q-error: {mean_median:.4f}")
        return 0

    result = _train_one(splits["train"], splits["validation"], catalog, model_cfg, train_cfg)
    estimator.save_checkpoint(result.checkpoint, out / "checkpoint.bin")
    (out / "curve.csv").write_text(_curve_csv(result.history))
    meta = result.checkpoint.metadata
    print(f"trained {model_cfg.model_kind}: {meta['epochs_run']} epochs, "
          f"best epoch {meta['best_epoch']} (val loss sum {meta['best_val_loss_sum']:.6f})")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def _oracle_report(trees, kind):
    actual = [t.latency_ms for t in trees]
    return metrics.evaluate_estimates(kind, "-", actual, actual)


def cmd_eval(args):
    catalog, splits, _ = workload.load_dataset(args.data)
    trees = splits[args.split]
    if not trees:
        raise WorkloadError(f"split {args.split!r} is empty in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle_debug:
        report = _oracle_report(trees, "oracle_debug")
    else:
        if args.checkpoint is None:
            raise EstimatorError("--checkpoint is required unless --oracle-debug is set")
        checkpoint = estimator.load_checkpoint(args.checkpoint)
        report = _evaluate_checkpoint(checkpoint, trees, catalog)
    _write_resolved_config(out, {
        "command": "eval", "data": str(args.data), "split": args.split,
        "checkpoint": str(args.checkpoint or ""), "oracle_debug": bool(args.oracle_debug),
    })
    (out / "report.csv").write_text(metrics.reports_to_csv([report]))
    (out / "report.json").write_text(metrics.reports_to_json([report]))
    (out / "per_sample_q_errors.csv").write_text(metrics.per_sample_csv(report.per_sample_q_errors))
    s = report.q_error_summary
    print(f"{report.model_kind}: median q-error {s.median:.4f}, p90 {s.p90:.4f}, "
          f"p99 {s.p99:.4f}, spearman {report.spearman:.4f}")
    return 0


def cmd_select(args):
    catalog, splits, manifest = workload.load_dataset(args.data)
    if manifest.get("candidates_per_query", 0) < 1:
        raise WorkloadError("select needs a dataset generated with --candidates-per-query")
    if not splits[args.split]:
        raise WorkloadError(f"split {args.split!r} is empty in {args.data}")
    sets = workload.group_candidate_sets(splits[args.split])
    predictor = None
    if not args.oracle_debug:
        if args.checkpoint is None:
            raise EstimatorError("--checkpoint is required unless --oracle-debug is set")
        predictor = Predictor(estimator.load_checkpoint(args.checkpoint), catalog)
    subopts = []
    for cset in sets:
        if args.oracle_debug:
            pairs = [(t.latency_ms, t.latency_ms) for t in cset.plans]
        else:
            pairs = [(predictor.predict_plan(t), t.latency_ms) for t in cset.plans]
        subopts.append(metrics.plan_suboptimality(pairs))
    summary = metrics.quantile_report(subopts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, {
        "command": "select", "data": str(args.data), "split": args.split,
        "checkpoint": str(args.checkpoint or ""), "oracle_debug": bool(args.oracle_debug),
    })
    kind = "oracle_debug" if args.oracle_debug else predictor.config.model_kind
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "median_subopt", "p90_subopt", "p99_subopt",
                     "top50_mean_subopt", "top90_mean_subopt", "top99_mean_subopt", "n_sets"])
    writer.writerow([kind, summary.median, summary.p90, summary.p99,
                     summary.top50_mean, summary.top90_mean, summary.top99_mean, len(subopts)])
    (out / "report.csv").write_text(buf.getvalue())
    (out / "report.json").write_text(json.dumps(
        {"model": kind, "plan_suboptimality": summary.to_dict(), "n_sets": len(subopts)},
        indent=2, sort_keys=True) + "\n")
    (out / "per_set_suboptimality.csv").write_text(metrics.per_sample_csv(subopts))
    print(f"{kind}: median suboptimality {summary.median:.4f} over {len(subopts)} candidate sets")
    return 0


def _gradcheck_closure(kind, seed, plan_nodes=5):
    """Small catalog + random plan + full forward-to-loss closure."""
    config = GenConfig(seed=seed, n_tables=3, columns_per_table=(2, 3),
                       row_count_range=(100, 10_000), max_joins=max(1, plan_nodes // 2),
                       min_joins=1, root_extra_prob=0.5, string_column_ratio=0.3)
    catalog = workload.gen_catalog(config)
    rng = np.random.default_rng(seed)
    tree = workload.gen_plan(catalog, config, rng, query_id="g", plan_id="g.p0")
    model_cfg = ModelConfig(model_kind=kind, layers=1, hidden_dim=6, heads=1,
                            dropout=0.0, d_type=3, d_col=2, head_dims=(6, 4))
    samples = estimator.prepare_samples(
        [replace(tree, latency_ms=workload.oracle_latency(tree, catalog))], catalog, kind)
    raw = samples[0].raw
    label = samples[0].latency_ms
    params = estimator.init_all_params(catalog, model_cfg, rng)
    scaler = estimator.LabelScaler(np.log(label) - 1.0, np.log(label) + 1.0)

    def forward():
        batch = encode_raw(raw, params, catalog)
        emb = models.forward(batch, params, model_cfg, training=False)
        return estimator.loss(estimator.mlp_head(emb, params), [label], scaler)

    return forward, params


def cmd_gradcheck(args):
    kinds = list(models.MODEL_KINDS) if args.model == "all" else [args.model]
    failures = 0
    for kind in kinds:
        for seed in range(args.seeds):
            forward, params = _gradcheck_closure(kind, seed=args.seed + seed)
            report = nm.grad_check(forward, params, epsilon=args.epsilon,
                                   tolerance=args.tolerance, corrupt_sign=args.corrupt)
            status = "PASS" if report.passed else "FAIL"
            if not report.passed:
                failures += 1
            print(f"{kind} seed={args.seed + seed}: {status} "
                  f"(max rel err {report.max_rel_error:.3e} at {report.worst_param})")
    if failures:
        print(f"{failures} gradient check(s) failed", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args):
    if args.reps <= 0:
        raise MetricsError("--reps must be positive")
    catalog, splits, _ = workload.load_dataset(args.data)
    trees = splits[args.split]
    if args.limit:
        trees = trees[:args.limit]
    rows = []
    for path in args.checkpoint:
        checkpoint = estimator.load_checkpoint(path)
        predictor = Predictor(checkpoint, catalog)
        samples = estimator.prepare_samples(trees, catalog, checkpoint.model_config.model_kind)
        mean_ms, std_ms = metrics.time_inference(
            predictor.predict_raw, [s.raw for s in samples], repetitions=args.reps)
        rows.append([checkpoint.model_config.model_kind, mean_ms, std_ms, args.reps, len(samples)])
        print(f"{checkpoint.model_config.model_kind}: {mean_ms:.4f} ms/plan (std {std_ms:.4f})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "mean_ms_per_plan", "std_ms", "reps", "n_plans"])
    writer.writerows(rows)
    (out / "bench.csv").write_text(buf.getvalue())
    _write_resolved_config(out, {"command": "bench", "data": str(args.data),
                                 "reps": args.reps, "split": args.split})
    return 0


# ---------------------------------------------------------------------------
# Argument wiring


def _add_common(parser, out_required=True):
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--out", required=out_required, help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers for independent folds")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser():
    parser = _Parser(prog="planrep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset", parents=[])
    _add_common(p)
    p.add_argument("--queries", type=int, required=True)
    p.add_argument("--candidates-per-query", type=int, default=0)
    p.add_argument("--split", type=float, nargs=3, default=(0.8, 0.1, 0.1),
                   metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--tables", type=int, default=None)
    p.add_argument("--max-joins", type=int, default=None)
    p.add_argument("--min-joins", type=int, default=None)
    p.add_argument("--noise", type=float, default=None, help="lognormal sigma for oracle noise")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a tree model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--model", choices=models.MODEL_KINDS, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--d-type", type=int, default=None)
    p.add_argument("--d-col", type=int, default=None)
    p.add_argument("--kfold", type=int, default=None,
                   help="train k folds over the whole dataset and report the cross-fold mean")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="cost-estimation report on a split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--oracle-debug", action="store_true",
                   help="feed true labels as predictions (identity sanity)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("select", help="plan-selection suboptimality report")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--oracle-debug", action="store_true")
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p, out_required=False)
    p.add_argument("--model", default="all", choices=("all",) + models.MODEL_KINDS)
    p.add_argument("--seeds", type=int, default=10, help="random plans per model kind")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--corrupt", action="store_true", help="negative control: flip analytic sign")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("bench", help="inference timing per checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--split", choices=("train", "validation", "test"), default="test")
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--limit", type=int, default=0, help="cap the number of plans timed")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    if args.seed is None:
        args.seed = 0
    try:
        return args.fn(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal errors
        import traceback
        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
