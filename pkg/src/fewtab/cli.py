"""Command-line pipeline: prepare, train, search, evaluate, regress, report.

Every command writes a JSON manifest next to its outputs recording the
resolved arguments, root seed, inputs and outputs; re-running a command
with the arguments from its manifest reproduces the output files byte for
byte (manifests themselves carry timestamps and are not compared).

Exit codes: 0 success, 1 user or config error, 2 internal error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, evaluation, tabular, training
from .errors import FewtabError
from .training import ConfigError, TrainConfig


def _parse_value(raw: str):
    text = raw.strip()
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_kv_file(path) -> dict:
    """Flat ``key = value`` config format; '#' starts a comment."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        values[key.strip()] = value.strip()
    return values


def load_train_config(config_file=None, profile: str = "full", overrides: dict | None = None) -> TrainConfig:
    config = TrainConfig()
    if profile == "fast":
        config = replace(config, **training.FAST_PROFILE)
    elif profile != "full":
        raise ConfigError(f"unknown profile {profile!r}, expected 'full' or 'fast'")
    known = set(asdict(config))
    updates: dict = {}
    if config_file is not None:
        for key, raw in parse_kv_file(config_file).items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} (known: {sorted(known)})")
            updates[key] = _parse_value(raw)
    if overrides:
        updates.update(overrides)
    typed = {}
    for key, value in updates.items():
        current = getattr(config, key)
        if isinstance(current, bool):
            typed[key] = bool(value)
        elif isinstance(current, int):
            typed[key] = int(value)
        elif isinstance(current, float):
            typed[key] = float(value)
        else:
            typed[key] = str(value)
    config = replace(config, **typed)
    config.validate()
    return config


def load_grid_file(path) -> training.GridSpec:
    """Grid format: ``shot_query = 1:5 1:15`` and ``way = 5 10``."""
    values = parse_kv_file(path)
    missing = {"shot_query", "way"} - set(values)
    if missing:
        raise ConfigError(f"grid file {path} is missing keys: {sorted(missing)}")
    pairs = []
    for token in values["shot_query"].split():
        shot, sep, query = token.partition(":")
        if not sep:
            raise ConfigError(f"bad shot_query token {token!r}, expected 'shot:query'")
        pairs.append((int(shot), int(query)))
    ways = tuple(int(w) for w in values["way"].split())
    return training.GridSpec(shot_query=tuple(pairs), ways=ways)


def resolve_outdir(outdir) -> Path:
    """Relative output paths land under $FEWTAB_OUT when it is set."""
    outdir = Path(outdir)
    root = os.environ.get("FEWTAB_OUT")
    if root and not outdir.is_absolute():
        return Path(root) / outdir
    return outdir


def _write_manifest(outdir: Path, command: str, args: dict, seed, inputs, outputs, started: float) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "args": args,
        "root_seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started_at": started,
        "finished_at": time.time(),
    }
    (outdir / f"manifest-{command}.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )


def cmd_prepare(args) -> int:
    started = time.time()
    schema, options = tabular.parse_schema_file(args.schema)
    raw = tabular.load_csv(args.csv, schema)
    table = tabular.encode(raw)
    test_table = None
    if options["predefined_test"] is not None:
        test_raw = tabular.load_csv(options["predefined_test"], schema)
        test_table = tabular.encode(test_raw)
    splits = tabular.make_splits(table, args.seed, test_table=test_table)
    stats = tabular.fit_scaler(splits.labeled_pool, args.mode)
    splits = tabular.DatasetSplits(
        train_unlabeled=tabular.apply_scaler(splits.train_unlabeled, stats),
        pseudo_val=tabular.apply_scaler(splits.pseudo_val, stats),
        test=tabular.apply_scaler(splits.test, stats),
        labeled_pool=tabular.apply_scaler(splits.labeled_pool, stats),
        seed=splits.seed,
        train_indices=splits.train_indices,
        val_indices=splits.val_indices,
        test_indices=splits.test_indices,
    )
    outdir = resolve_outdir(args.outdir)
    dataset_id = args.dataset_id or Path(args.csv).stem
    tabular.save_splits(splits, outdir, dataset_id, stats, args.mode)
    outputs = sorted(str(p) for p in outdir.iterdir())
    _write_manifest(
        outdir, "prepare",
        {"csv": str(args.csv), "schema": str(args.schema), "mode": args.mode,
         "seed": args.seed, "outdir": str(outdir), "dataset_id": dataset_id},
        args.seed, [args.csv, args.schema], outputs, started,
    )
    print(f"prepared {dataset_id}: {splits.train_unlabeled.rows} unlabeled / "
          f"{splits.pseudo_val.rows} pseudo-val / {splits.test.rows} test rows -> {outdir}")
    return 0


def _n_classes_for_validation(meta: dict, config: TrainConfig) -> int:
    # regression datasets have no class count; validation clusters fall back to `way`
    return meta["n_classes"] if meta.get("n_classes") else config.way


def cmd_train(args) -> int:
    started = time.time()
    splits, meta = tabular.load_splits(args.splits)
    config = load_train_config(args.config, args.profile, {"seed": args.seed} if args.seed is not None else None)
    result = training.meta_train(
        splits.train_unlabeled.values,
        splits.pseudo_val.values,
        _n_classes_for_validation(meta, config),
        config,
    )
    outdir = resolve_outdir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    best_path = outdir / "best.ckpt"
    final_path = outdir / "final.ckpt"
    log_path = outdir / "train_log.jsonl"
    training.save_checkpoint(result.best, best_path)
    training.save_checkpoint(result.final, final_path)
    training.save_log(result.log, log_path)
    (outdir / "train_config.json").write_text(
        json.dumps(asdict(config), indent=2, sort_keys=True), encoding="utf-8"
    )
    _write_manifest(
        outdir, "train",
        {"splits": str(args.splits), "config": str(args.config) if args.config else None,
         "profile": args.profile, "seed": args.seed, "outdir": str(outdir),
         "resolved_config": asdict(config)},
        config.seed, [args.splits], [best_path, final_path, log_path], started,
    )
    print(f"trained {config.total_steps} steps; best pseudo-val accuracy "
          f"{result.best.pseudo_val_accuracy:.4f} at step {result.best.step} -> {outdir}")
    return 0


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    def ranks(x):
        order = np.argsort(x, kind="stable")
        r = np.empty(len(x))
        r[order] = np.arange(1, len(x) + 1)
        # average ranks over ties
        for value in np.unique(x):
            mask = x == value
            r[mask] = r[mask].mean()
        return r
    ra, rb = ranks(np.asarray(a, dtype=np.float64)), ranks(np.asarray(b, dtype=np.float64))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    return float((ra * rb).sum() / denom) if denom > 0 else 0.0


def cmd_search(args) -> int:
    started = time.time()
    splits, meta = tabular.load_splits(args.splits)
    base = load_train_config(args.config, args.profile, {"seed": args.seed} if args.seed is not None else None)
    grid = load_grid_file(args.grid)
    ranked = training.grid_search(
        splits.train_unlabeled.values,
        splits.pseudo_val.values,
        _n_classes_for_validation(meta, base),
        grid,
        base,
        threads=args.threads,
    )
    outdir = resolve_outdir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    test_accuracies: dict[int, float] = {}
    for point in ranked:
        if point.result is None:
            continue
        path = outdir / f"point_{point.index:02d}.ckpt"
        training.save_checkpoint(point.result.best, path)
        outputs.append(path)
        if args.with_test:
            result = evaluation.evaluate_seeds(
                splits, point.result.best.params, args.eval_shots, args.eval_seeds,
                mode=evaluation.PROTONET, dataset_id=meta["dataset_id"],
                config_hash=point.result.best.config_hash, threads=args.threads,
            )
            test_accuracies[point.index] = result.mean

    report_path = outdir / "search_report.jsonl"
    with report_path.open("w", encoding="utf-8") as fh:
        for rank, point in enumerate(ranked):
            record = {
                "rank": rank,
                "index": point.index,
                "shot": point.config.shot,
                "query_per_class": point.config.query_per_class,
                "way": point.config.way,
                "seed": point.config.seed,
                "best_val_accuracy": point.best_val_accuracy,
                "error": point.error,
            }
            if point.index in test_accuracies:
                record["test_accuracy"] = test_accuracies[point.index]
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    outputs.append(report_path)

    lines = ["| rank | shot | query | way | best pseudo-val acc |" + (" test acc |" if args.with_test else "")]
    lines.append("|" + " --- |" * (5 + (1 if args.with_test else 0)))
    for rank, point in enumerate(ranked):
        acc = "failed" if point.best_val_accuracy is None else f"{point.best_val_accuracy:.4f}"
        row = f"| {rank} | {point.config.shot} | {point.config.query_per_class} | {point.config.way} | {acc} |"
        if args.with_test:
            t = test_accuracies.get(point.index)
            row += (f" {t:.4f} |" if t is not None else " - |")
        lines.append(row)
    if args.with_test and len(test_accuracies) >= 2:
        scored = [p for p in ranked if p.index in test_accuracies]
        rho = _spearman(
            np.array([p.best_val_accuracy for p in scored]),
            np.array([test_accuracies[p.index] for p in scored]),
        )
        lines.append(f"\nSpearman rank correlation (pseudo-val vs test): {rho:.4f}")
    md_path = outdir / "search_report.md"
    md_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    outputs.append(md_path)
    _write_manifest(
        outdir, "search",
        {"splits": str(args.splits), "grid": str(args.grid),
         "config": str(args.config) if args.config else None, "profile": args.profile,
         "seed": args.seed, "with_test": args.with_test, "eval_shots": args.eval_shots,
         "eval_seeds": args.eval_seeds, "threads": args.threads, "outdir": str(outdir)},
        base.seed, [args.splits, args.grid], outputs, started,
    )
    print("\n".join(lines))
    return 0


def _check_hash(args, checkpoint) -> None:
    if args.config is not None:
        config = load_train_config(args.config, args.profile)
        if training.config_hash(config) != checkpoint.config_hash:
            print(
                f"warning: checkpoint config hash {checkpoint.config_hash} does not match "
                f"{args.config}", file=sys.stderr,
            )


def cmd_evaluate(args) -> int:
    started = time.time()
    splits, meta = tabular.load_splits(args.splits)
    checkpoint = training.load_checkpoint(args.checkpoint)
    _check_hash(args, checkpoint)
    ckpt_id = f"{Path(args.checkpoint).name}@step{checkpoint.step}"
    outdir = resolve_outdir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    shots_list = [int(s) for s in str(args.shots).split(",")]
    for shots in shots_list:
        for mode, params in ((evaluation.PROTONET, checkpoint.params), (evaluation.RAW, None)):
            result = evaluation.evaluate_seeds(
                splits, params, shots, args.seeds, mode=mode,
                dataset_id=meta["dataset_id"], config_hash=checkpoint.config_hash,
                threads=args.threads,
            )
            path = outdir / f"{meta['dataset_id']}_{mode}_{shots}shot.jsonl"
            evaluation.write_result(result, path, checkpoint_id=ckpt_id)
            outputs.append(path)
            print(f"{meta['dataset_id']} {mode} {shots}-shot: "
                  f"{100 * result.mean:.2f} ± {100 * result.std:.2f} over {result.n_seeds} seeds")
    _write_manifest(
        outdir, "evaluate",
        {"splits": str(args.splits), "checkpoint": str(args.checkpoint), "shots": args.shots,
         "seeds": args.seeds, "threads": args.threads, "outdir": str(outdir),
         "config": str(args.config) if args.config else None, "profile": args.profile},
        args.seeds, [args.splits, args.checkpoint], outputs, started,
    )
    return 0


def cmd_regress(args) -> int:
    started = time.time()
    splits, meta = tabular.load_splits(args.splits)
    checkpoint = training.load_checkpoint(args.checkpoint)
    _check_hash(args, checkpoint)
    ckpt_id = f"{Path(args.checkpoint).name}@step{checkpoint.step}"
    outdir = resolve_outdir(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for mode, params in ((evaluation.KNN, checkpoint.params), (evaluation.RAW_KNN, None)):
        result = evaluation.evaluate_seeds(
            splits, params, args.shots, args.seeds, mode=mode, k=args.k,
            dataset_id=meta["dataset_id"], config_hash=checkpoint.config_hash,
            threads=args.threads,
        )
        path = outdir / f"{meta['dataset_id']}_{mode}_{args.shots}shot.jsonl"
        evaluation.write_result(result, path, checkpoint_id=ckpt_id)
        outputs.append(path)
        print(f"{meta['dataset_id']} {mode} {args.shots}-shot k={args.k}: "
              f"mean MSE {result.mean:.4e} over {result.n_seeds} seeds")
    _write_manifest(
        outdir, "regress",
        {"splits": str(args.splits), "checkpoint": str(args.checkpoint), "shots": args.shots,
         "k": args.k, "seeds": args.seeds, "threads": args.threads, "outdir": str(outdir),
         "config": str(args.config) if args.config else None, "profile": args.profile},
        args.seeds, [args.splits, args.checkpoint], outputs, started,
    )
    return 0


def cmd_report(args) -> int:
    results = [evaluation.read_result(path) for path in args.results]
    table = evaluation.markdown_report(results)
    Path(args.out).write_text(table, encoding="utf-8")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewtab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fewtab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="encode, scale and split a dataset")
    p.add_argument("--csv", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--mode", default=tabular.MIN_MAX, choices=tabular.SCALE_MODES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", required=True)
    p.add_argument("--dataset-id", default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="meta-train an encoder on prepared splits")
    p.add_argument("--splits", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", default="full", choices=("full", "fast"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="grid-search hyperparameters by pseudo-validation")
    p.add_argument("--splits", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", default="full", choices=("full", "fast"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--with-test", action="store_true")
    p.add_argument("--eval-shots", type=int, default=1)
    p.add_argument("--eval-seeds", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="multi-seed few-shot classification scoring")
    p.add_argument("--splits", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots", default="1,5")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", default="full", choices=("full", "fast"))
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("regress", help="multi-seed few-shot kNN regression scoring")
    p.add_argument("--splits", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", default=None)
    p.add_argument("--profile", default="full", choices=("full", "fast"))
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_regress)

    p = sub.add_parser("report", help="merge result files into a markdown table")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FewtabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - internal failures
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
