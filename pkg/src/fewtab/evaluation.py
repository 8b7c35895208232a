"""Adaptation with real labeled samples and multi-seed evaluation.

After meta-training, the frozen encoder adapts to a real task by building
class prototypes from the few labeled rows (classification) or by running
a kNN regressor in embedding space (regression). Raw-input variants of
both serve as baselines. The multi-seed protocol redraws the labeled set
per seed and scores the full test split.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FewtabError
from .protonet import EncoderParams, classify, compute_prototypes, encode
from .tabular import CLASSIFICATION, REGRESSION, DatasetSplits, sample_labeled, sample_labeled_rows

PROTONET = "protonet"
RAW = "raw"
KNN = "knn"
RAW_KNN = "raw_knn"
CLASSIFY_MODES = (PROTONET, RAW)
REGRESS_MODES = (KNN, RAW_KNN)


class EvaluationError(FewtabError):
    pass


def adapt_and_classify(
    params: EncoderParams,
    labeled_x: np.ndarray,
    labeled_y: np.ndarray,
    test_x: np.ndarray,
    n_classes: int | None = None,
) -> np.ndarray:
    """Predict class indices for test rows using prototypes built from the
    labeled set's embeddings. Ties break to the lowest class index."""
    class_ids = None if n_classes is None else np.arange(n_classes)
    protos = compute_prototypes(encode(params, labeled_x), labeled_y, class_ids=class_ids)
    probs = classify(encode(params, test_x), protos)
    return np.asarray(protos.class_ids, dtype=np.int64)[np.argmax(probs, axis=1)]


def raw_prototype_baseline(
    labeled_x: np.ndarray,
    labeled_y: np.ndarray,
    test_x: np.ndarray,
    n_classes: int | None = None,
) -> np.ndarray:
    """Nearest class prototype in raw feature space (identity embedding)."""
    class_ids = None if n_classes is None else np.arange(n_classes)
    protos = compute_prototypes(np.asarray(labeled_x, dtype=np.float64), labeled_y, class_ids=class_ids)
    probs = classify(np.asarray(test_x, dtype=np.float64), protos)
    return np.asarray(protos.class_ids, dtype=np.int64)[np.argmax(probs, axis=1)]


def _knn_mean(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, k: int) -> np.ndarray:
    diff = test_x[:, None, :] - train_x[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    order = np.argsort(dist, axis=1, kind="stable")  # ties: lower row index first
    return train_y[order[:, :k]].mean(axis=1)


def knn_regress(
    params: EncoderParams | None,
    labeled_x: np.ndarray,
    labeled_y: np.ndarray,
    test_x: np.ndarray,
    k: int,
) -> np.ndarray:
    """Unweighted mean target of the k nearest labeled rows, measured in
    embedding space (or raw space when ``params`` is None)."""
    labeled_x = np.asarray(labeled_x, dtype=np.float64)
    labeled_y = np.asarray(labeled_y, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    if not 1 <= k <= len(labeled_x):
        raise EvaluationError(f"k={k} is out of range for {len(labeled_x)} labeled rows")
    if params is None:
        return _knn_mean(labeled_x, labeled_y, test_x, k)
    return _knn_mean(encode(params, labeled_x), labeled_y, encode(params, test_x), k)


@dataclass(frozen=True)
class FewShotResult:
    per_seed: tuple[float, ...]
    mean: float
    std: float
    n_seeds: int
    shots: int
    dataset_id: str
    method: str
    config_hash: str


@dataclass(frozen=True)
class RegressionResult:
    per_seed: tuple[float, ...]
    mean: float
    n_seeds: int
    k: int
    shots: int
    dataset_id: str
    method: str
    config_hash: str


def evaluate_seeds(
    splits: DatasetSplits,
    params: EncoderParams | None,
    shots: int,
    n_seeds: int,
    mode: str = PROTONET,
    k: int = 5,
    dataset_id: str = "",
    config_hash: str = "",
    threads: int = 1,
):
    """Score the full test split once per seed.

    Seed i draws the labeled set with sampling seed i, so per-seed results
    are reproducible row-for-row. Classification modes return accuracy;
    regression modes return MSE on the scaled targets.
    """
    if n_seeds < 1:
        raise EvaluationError(f"n_seeds must be >= 1, got {n_seeds}")
    if mode not in CLASSIFY_MODES + REGRESS_MODES:
        raise EvaluationError(f"unknown evaluation mode {mode!r}")
    test = splits.test
    if test.target is None:
        raise EvaluationError("test split carries no targets")
    classification = mode in CLASSIFY_MODES
    if classification and test.target_kind != CLASSIFICATION:
        raise EvaluationError(f"mode {mode!r} needs a classification dataset")
    if not classification and test.target_kind != REGRESSION:
        raise EvaluationError(f"mode {mode!r} needs a regression dataset")
    if mode in (PROTONET, KNN) and params is None:
        raise EvaluationError(f"mode {mode!r} needs encoder parameters")

    scores: list[float | None] = [None] * n_seeds

    def run(seed: int) -> None:
        try:
            if classification:
                labeled = sample_labeled(splits.labeled_pool, shots, seed)
                if mode == PROTONET:
                    predicted = adapt_and_classify(
                        params, labeled.values, labeled.target, test.values, test.n_classes
                    )
                else:
                    predicted = raw_prototype_baseline(
                        labeled.values, labeled.target, test.values, test.n_classes
                    )
                scores[seed] = float(np.mean(predicted == test.target))
            else:
                labeled = sample_labeled_rows(splits.labeled_pool, shots, seed)
                predicted = knn_regress(
                    params if mode == KNN else None,
                    labeled.values,
                    labeled.target,
                    test.values,
                    k,
                )
                scores[seed] = float(np.mean((predicted - test.target) ** 2))
        except FewtabError as exc:
            raise EvaluationError(f"seed {seed}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, range(n_seeds)))
    else:
        for seed in range(n_seeds):
            run(seed)

    values = tuple(float(s) for s in scores)
    if classification:
        return FewShotResult(
            per_seed=values,
            mean=float(np.mean(values)),
            std=float(np.std(values)),
            n_seeds=n_seeds,
            shots=shots,
            dataset_id=dataset_id,
            method=mode,
            config_hash=config_hash,
        )
    return RegressionResult(
        per_seed=values,
        mean=float(np.mean(values)),
        n_seeds=n_seeds,
        k=k,
        shots=shots,
        dataset_id=dataset_id,
        method=mode,
        config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# result persistence: one JSON record per seed plus one aggregate record

def write_result(result, path, checkpoint_id: str = "") -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for seed, score in enumerate(result.per_seed):
            fh.write(json.dumps({"seed": seed, "score": score}, sort_keys=True) + "\n")
        aggregate = {
            "aggregate": True,
            "dataset": result.dataset_id,
            "method": result.method,
            "shots": result.shots,
            "mean": result.mean,
            "n_seeds": result.n_seeds,
            "config_hash": result.config_hash,
            "checkpoint_id": checkpoint_id,
        }
        if isinstance(result, FewShotResult):
            aggregate["std"] = result.std
            aggregate["metric"] = "accuracy"
        else:
            aggregate["k"] = result.k
            aggregate["metric"] = "mse"
        fh.write(json.dumps(aggregate, sort_keys=True) + "\n")


def read_result(path):
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"result file not found: {path}")
    per_seed = []
    aggregate = None
    for line in path.read_text(encoding="utf-8").splitlines():
        payload = json.loads(line)
        if payload.get("aggregate"):
            aggregate = payload
        else:
            per_seed.append((payload["seed"], payload["score"]))
    if aggregate is None:
        raise EvaluationError(f"{path}: missing aggregate record")
    per_seed.sort()
    values = tuple(score for _, score in per_seed)
    common = dict(
        per_seed=values,
        mean=aggregate["mean"],
        n_seeds=aggregate["n_seeds"],
        shots=aggregate["shots"],
        dataset_id=aggregate["dataset"],
        method=aggregate["method"],
        config_hash=aggregate.get("config_hash", ""),
    )
    if aggregate["metric"] == "accuracy":
        return FewShotResult(std=aggregate["std"], **common)
    return RegressionResult(k=aggregate["k"], **common)


def markdown_report(results) -> str:
    """Datasets-by-methods table; cells show mean (and std when present)."""
    methods = []
    datasets = []
    cells: dict[tuple[str, str], str] = {}
    for result in results:
        label = f"{result.method} {result.shots}-shot"
        if label not in methods:
            methods.append(label)
        if result.dataset_id not in datasets:
            datasets.append(result.dataset_id)
        if isinstance(result, FewShotResult):
            cells[(result.dataset_id, label)] = f"{100 * result.mean:.2f} ± {100 * result.std:.2f}"
        else:
            cells[(result.dataset_id, label)] = f"{result.mean:.3e}"
    lines = ["| dataset | " + " | ".join(methods) + " |"]
    lines.append("|" + " --- |" * (len(methods) + 1))
    for dataset in datasets:
        row = [cells.get((dataset, m), "-") for m in methods]
        lines.append(f"| {dataset} | " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
