"""Shared helpers: synthetic data generators, CSV writers, gradient oracle."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from fewtab import protonet
from fewtab.tasks import Episode

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_blobs(n_per: int, centers, std: float, seed: int):
    """Isotropic Gaussian blobs with generation labels."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    x = np.concatenate(
        [c + std * rng.normal(size=(n_per, centers.shape[1])) for c in centers]
    )
    y = np.repeat(np.arange(len(centers)), n_per)
    return x, y


def structured_classification(
    n_rows: int,
    n_classes: int,
    n_informative: int,
    n_noise: int,
    seed: int,
    class_sep: float = 2.0,
    noise_scale: float = 2.0,
):
    """Class-structured table: informative columns carry class means, noise
    columns are wide class-independent Gaussians that dilute raw distances."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n_rows)
    means = rng.normal(scale=class_sep, size=(n_classes, n_informative))
    informative = means[y] + rng.normal(size=(n_rows, n_informative))
    noise = rng.normal(scale=noise_scale, size=(n_rows, n_noise))
    return np.hstack([informative, noise]), y


def corner_classes(n_rows: int, n_classes: int, n_dims: int, seed: int, sep: float):
    """Classes centered on fixed axis-aligned corners so the class layout is
    identical across generator seeds; only rows and noise are resampled."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n_rows)
    means = np.zeros((n_classes, n_dims))
    for c in range(n_classes):
        means[c, c % n_dims] = sep
        means[c, (c + 2) % n_dims] = sep * 0.6
    return means[y] + rng.normal(size=(n_rows, n_dims)), y


def structured_mixed(
    n_rows: int,
    n_classes: int,
    n_numeric: int,
    n_noise: int,
    n_categorical: int,
    n_categories: int,
    seed: int,
    class_sep: float = 1.5,
    cat_skew: float = 0.7,
):
    """Mixed-type table in encoded form: numeric columns plus one-hot blocks
    whose category choice leans toward a class-preferred value."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, n_classes, size=n_rows)
    means = rng.normal(scale=class_sep, size=(n_classes, n_numeric))
    blocks = [means[y] + rng.normal(size=(n_rows, n_numeric))]
    if n_noise:
        blocks.append(rng.normal(size=(n_rows, n_noise)))
    for _ in range(n_categorical):
        preferred = rng.integers(0, n_categories, size=n_classes)
        choice = np.where(
            rng.random(n_rows) < cat_skew, preferred[y], rng.integers(0, n_categories, size=n_rows)
        )
        onehot = np.zeros((n_rows, n_categories))
        onehot[np.arange(n_rows), choice] = 1.0
        blocks.append(onehot)
    return np.hstack(blocks), y


def write_classification_dataset(dirpath, name: str, x: np.ndarray, y: np.ndarray):
    """Write a numeric CSV plus its schema sidecar; returns (csv, schema)."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    classes = sorted(set(int(c) for c in y))
    csv_path = dirpath / f"{name}.csv"
    schema_path = dirpath / f"{name}.schema"
    d = x.shape[1]
    with csv_path.open("w", encoding="utf-8") as fh:
        fh.write(",".join([f"f{j}" for j in range(d)] + ["label"]) + "\n")
        for row, label in zip(x, y):
            fh.write(",".join(repr(float(v)) for v in row) + f",c{int(label)}\n")
    lines = [f"f{j}: numerical" for j in range(d)]
    lines.append("label: target " + " ".join(f"c{c}" for c in classes))
    schema_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path, schema_path


def write_regression_dataset(dirpath, name: str, x: np.ndarray, y: np.ndarray):
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    csv_path = dirpath / f"{name}.csv"
    schema_path = dirpath / f"{name}.schema"
    d = x.shape[1]
    with csv_path.open("w", encoding="utf-8") as fh:
        fh.write(",".join([f"f{j}" for j in range(d)] + ["target"]) + "\n")
        for row, t in zip(x, y):
            fh.write(",".join(repr(float(v)) for v in row) + f",{repr(float(t))}\n")
    lines = [f"f{j}: numerical" for j in range(d)]
    lines.append("target: target")
    schema_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return csv_path, schema_path


def random_episode(rng: np.random.Generator, d=6, way=3, shot=2, query_per_class=3) -> Episode:
    support = rng.normal(size=(way * shot, d))
    query = rng.normal(size=(way * query_per_class, d))
    return Episode(
        support_x=support,
        support_y=np.repeat(np.arange(way), shot),
        query_x=query,
        query_y=np.repeat(np.arange(way), query_per_class),
        shot=shot,
        query_per_class=query_per_class,
        class_ids=tuple(range(way)),
    )


def flatten_params(params: protonet.EncoderParams) -> np.ndarray:
    return np.concatenate([getattr(params, f).ravel() for f in ("w1", "b1", "w2", "b2")])


def unflatten_params(vec: np.ndarray, like: protonet.EncoderParams) -> protonet.EncoderParams:
    out, offset = {}, 0
    for f in ("w1", "b1", "w2", "b2"):
        a = getattr(like, f)
        out[f] = vec[offset : offset + a.size].reshape(a.shape).copy()
        offset += a.size
    return protonet.EncoderParams(**out)


def max_relative_grad_error(params, episode, step: float = 1e-6, floor: float = 1e-3) -> float:
    """Worst relative disagreement between analytic gradients and central
    finite differences. The denominator floor absorbs the oracle's own
    rounding noise (~1e-10) on coordinates whose true gradient is zero,
    such as the output bias under the translation-invariant classifier."""
    _, grads = protonet.episode_loss_and_grad(params, episode)
    analytic = flatten_params(grads)
    theta = flatten_params(params)
    worst = 0.0
    for i in range(len(theta)):
        plus = theta.copy()
        plus[i] += step
        minus = theta.copy()
        minus[i] -= step
        loss_plus, _ = protonet.episode_loss_and_grad(unflatten_params(plus, params), episode)
        loss_minus, _ = protonet.episode_loss_and_grad(unflatten_params(minus, params), episode)
        numeric = (loss_plus - loss_minus) / (2.0 * step)
        denom = max(abs(numeric), abs(analytic[i]), floor)
        worst = max(worst, abs(numeric - analytic[i]) / denom)
    return worst
