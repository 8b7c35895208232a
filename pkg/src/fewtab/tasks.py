"""Self-generated tasks from unlabeled rows.

A task is built in three moves: sample a random column mask, cluster the
clean values of the masked columns to obtain pseudo-labels, then corrupt
those same columns in the full-width inputs so the labels cannot be read
off directly. Episodes (disjoint support/query sets) are drawn from the
task per pseudo-class. Validation tasks use all columns and clean inputs.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import clustering
from .errors import FewtabError

MARGINAL = "marginal"
ZERO = "zero"
GAUSSIAN = "gaussian"
NONE = "none"
STRATEGIES = (MARGINAL, ZERO, GAUSSIAN, NONE)


class MaskError(FewtabError):
    pass


class EpisodeError(FewtabError):
    """An episode cannot be formed from this task; regenerate the task."""


class TaskGenerationError(FewtabError):
    pass


@dataclass(frozen=True)
class FeatureMask:
    bits: np.ndarray  # (d,) uint8
    ratio: float  # the sampled masking ratio p

    def __post_init__(self):
        self.bits.setflags(write=False)

    @property
    def on_columns(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


@dataclass(frozen=True)
class PseudoTask:
    """Corrupted inputs plus cluster pseudo-labels.

    Labels always come from clustering the clean masked-column values;
    ``centroids`` are kept so label provenance can be re-checked by
    re-assigning the clean squeezed columns.
    """

    inputs: np.ndarray  # (n, d), corrupted on masked columns
    pseudo_labels: np.ndarray  # (n,) int64 in 0..way-1
    way: int
    mask: FeatureMask
    centroids: np.ndarray  # (way, n_masked_columns)


@dataclass(frozen=True)
class Episode:
    support_x: np.ndarray  # (n_classes * shot, d)
    support_y: np.ndarray  # class positions 0..n_classes-1
    query_x: np.ndarray
    query_y: np.ndarray
    shot: int
    query_per_class: int
    class_ids: tuple[int, ...]  # original pseudo-class per position

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)


def sample_mask(d: int, r1: float, r2: float, rng: np.random.Generator) -> FeatureMask:
    """Draw p ~ Uniform(r1, r2) and set exactly floor(d * p) positions."""
    if d < 2:
        raise MaskError(f"need at least 2 columns to mask, got d={d}")
    if not (0.0 < r1 < r2 < 1.0):
        raise MaskError(f"mask ratio bounds must satisfy 0 < r1 < r2 < 1, got ({r1}, {r2})")
    if int(d * r1) < 1:
        raise MaskError(f"floor(d * r1) = floor({d} * {r1}) < 1: no columns selectable")
    p = float(rng.uniform(r1, r2))
    n_on = int(d * p)
    bits = np.zeros(d, dtype=np.uint8)
    bits[rng.choice(d, size=n_on, replace=False)] = 1
    return FeatureMask(bits=bits, ratio=p)


def full_mask(d: int) -> FeatureMask:
    return FeatureMask(bits=np.ones(d, dtype=np.uint8), ratio=1.0)


def corrupt(
    clean: np.ndarray,
    mask: FeatureMask,
    strategy: str,
    rng: np.random.Generator,
    gaussian_sigma: float = 0.1,
) -> np.ndarray:
    """Replace masked columns per strategy; unmasked columns are copied
    verbatim.

    marginal resamples every masked cell independently from that column's
    empirical values, zero blanks them, gaussian adds Normal(0, sigma)
    noise, none is the identity.
    """
    if strategy not in STRATEGIES:
        raise MaskError(f"unknown corruption strategy {strategy!r}, expected one of {STRATEGIES}")
    if mask.bits.shape[0] != clean.shape[1]:
        raise MaskError(f"mask has {mask.bits.shape[0]} bits, matrix has {clean.shape[1]} columns")
    out = np.array(clean, dtype=np.float64)
    if strategy == NONE:
        return out
    cols = mask.on_columns
    if cols.size == 0:
        return out
    n = clean.shape[0]
    if strategy == ZERO:
        out[:, cols] = 0.0
    elif strategy == GAUSSIAN:
        out[:, cols] += rng.normal(0.0, gaussian_sigma, size=(n, cols.size))
    else:  # marginal: independent donor row per masked cell
        donors = rng.integers(0, n, size=(n, cols.size))
        out[:, cols] = clean[donors, cols[None, :]]
    return out


def generate_task(
    unlabeled: np.ndarray,
    way: int,
    r1: float,
    r2: float,
    strategy: str,
    rng: np.random.Generator,
    gaussian_sigma: float = 0.1,
    kmeans_max_iter: int = 100,
    kmeans_tol: float = 1e-4,
) -> PseudoTask:
    """Build one task from the full unlabeled batch."""
    unlabeled = np.asarray(unlabeled, dtype=np.float64)
    if unlabeled.shape[0] < way:
        raise TaskGenerationError(
            f"{unlabeled.shape[0]} unlabeled rows cannot support way={way}"
        )
    mask = sample_mask(unlabeled.shape[1], r1, r2, rng)
    squeezed = unlabeled[:, mask.on_columns]
    result = clustering.kmeans(squeezed, way, max_iter=kmeans_max_iter, tol=kmeans_tol, seed=rng)
    inputs = corrupt(unlabeled, mask, strategy, rng, gaussian_sigma)
    return PseudoTask(
        inputs=inputs,
        pseudo_labels=result.assignments,
        way=way,
        mask=mask,
        centroids=result.centroids,
    )


def build_validation_task(val_rows: np.ndarray, n_classes: int, rng: np.random.Generator) -> PseudoTask:
    """Validation task: all columns, clean inputs, k = class count."""
    val_rows = np.asarray(val_rows, dtype=np.float64)
    if val_rows.shape[0] < n_classes:
        raise TaskGenerationError(
            f"{val_rows.shape[0]} validation rows cannot support {n_classes} clusters"
        )
    result = clustering.kmeans(val_rows, n_classes, seed=rng)
    return PseudoTask(
        inputs=val_rows.copy(),
        pseudo_labels=result.assignments,
        way=n_classes,
        mask=full_mask(val_rows.shape[1]),
        centroids=result.centroids,
    )


def sample_episode(
    task: PseudoTask,
    shot: int,
    query_per_class: int,
    rng: np.random.Generator,
) -> Episode:
    """Draw disjoint support and query rows per pseudo-class.

    Classes with fewer than shot + query_per_class members are excluded;
    if fewer than two classes remain the task is unusable and an
    EpisodeError signals that it should be regenerated.
    """
    if shot < 1 or query_per_class < 1:
        raise EpisodeError("shot and query_per_class must both be >= 1")
    need = shot + query_per_class
    counts = np.bincount(task.pseudo_labels, minlength=task.way)
    eligible = [c for c in range(task.way) if counts[c] >= need]
    if len(eligible) < 2:
        raise EpisodeError(
            f"only {len(eligible)} pseudo-classes have {need}+ members "
            f"(cluster sizes {counts.tolist()})"
        )
    sup_idx: list[np.ndarray] = []
    qry_idx: list[np.ndarray] = []
    for c in eligible:
        members = np.flatnonzero(task.pseudo_labels == c)
        pick = rng.choice(members, size=need, replace=False)
        sup_idx.append(pick[:shot])
        qry_idx.append(pick[shot:])
    support = np.concatenate(sup_idx)
    query = np.concatenate(qry_idx)
    positions = np.arange(len(eligible))
    return Episode(
        support_x=task.inputs[support],
        support_y=np.repeat(positions, shot),
        query_x=task.inputs[query],
        query_y=np.repeat(positions, query_per_class),
        shot=shot,
        query_per_class=query_per_class,
        class_ids=tuple(eligible),
    )


def build_training_episode(
    unlabeled: np.ndarray,
    way: int,
    shot: int,
    query_per_class: int,
    r1: float,
    r2: float,
    strategy: str,
    rng: np.random.Generator,
    gaussian_sigma: float = 0.1,
    max_retries: int = 20,
) -> tuple[PseudoTask, Episode]:
    """Generate a task and draw one episode, regenerating with a fresh mask
    when the clustering leaves fewer than two usable pseudo-classes."""
    last = None
    for _ in range(max_retries):
        task = generate_task(unlabeled, way, r1, r2, strategy, rng, gaussian_sigma)
        try:
            return task, sample_episode(task, shot, query_per_class, rng)
        except EpisodeError as exc:
            last = exc
    raise TaskGenerationError(
        f"gave up after {max_retries} task regenerations: {last}"
    )


def task_to_csv(task: PseudoTask, path) -> None:
    """Debug dump: corrupted inputs plus the pseudo-label column."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(task.inputs.shape[1])] + ["pseudo_label"])
        for row, label in zip(task.inputs, task.pseudo_labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])
