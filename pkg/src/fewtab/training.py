"""Outer meta-training loop, unsupervised validation, and grid search.

Each step generates a fresh batch of tasks (one random mask each), draws
one episode per task, averages the episode gradients, and applies a single
Adam update. Every ``val_interval`` steps (and always at the final step)
the encoder is scored on clustering-labeled validation episodes; the best
scoring snapshot is kept for adaptation.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import tasks
from .errors import FewtabError
from .protonet import (
    AdamState,
    EncoderParams,
    adam_step,
    classify,
    compute_prototypes,
    encode,
    episode_loss_and_grad,
    init_params,
)

CKPT_MAGIC = "FEWTAB-CKPT 1"


class ConfigError(FewtabError):
    pass


class ValidationError(FewtabError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one meta-training run. Defaults are the common
    full-profile settings; per-dataset values come from config files."""

    shot: int = 1
    query_per_class: int = 15
    way: int = 5
    r1: float = 0.2
    r2: float = 0.5
    strategy: str = tasks.MARGINAL
    gaussian_sigma: float = 0.1
    meta_batch: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-4
    hidden: int = 1024
    embed: int = 1024
    total_steps: int = 10000
    val_interval: int = 200
    val_episodes: int = 100
    val_query_per_class: int = 15
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.shot < 1:
            problems.append(f"shot must be >= 1, got {self.shot}")
        if self.query_per_class < 1:
            problems.append(f"query_per_class must be >= 1, got {self.query_per_class}")
        if self.way < 2:
            problems.append(f"way must be >= 2, got {self.way}")
        if not (0.0 < self.r1 < self.r2 < 1.0):
            problems.append(f"need 0 < r1 < r2 < 1, got r1={self.r1}, r2={self.r2}")
        if self.meta_batch < 1:
            problems.append(f"meta_batch must be >= 1, got {self.meta_batch}")
        if self.strategy not in tasks.STRATEGIES:
            problems.append(f"strategy must be one of {tasks.STRATEGIES}, got {self.strategy!r}")
        if self.total_steps < 1:
            problems.append(f"total_steps must be >= 1, got {self.total_steps}")
        if self.val_interval < 1:
            problems.append(f"val_interval must be >= 1, got {self.val_interval}")
        if self.val_episodes < 1:
            problems.append(f"val_episodes must be >= 1, got {self.val_episodes}")
        if min(self.hidden, self.embed) < 1:
            problems.append("hidden and embed must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))


FAST_PROFILE = {"hidden": 256, "embed": 256, "total_steps": 2000}


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Checkpoint:
    params: EncoderParams
    step: int
    pseudo_val_accuracy: float
    config_hash: str


@dataclass(frozen=True)
class LogRecord:
    step: int
    loss: float
    val_accuracy: float | None = None


@dataclass(frozen=True)
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: tuple[LogRecord, ...]


def pseudo_validate(
    params: EncoderParams,
    val_rows: np.ndarray,
    n_classes: int,
    episodes: int,
    rng: np.random.Generator,
    shot: int = 1,
    query_per_class: int = 15,
) -> float:
    """Mean prototype-classifier accuracy over clustering-labeled episodes.

    One validation task is built per call (all columns, clean inputs,
    k = n_classes); episodes are then drawn from it. When the smallest
    usable cluster cannot supply ``query_per_class`` queries, the query
    count shrinks for this call so at least two classes stay usable.
    """
    if episodes < 1:
        raise ValidationError(f"need at least one validation episode, got {episodes}")
    val_rows = np.asarray(val_rows, dtype=np.float64)
    if val_rows.shape[0] < n_classes * (shot + 1):
        raise ValidationError(
            f"{val_rows.shape[0]} validation rows cannot support {n_classes} classes "
            f"with {shot} support row(s) and a query each"
        )
    task = tasks.build_validation_task(val_rows, n_classes, rng)
    counts = np.sort(np.bincount(task.pseudo_labels, minlength=n_classes))[::-1]
    second_largest = int(counts[1]) if len(counts) > 1 else 0
    qpc = min(query_per_class, second_largest - shot)
    if qpc < 1:
        raise ValidationError(
            f"cluster sizes {counts.tolist()} leave fewer than two usable validation classes"
        )
    total = 0.0
    for _ in range(episodes):
        episode = tasks.sample_episode(task, shot, qpc, rng)
        protos = compute_prototypes(encode(params, episode.support_x), episode.support_y)
        probs = classify(encode(params, episode.query_x), protos)
        predicted = np.argmax(probs, axis=1)
        total += float(np.mean(predicted == episode.query_y))
    return total / episodes


def meta_train(
    unlabeled: np.ndarray,
    val_rows: np.ndarray,
    n_classes: int,
    config: TrainConfig,
) -> TrainResult:
    """Run the full meta-training loop and return the best and final
    checkpoints plus the step-by-step log."""
    config.validate()
    unlabeled = np.asarray(unlabeled, dtype=np.float64)
    chash = config_hash(config)
    params = init_params(
        unlabeled.shape[1], config.hidden, config.embed,
        rngmod.derive_rng(config.seed, rngmod.INIT),
    )
    state = AdamState.for_params(params)
    log: list[LogRecord] = []
    best: Checkpoint | None = None

    for step in range(1, config.total_steps + 1):
        grad_sum: EncoderParams | None = None
        loss_sum = 0.0
        for j in range(config.meta_batch):
            task_rng = rngmod.derive_rng(config.seed, rngmod.TASK, step, j)
            _, episode = tasks.build_training_episode(
                unlabeled,
                config.way,
                config.shot,
                config.query_per_class,
                config.r1,
                config.r2,
                config.strategy,
                task_rng,
                gaussian_sigma=config.gaussian_sigma,
            )
            loss, grads = episode_loss_and_grad(params, episode)
            loss_sum += loss
            if grad_sum is None:
                grad_sum = grads
            else:
                grad_sum = EncoderParams(
                    w1=grad_sum.w1 + grads.w1,
                    b1=grad_sum.b1 + grads.b1,
                    w2=grad_sum.w2 + grads.w2,
                    b2=grad_sum.b2 + grads.b2,
                )
        scale = 1.0 / config.meta_batch
        grad_avg = EncoderParams(
            w1=grad_sum.w1 * scale,
            b1=grad_sum.b1 * scale,
            w2=grad_sum.w2 * scale,
            b2=grad_sum.b2 * scale,
        )
        params = adam_step(params, grad_avg, state, config.lr, config.weight_decay)
        mean_loss = loss_sum / config.meta_batch

        val_accuracy = None
        if step % config.val_interval == 0 or step == config.total_steps:
            val_accuracy = pseudo_validate(
                params,
                val_rows,
                n_classes,
                config.val_episodes,
                rngmod.derive_rng(config.seed, rngmod.VALIDATE, step),
                shot=1,
                query_per_class=config.val_query_per_class,
            )
            if best is None or val_accuracy > best.pseudo_val_accuracy:
                best = Checkpoint(params.copy(), step, val_accuracy, chash)
        log.append(LogRecord(step=step, loss=mean_loss, val_accuracy=val_accuracy))

    final = Checkpoint(params.copy(), config.total_steps, log[-1].val_accuracy, chash)
    return TrainResult(best=best, final=final, log=tuple(log))


@dataclass(frozen=True)
class GridSpec:
    shot_query: tuple[tuple[int, int], ...]
    ways: tuple[int, ...]

    def __post_init__(self):
        if not self.shot_query or not self.ways:
            raise ConfigError("grid must list at least one (shot, query) pair and one way")

    def points(self) -> list[tuple[int, int, int]]:
        return [(s, q, w) for (s, q) in self.shot_query for w in self.ways]


@dataclass
class GridPointResult:
    index: int
    config: TrainConfig
    best_val_accuracy: float | None = None
    result: TrainResult | None = None
    error: str | None = None


def grid_search(
    unlabeled: np.ndarray,
    val_rows: np.ndarray,
    n_classes: int,
    grid: GridSpec,
    base_config: TrainConfig,
    threads: int = 1,
) -> list[GridPointResult]:
    """Train one run per grid point and rank by best validation accuracy.

    Point seeds derive from (base seed, point index) so points are
    independent but reproducible. Failures are recorded per point rather
    than aborting the sweep. The returned list is sorted by accuracy
    descending (failed points last), each entry keeping its grid index.
    """
    points = grid.points()
    results = [
        GridPointResult(
            index=i,
            config=replace(
                base_config,
                shot=s,
                query_per_class=q,
                way=w,
                seed=rngmod.derive_seed(base_config.seed, rngmod.GRID, i),
            ),
        )
        for i, (s, q, w) in enumerate(points)
    ]

    def run(point: GridPointResult) -> None:
        try:
            point.result = meta_train(unlabeled, val_rows, n_classes, point.config)
            point.best_val_accuracy = point.result.best.pseudo_val_accuracy
        except FewtabError as exc:
            point.error = str(exc)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, results))
    else:
        for point in results:
            run(point)
    return sorted(
        results,
        key=lambda p: (-(p.best_val_accuracy if p.best_val_accuracy is not None else -np.inf), p.index),
    )


# ---------------------------------------------------------------------------
# checkpoint persistence: versioned header line, JSON metadata, then the raw
# little-endian float64 weight blobs in a fixed order

def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    params = checkpoint.params
    header = {
        "in_dim": params.in_dim,
        "hidden": params.hidden_dim,
        "embed": params.embed_dim,
        "step": checkpoint.step,
        "val_accuracy": checkpoint.pseudo_val_accuracy,
        "config_hash": checkpoint.config_hash,
    }
    blob = b"".join(
        np.ascontiguousarray(getattr(params, f), dtype="<f8").tobytes()
        for f in ("w1", "b1", "w2", "b2")
    )
    with Path(path).open("wb") as fh:
        fh.write(CKPT_MAGIC.encode("ascii") + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FewtabError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    magic, _, rest = raw.partition(b"\n")
    if magic.decode("ascii", errors="replace") != CKPT_MAGIC:
        raise FewtabError(f"{path}: not a checkpoint file (bad magic {magic!r})")
    header_line, _, blob = rest.partition(b"\n")
    header = json.loads(header_line.decode("utf-8"))
    d, h, e = header["in_dim"], header["hidden"], header["embed"]
    sizes = [d * h, h, h * e, e]
    if len(blob) != 8 * sum(sizes):
        raise FewtabError(f"{path}: weight blob has {len(blob)} bytes, expected {8 * sum(sizes)}")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    offsets = np.cumsum([0] + sizes)
    params = EncoderParams(
        w1=flat[offsets[0] : offsets[1]].reshape(d, h),
        b1=flat[offsets[1] : offsets[2]].copy(),
        w2=flat[offsets[2] : offsets[3]].reshape(h, e),
        b2=flat[offsets[3] : offsets[4]].copy(),
    )
    return Checkpoint(
        params=params,
        step=header["step"],
        pseudo_val_accuracy=header["val_accuracy"],
        config_hash=header["config_hash"],
    )


def save_log(log, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in log:
            payload = {"step": record.step, "loss": record.loss}
            if record.val_accuracy is not None:
                payload["val_accuracy"] = record.val_accuracy
            fh.write(json.dumps(payload, sort_keys=True) + "\n")


def load_log(path) -> tuple[LogRecord, ...]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        payload = json.loads(line)
        records.append(
            LogRecord(payload["step"], payload["loss"], payload.get("val_accuracy"))
        )
    return tuple(records)
