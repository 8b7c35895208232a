"""Loading, encoding, scaling and splitting of tabular datasets.

A dataset is a CSV file plus a sidecar schema file that types every column
(numerical, categorical with a closed category set, or the single target).
Encoding produces a dense float64 matrix: categorical columns become
one-hot blocks, the target becomes class indices (classification) or a
float vector (regression). Scaler statistics are fit on training rows only
and reapplied unchanged everywhere else.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FewtabError

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
TARGET = "target"
_KINDS = (NUMERICAL, CATEGORICAL, TARGET)

MIN_MAX = "min_max"
STANDARDIZE = "standardize"
SCALE_MODES = (MIN_MAX, STANDARDIZE)

CLASSIFICATION = "classification"
REGRESSION = "regression"

TARGET_COLUMN = "__target__"


class SchemaError(FewtabError):
    pass


class LoadError(FewtabError):
    pass


class SplitError(FewtabError):
    pass


@dataclass(frozen=True)
class ColumnSchema:
    """One typed column. Target columns with a category list are
    classification targets; without one they are regression targets."""

    name: str
    kind: str
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise SchemaError(f"column {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and not self.categories:
            raise SchemaError(f"categorical column {self.name!r} needs a category list")
        if self.categories and len(set(self.categories)) != len(self.categories):
            raise SchemaError(f"column {self.name!r}: duplicate categories")


def validate_schema(columns: tuple[ColumnSchema, ...]) -> None:
    names = [c.name for c in columns]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate column names in schema")
    targets = [c for c in columns if c.kind == TARGET]
    if len(targets) != 1:
        raise SchemaError(f"schema must have exactly one target column, found {len(targets)}")


def parse_schema_file(path) -> tuple[tuple[ColumnSchema, ...], dict]:
    """Read a sidecar schema file.

    Format, one column per line: ``name: kind [category ...]``. Lines
    starting with ``#`` are comments. A ``@predefined_test <csv path>``
    directive points at a dataset that ships its own test split; the path
    is resolved relative to the schema file.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"schema file not found: {path}")
    columns: list[ColumnSchema] = []
    options: dict = {"predefined_test": None}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@"):
            key, _, value = line[1:].partition(" ")
            if key != "predefined_test" or not value.strip():
                raise SchemaError(f"{path}:{lineno}: unknown directive {line!r}")
            options["predefined_test"] = (path.parent / value.strip()).resolve()
            continue
        name, sep, rest = line.partition(":")
        if not sep:
            raise SchemaError(f"{path}:{lineno}: expected 'name: kind [categories]', got {line!r}")
        parts = rest.split()
        if not parts:
            raise SchemaError(f"{path}:{lineno}: missing kind for column {name.strip()!r}")
        columns.append(ColumnSchema(name.strip(), parts[0], tuple(parts[1:])))
    schema = tuple(columns)
    validate_schema(schema)
    return schema, options


@dataclass(frozen=True)
class RawTable:
    """Parsed but not yet encoded rows, column-major."""

    schema: tuple[ColumnSchema, ...]
    columns: dict
    n_rows: int


def load_csv(path, schema: tuple[ColumnSchema, ...]) -> RawTable:
    """Parse a CSV with a header row against the schema.

    Numerical cells must parse as finite reals and categorical cells must
    belong to the declared category set; violations raise a LoadError that
    names the row and column.
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"csv file not found: {path}")
    validate_schema(schema)
    by_name = {c.name: c for c in schema}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c.name for c in schema if c.name not in header]
        if missing:
            raise LoadError(f"{path}: missing columns {missing}")
        unknown = [h for h in header if h not in by_name]
        if unknown:
            raise LoadError(f"{path}: columns not in schema: {unknown}")
        positions = {name: header.index(name) for name in by_name}
        columns: dict = {c.name: [] for c in schema}
        n_rows = 0
        for rowno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise LoadError(f"{path}: row {rowno}: expected {len(header)} cells, got {len(row)}")
            for col in schema:
                cell = row[positions[col.name]].strip()
                if col.kind == NUMERICAL or (col.kind == TARGET and not col.categories):
                    try:
                        value = float(cell)
                    except ValueError:
                        value = math.nan
                    if not math.isfinite(value):
                        raise LoadError(
                            f"{path}: row {rowno}, column {col.name!r}: "
                            f"cannot parse {cell!r} as a finite number"
                        )
                    columns[col.name].append(value)
                else:
                    if cell not in col.categories:
                        raise LoadError(
                            f"{path}: row {rowno}, column {col.name!r}: "
                            f"unknown category {cell!r} (expected one of {list(col.categories)})"
                        )
                    columns[col.name].append(cell)
            n_rows += 1
    return RawTable(schema=schema, columns=columns, n_rows=n_rows)


@dataclass(frozen=True)
class EncodedTable:
    """Dense numeric matrix plus column provenance and an optional target.

    Arrays are marked read-only after construction; tables are safe to
    share across threads.
    """

    values: np.ndarray  # (n, d) float64
    column_names: tuple[str, ...]
    feature_origin: tuple[str, ...]  # source schema column per encoded column
    target: np.ndarray | None = None
    target_kind: str | None = None  # "classification" | "regression"
    n_classes: int | None = None

    def __post_init__(self):
        self.values.setflags(write=False)
        if self.target is not None:
            self.target.setflags(write=False)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]

    def without_target(self) -> "EncodedTable":
        return replace(self, target=None)

    def take(self, indices) -> "EncodedTable":
        idx = np.asarray(indices, dtype=np.int64)
        target = None if self.target is None else self.target[idx].copy()
        return replace(self, values=self.values[idx].copy(), target=target)


def encode(raw: RawTable) -> EncodedTable:
    """One-hot encode categoricals, pass numericals through, pull the
    target out into its own vector."""
    schema = raw.schema
    target_col = next(c for c in schema if c.kind == TARGET)
    blocks: list[np.ndarray] = []
    names: list[str] = []
    origin: list[str] = []
    for col in schema:
        if col.kind == NUMERICAL:
            blocks.append(np.asarray(raw.columns[col.name], dtype=np.float64)[:, None])
            names.append(col.name)
            origin.append(col.name)
        elif col.kind == CATEGORICAL:
            cells = raw.columns[col.name]
            block = np.zeros((raw.n_rows, len(col.categories)), dtype=np.float64)
            index = {cat: j for j, cat in enumerate(col.categories)}
            for i, cell in enumerate(cells):
                block[i, index[cell]] = 1.0
            blocks.append(block)
            names.extend(f"{col.name}={cat}" for cat in col.categories)
            origin.extend(col.name for _ in col.categories)
    if blocks:
        values = np.hstack(blocks)
    else:
        values = np.empty((raw.n_rows, 0), dtype=np.float64)
    if target_col.categories:
        index = {cat: j for j, cat in enumerate(target_col.categories)}
        target = np.asarray([index[c] for c in raw.columns[target_col.name]], dtype=np.int64)
        kind, n_classes = CLASSIFICATION, len(target_col.categories)
    else:
        target = np.asarray(raw.columns[target_col.name], dtype=np.float64)
        kind, n_classes = REGRESSION, None
    return EncodedTable(
        values=values,
        column_names=tuple(names),
        feature_origin=tuple(origin),
        target=target,
        target_kind=kind,
        n_classes=n_classes,
    )


@dataclass(frozen=True)
class ScalerStats:
    """Per-column statistics fit on training rows.

    The transform is (x - center) / spread, with constant columns
    (spread 0) mapping to 0. For min_max the stats are (min, max - min),
    for standardize (mean, std). Regression targets get their own pair.
    """

    mode: str
    center: np.ndarray
    spread: np.ndarray
    target_center: float | None = None
    target_spread: float | None = None

    def to_json(self) -> str:
        payload = {
            "mode": self.mode,
            "center": self.center.tolist(),
            "spread": self.spread.tolist(),
            "target_center": self.target_center,
            "target_spread": self.target_spread,
        }
        return json.dumps(payload, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScalerStats":
        payload = json.loads(text)
        return cls(
            mode=payload["mode"],
            center=np.asarray(payload["center"], dtype=np.float64),
            spread=np.asarray(payload["spread"], dtype=np.float64),
            target_center=payload.get("target_center"),
            target_spread=payload.get("target_spread"),
        )


def fit_scaler(table: EncodedTable, mode: str) -> ScalerStats:
    if mode not in SCALE_MODES:
        raise SchemaError(f"unknown scaling mode {mode!r}, expected one of {SCALE_MODES}")
    if table.rows == 0:
        raise SchemaError("cannot fit scaler statistics on an empty table")
    if mode == MIN_MAX:
        center = table.values.min(axis=0)
        spread = table.values.max(axis=0) - center
    else:
        center = table.values.mean(axis=0)
        spread = table.values.std(axis=0)
    target_center = target_spread = None
    if table.target_kind == REGRESSION and table.target is not None:
        if mode == MIN_MAX:
            target_center = float(table.target.min())
            target_spread = float(table.target.max() - target_center)
        else:
            target_center = float(table.target.mean())
            target_spread = float(table.target.std())
    return ScalerStats(mode, center, spread, target_center, target_spread)


def apply_scaler(table: EncodedTable, stats: ScalerStats) -> EncodedTable:
    if stats.center.shape[0] != table.dims:
        raise SchemaError(
            f"scaler was fit on {stats.center.shape[0]} columns, table has {table.dims}"
        )
    safe = np.where(stats.spread > 0, stats.spread, 1.0)
    values = (table.values - stats.center) / safe
    values[:, stats.spread <= 0] = 0.0
    target = table.target
    if table.target_kind == REGRESSION and target is not None and stats.target_center is not None:
        if stats.target_spread and stats.target_spread > 0:
            target = (target - stats.target_center) / stats.target_spread
        else:
            target = np.zeros_like(target)
    return replace(table, values=values, target=None if target is None else np.array(target))


def fit_and_scale(table: EncodedTable, mode: str) -> tuple[EncodedTable, ScalerStats]:
    stats = fit_scaler(table, mode)
    return apply_scaler(table, stats), stats


@dataclass(frozen=True)
class DatasetSplits:
    """Row-disjoint unlabeled-train / pseudo-validation / test splits.

    ``labeled_pool`` aliases the training rows (train_unlabeled plus
    pseudo_val) with labels retained; real few-shot labeled sets are drawn
    from it and nothing else.
    """

    train_unlabeled: EncodedTable
    pseudo_val: EncodedTable
    test: EncodedTable
    labeled_pool: EncodedTable
    seed: int
    train_indices: tuple[int, ...]
    val_indices: tuple[int, ...]
    test_indices: tuple[int, ...]


def make_splits(
    table: EncodedTable,
    seed: int,
    test_table: EncodedTable | None = None,
    test_fraction: float = 0.2,
    val_fraction: float = 0.2,
) -> DatasetSplits:
    """Shuffle deterministically and carve test / pseudo-validation splits.

    When the dataset ships a predefined test split, pass it as
    ``test_table``: the main table then counts entirely as training rows
    and only the pseudo-validation carve-out is random.
    """
    rng = np.random.default_rng(seed)
    n = table.rows
    if test_table is not None:
        train_idx = rng.permutation(n)
        test = test_table
        test_indices: tuple[int, ...] = ()
    else:
        perm = rng.permutation(n)
        n_test = int(round(n * test_fraction))
        if n_test < 1 or n - n_test < 2:
            raise SplitError(f"{n} rows are too few to form train/test splits")
        test_idx = np.sort(perm[:n_test])
        train_idx = perm[n_test:]
        test = table.take(test_idx)
        test_indices = tuple(int(i) for i in test_idx)
    n_train = len(train_idx)
    n_val = int(round(n_train * val_fraction))
    if n_val < 1 or n_train - n_val < 1:
        raise SplitError(f"{n_train} training rows are too few to carve a pseudo-validation split")
    val_idx = np.sort(train_idx[:n_val])
    unlabeled_idx = np.sort(train_idx[n_val:])
    pool_idx = np.sort(train_idx)
    return DatasetSplits(
        train_unlabeled=table.take(unlabeled_idx).without_target(),
        pseudo_val=table.take(val_idx).without_target(),
        test=test,
        labeled_pool=table.take(pool_idx),
        seed=int(seed),
        train_indices=tuple(int(i) for i in unlabeled_idx),
        val_indices=tuple(int(i) for i in val_idx),
        test_indices=test_indices,
    )


def sample_labeled(pool: EncodedTable, shots_per_class: int, seed: int) -> EncodedTable:
    """Draw exactly ``shots_per_class`` rows per class, without replacement."""
    if pool.target is None or pool.target_kind != CLASSIFICATION:
        raise SplitError("labeled pool must carry classification labels")
    if shots_per_class < 1:
        raise SplitError(f"shots_per_class must be >= 1, got {shots_per_class}")
    rng = np.random.default_rng(seed)
    chosen: list[np.ndarray] = []
    for c in range(pool.n_classes):
        idx = np.flatnonzero(pool.target == c)
        if len(idx) < shots_per_class:
            raise SplitError(
                f"class {c} has only {len(idx)} rows in the labeled pool, "
                f"need {shots_per_class}"
            )
        chosen.append(rng.choice(idx, size=shots_per_class, replace=False))
    return pool.take(np.concatenate(chosen))


def sample_labeled_rows(pool: EncodedTable, n_rows: int, seed: int) -> EncodedTable:
    """Draw ``n_rows`` labeled rows uniformly, for regression pools."""
    if pool.target is None:
        raise SplitError("labeled pool carries no targets")
    if not 1 <= n_rows <= pool.rows:
        raise SplitError(f"cannot draw {n_rows} rows from a pool of {pool.rows}")
    rng = np.random.default_rng(seed)
    return pool.take(rng.choice(pool.rows, size=n_rows, replace=False))


# ---------------------------------------------------------------------------
# split persistence

_SPLIT_FILES = {
    "train_unlabeled": "train_unlabeled.csv",
    "pseudo_val": "pseudo_val.csv",
    "test": "test.csv",
    "labeled_pool": "labeled_pool.csv",
}


def _format_cell(x: float) -> str:
    return repr(float(x))


def write_table_csv(table: EncodedTable, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(table.column_names)
        if table.target is not None:
            header.append(TARGET_COLUMN)
        writer.writerow(header)
        for i in range(table.rows):
            row = [_format_cell(v) for v in table.values[i]]
            if table.target is not None:
                t = table.target[i]
                row.append(str(int(t)) if table.target_kind == CLASSIFICATION else _format_cell(t))
            writer.writerow(row)


def read_table_csv(path, meta: dict) -> EncodedTable:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"split file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_target = header and header[-1] == TARGET_COLUMN
        rows = list(reader)
    d = len(header) - (1 if has_target else 0)
    values = np.empty((len(rows), d), dtype=np.float64)
    target = None
    if has_target:
        kind = meta["target_kind"]
        target = np.empty(len(rows), dtype=np.int64 if kind == CLASSIFICATION else np.float64)
    for i, row in enumerate(rows):
        values[i] = [float(c) for c in row[:d]]
        if has_target:
            target[i] = int(row[d]) if meta["target_kind"] == CLASSIFICATION else float(row[d])
    return EncodedTable(
        values=values,
        column_names=tuple(header[:d]),
        feature_origin=tuple(meta["feature_origin"]),
        target=target,
        target_kind=meta["target_kind"] if has_target else None,
        n_classes=meta["n_classes"],
    )


def save_splits(splits: DatasetSplits, outdir, dataset_id: str, stats: ScalerStats, mode: str) -> None:
    """Persist splits as CSVs plus scaler stats, dataset metadata and a
    split manifest recording the seed and row indices."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for attr, filename in _SPLIT_FILES.items():
        write_table_csv(getattr(splits, attr), outdir / filename)
    (outdir / "scaler.json").write_text(stats.to_json(), encoding="utf-8")
    table = splits.labeled_pool
    meta = {
        "dataset_id": dataset_id,
        "column_names": list(table.column_names),
        "feature_origin": list(table.feature_origin),
        "target_kind": table.target_kind,
        "n_classes": table.n_classes,
        "mode": mode,
        "seed": splits.seed,
    }
    (outdir / "dataset.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    lines = [f"seed {splits.seed}"]
    for name, indices in (
        ("train_unlabeled", splits.train_indices),
        ("pseudo_val", splits.val_indices),
        ("test", splits.test_indices),
    ):
        lines.append(f"{name} {' '.join(map(str, indices))}")
    (outdir / "split_manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_splits(splits_dir) -> tuple[DatasetSplits, dict]:
    splits_dir = Path(splits_dir)
    meta_path = splits_dir / "dataset.json"
    if not meta_path.exists():
        raise LoadError(f"not a splits directory (missing dataset.json): {splits_dir}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    tables = {
        attr: read_table_csv(splits_dir / filename, meta)
        for attr, filename in _SPLIT_FILES.items()
    }
    splits = DatasetSplits(
        train_unlabeled=tables["train_unlabeled"],
        pseudo_val=tables["pseudo_val"],
        test=tables["test"],
        labeled_pool=tables["labeled_pool"],
        seed=meta.get("seed", 0),
        train_indices=(),
        val_indices=(),
        test_indices=(),
    )
    return splits, meta
