import numpy as np
import pytest

from conftest import write_classification_dataset
from fewtab import tabular
from fewtab.tabular import (
    ColumnSchema,
    LoadError,
    SchemaError,
    SplitError,
    apply_scaler,
    encode,
    fit_and_scale,
    fit_scaler,
    load_csv,
    make_splits,
    parse_schema_file,
    sample_labeled,
    validate_schema,
)


def small_schema():
    return (
        ColumnSchema("age", "numerical"),
        ColumnSchema("sex", "categorical", ("M", "F")),
        ColumnSchema("label", "target", ("no", "yes")),
    )


def write_csv(path, rows, header="age,sex,label"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return path


# --- schema ---

def test_schema_invariants():
    with pytest.raises(SchemaError):
        ColumnSchema("c", "categorical", ())
    with pytest.raises(SchemaError):
        ColumnSchema("c", "categorical", ("A", "A"))
    with pytest.raises(SchemaError):
        ColumnSchema("c", "weird")
    with pytest.raises(SchemaError):
        validate_schema((ColumnSchema("a", "numerical"),))  # no target
    with pytest.raises(SchemaError):
        validate_schema(
            (ColumnSchema("a", "target", ("x", "y")), ColumnSchema("b", "target", ("x", "y")))
        )


def test_parse_schema_file(tmp_path):
    text = "# demo\nage: numerical\nsex: categorical M F\nlabel: target no yes\n"
    path = tmp_path / "d.schema"
    path.write_text(text, encoding="utf-8")
    schema, options = parse_schema_file(path)
    assert schema == small_schema()
    assert options["predefined_test"] is None


def test_parse_schema_predefined_test_directive(tmp_path):
    path = tmp_path / "d.schema"
    path.write_text("@predefined_test other.csv\nage: numerical\nlabel: target a b\n")
    _, options = parse_schema_file(path)
    assert options["predefined_test"] == (tmp_path / "other.csv").resolve()


# --- loading ---

def test_load_three_rows(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["31,M,no", "45,F,yes", "27,F,no"])
    raw = load_csv(path, small_schema())
    assert raw.n_rows == 3
    assert raw.columns["age"] == [31.0, 45.0, 27.0]
    assert raw.columns["sex"] == ["M", "F", "F"]


def test_load_nan_cell_names_row_and_column(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["31,M,no", "NaN,F,yes"])
    with pytest.raises(LoadError, match=r"row 3.*'age'"):
        load_csv(path, small_schema())


def test_load_unknown_category(tmp_path):
    path = write_csv(tmp_path / "d.csv", ["31,X,no"])
    with pytest.raises(LoadError, match=r"'sex'.*'X'"):
        load_csv(path, small_schema())


def test_load_missing_column(tmp_path):
    path = (tmp_path / "d.csv")
    path.write_text("age,label\n31,no\n", encoding="utf-8")
    with pytest.raises(LoadError, match="missing columns"):
        load_csv(path, small_schema())


# --- encoding ---

def test_one_hot_block():
    schema = (
        ColumnSchema("c", "categorical", ("A", "B", "C")),
        ColumnSchema("label", "target", ("x", "y")),
    )
    raw = tabular.RawTable(schema, {"c": ["B"], "label": ["x"]}, 1)
    table = encode(raw)
    np.testing.assert_array_equal(table.values, [[0.0, 1.0, 0.0]])
    assert table.column_names == ("c=A", "c=B", "c=C")
    assert table.feature_origin == ("c", "c", "c")


def test_encoded_width_numeric_plus_categorical():
    schema = (
        ColumnSchema("a", "numerical"),
        ColumnSchema("b", "numerical"),
        ColumnSchema("c", "categorical", ("A", "B", "C")),
        ColumnSchema("label", "target", ("x", "y")),
    )
    raw = tabular.RawTable(
        schema, {"a": [1.0], "b": [2.0], "c": ["C"], "label": ["y"]}, 1
    )
    table = encode(raw)
    assert table.dims == 5
    assert table.target.tolist() == [1]
    assert table.n_classes == 2


def test_binary_indicator_table_keeps_width(tmp_path):
    # dna-style: 180 already-binary indicator columns typed numerical
    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, size=(10, 180)).astype(float)
    y = rng.integers(0, 3, size=10)
    csv_path, schema_path = write_classification_dataset(tmp_path, "dna_like", x, y)
    schema, _ = parse_schema_file(schema_path)
    table = encode(load_csv(csv_path, schema))
    assert table.dims == 180


def test_one_hot_rows_sum_to_one():
    rng = np.random.default_rng(3)
    cats = ("A", "B", "C", "D")
    schema = (
        ColumnSchema("n", "numerical"),
        ColumnSchema("c1", "categorical", cats),
        ColumnSchema("c2", "categorical", cats[:2]),
        ColumnSchema("label", "target", ("x", "y")),
    )
    n = 50
    raw = tabular.RawTable(
        schema,
        {
            "n": rng.normal(size=n).tolist(),
            "c1": [cats[i] for i in rng.integers(0, 4, n)],
            "c2": [cats[i] for i in rng.integers(0, 2, n)],
            "label": ["x"] * n,
        },
        n,
    )
    table = encode(raw)
    for name in ("c1", "c2"):
        block = [j for j, src in enumerate(table.feature_origin) if src == name]
        np.testing.assert_array_equal(table.values[:, block].sum(axis=1), np.ones(n))


# --- scaling ---

def _numeric_table(columns, target=None):
    values = np.asarray(columns, dtype=np.float64)
    names = tuple(f"f{j}" for j in range(values.shape[1]))
    return tabular.EncodedTable(
        values=values,
        column_names=names,
        feature_origin=names,
        target=None if target is None else np.asarray(target),
        target_kind=None if target is None else tabular.REGRESSION,
        n_classes=None,
    )


def test_min_max_column():
    table, _ = fit_and_scale(_numeric_table([[2.0], [4.0], [6.0]]), "min_max")
    np.testing.assert_allclose(table.values[:, 0], [0.0, 0.5, 1.0])


def test_standardize_column():
    table, _ = fit_and_scale(_numeric_table([[1.0], [3.0]]), "standardize")
    np.testing.assert_allclose(table.values[:, 0], [-1.0, 1.0])


def test_constant_column_maps_to_zero():
    for mode in ("min_max", "standardize"):
        table, _ = fit_and_scale(_numeric_table([[7.0], [7.0], [7.0]]), mode)
        np.testing.assert_array_equal(table.values[:, 0], [0.0, 0.0, 0.0])


def test_min_max_idempotent_on_scaled_data():
    scaled, _ = fit_and_scale(_numeric_table([[2.0, -1.0], [4.0, 0.0], [6.0, 3.0]]), "min_max")
    rescaled, _ = fit_and_scale(scaled, "min_max")
    np.testing.assert_array_equal(rescaled.values, scaled.values)


def test_test_rows_never_touch_scaler_stats():
    train = _numeric_table([[0.0, 5.0], [10.0, 7.0], [4.0, 6.0]])
    test = _numeric_table([[100.0, -3.0]])
    stats = fit_scaler(train, "min_max")
    _ = apply_scaler(test, stats)
    refit = fit_scaler(train, "min_max")
    np.testing.assert_array_equal(stats.center, refit.center)
    np.testing.assert_array_equal(stats.spread, refit.spread)


def test_empty_table_error():
    with pytest.raises(SchemaError):
        fit_scaler(_numeric_table(np.empty((0, 2))), "min_max")


def test_scaler_json_roundtrip():
    stats = fit_scaler(_numeric_table([[1.0, 2.0], [3.0, 4.0]], target=[0.5, 1.5]), "min_max")
    back = tabular.ScalerStats.from_json(stats.to_json())
    np.testing.assert_array_equal(back.center, stats.center)
    np.testing.assert_array_equal(back.spread, stats.spread)
    assert back.target_center == stats.target_center
    assert back.target_spread == stats.target_spread


# --- splits ---

def _labeled_table(n, n_classes=2, d=3, seed=0):
    rng = np.random.default_rng(seed)
    names = tuple(f"f{j}" for j in range(d))
    return tabular.EncodedTable(
        values=rng.normal(size=(n, d)),
        column_names=names,
        feature_origin=names,
        target=rng.integers(0, n_classes, size=n),
        target_kind=tabular.CLASSIFICATION,
        n_classes=n_classes,
    )


def test_split_sizes_match_fractions():
    splits = make_splits(_labeled_table(1000), seed=1)
    assert splits.test.rows == 200
    assert splits.pseudo_val.rows == 160
    assert splits.train_unlabeled.rows == 640
    assert splits.labeled_pool.rows == 800


def test_split_determinism_and_partition():
    table = _labeled_table(203)
    a = make_splits(table, seed=5)
    b = make_splits(table, seed=5)
    assert a.train_indices == b.train_indices
    assert a.val_indices == b.val_indices
    assert a.test_indices == b.test_indices
    covered = set(a.train_indices) | set(a.val_indices) | set(a.test_indices)
    assert covered == set(range(203))
    assert len(a.train_indices) + len(a.val_indices) + len(a.test_indices) == 203


def test_labels_stripped_from_unlabeled_splits():
    splits = make_splits(_labeled_table(100), seed=2)
    assert splits.train_unlabeled.target is None
    assert splits.pseudo_val.target is None
    assert splits.test.target is not None
    assert splits.labeled_pool.target is not None


def test_too_few_rows():
    with pytest.raises(SplitError):
        make_splits(_labeled_table(3), seed=0)


def test_predefined_test_split_honored():
    train = _labeled_table(50, seed=1)
    test = _labeled_table(20, seed=2)
    splits = make_splits(train, seed=0, test_table=test)
    assert splits.test.rows == 20
    assert splits.labeled_pool.rows == 50
    np.testing.assert_array_equal(splits.test.values, test.values)


# --- labeled sampling ---

def test_sample_labeled_counts():
    pool = _labeled_table(60, n_classes=2, seed=3)
    one = sample_labeled(pool, 1, seed=0)
    assert one.rows == 2
    assert sorted(one.target.tolist()) == [0, 1]
    pool10 = _labeled_table(400, n_classes=10, seed=4)
    five = sample_labeled(pool10, 5, seed=0)
    assert five.rows == 50
    assert np.bincount(five.target, minlength=10).tolist() == [5] * 10


def test_sample_labeled_insufficient_class_named():
    pool = _labeled_table(30, n_classes=2, seed=5)
    missing = tabular.EncodedTable(
        values=pool.values,
        column_names=pool.column_names,
        feature_origin=pool.feature_origin,
        target=np.zeros(30, dtype=np.int64),  # class 1 absent
        target_kind=tabular.CLASSIFICATION,
        n_classes=2,
    )
    with pytest.raises(SplitError, match="class 1"):
        sample_labeled(missing, 1, seed=0)


def test_sample_labeled_deterministic():
    pool = _labeled_table(80, n_classes=4, seed=6)
    a = sample_labeled(pool, 3, seed=9)
    b = sample_labeled(pool, 3, seed=9)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.target, b.target)


# --- persistence ---

def test_splits_roundtrip(tmp_path):
    table = _labeled_table(120, n_classes=3, seed=7)
    splits = make_splits(table, seed=11)
    stats = fit_scaler(splits.labeled_pool, "min_max")
    tabular.save_splits(splits, tmp_path, "demo", stats, "min_max")
    loaded, meta = tabular.load_splits(tmp_path)
    assert meta["dataset_id"] == "demo"
    assert meta["n_classes"] == 3
    np.testing.assert_array_equal(loaded.labeled_pool.values, splits.labeled_pool.values)
    np.testing.assert_array_equal(loaded.labeled_pool.target, splits.labeled_pool.target)
    np.testing.assert_array_equal(loaded.train_unlabeled.values, splits.train_unlabeled.values)
    assert loaded.test.target_kind == tabular.CLASSIFICATION
    manifest = (tmp_path / "split_manifest.txt").read_text()
    assert manifest.startswith("seed 11")
