import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedalign.data import (
    PHASE_LEAVES,
    ConfigError,
    CsvSchema,
    PartitionConfig,
    RawTable,
    RowParseError,
    SchemaError,
    client_angles,
    load_csv,
    partition,
    partition_indices,
    partition_report,
    redraw_support_query,
    split_sizes,
    support_query_split,
    synth_noniid_clients,
    synth_public,
    synth_tables,
)
from fedalign.nn import AdamState, accuracy, init_params, train_online

FEATURES = tuple(f"f{i}" for i in range(9))
SCHEMA = CsvSchema(FEATURES, "label", "fault")


def write_csv(path, rows, header=(*FEATURES, "label")):
    path.write_text(",".join(header) + "\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


# -- load_csv ------------------------------------------------------------------


def test_load_three_rows(tmp_path):
    rows = [[*range(9), "fault"], [*range(1, 10), "ok"], [*range(2, 11), "fault"]]
    table = load_csv(write_csv(tmp_path / "a.csv", rows), SCHEMA)
    assert len(table) == 3
    assert table.features.shape == (3, 9)
    assert table.labels.tolist() == [1, 0, 1]


def test_missing_label_column_named(tmp_path):
    path = write_csv(tmp_path / "a.csv", [[*range(9)]], header=FEATURES)
    with pytest.raises(SchemaError, match="label"):
        load_csv(path, SCHEMA)


def test_nan_row_reports_index(tmp_path):
    rows = [[*range(9), "ok"], [*range(8), "NaN", "fault"], [*range(9), "ok"]]
    with pytest.raises(RowParseError) as err:
        load_csv(write_csv(tmp_path / "a.csv", rows), SCHEMA)
    assert [i for i, _ in err.value.errors] == [1]
    assert "row 1" in str(err.value)


def test_unparseable_value(tmp_path):
    rows = [[*range(9), "ok"], ["abc", *range(8), "ok"]]
    with pytest.raises(RowParseError):
        load_csv(write_csv(tmp_path / "a.csv", rows), SCHEMA)


def test_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("")
    with pytest.raises(SchemaError):
        load_csv(path, SCHEMA)


def test_non_binary_labels(tmp_path):
    rows = [[*range(9), "a"], [*range(9), "b"], [*range(9), "fault"]]
    with pytest.raises(SchemaError, match="distinct"):
        load_csv(write_csv(tmp_path / "a.csv", rows), SCHEMA)


# -- partition -----------------------------------------------------------------


def table(n, d=9, seed=0):
    rng = np.random.default_rng(seed)
    return RawTable(rng.normal(size=(n, d)), rng.integers(0, 2, size=n))


def test_default_partition_sizes_1000():
    parts = partition_indices(1000, 0)
    assert len(parts["test"]) == 200
    assert len(parts["p1"]) == 160
    assert len(parts["p2"]) == 400
    assert len(parts["personal"]) == 240
    assert len(parts["p1_support"]) == 128 and len(parts["p1_query"]) == 32
    assert len(parts["p2_support"]) == 320 and len(parts["p2_query"]) == 80
    assert len(parts["tune"]) == 192 and len(parts["val"]) == 48


def test_half_split_two_rows():
    assert split_sizes(2, [0.5, 0.5]) == [1, 1]
    sup, qry = support_query_split(np.array([7, 9]), 0, 0.5)
    assert len(sup) == len(qry) == 1
    assert set(sup) | set(qry) == {7, 9}


def test_support_query_ten_rows():
    sup, qry = support_query_split(np.arange(10), 3, 0.8)
    assert (len(sup), len(qry)) == (8, 2)


def test_support_query_too_small():
    with pytest.raises(ConfigError):
        support_query_split(np.arange(1), 0)


def test_remainder_goes_to_largest_leaf():
    assert split_sizes(7, [0.2, 0.5, 0.3]) == [1, 4, 2]
    assert split_sizes(10, [0.3, 0.3, 0.4]) == [3, 3, 4]


def test_ratios_must_sum_to_one():
    with pytest.raises(ConfigError):
        split_sizes(10, [0.5, 0.6])


def test_partition_deterministic():
    a = partition_indices(500, 42)
    b = partition_indices(500, 42)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    c = partition_indices(500, 43)
    assert not np.array_equal(a["test"], c["test"])


def test_too_small_dataset_is_config_error():
    with pytest.raises(ConfigError):
        partition_indices(8, 0)


def test_normalization_uses_training_rows():
    ds = partition(table(400, seed=2), 5)
    X = ds.features[ds.partitions["train"]]
    np.testing.assert_allclose(X.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(X.std(axis=0), 1.0, atol=1e-6)


def test_constant_feature_std_floor():
    t = table(100)
    t.features[:, 3] = 5.0
    ds = partition(t, 0)
    assert np.isfinite(ds.features).all()
    assert ds.stats.std[3] == 1e-8


def test_partition_report_is_json_and_stable():
    ds = partition(table(300), 1, client_id="c")
    rep1 = partition_report([ds])
    rep2 = partition_report([partition(table(300), 1, client_id="c")])
    assert rep1 == rep2
    assert '"sha256"' in rep1


def test_redraw_changes_only_requested_phase():
    ds = partition(table(300), 1)
    re = redraw_support_query(ds, "p2", [1, 2, 3])
    assert set(re.partitions["p2_support"]) | set(re.partitions["p2_query"]) == set(ds.partitions["p2"])
    np.testing.assert_array_equal(re.partitions["p1_support"], ds.partitions["p1_support"])


@settings(max_examples=1000, deadline=None)
@given(st.integers(40, 3000), st.integers(0, 2**32 - 1))
def test_partition_disjoint_and_exhaustive(n, seed):
    parts = partition_indices(n, seed)
    leaves = [parts[k] for k in PHASE_LEAVES]
    joined = np.concatenate(leaves)
    assert len(joined) == n
    assert len(np.unique(joined)) == n
    train_side = np.concatenate([parts[k] for k in PHASE_LEAVES[1:]])
    assert not set(parts["test"]) & set(train_side)
    assert set(parts["train"]) == set(train_side)
    n_test = int(np.floor(0.2 * n + 1e-9))
    assert len(parts["test"]) == n_test
    for leaf, want in zip(("p1", "p2", "personal"), (0.2, 0.5, 0.3)):
        assert abs(len(parts[leaf]) - want * (n - n_test)) <= 2


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 500), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_support_query_property(n, frac, seed):
    idx = np.random.default_rng(seed).permutation(10 * n)[:n]
    sup, qry = support_query_split(idx, seed, frac)
    assert set(sup) | set(qry) == set(idx)
    assert not set(sup) & set(qry)


# -- synthetic clients ---------------------------------------------------------


def test_client_angles_span():
    a = client_angles(2, 1.0)
    assert a[1] - a[0] == pytest.approx(np.pi / 2)
    assert np.all(client_angles(3, 0.0) == 0.0)


def test_label_balance():
    for t in synth_tables(3, 501, 0.7, 4):
        assert 0.45 <= t.labels.mean() <= 0.55


def test_synth_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        synth_tables(1, 100, 0.5, 0)
    with pytest.raises(ConfigError):
        synth_tables(2, 39, 0.5, 0)


def test_public_data_shape():
    t = synth_public(300, 1)
    assert t.features.shape == (300, 9)
    assert 0.45 <= t.labels.mean() <= 0.55


def _cross_accuracy(drift, seed=0):
    a, b = synth_noniid_clients(2, 1000, drift, seed)
    p = init_params((9, 16, 1), 0)
    trained, _ = train_online(p, AdamState.zeros(p.size, lr=1e-2), a.rows("train"), epochs=3)
    return accuracy(trained, *a.rows("test")), accuracy(trained, *b.rows("test"))


def test_iid_clients_transfer():
    own, other = _cross_accuracy(0.0)
    assert abs(own - other) <= 5.0


def test_max_drift_clients_do_not_transfer():
    own, other = _cross_accuracy(1.0)
    assert own - other >= 15.0
