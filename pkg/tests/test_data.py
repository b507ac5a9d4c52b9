import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resflow.data import (FUNNEL_MANIFEST, Dataset, Manifest, MultiValue, SplitSpec, fit_bucketizer,
                          generate_funnel, read_dataset, read_manifest, split_by_time, write_dataset)
from resflow.embedding import FieldSchema, Schema
from resflow.errors import ConfigError, DataError
from resflow.progressive import MOVIELENS_LADDER, ThresholdLadder, decode_expectation, encode_labels


# ---------------------------------------------------------------- bucketizer

def test_bucketizer_quantiles():
    b = fit_bucketizer(np.arange(1, 101), 4)
    # oracle: linear interpolation between order statistics, h = (n-1) q
    oracle = [1 + 99 * q for q in (0.25, 0.5, 0.75)]
    np.testing.assert_allclose(b.boundaries, oracle)
    np.testing.assert_allclose(b.boundaries, [25.75, 50.5, 75.25])
    assert b.num_buckets == 4


def test_bucketizer_constant_field():
    b = fit_bucketizer(np.full(10, 3.0), 5)
    assert len(b.boundaries) == 0
    assert set(b.transform([3.0, -1.0, 9.0]).tolist()) == {0}


def test_bucketizer_two_points():
    b = fit_bucketizer([1.0, 2.0], 2)
    assert len(b.boundaries) == 1 and 1 < b.boundaries[0] <= 2
    assert b.transform([1.0, 2.0]).tolist() == [0, 1]


def test_bucketizer_tie_goes_low():
    b = fit_bucketizer(np.arange(1, 101), 4)
    assert b.transform([50.5]).tolist() == [1]
    assert b.transform([50.5000001]).tolist() == [2]


def test_bucketizer_needs_two_buckets():
    with pytest.raises(ConfigError):
        fit_bucketizer([1, 2, 3], 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=200), st.integers(2, 20),
       st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_bucketizer_monotone(values, nb, v1, v2):
    b = fit_bucketizer(values, nb)
    assert np.all(np.diff(b.boundaries) > 0)
    lo, hi = sorted((v1, v2))
    assert b.transform([lo])[0] <= b.transform([hi])[0]
    assert b.transform(values).max() <= len(b.boundaries)


# ---------------------------------------------------------------- split

def _timed(ts):
    schema = Schema([FieldSchema("f")])
    return Dataset(schema, {"f": np.arange(len(ts))}, timestamps=np.asarray(ts, dtype=np.int64))


def test_split_fraction():
    rng = np.random.default_rng(0)
    train, test = split_by_time(_timed(rng.permutation(10)), SplitSpec("fraction", 0.8))
    assert (len(train), len(test)) == (8, 2)
    assert train.timestamps.max() <= test.timestamps.min()


def test_split_by_day_boundary():
    days = np.repeat(np.arange(1, 11), 3)
    train, test = split_by_time(_timed(days * 86400 + 5), SplitSpec("day", 10))
    assert set((train.timestamps // 86400).tolist()) == set(range(1, 10))
    assert set((test.timestamps // 86400).tolist()) == {10}


def test_split_ties_keep_original_order():
    train, test = split_by_time(_timed(np.zeros(10)), SplitSpec("fraction", 0.5))
    assert train.features["f"].tolist() == [0, 1, 2, 3, 4]
    assert test.features["f"].tolist() == [5, 6, 7, 8, 9]


def test_split_empty_side_is_config_error():
    with pytest.raises(ConfigError):
        split_by_time(_timed([1]), SplitSpec("fraction", 0.5))
    with pytest.raises(ConfigError):
        split_by_time(_timed(np.arange(5) * 86400), SplitSpec("day", 100))


def test_split_spec_parse():
    assert SplitSpec.parse("fraction:0.8") == SplitSpec("fraction", 0.8)
    assert SplitSpec.parse("day:9").mode == "day"
    with pytest.raises(ConfigError):
        SplitSpec.parse("fraction:1.5")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=2, max_size=50), st.floats(0.05, 0.95))
def test_split_partitions_input(ts, frac):
    ds = _timed(ts)
    try:
        train, test = split_by_time(ds, SplitSpec("fraction", frac))
    except ConfigError:
        return
    ids = train.features["f"].tolist() + test.features["f"].tolist()
    assert sorted(ids) == list(range(len(ts)))
    assert not set(train.features["f"].tolist()) & set(test.features["f"].tolist())
    assert train.timestamps.max() <= test.timestamps.min()


# ---------------------------------------------------------------- funnel

def test_funnel_zero_cvr_has_no_orders():
    ds = generate_funnel(1, n_users=200, n_items=100, base_cvr=0.0, n_samples=5000)
    assert ds.labels["order"].sum() == 0


def test_funnel_order_implies_click():
    ds = generate_funnel(2, n_users=500, n_items=200, base_cvr=0.3, n_samples=20000)
    assert not np.any((ds.labels["order"] == 1) & (ds.labels["click"] == 0))


def test_funnel_is_deterministic():
    a = generate_funnel(5, n_users=100, n_items=50, n_samples=2000)
    b = generate_funnel(5, n_users=100, n_items=50, n_samples=2000)
    for k in a.features:
        np.testing.assert_array_equal(a.features[k], b.features[k])
    np.testing.assert_array_equal(a.labels["order"], b.labels["order"])
    np.testing.assert_array_equal(a.timestamps, b.timestamps)


def test_funnel_rates_at_scale():
    n = 1_000_000
    ds = generate_funnel(0, base_ctr=0.08, base_cvr=0.026, n_samples=n)
    for rate, target in ((ds.labels["click"].mean(), 0.08), (ds.labels["order"].mean(), 0.08 * 0.026)):
        se = np.sqrt(target * (1 - target) / n)
        assert abs(rate - target) < 3 * se
    cvr = ds.labels["order"].sum() / ds.labels["click"].sum()
    assert abs(cvr - 0.026) < 3 * np.sqrt(0.026 * 0.974 / ds.labels["click"].sum())


def test_funnel_rejects_bad_rates():
    with pytest.raises(ConfigError):
        generate_funnel(0, base_ctr=0.0)


# ---------------------------------------------------------------- text format

def test_dataset_text_round_trip(tmp_path):
    manifest = Manifest(fields=["u", "tags", "price"], multi_value=["tags"], numeric=["price"],
                        labels=["click"], timestamp="ts", list_id="req")
    schema = manifest.schema()
    ds = Dataset(schema, {"u": np.array(["a", "b", "c"]), "tags": MultiValue.from_lists([["x", "y"], [], ["z"]])},
                 labels={"click": np.array([1.0, np.nan, 0.0])}, timestamps=np.array([3, 1, 2]),
                 list_ids=np.array(["r1", "r1", "r2"]), numeric={"price": np.array([1.5, 2.0, 0.25])})
    (tmp_path / "m.txt").write_text(manifest.dumps())
    m2 = read_manifest(str(tmp_path / "m.txt"))
    write_dataset(ds, str(tmp_path / "d.csv"), m2)
    back = read_dataset(str(tmp_path / "d.csv"), m2)
    assert back.features["u"].tolist() == ["a", "b", "c"]
    assert [back.features["tags"].row(i) for i in range(3)] == [("x", "y"), (), ("z",)]
    np.testing.assert_array_equal(back.numeric["price"], [1.5, 2.0, 0.25])
    assert np.isnan(back.labels["click"][1]) and back.labels["click"][0] == 1
    assert back.timestamps.tolist() == [3, 1, 2]


def test_read_dataset_reports_missing_columns(tmp_path):
    (tmp_path / "d.csv").write_text("u,ts\n1,2\n")
    with pytest.raises(DataError):
        read_dataset(str(tmp_path / "d.csv"), Manifest(fields=["u", "v"], timestamp="ts"))


def test_manifest_rejects_unknown_keys(tmp_path):
    (tmp_path / "m.txt").write_text("fields = a\ncolour = red\n")
    with pytest.raises(DataError):
        read_manifest(str(tmp_path / "m.txt"))


def test_funnel_manifest_declares_twin_sides():
    schema = FUNNEL_MANIFEST.schema()
    assert schema.side("item") == ["item_id", "item_category"]
    assert schema.side("user") == ["user_id", "user_segment"]


# ---------------------------------------------------------------- label round trip

@given(st.sampled_from(MOVIELENS_LADDER))
def test_crisp_labels_decode_to_the_value(v):
    ladder = ThresholdLadder(MOVIELENS_LADDER)
    assert decode_expectation(encode_labels(v, ladder), ladder) == v
