import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crimelink.dataset import (
    CaseRecord,
    DatasetError,
    FeatureSchema,
    geo_temporal,
    geo_temporal_arrays,
    load_cases,
    load_schema,
    merge_duplicate_entries,
    save_cases,
    save_schema,
    validate,
)

from conftest import make_table

HEADER = "case_id,series_id,x_km,y_km,t_days,f_a,f_b,f_c,f_d\n"


def test_load_hand_written_file(tmp_path):
    p = tmp_path / "cases.csv"
    p.write_text(HEADER + "c1,s1,0,0,1,1,0,0,1\nc2,s1,1.5,2,3,0,0,1,1\nc3,,4,4,9,0,0,0,0\n")
    t = load_cases(p)
    assert len(t) == 3
    assert t.dims == 4
    assert t.schema.names == ("a", "b", "c", "d")
    assert t.series_ids == ("s1", "s1", None)
    assert t.features.tolist() == [[1, 0, 0, 1], [0, 0, 1, 1], [0, 0, 0, 0]]
    assert t.locations[1].tolist() == [1.5, 2.0]


def test_non_binary_value_names_row_and_column(tmp_path):
    p = tmp_path / "cases.csv"
    p.write_text(HEADER + "c1,s1,0,0,1,1,0,0,1\nc2,s1,0,0,1,0,2,0,0\n")
    with pytest.raises(DatasetError) as exc:
        load_cases(p)
    assert exc.value.row == 3
    assert exc.value.column == "f_b"
    assert "row 3" in str(exc.value) and "f_b" in str(exc.value)


@pytest.mark.parametrize(
    "body, fragment",
    [
        ("c1,s1,0,0,1,1,0,0\n", "columns"),
        ("c1,s1,0,0,1,1,0,0,1\nc1,s2,0,0,1,1,0,0,1\n", "duplicate case_id"),
        ("c1,s1,zero,0,1,1,0,0,1\n", "coordinate"),
        (",s1,0,0,1,1,0,0,1\n", "empty case_id"),
    ],
)
def test_structural_errors(tmp_path, body, fragment):
    p = tmp_path / "cases.csv"
    p.write_text(HEADER + body)
    with pytest.raises(DatasetError, match=fragment):
        load_cases(p)


def test_bad_header(tmp_path):
    p = tmp_path / "cases.csv"
    p.write_text("id,series_id,x_km,y_km,t_days,f_a\n")
    with pytest.raises(DatasetError, match="header"):
        load_cases(p)


def test_expected_dims_checked(tmp_path):
    p = tmp_path / "cases.csv"
    p.write_text(HEADER + "c1,s1,0,0,1,1,0,0,1\n")
    with pytest.raises(DatasetError, match="expected 5"):
        load_cases(p, expected_dims=5)


def test_round_trip_generated_table(small_table, tmp_path):
    p = tmp_path / "cases.csv"
    save_cases(small_table, p, tmp_path / "schema.csv")
    back = load_cases(p)
    # field-by-field comparison, independent of CaseTable.__eq__
    assert back.schema.names == small_table.schema.names
    assert back.schema.kinds == small_table.schema.kinds
    assert back.case_ids == small_table.case_ids
    assert back.series_ids == small_table.series_ids
    assert np.array_equal(back.features, small_table.features)
    assert np.array_equal(back.locations, small_table.locations)
    assert np.array_equal(back.times, small_table.times)
    assert back == small_table


def test_schema_round_trip_and_mismatch(tmp_path):
    s = FeatureSchema(("a", "b"), ("behavioural", "contextual"))
    save_schema(s, tmp_path / "s.csv")
    assert load_schema(tmp_path / "s.csv") == s
    p = tmp_path / "cases.csv"
    p.write_text("case_id,series_id,x_km,y_km,t_days,f_a,f_z\nc1,,0,0,0,1,0\n")
    with pytest.raises(DatasetError, match="does not match"):
        load_cases(p, schema_path=tmp_path / "s.csv")


def test_schema_rejects_unknown_kind():
    with pytest.raises(DatasetError, match="unknown kind"):
        FeatureSchema(("a",), ("weird",))


def test_tables_are_read_only(small_table):
    with pytest.raises(ValueError):
        small_table.features[0, 0] = 1


def test_merge_examples():
    assert merge_duplicate_entries([[1, 0, 0], [0, 0, 1]]) == [1, 0, 1]
    assert merge_duplicate_entries([[0, 0, 0]]) == [0, 0, 0]


def test_merge_matches_column_max(rng):
    rows = rng.integers(0, 2, size=(5, 20)).tolist()
    expected = [max(r[j] for r in rows) for j in range(20)]
    assert merge_duplicate_entries(rows) == expected


def test_merge_rejects_bad_input():
    with pytest.raises(ValueError):
        merge_duplicate_entries([])
    with pytest.raises(ValueError):
        merge_duplicate_entries([[1, 0], [1]])
    with pytest.raises(ValueError):
        merge_duplicate_entries([[2, 0]])


binary_rows = st.integers(1, 6).flatmap(
    lambda w: st.lists(st.lists(st.integers(0, 1), min_size=w, max_size=w), min_size=1, max_size=6)
)


@given(binary_rows)
def test_merge_idempotent_and_order_free(rows):
    merged = merge_duplicate_entries(rows)
    assert merge_duplicate_entries([merged]) == merged
    assert merge_duplicate_entries(rows + [merged]) == merged
    for perm in itertools.islice(itertools.permutations(rows), 6):
        assert merge_duplicate_entries(list(perm)) == merged


def _rec(x, y, t):
    return CaseRecord("a", None, (0,), (x, y), t)


def test_geo_temporal_examples():
    assert geo_temporal(_rec(1, 2, 3), _rec(1, 2, 3)).as_tuple() == (0.0, 0.0)
    g = geo_temporal(_rec(0, 0, 0), _rec(3, 4, 10))
    assert g.log_distance == pytest.approx(math.log(6), abs=1e-12)
    assert g.log_interval == pytest.approx(math.log(11), abs=1e-12)
    assert g.log_distance == pytest.approx(1.79176, abs=1e-5)
    assert g.log_interval == pytest.approx(2.39790, abs=1e-5)


coords = st.floats(-1e4, 1e4, allow_nan=False)


@given(coords, coords, coords, coords, coords, coords)
def test_geo_temporal_symmetric_non_negative(x1, y1, t1, x2, y2, t2):
    a, b = _rec(x1, y1, t1), _rec(x2, y2, t2)
    ga, gb = geo_temporal(a, b), geo_temporal(b, a)
    assert ga == gb
    assert ga.log_distance >= 0 and ga.log_interval >= 0
    same = (x1, y1, t1) == (x2, y2, t2)
    assert (ga.as_tuple() == (0.0, 0.0)) == same


def test_geo_temporal_arrays_match_scalar(small_table, rng):
    ia = rng.integers(0, len(small_table), 100)
    ib = rng.integers(0, len(small_table), 100)
    arr = geo_temporal_arrays(small_table, ia, ib)
    for k, (a, b) in enumerate(zip(ia, ib)):
        g = geo_temporal(small_table.record(a), small_table.record(b))
        np.testing.assert_allclose(arr[k], g.as_tuple(), rtol=1e-12, atol=1e-12)


def test_validate_counts():
    t = make_table([[1, 0], [1, 0], [0, 0], [1, 0]], ["s", "s", None, None])
    r = validate(t)
    assert (r.n_cases, r.n_series, r.n_one_offs) == (4, 1, 2)
    assert r.dead_features == ["f1"]
    assert any("dead" in a for a in r.anomalies)


def test_validate_sparsity_matches_count(small_table):
    zeros = sum(1 for row in small_table.features.tolist() for v in row if v == 0)
    assert validate(small_table).sparsity == pytest.approx(zeros / small_table.features.size, abs=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_save_load_identity(tmp_path_factory, n, m, seed):
    r = np.random.default_rng(seed)
    t = make_table(
        r.integers(0, 2, (n, m)),
        [None if r.random() < 0.3 else f"s{r.integers(3)}" for _ in range(n)],
        r.normal(scale=50, size=(n, 2)),
        r.uniform(0, 1e4, n),
    )
    d = tmp_path_factory.mktemp("rt")
    save_cases(t, d / "cases.csv", d / "schema.csv")
    assert load_cases(d / "cases.csv") == t
