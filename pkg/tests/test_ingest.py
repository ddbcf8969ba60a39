import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resonance_hunt import ingest
from resonance_hunt.core import ConfigError, DataError, Dataset, ScoreTable, WindowSpec, assign_regions
from resonance_hunt.ingest import ColumnSchema, ReadReport, read_csv, read_scores, write_csv, write_scores

SCHEMA = ColumnSchema("m", ("a", "b"), "label")


def _write(tmp_path, text, name="in.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_label_counts(tmp_path):
    p = _write(tmp_path, "m,a,b,label\n3.0,0,1,1\n3.1,1,2,0\n3.2,2,3,1\n")
    ds = read_csv(p, SCHEMA)
    assert ds.labeled and ds.n_signal() == 2 and len(ds) == 3


def test_unit_scale(tmp_path):
    p = _write(tmp_path, "m,a,b\n3500,0,1\n")
    ds = read_csv(p, ColumnSchema("m", ("a", "b"), None, unit_scale=0.001))
    assert ds.m[0] == pytest.approx(3.5, rel=1e-15)


def test_nan_row_rejected(tmp_path):
    p = _write(tmp_path, "m,a,b\n3.0,0,1\n3.1,NaN,2\n3.2,2,3\n")
    report = ReadReport()
    ds = read_csv(p, SCHEMA.unlabeled(), report)
    assert len(ds) == 2
    assert report.warning_count == 1
    assert report.rejected_rows == [1]


def test_errors(tmp_path):
    with pytest.raises(DataError, match="missing column"):
        read_csv(_write(tmp_path, "m,a\n3.0,1\n"), SCHEMA.unlabeled())
    with pytest.raises(DataError, match="row"):
        read_csv(_write(tmp_path, "m,a,b\n3.0,1,abc\n"), SCHEMA.unlabeled())
    with pytest.raises(DataError, match="zero usable rows"):
        read_csv(_write(tmp_path, "m,a,b\n3.0,inf,1\n"), SCHEMA.unlabeled())
    with pytest.raises(DataError, match="0 or 1"):
        read_csv(_write(tmp_path, "m,a,b,label\n3.0,1,1,2\n"), SCHEMA)
    with pytest.raises(DataError, match="not found"):
        read_csv(tmp_path / "absent.csv", SCHEMA)


def test_schema_validation(tmp_path):
    with pytest.raises(ConfigError):
        ColumnSchema("m", ("m", "b"))
    with pytest.raises(ConfigError):
        ColumnSchema("m", ())
    p = tmp_path / "s.json"
    SCHEMA.save(p)
    assert ColumnSchema.load(p) == SCHEMA
    p.write_text(json.dumps({"resonant_column": "m", "feature_columns": ["a"], "colour": 1}))
    with pytest.raises(ConfigError):
        ColumnSchema.load(p)


def test_round_trip_random_events(tmp_path):
    rng = np.random.default_rng(0)
    n = 10_000
    ds = Dataset(rng.uniform(1e-3, 1e3, n), rng.standard_normal((n, 3)) * 10.0 ** rng.integers(-8, 8, (n, 3)),
                 rng.integers(0, 2, n))
    p = tmp_path / "rt.csv"
    write_csv(ds, p)
    assert read_csv(p, ingest.default_schema(3, labeled=True)) == ds


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-300, 1e300), st.floats(-1e300, 1e300, allow_nan=False)), min_size=1, max_size=30))
def test_round_trip_is_lossless(tmp_path_factory, rows):
    m = np.array([r[0] for r in rows])
    x = np.array([[r[1]] for r in rows])
    ds = Dataset(m, x)
    p = tmp_path_factory.mktemp("h") / "rt.csv"
    write_csv(ds, p)
    back = read_csv(p, ingest.default_schema(1, labeled=False))
    np.testing.assert_array_equal(back.m, ds.m)
    np.testing.assert_array_equal(back.x, ds.x)


def test_unlabeled_has_no_label_column(tmp_path):
    ds = Dataset([3.0, 4.0], [[1.0], [2.0]])
    p = tmp_path / "u.csv"
    write_csv(ds, p)
    assert p.read_text().splitlines()[0] == "m,x0"


def test_column_order_follows_schema(tmp_path):
    schema = ColumnSchema("mass", ("z", "a"), "truth")
    ds = Dataset([3.0], [[1.0, 2.0]], [1])
    p = tmp_path / "o.csv"
    write_csv(ds, p, schema)
    assert p.read_text().splitlines()[0] == "mass,z,a,truth"
    assert read_csv(p, schema) == ds


def test_lhco_schema_scales_gev():
    assert ingest.LHCO_SCHEMA.unit_scale == pytest.approx(1e-3)
    assert ingest.LHCO_SCHEMA.d == 4


def test_score_round_trip(tmp_path):
    w = WindowSpec(3.5, 0.1, 0.3, (2.0, 6.0))
    rng = np.random.default_rng(1)
    m = rng.uniform(2.0, 6.0, 50)
    tables = [ScoreTable(rng.random(50), assign_regions(m, w), m, rng.integers(0, 2, 50), w, {"method": "x"})]
    p = tmp_path / "s.csv"
    write_scores(tables, p)
    back = read_scores(p)
    assert len(back) == 1
    np.testing.assert_array_equal(back[0].score, tables[0].score)
    np.testing.assert_array_equal(back[0].region, tables[0].region)
    np.testing.assert_array_equal(back[0].labels, tables[0].labels)
    assert back[0].window == w


def test_score_region_tag_validated(tmp_path):
    p = _write(tmp_path, "m,score_0,region_0\n3.0,0.5,XX\n", "bad.csv")
    with pytest.raises(DataError):
        read_scores(p)


def test_score_round_trip_keeps_hunt_mask(tmp_path):
    w = WindowSpec(3.5, 0.1, 0.3, (2.0, 6.0))
    rng = np.random.default_rng(2)
    m = rng.uniform(2.0, 6.0, 40)
    hunt = rng.random(40) < 0.5
    tables = [ScoreTable(rng.random(40), assign_regions(m, w), m, None, w, hunt=hunt),
              ScoreTable(rng.random(40), assign_regions(m, w), m, None, w)]
    p = tmp_path / "s.csv"
    write_scores(tables, p)
    back = read_scores(p)
    np.testing.assert_array_equal(back[0].hunt, hunt)
    assert back[1].hunt is None
    text = p.read_text().splitlines()
    assert "hunt_0" in text[0].split(",") and "hunt_1" not in text[0].split(",")
