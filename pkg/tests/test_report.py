import json

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from cbcfilter import report


def test_cell_formatting():
    assert [report.cell(v) for v in (None, True, False, 3.0, 0.25, 7, "x", np.float64(2.0), np.int64(4))] == \
        ["", "1", "0", "3", "0.25", "7", "x", "2", "4"]
    assert report.cell(float("nan")) == "nan"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_cells_round_trip(x):
    assert float(report.cell(x)) == x


def test_csv_and_json_text():
    assert report.csv_text(("a", "b"), [(1, None), ("x,y", 0.5)]) == 'a,b\n1,\n"x,y",0.5\n'
    doc = json.loads(report.json_text({"b": float("inf"), "a": [np.float64(1.5), float("nan")]}))
    assert doc == {"a": [1.5, None], "b": None}


def test_atomic_write_leaves_no_temporary(tmp_path):
    p = report.atomic_write(tmp_path / "sub" / "x.csv", "a\n")
    assert p.read_text() == "a\n" and sorted(q.name for q in p.parent.iterdir()) == ["x.csv"]


def test_manifest(tmp_path):
    report.atomic_write(tmp_path / "km.csv", "stratum\n")
    inp = report.atomic_write(tmp_path / "in.csv", "x\n")
    report.write_manifest(tmp_path, {"km.csv": "km"}, {"seed": 1}, inputs=[inp], command="analyze km")
    doc = json.loads((tmp_path / "manifest.json").read_text())
    (art,) = doc["artifacts"]
    assert art["sha256"] == report.sha256_file(tmp_path / "km.csv")
    assert art["config_sha256"] == doc["config_sha256"] == report.config_hash({"seed": 1})
    assert doc["inputs"] == {str(inp): report.sha256_file(inp)}
    assert doc["command"] == "analyze km" and "created_utc" in doc
