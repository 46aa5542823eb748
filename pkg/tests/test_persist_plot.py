import csv
import io
import json
import re

import pytest

from fewshot_dp.persist import csv_text, json_text, persist_results, read_csv
from fewshot_dp.plot import Series, emit_plot, render_svg


class TestCsv:
    def test_rfc4180_quoting(self):
        text = csv_text([{"a": 'say "hi", ok', "b": "line\nbreak", "c": 1.5}])
        assert text.startswith("a,b,c\r\n")
        assert '"say ""hi"", ok"' in text and '"line\nbreak"' in text
        back = list(csv.DictReader(io.StringIO(text, newline="")))
        assert back == [{"a": 'say "hi", ok', "b": "line\nbreak", "c": "1.5"}]

    def test_cell_formats(self):
        text = csv_text([{"f": 0.1, "n": None, "t": True, "i": 3, "inf": float("inf")}])
        assert text.splitlines()[1] == "0.1,,true,3,inf"
        assert float(text.splitlines()[1].split(",")[0]) == 0.1

    def test_column_order_and_union(self):
        text = csv_text([{"b": 1}, {"a": 2, "b": 3}])
        assert text.splitlines()[0] == "b,a"
        assert csv_text([{"b": 1, "a": 2}], ["a", "b"]).splitlines()[1] == "2,1"


class TestJson:
    def test_sorted_and_non_finite(self):
        text = json_text({"b": float("nan"), "a": [1, float("inf")], "c": {"z": 1, "y": 2}})
        assert json.loads(text) == {"a": [1, None], "b": None, "c": {"y": 2, "z": 1}}
        assert text.index('"a"') < text.index('"b"')


def test_persist_results_files(tmp_path):
    rows = [{"cell": c, "seed": s, "acc": 0.5} for c in ("x", "y") for s in range(3)]
    paths = persist_results(tmp_path, "sweep", 4, rows, {"n": 6}, "kind: sweep\n")
    assert [p.name for p in paths] == ["sweep_seed4.csv", "sweep_seed4.json", "sweep_seed4_config.yaml"]
    assert len(read_csv(paths[0])) == 6
    assert json.loads(paths[1].read_text()) == {"n": 6}


class TestSvg:
    def series(self):
        return [Series(f"s{i}", [1, 2, 3], [0.1 * i, 0.2, 0.3]) for i in range(3)]

    def test_one_polyline_per_series(self):
        svg = render_svg(self.series(), title="t")
        assert svg.count("<polyline") == 3
        colors = re.findall(r'<polyline fill="none" stroke="(#[0-9a-f]{6})"', svg)
        assert colors == ["#1f77b4", "#d62728", "#2ca02c"]

    def test_byte_identical(self, tmp_path):
        a = emit_plot(self.series(), tmp_path / "a.svg", loglog=True)
        b = emit_plot(self.series(), tmp_path / "b.svg", loglog=True)
        assert a.read_bytes() == b.read_bytes()

    def test_log_floor(self):
        low = render_svg([Series("r", [0.0, 1e-7, 1.0], [0.0, 1e-9, 1.0])], loglog=True)
        floor = render_svg([Series("r", [1e-5, 1e-5, 1.0], [1e-5, 1e-5, 1.0])], loglog=True)
        assert low == floor
        assert ">1e-5<" in low and "nan" not in low

    def test_diagonal_and_escaping(self):
        svg = render_svg([Series("a<b", [0, 1], [0, 1])], title="x & y", diagonal=True)
        assert "stroke-dasharray" in svg and "a&lt;b" in svg and "x &amp; y" in svg

    def test_invalid_input(self):
        with pytest.raises(ValueError):
            render_svg([])
        with pytest.raises(ValueError):
            render_svg([Series("a", [1], [1])])
        with pytest.raises(ValueError):
            render_svg([Series("a", [1, 2], [1])])
