import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diibench.heatmap import HIGH_RGB, HeatmapSpec, emit_heatmap, grid_from_site_rows, ramp
from diibench.metrics import OddsGrid

NS = "{http://www.w3.org/2000/svg}"


def rects(path):
    root = ET.parse(path).getroot()
    assert root.tag == NS + "svg" and root.get("version") == "1.1"
    return root.findall(f"{NS}rect"), root


def spec(values, vmin, vmax):
    g = OddsGrid.from_array(values)
    return HeatmapSpec(g, vmin, vmax, g.regions, tuple(f"layer {i}" for i in g.layers))


def test_single_cell_at_max_is_darkest(tmp_path):
    emit_heatmap(spec([[3.0]], 0.0, 3.0), tmp_path / "a.svg")
    (r,), _ = rects(tmp_path / "a.svg")
    assert r.get("fill") == "#%02x%02x%02x" % HIGH_RGB


def test_all_zero_grid_is_white(tmp_path):
    g = OddsGrid.from_array(np.zeros((2, 4)))
    emit_heatmap(HeatmapSpec.for_grid(g), tmp_path / "z.svg")
    rs, _ = rects(tmp_path / "z.svg")
    assert len(rs) == 8 and {r.get("fill") for r in rs} == {"#ffffff"}


def test_2x3_fixture_exact_colours(tmp_path):
    vals = [[0.0, 1.0, 2.0], [3.0, 4.0, -1.0]]
    emit_heatmap(spec(vals, 0.0, 4.0), tmp_path / "g.svg")
    rs, root = rects(tmp_path / "g.svg")
    assert len(rs) == 6
    # hand ramp: channel = floor(255 + t·(dark − 255) + 0.5), t clamped to [0, 1]
    expected = {
        0.0: "#ffffff",
        1.0: "#c1cbda",   # 255−61.75=193.25→193, 255−51.75=203.25→203, 255−37=218
        2.0: "#8498b5",   # 131.5→132, 151.5→152, 181
        3.0: "#466490",   # 69.75→70, 99.75→100, 144
        4.0: "#08306b",
        -1.0: "#ffffff",  # clamped
    }
    fills = [r.get("fill") for r in rs]
    # layer 1 is drawn on top, so document order is layer 0 row first but at the bottom
    assert fills == [expected[v] for v in vals[0]] + [expected[v] for v in vals[1]]
    texts = [t.text for t in root.iter(f"{NS}text")]
    assert "layer 0" in texts and "r2" in texts


@settings(max_examples=100)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 5))
def test_ramp_monotone(x, y, width):
    lo, hi = -1.0, -1.0 + width
    a, b = sorted((x, y))
    # darker means every channel is no larger
    assert all(ca >= cb for ca, cb in zip(ramp(a, lo, hi), ramp(b, lo, hi)))


def test_bad_bounds():
    g = OddsGrid.from_array([[1.0]])
    with pytest.raises(ValueError):
        HeatmapSpec(g, 1.0, 0.0, ("r",), ("l",))
    with pytest.raises(ValueError):
        HeatmapSpec(g, 0.0, math.inf, ("r",), ("l",))


def test_grid_from_rows():
    rows = [
        {"task": "t", "method": "m", "checkpoint": "c", "layer": str(l), "region": r, "avg_odds": repr(float(l * 10 + i)), "n_eval": "4"}
        for l in (1, 0)
        for i, r in enumerate(("a", "b"))
    ]
    g = grid_from_site_rows(rows, "t", "m")
    assert g.layers == (0, 1) and g.regions == ("a", "b")
    np.testing.assert_array_equal(g.values, [[0, 1], [10, 11]])
    with pytest.raises(ValueError):
        grid_from_site_rows(rows, "t", "other")
