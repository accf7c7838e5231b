import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twincsi.scene import (
    ArrayConfig,
    Facet,
    FoliageVolume,
    Material,
    OfdmConfig,
    SceneError,
    box_facets,
    build_ue_grid,
    load_scene,
    save_scene,
    scene_from_dict,
    scene_to_dict,
)


def minimal_doc():
    return {
        "materials": [{"name": "concrete", "eps_r": 5.24, "sigma": 0.123}],
        "facets": [{"v": [[0, 0, 0], [1, 0, 0], [0, 1, 0]], "material": 0}],
        "foliage": [],
        "bs": {"position": [0, 0, 10], "n_antennas": 4, "spacing_m": "half_lambda", "axis": [1, 0, 0], "boresight": [0, -1, 0], "fov_deg": 180},
        "ue_grid": {"points": [[5, -5, 2]]},
        "ofdm": {"fc_hz": 3.5e9, "k": 256, "delta_f_hz": 30e3, "d_taps": 32},
    }


def test_minimal_scene_loads(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(minimal_doc()))
    s = load_scene(p)
    assert len(s.facets) == 1 and len(s.ue_grid) == 1
    assert s.bs.element_spacing == pytest.approx(s.ofdm.wavelength / 2)


def test_bad_material_reference_names_facet():
    doc = minimal_doc()
    doc["materials"].append({"name": "x", "eps_r": 2, "sigma": 0})
    doc["facets"].append({"v": [[0, 0, 1], [1, 0, 1], [0, 1, 1]], "material": 5})
    with pytest.raises(SceneError, match="facet 1"):
        scene_from_dict(doc)


def test_degenerate_facet_rejected():
    doc = minimal_doc()
    doc["facets"][0]["v"] = [[0, 0, 0], [1, 0, 0], [2, 0, 0]]
    with pytest.raises(SceneError):
        scene_from_dict(doc)


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(SceneError):
        load_scene(p)


def test_ue_on_bs_rejected():
    doc = minimal_doc()
    doc["ue_grid"] = {"points": [[0, 0, 10]]}
    with pytest.raises(SceneError, match="UE 0"):
        scene_from_dict(doc)


def test_round_trip(tmp_path):
    s = scene_from_dict(minimal_doc())
    p = tmp_path / "s.json"
    save_scene(s, p)
    again = load_scene(p)
    assert scene_to_dict(again) == scene_to_dict(s)
    assert again.facets == s.facets and again.bs == s.bs and again.ofdm == s.ofdm


def test_material_and_array_invariants():
    with pytest.raises(ValueError):
        Material("x", 0.5, 0.0)
    with pytest.raises(ValueError):
        Material("x", 2.0, -1.0)
    with pytest.raises(ValueError):
        ArrayConfig((0, 0, 0), 4, 0.05, (1, 0, 0), (1, 0, 0))
    with pytest.raises(ValueError):
        FoliageVolume((0, 0, 0), (1, 0, 1), 1.0)
    with pytest.raises(ValueError):
        OfdmConfig(max_delay_taps=300, num_subcarriers=256)


def test_ofdm_sample_period():
    o = OfdmConfig()
    assert abs(o.sample_period * o.num_subcarriers * o.subcarrier_spacing - 1) < 1e-12


def test_ula_positions():
    a = ArrayConfig((1, 2, 3), 4, 0.5, (0, 1, 0), (1, 0, 0))
    np.testing.assert_allclose(a.element_positions(), [[1, 2, 3], [1, 2.5, 3], [1, 3, 3], [1, 3.5, 3]])


def test_grid_examples():
    assert build_ue_grid((1, 2, 0), 0, 0, 1, 2) == [(1.0, 2.0, 2.0)]
    assert len(build_ue_grid((0, 0, 0), 1, 1, 0.5, 2)) == 9
    # floor(200/0.37) + 1 = 541, floor(230/0.37) + 1 = 622
    assert len(build_ue_grid((0, 0, 0), 200, 230, 0.37, 2)) == 541 * 622


def test_grid_row_major():
    g = build_ue_grid((0, 0, 0), 1, 1, 1, 2)
    assert g == [(0, 0, 2), (1, 0, 2), (0, 1, 2), (1, 1, 2)]


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 30), st.floats(0, 30), st.floats(0.2, 5))
def test_grid_count_formula(ex, ey, sp):
    n = len(build_ue_grid((0, 0, 0), ex, ey, sp, 1.5))
    assert n == (math.floor(ex / sp + 1e-9) + 1) * (math.floor(ey / sp + 1e-9) + 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=9, max_size=9))
def test_facet_normals_unit(coords):
    v = np.array(coords).reshape(3, 3)
    if np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0])) / 2 <= 1e-6:
        return
    f = Facet(tuple(map(tuple, v)), 0)
    assert abs(np.linalg.norm(f.normal) - 1) < 1e-12


def test_box_facets_outward():
    facets = box_facets((0, 0, 0), (2, 3, 4), 0)
    assert len(facets) == 12
    centre = np.array([1, 1.5, 2])
    for f in facets:
        assert f.normal @ (f.array.mean(axis=0) - centre) > 0
