import numpy as np
import pytest

from twincsi.fidelity.geometry import TriMesh, mesh_f1, threshold_select
from twincsi.harness.demo import (
    BUILDING_MATERIAL,
    CityConfig,
    building_boxes,
    building_groups,
    degrade_geometry,
    demo_city,
    foliage_volumes,
    twin_of,
    with_fov,
    with_material,
)


@pytest.fixture(scope="module")
def city():
    return demo_city()


def test_demo_constants(city):
    assert city.bs.position[2] == 15.0
    assert city.bs.num_antennas == 32
    assert city.bs.element_spacing == pytest.approx(city.ofdm.wavelength / 2)
    assert city.bs.fov_deg == 180.0
    ues = city.ue_array
    assert np.all(ues[:, 2] == 2.0)
    xs = np.unique(ues[:, 0])
    assert np.min(np.diff(xs)) == pytest.approx(0.37, abs=1e-9)
    assert {m.name for m in city.materials} == {"concrete", "wet_ground"}
    assert len(building_groups(city)) == 16
    assert 150 <= len(city.facets) <= 250


def test_ues_outside_buildings(city):
    ues = city.ue_array
    for lo, hi in building_boxes(CityConfig()):
        inside = np.all((ues[:, :2] >= lo[:2]) & (ues[:, :2] <= hi[:2]), axis=1)
        assert not inside.any()


def test_foliage_boxes_disjoint_and_in_streets():
    trees = foliage_volumes(CityConfig())
    assert len(trees) > 20
    boxes = [(np.array(t.lo), np.array(t.hi)) for t in trees]
    for i, (a_lo, a_hi) in enumerate(boxes):
        for b_lo, b_hi in boxes[i + 1 :]:
            assert not (np.all(a_lo < b_hi) and np.all(a_hi > b_lo))
        for lo, hi in building_boxes(CityConfig()):
            assert not (np.all(a_lo[:2] < hi[:2]) and np.all(a_hi[:2] > lo[:2]))


def test_twin_and_variants(city):
    twin = twin_of(city)
    assert twin.foliage == () and twin.facets == city.facets
    dry = with_material(twin, BUILDING_MATERIAL, "drywall")
    assert dry.materials[BUILDING_MATERIAL].name == "drywall" and dry.facets == twin.facets
    assert with_fov(twin, 140.0).bs.fov_deg == 140.0


def test_degrade_geometry_density_controls_fidelity(city):
    # two buildings of the demo city keep the reconstruction cost low
    groups = building_groups(city)
    keep = sorted(i for g in groups[:2] for i in g)
    city = city.replace(facets=tuple(f for i, f in enumerate(city.facets) if f.material_id != BUILDING_MATERIAL or i in keep))
    real = [city.facets[i] for g in building_groups(city) for i in g]
    assert len(building_groups(city)) == 2
    tau = threshold_select(real, 2.0, 1, 2)
    scores = {}
    for density in (0.05, 2.0):
        scene, reached = degrade_geometry(city, density, seed=0)
        assert all(reached)
        groups = building_groups(scene)
        assert len(scene.facets) <= len(city.facets)
        twin = [scene.facets[i] for g in groups for i in g]
        assert all(np.min(f.array[:, 2]) >= 0 for f in twin)
        scores[density] = mesh_f1(real, twin, 2.0, tau, 5).f1
    assert scores[2.0] > 95
    assert scores[2.0] >= scores[0.05]


def test_building_groups_weld(city):
    for g in building_groups(city):
        mesh = TriMesh.from_facets([city.facets[i] for i in g])
        assert mesh.num_faces == 12 and len(mesh.vertices) == 8
        assert mesh.signed_volume() > 0
