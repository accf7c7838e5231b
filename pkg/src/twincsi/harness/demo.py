"""Desk-scale demo city and the twin variants derived from it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..fidelity.geometry import TriMesh, decimate_mesh, reconstruct_mesh, sample_point_cloud
from ..fidelity.materials import itu_material
from ..scene import ArrayConfig, Facet, FoliageVolume, OfdmConfig, Scene, box_facets, build_ue_grid

BUILDING_MATERIAL = 0
GROUND_MATERIAL = 1


@dataclass(frozen=True)
class CityConfig:
    cols: int = 4
    rows: int = 4
    footprint: tuple[float, float] = (18.0, 14.0)
    street: float = 12.0
    height_range: tuple[float, float] = (6.0, 24.0)
    bs_height: float = 15.0
    ue_height: float = 2.0
    ue_spacing: float = 0.37
    margin: float = 6.0
    foliage_attenuation: float = 1.0  # dB/m
    tree_spacing: float = 9.0
    canopy: tuple[float, float, float] = (5.0, 3.0, 10.0)  # width, base height, top height
    building_material: str = "concrete"
    ground_material: str = "wet_ground"
    layout_seed: int = 7


def _ground(lo, hi) -> list[Facet]:
    x0, y0 = lo
    x1, y1 = hi
    a, b, c, d = (x0, y0, 0.0), (x1, y0, 0.0), (x1, y1, 0.0), (x0, y1, 0.0)
    return [Facet((a, b, c), GROUND_MATERIAL), Facet((a, c, d), GROUND_MATERIAL)]


def building_boxes(cfg: CityConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """(lo, hi) corners of every building, centred on x = 0 and extending towards -y."""
    rng = np.random.default_rng(cfg.layout_seed)
    w, d = cfg.footprint
    px, py = w + cfg.street, d + cfg.street
    x0 = -(cfg.cols - 1) * px / 2
    out = []
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            cx = x0 + c * px
            cy = -(cfg.street + d / 2) - r * py
            h = float(rng.uniform(*cfg.height_range))
            out.append((np.array([cx - w / 2, cy - d / 2, 0.0]), np.array([cx + w / 2, cy + d / 2, h])))
    return out


def _extent(cfg: CityConfig):
    w, d = cfg.footprint
    half_x = (cfg.cols * (w + cfg.street) - cfg.street) / 2 + cfg.margin
    depth = cfg.rows * (d + cfg.street) + cfg.margin
    return half_x, depth


def foliage_volumes(cfg: CityConfig) -> list[FoliageVolume]:
    """Tree canopies along the centre lines of the inner streets.

    Trees overlapping a building or an earlier tree are skipped, so boxes
    never overlap and attenuation is never counted twice.
    """
    w, d = cfg.footprint
    px, py = w + cfg.street, d + cfg.street
    half_x, depth = _extent(cfg)
    width, base, top = cfg.canopy
    x0 = -(cfg.cols - 1) * px / 2
    centres = []
    for c in range(cfg.cols - 1):  # streets running away from the BS
        x = x0 + (c + 0.5) * px
        centres += [(x, y) for y in np.arange(-cfg.street / 2, -depth, -cfg.tree_spacing)]
    for r in range(cfg.rows):  # cross streets, including the one in front of the BS
        y = -cfg.street / 2 - r * py
        centres += [(x, y) for x in np.arange(-half_x + width, half_x - width / 2, cfg.tree_spacing)]
    blocked = [(lo[:2], hi[:2]) for lo, hi in building_boxes(cfg)]
    out = []
    for cx, cy in centres:
        lo = np.array([cx - width / 2, cy - width / 2])
        hi = lo + width
        if any(np.all(lo < b_hi) and np.all(hi > b_lo) for b_lo, b_hi in blocked):
            continue
        blocked.append((lo, hi))
        out.append(FoliageVolume((float(lo[0]), float(lo[1]), base), (float(hi[0]), float(hi[1]), top), cfg.foliage_attenuation))
    return out


def _outdoor(points: np.ndarray, boxes) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    for lo, hi in boxes:
        keep &= ~np.all((points[:, :2] >= lo[:2] - 0.5) & (points[:, :2] <= hi[:2] + 0.5), axis=1)
    return keep


def demo_city(cfg: CityConfig = CityConfig(), foliage: bool = True, ofdm: OfdmConfig = OfdmConfig()) -> Scene:
    """Street-grid city: concrete box buildings on a ground plane, BS on the near edge looking down -y."""
    boxes = building_boxes(cfg)
    half_x, depth = _extent(cfg)
    facets = _ground((-half_x - 20, -depth - 20), (half_x + 20, 20.0))
    for lo, hi in boxes:
        facets += box_facets(lo, hi, BUILDING_MATERIAL)
    materials = (itu_material(cfg.building_material, ofdm.carrier_freq), itu_material(cfg.ground_material, ofdm.carrier_freq))
    bs = ArrayConfig((0.0, 4.0, cfg.bs_height), 32, ofdm.wavelength / 2, (1.0, 0.0, 0.0), (0.0, -1.0, 0.0), 180.0)
    grid = np.array(build_ue_grid((-half_x, -depth, cfg.ue_height), 2 * half_x, depth - 1.0, cfg.ue_spacing, cfg.ue_height))
    grid = grid[_outdoor(grid, boxes)]
    fol = tuple(foliage_volumes(cfg)) if foliage else ()
    return Scene(tuple(facets), materials, fol, bs, tuple(map(tuple, grid)), ofdm)


def twin_of(target: Scene) -> Scene:
    """Full-fidelity twin: the target with foliage removed."""
    return target.replace(foliage=())


def with_material(scene: Scene, material_id: int, name: str) -> Scene:
    mats = list(scene.materials)
    mats[material_id] = itu_material(name, scene.ofdm.carrier_freq)
    return scene.replace(materials=tuple(mats))


def with_fov(scene: Scene, fov_deg: float) -> Scene:
    b = scene.bs
    return scene.replace(bs=ArrayConfig(b.position, b.num_antennas, b.element_spacing, b.axis, b.boresight, fov_deg))


def building_groups(scene: Scene, material_id: int = BUILDING_MATERIAL) -> list[list[int]]:
    """Facet indices of each building (connected groups of facets sharing vertices)."""
    idx = [i for i, f in enumerate(scene.facets) if f.material_id == material_id]
    parent = {i: i for i in idx}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    owner: dict[tuple, int] = {}
    for i in idx:
        for v in scene.facets[i].vertices:
            key = tuple(np.round(v, 6))
            if key in owner:
                parent[find(i)] = find(owner[key])
            else:
                owner[key] = i
    groups: dict[int, list[int]] = {}
    for i in idx:
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values())


def degrade_geometry(scene: Scene, density: float, seed: int, material_id: int = BUILDING_MATERIAL) -> tuple[Scene, list[bool]]:
    """Replace every building by a mesh reconstructed from a point cloud at ``density``.

    Each reconstruction is decimated back to its original face count; the
    second return value reports, per building, whether that budget was met.
    """
    keep = [f for f in scene.facets if f.material_id != material_id]
    reached = []
    new = []
    for b, group in enumerate(building_groups(scene, material_id)):
        facets = [scene.facets[i] for i in group]
        cloud = sample_point_cloud(facets, density, seed * 1000 + b)
        mesh = reconstruct_mesh(cloud)
        dec = decimate_mesh(mesh, len(facets))
        reached.append(dec.reached)
        # buildings stand on the ground: drop anything reconstructed below it
        v = dec.mesh.vertices.copy()
        v[:, 2] = np.maximum(v[:, 2], 0.0)
        new += TriMesh(v, dec.mesh.faces).to_facets(material_id)
    new = [f for f in new if f.area > 1e-9]
    return scene.replace(facets=tuple(keep + new)), reached
