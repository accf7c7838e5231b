"""Scene description: geometry, materials, foliage, base-station array and OFDM numerology.

A scene is loaded from a JSON document (see ``load_scene``) and is immutable
afterwards. Array-valued views of the geometry are computed once and cached so
the ray tracer can work on whole facet tables at a time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

MIN_FACET_AREA = 1e-9


class SceneError(ValueError):
    """Raised for malformed or invalid scene documents."""


@dataclass(frozen=True)
class Material:
    name: str
    eps_r: float
    sigma: float

    def __post_init__(self):
        if not self.eps_r >= 1.0:
            raise SceneError(f"material {self.name!r}: eps_r must be >= 1, got {self.eps_r}")
        if not self.sigma >= 0.0:
            raise SceneError(f"material {self.name!r}: sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class Facet:
    """Triangle with counter-clockwise winding; the normal marks the reflecting side."""

    vertices: tuple[tuple[float, float, float], ...]
    material_id: int

    def __post_init__(self):
        if len(self.vertices) != 3 or any(len(v) != 3 for v in self.vertices):
            raise SceneError("facet needs exactly three 3D vertices")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    @property
    def area(self) -> float:
        v = self.array
        return 0.5 * float(np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0])))

    @property
    def normal(self) -> np.ndarray:
        v = self.array
        n = np.cross(v[1] - v[0], v[2] - v[0])
        return n / np.linalg.norm(n)


@dataclass(frozen=True)
class FoliageVolume:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    attenuation: float  # dB/m

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise SceneError(f"foliage box min {self.lo} must be below max {self.hi}")
        if not self.attenuation >= 0:
            raise SceneError("foliage attenuation must be >= 0 dB/m")


@dataclass(frozen=True)
class ArrayConfig:
    position: tuple[float, float, float]
    num_antennas: int
    element_spacing: float
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    boresight: tuple[float, float, float] = (0.0, -1.0, 0.0)
    fov_deg: float = 180.0

    def __post_init__(self):
        if self.num_antennas < 1:
            raise SceneError("array needs at least one antenna")
        if not self.element_spacing > 0:
            raise SceneError("element spacing must be positive")
        ax, bs = np.asarray(self.axis), np.asarray(self.boresight)
        if abs(np.linalg.norm(ax) - 1) > 1e-9 or abs(np.linalg.norm(bs) - 1) > 1e-9:
            raise SceneError("array axis and boresight must be unit vectors")
        if abs(float(ax @ bs)) >= 1e-9:
            raise SceneError("array boresight must be perpendicular to the array axis")
        if not 0 < self.fov_deg <= 360:
            raise SceneError("fov_deg must lie in (0, 360]")

    def element_positions(self) -> np.ndarray:
        n = np.arange(self.num_antennas)[:, None]
        return np.asarray(self.position) + n * self.element_spacing * np.asarray(self.axis)


@dataclass(frozen=True)
class OfdmConfig:
    carrier_freq: float = 3.5e9
    num_subcarriers: int = 256
    subcarrier_spacing: float = 30e3
    max_delay_taps: int = 32

    def __post_init__(self):
        if self.num_subcarriers < 1 or self.max_delay_taps < 1:
            raise SceneError("subcarrier and tap counts must be positive")
        if self.max_delay_taps > self.num_subcarriers:
            raise SceneError("max_delay_taps cannot exceed num_subcarriers")
        if not (self.carrier_freq > 0 and self.subcarrier_spacing > 0):
            raise SceneError("frequencies must be positive")

    @property
    def sample_period(self) -> float:
        return 1.0 / (self.num_subcarriers * self.subcarrier_spacing)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq


@dataclass(frozen=True)
class Scene:
    facets: tuple[Facet, ...]
    materials: tuple[Material, ...]
    foliage: tuple[FoliageVolume, ...]
    bs: ArrayConfig
    ue_grid: tuple[tuple[float, float, float], ...]
    ofdm: OfdmConfig = field(default_factory=OfdmConfig)

    def __post_init__(self):
        validate_scene(self)

    @cached_property
    def vertex_array(self) -> np.ndarray:
        """(F, 3, 3) facet corner table."""
        if not self.facets:
            return np.zeros((0, 3, 3))
        return np.array([f.vertices for f in self.facets], dtype=float)

    @cached_property
    def normal_array(self) -> np.ndarray:
        v = self.vertex_array
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def material_ids(self) -> np.ndarray:
        return np.array([f.material_id for f in self.facets], dtype=int)

    @cached_property
    def ue_array(self) -> np.ndarray:
        return np.asarray(self.ue_grid, dtype=float).reshape(-1, 3)

    def replace(self, **changes) -> "Scene":
        kw = {k: getattr(self, k) for k in ("facets", "materials", "foliage", "bs", "ue_grid", "ofdm")}
        kw.update(changes)
        return Scene(**kw)


def validate_scene(scene: Scene) -> None:
    nmat = len(scene.materials)
    for i, f in enumerate(scene.facets):
        if not 0 <= f.material_id < nmat:
            raise SceneError(f"facet {i}: material id {f.material_id} out of range (have {nmat} materials)")
        if f.area <= MIN_FACET_AREA:
            raise SceneError(f"facet {i}: degenerate triangle (area {f.area:.3g} m^2)")
    if not scene.ue_grid:
        raise SceneError("ue_grid is empty")
    bs = np.asarray(scene.bs.position)
    d = np.linalg.norm(np.asarray(scene.ue_grid, dtype=float).reshape(-1, 3) - bs, axis=1)
    if np.any(d < 1e-9):
        raise SceneError(f"UE {int(np.argmin(d))} coincides with the BS position")


def build_ue_grid(origin, extent_x: float, extent_y: float, spacing: float, height: float):
    """Row-major grid of UE points; rows run along y, points within a row along x."""
    if extent_x < 0 or extent_y < 0 or spacing <= 0:
        raise ValueError("extents must be >= 0 and spacing > 0")
    nx = int(math.floor(extent_x / spacing + 1e-9)) + 1
    ny = int(math.floor(extent_y / spacing + 1e-9)) + 1
    x0, y0 = float(origin[0]), float(origin[1])
    return [(x0 + ix * spacing, y0 + iy * spacing, float(height)) for iy in range(ny) for ix in range(nx)]


def _vec3(value, what: str) -> tuple[float, float, float]:
    try:
        out = tuple(float(c) for c in value)
    except (TypeError, ValueError):
        raise SceneError(f"{what}: expected a 3-vector, got {value!r}") from None
    if len(out) != 3:
        raise SceneError(f"{what}: expected a 3-vector, got {value!r}")
    return out


def scene_from_dict(doc: dict) -> Scene:
    try:
        materials = tuple(Material(str(m["name"]), float(m["eps_r"]), float(m["sigma"])) for m in doc["materials"])
        facets = []
        for i, f in enumerate(doc["facets"]):
            verts = f["v"]
            if len(verts) != 3:
                raise SceneError(f"facet {i}: expected 3 vertices")
            facets.append(Facet(tuple(_vec3(v, f"facet {i}") for v in verts), int(f["material"])))
        foliage = tuple(
            FoliageVolume(_vec3(b["min"], f"foliage {i}"), _vec3(b["max"], f"foliage {i}"), float(b["atten_db_per_m"]))
            for i, b in enumerate(doc.get("foliage", []))
        )
        o = doc.get("ofdm", {})
        ofdm = OfdmConfig(
            float(o.get("fc_hz", 3.5e9)), int(o.get("k", 256)), float(o.get("delta_f_hz", 30e3)), int(o.get("d_taps", 32))
        )
        b = doc["bs"]
        spacing = b.get("spacing_m", "half_lambda")
        spacing = ofdm.wavelength / 2 if spacing == "half_lambda" else float(spacing)
        bs = ArrayConfig(
            _vec3(b["position"], "bs.position"),
            int(b.get("n_antennas", 32)),
            spacing,
            _vec3(b.get("axis", (1, 0, 0)), "bs.axis"),
            _vec3(b.get("boresight", (0, -1, 0)), "bs.boresight"),
            float(b.get("fov_deg", 180.0)),
        )
        g = doc["ue_grid"]
        if "points" in g:
            ues = tuple(_vec3(p, f"ue {i}") for i, p in enumerate(g["points"]))
        else:
            ues = tuple(build_ue_grid(g["origin"], float(g["extent_x"]), float(g["extent_y"]), float(g["spacing"]), float(g["height"])))
    except SceneError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"malformed scene document: {exc!r}") from exc
    return Scene(tuple(facets), materials, foliage, bs, ues, ofdm)


def scene_to_dict(scene: Scene) -> dict:
    bs = scene.bs
    return {
        "materials": [{"name": m.name, "eps_r": m.eps_r, "sigma": m.sigma} for m in scene.materials],
        "facets": [{"v": [list(v) for v in f.vertices], "material": f.material_id} for f in scene.facets],
        "foliage": [{"min": list(b.lo), "max": list(b.hi), "atten_db_per_m": b.attenuation} for b in scene.foliage],
        "bs": {
            "position": list(bs.position),
            "n_antennas": bs.num_antennas,
            "spacing_m": bs.element_spacing,
            "axis": list(bs.axis),
            "boresight": list(bs.boresight),
            "fov_deg": bs.fov_deg,
        },
        "ue_grid": {"points": [list(p) for p in scene.ue_grid]},
        "ofdm": {
            "fc_hz": scene.ofdm.carrier_freq,
            "k": scene.ofdm.num_subcarriers,
            "delta_f_hz": scene.ofdm.subcarrier_spacing,
            "d_taps": scene.ofdm.max_delay_taps,
        },
    }


def load_scene(path) -> Scene:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: not valid JSON ({exc})") from exc
    return scene_from_dict(doc)


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1))


def facets_from_arrays(vertices: np.ndarray, faces: np.ndarray, material_id: int) -> list[Facet]:
    """Turn an indexed triangle mesh into facets, skipping degenerate triangles."""
    out = []
    for a, b, c in faces:
        tri = tuple(tuple(float(x) for x in vertices[i]) for i in (a, b, c))
        fct = Facet(tri, material_id)
        if fct.area > MIN_FACET_AREA:
            out.append(fct)
    return out


def box_facets(lo: Sequence[float], hi: Sequence[float], material_id: int, bottom: bool = True) -> list[Facet]:
    """Closed axis-aligned box with outward normals (12 triangles, 10 without the bottom)."""
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    c = np.array(
        [[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0], [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]]
    )
    quads = [
        (0, 1, 5, 4),  # -y
        (1, 2, 6, 5),  # +x
        (2, 3, 7, 6),  # +y
        (3, 0, 4, 7),  # -x
        (4, 5, 6, 7),  # top
    ]
    if bottom:
        quads.append((0, 3, 2, 1))
    faces = []
    for a, b, cc, d in quads:
        faces += [(a, b, cc), (a, cc, d)]
    return facets_from_arrays(c, np.array(faces), material_id)
