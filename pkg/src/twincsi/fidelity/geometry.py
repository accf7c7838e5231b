"""Geometry fidelity: surface sampling, surface reconstruction, decimation and F1 scoring."""

from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from ..scene import Facet, facets_from_arrays


class ReconstructionError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (n, 3)
    density: float  # points per m^2 requested at sampling time

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int, counter-clockwise seen from outside

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def to_facets(self, material_id: int) -> list[Facet]:
        return facets_from_arrays(self.vertices, self.faces, material_id)

    @classmethod
    def from_facets(cls, facets, decimals: int = 9) -> "TriMesh":
        """Weld coincident vertices of a triangle soup."""
        tris = triangle_array(facets)
        flat = tris.reshape(-1, 3)
        _, first, inverse = np.unique(np.round(flat, decimals), axis=0, return_index=True, return_inverse=True)
        return cls(flat[first], inverse.reshape(-1, 3))

    def signed_volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def triangle_array(facets) -> np.ndarray:
    """(F, 3, 3) vertex array from Facets, a TriMesh or an array."""
    if isinstance(facets, TriMesh):
        return facets.triangles
    if isinstance(facets, np.ndarray):
        return facets.reshape(-1, 3, 3).astype(float)
    return np.array([f.vertices for f in facets], dtype=float).reshape(-1, 3, 3)


def _areas(tris):
    return 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)


def surface_area(facets) -> float:
    return float(_areas(triangle_array(facets)).sum())


# -- sampling ------------------------------------------------------------------


def _uniform_surface(tris, areas, n, rng):
    idx = rng.choice(len(tris), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    su = np.sqrt(u)
    a, b, c = tris[idx, 0], tris[idx, 1], tris[idx, 2]
    return (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c


def sample_point_cloud(facets, density: float, seed: int, oversample: int = 4) -> PointCloud:
    """Poisson-disk surface sampling.

    The target count is drawn as Poisson(density * area). Candidates are drawn
    uniformly by area and accepted greedily when no earlier accepted point lies
    within r = sqrt(1 / (pi * density)); acceptance stops at the target.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    tris = triangle_array(facets)
    areas = _areas(tris)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero area")
    rng = np.random.default_rng(seed)
    target = int(rng.poisson(density * total))
    radius = math.sqrt(1.0 / (math.pi * density))
    if target == 0:
        return PointCloud(np.zeros((0, 3)), density)
    cand = _uniform_surface(tris, areas, max(oversample * target, 64), rng)
    tree = cKDTree(cand)
    neighbours = tree.query_ball_point(cand, radius, return_sorted=False)
    blocked = np.zeros(len(cand), dtype=bool)
    keep = []
    for i in range(len(cand)):
        if blocked[i]:
            continue
        keep.append(i)
        if len(keep) == target:
            break
        blocked[neighbours[i]] = True
    return PointCloud(cand[np.array(keep)], density)


def disk_radius(density: float) -> float:
    return math.sqrt(1.0 / (math.pi * density))


# -- reconstruction ------------------------------------------------------------


def _check_degenerate(pts):
    if len(pts) < 4:
        raise ReconstructionError(f"need at least 4 non-coplanar points, got {len(pts)}")
    s = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if s[2] <= 1e-9 * max(s[0], 1e-300):
        raise ReconstructionError("points are coplanar or collinear")


def estimate_normals(points: np.ndarray, k: int = 10) -> np.ndarray:
    """Unoriented PCA normals from the k nearest neighbours."""
    k = min(k, len(points))
    _, nn = cKDTree(points).query(points, k=k)
    nb = points[nn]
    centred = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centred, centred)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, :, 0]


def _solid_mask(idx, shape, dilate):
    """Filled occupancy: rasterise, close gaps by ``dilate`` voxels, fill cavities, erode back."""
    occ = np.zeros(shape, dtype=bool)
    occ[tuple(idx.T)] = True
    cube = np.ones((3, 3, 3), dtype=bool)
    grown = ndimage.binary_dilation(occ, cube, iterations=dilate)
    filled = ndimage.binary_fill_holes(grown)
    solid = ndimage.binary_erosion(filled, cube, iterations=dilate, border_value=0) | occ
    return solid, bool(np.any(filled & ~grown))


def reconstruct_mesh(cloud: PointCloud, voxel_size: float | None = None, k_normals: int = 10) -> TriMesh:
    """Closed triangle surface from a point cloud.

    A solid occupancy mask (rasterise, close, fill) orients PCA normals
    outward; the signed tangent-plane distance to the nearest sample is
    evaluated on the voxel grid (occupancy sign far from the samples) and its
    zero level set is extracted with marching cubes.
    """
    pts = np.asarray(cloud.points, dtype=float)
    _check_degenerate(pts)
    if voxel_size is None:
        voxel_size = max(0.5, 1.5 * disk_radius(cloud.density))
    h = float(voxel_size)
    if not h > 0:
        raise ValueError("voxel_size must be positive")
    # close gaps up to ~1.2 mean sample spacings
    dilate = max(1, math.ceil(1.2 / (h * math.sqrt(cloud.density))))
    pad = 3 + dilate
    origin = pts.min(axis=0) - pad * h
    shape = tuple(np.ceil((pts.max(axis=0) - origin) / h).astype(int) + pad + 1)
    idx = np.floor((pts - origin) / h).astype(int)
    solid, enclosed = _solid_mask(idx, shape, dilate)

    normals = estimate_normals(pts, k_normals)
    smooth = ndimage.gaussian_filter(solid.astype(float), 1.0)
    probe = 0.75 * h
    grid_out = ((pts + probe * normals) - origin) / h - 0.5
    grid_in = ((pts - probe * normals) - origin) / h - 0.5
    occ_out = ndimage.map_coordinates(smooth, grid_out.T, order=1, mode="nearest")
    occ_in = ndimage.map_coordinates(smooth, grid_in.T, order=1, mode="nearest")
    if enclosed:
        flip = occ_out > occ_in
    else:
        flip = np.einsum("ij,ij->i", normals, pts - pts.mean(axis=0)) < 0
    normals[flip] *= -1

    centres = (np.indices(shape).reshape(3, -1).T + 0.5) * h + origin
    dist, nn = cKDTree(pts).query(centres)
    field = np.einsum("ij,ij->i", centres - pts[nn], normals[nn])
    far = dist > 2.0 * max(h, disk_radius(cloud.density))
    inside = solid.reshape(-1)
    field[far] = np.where(inside[far], -dist[far], dist[far])
    vol = field.reshape(shape)
    if not (vol.min() < 0 < vol.max()):
        raise ReconstructionError("no surface crossing in the distance field")
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(h, h, h), gradient_direction="ascent")
    mesh = TriMesh(verts + origin + 0.5 * h, faces.astype(np.int64))
    if mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1].copy())
    return mesh


# -- decimation ----------------------------------------------------------------


class Decimation(NamedTuple):
    mesh: TriMesh
    reached: bool  # False when the target could not be met without breaking the surface


def _cross(u, v):
    return np.stack(
        [u[:, 1] * v[:, 2] - u[:, 2] * v[:, 1], u[:, 2] * v[:, 0] - u[:, 0] * v[:, 2], u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]],
        axis=1,
    )


def _face_planes(v, f):
    t = v[f]
    n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    ln = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(ln > 0, n / np.where(ln > 0, ln, 1), 0.0)
    d = -np.einsum("ij,ij->i", n, t[:, 0])
    return np.concatenate([n, d[:, None]], axis=1)


def decimate_mesh(facets, target_face_count: int, min_normal_cos: float = 1e-3) -> Decimation:
    """Greedy quadric-error edge collapse down to at most ``target_face_count`` faces.

    Collapses that would break the link condition, invert a triangle or create
    a degenerate one are skipped. Open boundaries are held by perpendicular
    constraint planes.
    """
    if target_face_count < 4:
        raise ValueError("target face count must be >= 4")
    mesh = facets if isinstance(facets, TriMesh) else TriMesh.from_facets(facets)
    verts = mesh.vertices.astype(float).copy()
    faces = [tuple(int(i) for i in f) for f in mesh.faces]
    if len(faces) <= target_face_count:
        return Decimation(TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3)), True)

    planes = _face_planes(verts, np.array(faces))
    quad = np.zeros((len(verts), 4, 4))
    for fi, f in enumerate(faces):
        k = np.outer(planes[fi], planes[fi])
        for vi in f:
            quad[vi] += k
    # boundary edges: add a heavily weighted plane through the edge, perpendicular to the face
    edge_faces: dict[tuple[int, int], list[int]] = {}
    for fi, f in enumerate(faces):
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
            edge_faces.setdefault((min(a, b), max(a, b)), []).append(fi)
    for (a, b), fl in edge_faces.items():
        if len(fl) == 1:
            e = verts[b] - verts[a]
            n = np.cross(e, planes[fl[0], :3])
            ln = np.linalg.norm(n)
            if ln > 0:
                n /= ln
                p = np.append(n, -n @ verts[a])
                k = 1e3 * np.outer(p, p)
                quad[a] += k
                quad[b] += k

    alive = [True] * len(faces)
    vfaces: list[set[int]] = [set() for _ in range(len(verts))]
    for fi, f in enumerate(faces):
        for vi in f:
            vfaces[vi].add(fi)
    version = [0] * len(verts)
    count = len(faces)

    def neighbours(v):
        return {w for fi in vfaces[v] for w in faces[fi]} - {v}

    def placement(a, b):
        q = quad[a] + quad[b]
        a3 = q[:3, :3]
        mid = 0.5 * (verts[a] + verts[b])
        cands = [verts[a], verts[b], mid]
        det = np.linalg.det(a3)
        if abs(det) > 1e-10 * max(1.0, np.abs(a3).max() ** 3):
            cands.insert(0, np.linalg.solve(a3, -q[:3, 3]))
        pts = np.array(cands)
        hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
        costs = np.einsum("ij,jk,ik->i", hom, q, hom)
        i = int(np.argmin(costs))
        return max(float(costs[i]), 0.0), pts[i]

    heap = []

    def push(a, b):
        a, b = min(a, b), max(a, b)
        cost, p = placement(a, b)
        heapq.heappush(heap, (cost, a, b, version[a], version[b], tuple(p)))

    for a, b in edge_faces:
        push(a, b)

    def collapse_ok(a, b, p):
        shared = vfaces[a] & vfaces[b]
        opp = {w for fi in shared for w in faces[fi]} - {a, b}
        if neighbours(a) & neighbours(b) != opp:
            return False
        if count - len(shared) < 4:
            return False
        moved = [(fi, faces[fi].index(v)) for v in (a, b) for fi in vfaces[v] - shared]
        if not moved:
            return True
        tri = verts[np.array([faces[fi] for fi, _ in moved])]
        new = tri.copy()
        new[np.arange(len(moved)), [k for _, k in moved]] = p
        n0 = _cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        n1 = _cross(new[:, 1] - new[:, 0], new[:, 2] - new[:, 0])
        l0 = np.linalg.norm(n0, axis=1)
        l1 = np.linalg.norm(n1, axis=1)
        if np.any(l1 <= 1e-12 * np.maximum(l0, 1e-300)):
            return False
        if np.any((l0 > 0) & (np.einsum("ij,ij->i", n0, n1) <= min_normal_cos * l0 * l1)):
            return False
        return True

    while count > target_face_count and heap:
        cost, a, b, va, vb, p = heapq.heappop(heap)
        if va != version[a] or vb != version[b] or not vfaces[a] or not vfaces[b]:
            continue
        shared = vfaces[a] & vfaces[b]
        if not shared:
            continue
        p = np.array(p)
        if not collapse_ok(a, b, p):
            continue
        for fi in shared:
            alive[fi] = False
            for w in faces[fi]:
                vfaces[w].discard(fi)
            count -= 1
        for fi in list(vfaces[b]):
            faces[fi] = tuple(a if w == b else w for w in faces[fi])
            vfaces[a].add(fi)
        vfaces[b] = set()
        verts[a] = p
        quad[a] += quad[b]
        version[a] += 1
        version[b] += 1
        for w in neighbours(a):
            push(a, w)

    kept = np.array([f for f, ok in zip(faces, alive) if ok], dtype=np.int64).reshape(-1, 3)
    used, inverse = np.unique(kept, return_inverse=True)
    out = TriMesh(verts[used], inverse.reshape(-1, 3))
    return Decimation(out, count <= target_face_count)


# -- scoring -------------------------------------------------------------------


class PrecisionRecall(NamedTuple):
    precision: float
    recall: float
    f1: float


def _points(c):
    pts = np.asarray(c.points if isinstance(c, PointCloud) else c, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("point cloud is empty")
    return pts


def f1_score(real: PointCloud, twin: PointCloud, tau: float) -> PrecisionRecall:
    """Precision, recall and F1 (percent) with exact nearest-neighbour distances and a strict threshold."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    x, xh = _points(real), _points(twin)
    d_x, _ = cKDTree(xh).query(x)
    d_xh, _ = cKDTree(x).query(xh)
    p = 100.0 * np.count_nonzero(d_x < tau) / len(x)
    r = 100.0 * np.count_nonzero(d_xh < tau) / len(xh)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return PrecisionRecall(p, r, f)


def threshold_select(facets, density: float, seed_a: int, seed_b: int, allow_equal: bool = False) -> float:
    """Largest nearest-neighbour distance from one sampling of the mesh to a second, independent one."""
    if seed_a == seed_b and not allow_equal:
        raise ValueError("seed_a and seed_b must differ")
    a = sample_point_cloud(facets, density, seed_a)
    b = sample_point_cloud(facets, density, seed_b)
    d, _ = cKDTree(_points(b)).query(_points(a))
    return float(d.max())


@dataclass(frozen=True)
class FidelityReport:
    f1: float
    precision: float
    recall: float
    tau: float
    delta_eps_r: float = 0.0
    delta_sigma: float = 0.0
    max_reflections: int = 4
    fov_deg: float = 180.0

    def __post_init__(self):
        for name in ("f1", "precision", "recall"):
            if not 0.0 <= getattr(self, name) <= 100.0:
                raise ValueError(f"{name} must be a percentage")
        s = self.precision + self.recall
        expect = 0.0 if s == 0 else 2 * self.precision * self.recall / s
        if abs(self.f1 - expect) > 1e-9:
            raise ValueError("f1 is inconsistent with precision and recall")
        if self.delta_eps_r < 0 or self.delta_sigma < 0:
            raise ValueError("material deltas must be non-negative")


def mesh_f1(real_facets, twin_facets, density: float, tau: float, seed: int) -> PrecisionRecall:
    """F1 between independent samplings of two surfaces at the same density."""
    a = sample_point_cloud(real_facets, density, seed)
    b = sample_point_cloud(twin_facets, density, seed + 1)
    return f1_score(a, b, tau)


FIDELITY_CSV_HEADER = ["axis", "parameter", "value", "f1", "precision", "recall", "tau_m", "delta_eps_r", "delta_sigma"]


def write_fidelity_csv(path, rows: Sequence[tuple[str, str, float, FidelityReport]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIDELITY_CSV_HEADER)
        for axis, param, value, rep in rows:
            w.writerow([axis, param, value, rep.f1, rep.precision, rep.recall, rep.tau, rep.delta_eps_r, rep.delta_sigma])
