"""Deterministic image-method ray tracer.

Specular paths of order <= R are found by reflecting the base station across
facet planes (the image tree, built once per scene) and back-tracing every
image sequence towards the receivers. Candidate sequences are pruned with three
necessary conditions: the current image must sit on the reflecting side of the
next facet, the next facet must reach beyond the previous facet plane, and it
must intersect the beam spanned by the current image and the previous facet.

Facets reflect on the side their normal points to and block rays from both
sides. All work for one facet sequence is vectorised over receivers.
"""

from __future__ import annotations

import cmath
import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .fidelity.materials import complex_permittivity
from .scene import SPEED_OF_LIGHT, ArrayConfig, Material, Scene

_EPS = 1e-9
_SEG_EPS = 1e-6  # metres kept clear at segment ends during occlusion tests


@dataclass(frozen=True)
class TraceConfig:
    max_reflections: int = 4
    min_path_gain_db: float = -250.0
    apply_fov: bool = True

    def __post_init__(self):
        if self.max_reflections < 0:
            raise ValueError("max_reflections must be >= 0")


@dataclass(frozen=True, eq=False)
class Path:
    gain: complex
    delay: float
    azimuth: float
    elevation: float
    bounce_facets: tuple[int, ...]
    length: float
    vertices: np.ndarray = field(repr=False)  # (order + 2, 3) polyline BS -> hits -> UE

    @property
    def order(self) -> int:
        return len(self.bounce_facets)


# --------------------------------------------------------------------------- geometry


class _Geometry:
    """Facet tables shared by the tree builder and the back-tracer."""

    def __init__(self, scene: Scene):
        self.v = scene.vertex_array
        self.n = scene.normal_array
        self.d = np.einsum("ij,ij->i", self.n, self.v[:, 0]) if len(self.v) else np.zeros(0)
        self.e1 = self.v[:, 1] - self.v[:, 0]
        self.e2 = self.v[:, 2] - self.v[:, 0]
        # barycentric helpers
        self.d00 = np.einsum("ij,ij->i", self.e1, self.e1)
        self.d01 = np.einsum("ij,ij->i", self.e1, self.e2)
        self.d11 = np.einsum("ij,ij->i", self.e2, self.e2)
        self.den = self.d00 * self.d11 - self.d01 * self.d01
        scale = np.abs(self.v).max() if len(self.v) else 1.0
        self.tol = _EPS * max(scale, 1.0)

    def side(self, f: int, pts: np.ndarray) -> np.ndarray:
        return pts @ self.n[f] - self.d[f]

    def reflect(self, f: int, p: np.ndarray) -> np.ndarray:
        return p - 2.0 * (p @ self.n[f] - self.d[f]) * self.n[f]

    def inside(self, f: int, pts: np.ndarray) -> np.ndarray:
        w = pts - self.v[f, 0]
        d20 = w @ self.e1[f]
        d21 = w @ self.e2[f]
        den = self.den[f]
        b1 = (self.d11[f] * d20 - self.d01[f] * d21) / den
        b2 = (self.d00[f] * d21 - self.d01[f] * d20) / den
        tol = 1e-12
        return (b1 >= -tol) & (b2 >= -tol) & (b1 + b2 <= 1 + tol)

    def blocked(self, a: np.ndarray, b: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """True where segment a[i] -> b[i] crosses any facet strictly between its ends."""
        m = len(a)
        out = np.zeros(m, dtype=bool)
        if m == 0 or len(self.v) == 0:
            return out
        for s in range(0, m, chunk):
            o = a[s : s + chunk]
            dvec = b[s : s + chunk] - o
            seg_len = np.linalg.norm(dvec, axis=1)
            pvec = np.cross(dvec[:, None, :], self.e2[None, :, :])
            det = np.einsum("fk,mfk->mf", self.e1, pvec)
            ok = np.abs(det) > 1e-14
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tvec = o[:, None, :] - self.v[None, :, 0]
            u = np.einsum("mfk,mfk->mf", tvec, pvec) * inv
            qvec = np.cross(tvec, self.e1[None, :, :])
            w = np.einsum("mk,mfk->mf", dvec, qvec) * inv
            t = np.einsum("fk,mfk->mf", self.e2, qvec) * inv
            tmin = (_SEG_EPS / np.maximum(seg_len, 1e-300))[:, None]
            hit = ok & (u >= 0) & (w >= 0) & (u + w <= 1) & (t > tmin) & (t < 1 - tmin)
            out[s : s + chunk] = hit.any(axis=1)
        return out


def image_tree(scene: Scene, max_order: int, source=None):
    """Candidate facet sequences in (order, lexicographic) order with their image points.

    Returns a list of ``(sequence, images)`` where ``images[k]`` is the source
    mirrored across the first ``k`` facets of the sequence.
    """
    geo = _Geometry(scene)
    src = np.asarray(scene.bs.position if source is None else source, dtype=float)
    return _image_tree(geo, src, max_order)


def _image_tree(geo: _Geometry, src: np.ndarray, max_order: int):
    out = [((), (src,))]
    nf = len(geo.v)
    if nf == 0 or max_order == 0:
        return out
    level = []
    front0 = (geo.n @ src - geo.d) > geo.tol
    for j in np.flatnonzero(front0):
        j = int(j)
        level.append(((j,), (src, geo.reflect(j, src))))
    idx = np.arange(nf)
    for order in range(1, max_order + 1):
        out.extend(level)
        if order == max_order:
            break
        nxt = []
        for seq, imgs in level:
            i = seq[-1]
            s = imgs[-1]
            keep = (geo.n @ s - geo.d) > geo.tol
            keep &= idx != i
            beyond = np.einsum("fkj,j->fk", geo.v, geo.n[i]) - geo.d[i]
            keep &= beyond.max(axis=1) > geo.tol
            tri = geo.v[i]
            rel = geo.v - s
            for a, b, c in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
                m = np.cross(tri[a] - s, tri[b] - s)
                if m @ (tri[c] - s) < 0:
                    m = -m
                nm = np.linalg.norm(m)
                if nm == 0:
                    continue
                keep &= (rel @ (m / nm)).max(axis=1) > -geo.tol
            for j in np.flatnonzero(keep):
                j = int(j)
                nxt.append((seq + (j,), imgs + (geo.reflect(j, s),)))
        level = nxt
    return out


def _backtrace(geo: _Geometry, seq: tuple[int, ...], imgs, ues: np.ndarray, idx: np.ndarray):
    """Vertices for every receiver in ``idx`` that completes ``seq``; returns (idx, verts)."""
    order = len(seq)
    pts = ues[idx]
    hits = [None] * order
    for k in range(order - 1, -1, -1):
        f = seq[k]
        s = imgs[k + 1]
        front = geo.side(f, pts) > geo.tol
        dvec = pts - s
        denom = dvec @ geo.n[f]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (geo.d[f] - s @ geo.n[f]) / denom
            ok = front & (t > 0) & (t < 1)
            t = np.where(ok, t, 0.0)
        hit = s + t[:, None] * dvec
        ok &= geo.inside(f, hit)
        if not ok.all():
            idx, pts, hit = idx[ok], pts[ok], hit[ok]
            for kk in range(k + 1, order):
                hits[kk] = hits[kk][ok]
        hits[k] = hit
        pts = hit
        if len(idx) == 0:
            break
    n = len(idx)
    verts = np.empty((n, order + 2, 3))
    verts[:, 0] = imgs[0]
    for k in range(order):
        verts[:, k + 1] = hits[k]
    verts[:, -1] = ues[idx]
    if n:
        clear = np.ones(n, dtype=bool)
        for k in range(order + 1):
            clear &= ~geo.blocked(verts[:, k], verts[:, k + 1])
        idx, verts = idx[clear], verts[clear]
    return idx, verts


# --------------------------------------------------------------------------- physics


def fresnel_coeff(material: Material, incidence_angle: float, freq: float) -> complex:
    """TE (perpendicular) reflection coefficient for a half-space of ``material``."""
    eps_c = complex_permittivity(material, freq)
    c = math.cos(incidence_angle)
    root = cmath.sqrt(eps_c - math.sin(incidence_angle) ** 2)
    return (c - root) / (c + root)


def _fresnel_te(eps_c: np.ndarray, cos_i: np.ndarray) -> np.ndarray:
    root = np.sqrt(eps_c - (1.0 - cos_i**2) + 0j)
    return (cos_i - root) / (cos_i + root)


def foliage_loss_db(scene: Scene, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Attenuation in dB accumulated by segments a[i] -> b[i] inside foliage boxes."""
    loss = np.zeros(len(a))
    if not scene.foliage:
        return loss
    dvec = b - a
    seg_len = np.linalg.norm(dvec, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dvec
    for box in scene.foliage:
        lo, hi = np.asarray(box.lo), np.asarray(box.hi)
        with np.errstate(invalid="ignore"):
            t0 = (lo - a) * inv
            t1 = (hi - a) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        # axis-parallel segments: inside the slab means unbounded, outside means empty
        par = dvec == 0
        inside_slab = (a >= lo) & (a <= hi)
        tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
        enter = np.clip(tmin.max(axis=1), 0.0, 1.0)
        leave = np.clip(tmax.min(axis=1), 0.0, 1.0)
        loss += np.maximum(leave - enter, 0.0) * seg_len * box.attenuation
    return loss


def _path_gains(scene: Scene, seq: Sequence[int], verts: np.ndarray, freq: float):
    """Complex gains and lengths for paths sharing one bounce sequence; verts (n, order+2, 3)."""
    lam = SPEED_OF_LIGHT / freq
    segs = np.diff(verts, axis=1)
    seg_len = np.linalg.norm(segs, axis=2)
    length = seg_len.sum(axis=1)
    amp = lam / (4 * np.pi * length) + 0j
    normals = scene.normal_array
    for k, f in enumerate(seq):
        mat = scene.materials[scene.material_ids[f]]
        eps_c = complex_permittivity(mat, freq)
        cos_i = np.abs(segs[:, k] @ normals[f]) / seg_len[:, k]
        amp = amp * _fresnel_te(eps_c, np.clip(cos_i, 0.0, 1.0))
    if scene.foliage:
        loss = np.zeros(len(verts))
        for k in range(segs.shape[1]):
            loss += foliage_loss_db(scene, verts[:, k], verts[:, k + 1])
        amp = amp * 10.0 ** (-loss / 20.0)
    return amp * np.exp(-2j * np.pi * length / lam), length


def path_gain(vertices, bounce_facets: Sequence[int], scene: Scene, freq: float | None = None) -> complex:
    """Complex amplitude of one geometric path (free-space spreading x Fresnel x foliage x phase)."""
    freq = scene.ofdm.carrier_freq if freq is None else freq
    g, _ = _path_gains(scene, tuple(bounce_facets), np.asarray(vertices, dtype=float)[None], freq)
    return complex(g[0])


def fov_filter(paths: Iterable[Path], array: ArrayConfig) -> list[Path]:
    paths = list(paths)
    if array.fov_deg >= 360:
        return paths
    bs = np.array(array.boresight[:2], dtype=float)
    nb = np.linalg.norm(bs)
    half = math.radians(array.fov_deg) / 2
    out = []
    for p in paths:
        if nb == 0:
            out.append(p)
            continue
        c = (math.cos(p.azimuth) * bs[0] + math.sin(p.azimuth) * bs[1]) / nb
        if math.acos(max(-1.0, min(1.0, c))) <= half + 1e-12:
            out.append(p)
    return out


def _fov_mask(az: np.ndarray, array: ArrayConfig) -> np.ndarray:
    if array.fov_deg >= 360:
        return np.ones(len(az), dtype=bool)
    bs = np.array(array.boresight[:2], dtype=float)
    nb = np.linalg.norm(bs)
    if nb == 0:
        return np.ones(len(az), dtype=bool)
    c = (np.cos(az) * bs[0] + np.sin(az) * bs[1]) / nb
    return np.arccos(np.clip(c, -1, 1)) <= math.radians(array.fov_deg) / 2 + 1e-12


# --------------------------------------------------------------------------- drivers


def validate_specular_chain(scene: Scene, bounce_facets: Sequence[int], ue) -> np.ndarray | None:
    """Polyline BS -> hit_1 -> ... -> UE for one facet chain, or None when it is not a valid path."""
    geo = _Geometry(scene)
    seq = tuple(int(f) for f in bounce_facets)
    if any(not 0 <= f < len(geo.v) for f in seq):
        raise IndexError("bounce facet index out of range")
    imgs = [np.asarray(scene.bs.position, dtype=float)]
    for f in seq:
        if geo.side(f, imgs[-1][None])[0] <= geo.tol:
            return None
        imgs.append(geo.reflect(f, imgs[-1]))
    ues = np.asarray(ue, dtype=float).reshape(1, 3)
    idx, verts = _backtrace(geo, seq, imgs, ues, np.arange(1))
    return verts[0] if len(idx) else None


def trace(scene: Scene, ues=None, cfg: TraceConfig = TraceConfig()) -> list[list[Path]]:
    """Paths for every receiver (defaults to the scene's UE grid), one list per receiver."""
    ues = scene.ue_array if ues is None else np.asarray(ues, dtype=float).reshape(-1, 3)
    geo = _Geometry(scene)
    src = np.asarray(scene.bs.position, dtype=float)
    freq = scene.ofdm.carrier_freq
    per_ue: list[list[Path]] = [[] for _ in range(len(ues))]
    all_idx = np.arange(len(ues))
    for seq, imgs in _image_tree(geo, src, cfg.max_reflections):
        if seq:
            pre = geo.side(seq[-1], ues) > geo.tol
            idx = all_idx[pre]
            if len(idx) == 0:
                continue
        else:
            idx = all_idx
        idx, verts = _backtrace(geo, seq, imgs, ues, idx)
        if len(idx) == 0:
            continue
        gains, length = _path_gains(scene, seq, verts, freq)
        first = verts[:, 1] - verts[:, 0]
        az = np.arctan2(first[:, 1], first[:, 0])
        el = np.arcsin(np.clip(first[:, 2] / np.linalg.norm(first, axis=1), -1, 1))
        keep = np.abs(gains) > 0
        with np.errstate(divide="ignore"):
            keep &= 20 * np.log10(np.abs(gains)) >= cfg.min_path_gain_db
        if cfg.apply_fov:
            keep &= _fov_mask(az, scene.bs)
        for r in np.flatnonzero(keep):
            per_ue[idx[r]].append(
                Path(complex(gains[r]), float(length[r] / SPEED_OF_LIGHT), float(az[r]), float(el[r]), seq, float(length[r]), verts[r])
            )
    return per_ue


def enumerate_paths(scene: Scene, ue, cfg: TraceConfig = TraceConfig()) -> list[Path]:
    return trace(scene, np.asarray(ue, dtype=float).reshape(1, 3), cfg)[0]


def regain(scene: Scene, paths: Sequence[Path], cfg: TraceConfig | None = None) -> list[Path]:
    """Re-evaluate gains of already traced paths in a scene with identical geometry.

    Used for material and foliage variants, which change amplitudes but not path
    existence. FoV and gain pruning are re-applied when ``cfg`` is given.
    """
    freq = scene.ofdm.carrier_freq
    out = []
    for p in paths:
        g, _ = _path_gains(scene, p.bounce_facets, p.vertices[None], freq)
        out.append(Path(complex(g[0]), p.delay, p.azimuth, p.elevation, p.bounce_facets, p.length, p.vertices))
    if cfg is not None:
        out = [p for p in out if 20 * math.log10(abs(p.gain)) >= cfg.min_path_gain_db] if out else out
        if cfg.apply_fov:
            out = fov_filter(out, scene.bs)
    return out


def coverage_mask(per_ue: Sequence[Sequence[Path]]) -> np.ndarray:
    return np.array([len(p) > 0 for p in per_ue], dtype=bool)


def write_paths_csv(path, per_ue: Sequence[Sequence[Path]], ue_indices: Sequence[int] | None = None) -> None:
    ue_indices = range(len(per_ue)) if ue_indices is None else ue_indices
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ue_index", "path_index", "order", "gain_re", "gain_im", "delay_s", "aod_az_rad", "aod_el_rad", "length_m", "facets"])
        for u, paths in zip(ue_indices, per_ue):
            for i, p in enumerate(paths):
                w.writerow(
                    [u, i, p.order, repr(p.gain.real), repr(p.gain.imag), repr(p.delay), repr(p.azimuth), repr(p.elevation), repr(p.length), ";".join(map(str, p.bounce_facets))]
                )
