"""CSI datasets: generation from traced scenes, seeded splits and the CSID binary format."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np

from ..channel import StatGenConfig, delay_domain_channel, dft_kernel, statistical_channels, stack
from ..csiproc import TRUNCATED_ROWS, AngularDelayCsi, batch_to_delay_angular, to_real
from ..raytracer import TraceConfig, trace
from ..scene import Scene

log = logging.getLogger(__name__)

ORIGINS = ("target", "twin", "statistical", "selected")
MAGIC = b"CSID"
VERSION = 1
FLAG_RAW = 0x01


def config_hash(config) -> str:
    """Short SHA-256 of the canonical JSON form of a resolved configuration."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if hasattr(obj, "__dataclass_fields__"):
        return {k: getattr(obj, k) for k in obj.__dataclass_fields__}
    raise TypeError(f"not serialisable: {type(obj).__name__}")


@dataclass
class Dataset:
    g: np.ndarray  # (N, rows, N_t) complex64, unit Frobenius norm per sample
    scales: np.ndarray  # (N,) float64
    origin: str
    seed: int = 0
    config_hash: str = ""
    ue_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    num_subcarriers: int = 256
    raw: np.ndarray | None = None  # optional (N, N_t, K) complex64 frequency-domain channels

    def __post_init__(self):
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        self.g = np.asarray(self.g, dtype=np.complex64)
        if self.g.ndim != 3:
            raise ValueError("g must have shape (N, rows, N_t)")
        self.scales = np.asarray(self.scales, dtype=np.float64)
        if self.scales.shape != (len(self.g),):
            raise ValueError("one scale per sample required")
        idx = np.asarray(self.ue_indices, dtype=np.int64)
        self.ue_indices = idx if len(idx) else np.full(len(self.g), -1, dtype=np.int64)
        if len(self.ue_indices) != len(self.g):
            raise ValueError("one UE index per sample required")
        if self.raw is not None:
            self.raw = np.asarray(self.raw, dtype=np.complex64)
            if self.raw.shape[:2] != (len(self.g), self.g.shape[2]):
                raise ValueError("raw channels must have shape (N, N_t, K)")

    def __len__(self) -> int:
        return len(self.g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.g.shape[1], self.g.shape[2]

    def real(self) -> np.ndarray:
        """Model-layout float32 array (N, 2 * rows * N_t)."""
        return to_real(self.g).astype(np.float32)

    def sample(self, i: int) -> AngularDelayCsi:
        return AngularDelayCsi(self.g[i].astype(complex), float(self.scales[i]), int(self.ue_indices[i]), self.num_subcarriers)

    def subset(self, positions, origin: str | None = None) -> "Dataset":
        pos = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self.g[pos],
            self.scales[pos],
            origin or self.origin,
            self.seed,
            self.config_hash,
            self.ue_indices[pos],
            self.num_subcarriers,
            None if self.raw is None else self.raw[pos],
        )

    def select_ues(self, ue_indices) -> "Dataset":
        """Samples whose UE index is in ``ue_indices`` (dataset order kept)."""
        return self.subset(np.flatnonzero(np.isin(self.ue_indices, np.asarray(ue_indices))))


def concat(parts: Sequence[Dataset], origin: str) -> Dataset:
    raw = None if any(p.raw is None for p in parts) else np.concatenate([p.raw for p in parts])
    return Dataset(
        np.concatenate([p.g for p in parts]),
        np.concatenate([p.scales for p in parts]),
        origin,
        parts[0].seed,
        parts[0].config_hash,
        np.concatenate([p.ue_indices for p in parts]),
        parts[0].num_subcarriers,
        raw,
    )


# -- generation ------------------------------------------------------------------


def channels_from_paths(per_ue, scene: Scene) -> np.ndarray:
    """Frequency-domain channels (N, N_t, K) for a list of per-UE path lists."""
    kernel = dft_kernel(scene.ofdm.num_subcarriers, scene.ofdm.max_delay_taps)
    h = np.empty((len(per_ue), scene.bs.num_antennas, scene.ofdm.num_subcarriers), dtype=complex)
    for i, paths in enumerate(per_ue):
        h[i] = delay_domain_channel(paths, scene.bs, scene.ofdm) @ kernel
    return h


def dataset_from_channels(h: np.ndarray, origin: str, seed: int = 0, chash: str = "", ue_indices=None, keep_raw: bool = False) -> Dataset:
    g, scales = batch_to_delay_angular(h, TRUNCATED_ROWS)
    return Dataset(g, scales, origin, seed, chash, np.arange(len(h)) if ue_indices is None else ue_indices, h.shape[2], h if keep_raw else None)


def dataset_from_paths(per_ue, scene: Scene, ue_indices, origin: str, seed: int = 0, chash: str = "", keep_raw: bool = False) -> Dataset:
    """Dataset for the given UEs (``per_ue`` is a list or a mapping keyed by UE index); every UE needs a path."""
    ue_indices = np.asarray(ue_indices, dtype=np.int64)
    if any(len(per_ue[int(u)]) == 0 for u in ue_indices):
        raise ValueError("dataset_from_paths: UE without paths requested")
    h = channels_from_paths([per_ue[int(u)] for u in ue_indices], scene)
    return dataset_from_channels(h, origin, seed, chash, ue_indices, keep_raw)


def choose_ues(covered: np.ndarray, limit: int | None, seed: int) -> np.ndarray:
    """Seeded choice of at most ``limit`` covered UE indices, returned in ascending order."""
    idx = np.flatnonzero(covered)
    if limit is None or limit >= len(idx):
        return idx
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(idx, size=limit, replace=False))


def trace_sampled(scene: Scene, cfg: TraceConfig, needed: int | None, seed: int, chunk: int = 4000):
    """Trace grid UEs in a seeded random order, chunk by chunk, until ``needed`` of them have paths.

    Returns the visited grid indices (in visiting order) and their path lists.
    ``needed=None`` visits the whole grid.
    """
    order = np.random.default_rng(seed).permutation(len(scene.ue_grid))
    visited, per_ue = [], []
    covered = 0
    for s in range(0, len(order), chunk):
        idx = order[s : s + chunk]
        paths = trace(scene, scene.ue_array[idx], cfg)
        visited.append(idx)
        per_ue += paths
        covered += sum(1 for p in paths if p)
        log.info("traced %d of %d UEs, %d covered", s + len(idx), len(order), covered)
        if needed is not None and covered >= needed:
            break
    return (np.concatenate(visited) if visited else np.zeros(0, dtype=np.int64)), per_ue


def gen_dataset(
    scene: Scene,
    trace_cfg: TraceConfig = TraceConfig(),
    sample_limit: int | None = None,
    seed: int = 0,
    origin: str = "target",
    per_ue=None,
    keep_raw: bool = False,
) -> Dataset:
    """CSI dataset of covered UEs, tracing the grid unless ``per_ue`` (paths for every grid UE) is given.

    With a ``sample_limit`` only a seeded random subset of the grid is traced:
    the first ``sample_limit`` covered UEs in visiting order are kept.
    """
    if per_ue is not None:
        covered = np.array([len(p) > 0 for p in per_ue])
        if not covered.any():
            raise ValueError("no UE has any propagation path")
        ues = choose_ues(covered, sample_limit, seed)
        paths = per_ue
    else:
        visited, traced = trace_sampled(scene, trace_cfg, sample_limit, seed)
        hit = [i for i, p in enumerate(traced) if p]
        if not hit:
            raise ValueError("no UE has any propagation path")
        hit = hit[:sample_limit] if sample_limit is not None else hit
        covered = np.zeros(len(traced), dtype=bool)
        covered[hit] = True
        ues = np.sort(visited[hit])
        paths = dict(zip(visited[hit].tolist(), (traced[i] for i in hit)))
    dropped = int((~covered).sum())
    if dropped:
        log.info("dropped %d of %d traced UEs without paths", dropped, len(covered))
    chash = config_hash({"trace": trace_cfg, "sample_limit": sample_limit, "seed": seed, "origin": origin, "scene": scene_digest(scene)})
    return dataset_from_paths(paths, scene, ues, origin, seed, chash, keep_raw)


def gen_statistical(cfg: StatGenConfig, scene: Scene, count: int, keep_raw: bool = False) -> Dataset:
    h = stack(statistical_channels(cfg, scene.bs, scene.ofdm, count))
    return dataset_from_channels(h, "statistical", cfg.seed, config_hash({"statgen": cfg, "count": count}), None, keep_raw)


def scene_digest(scene: Scene) -> str:
    from ..scene import scene_to_dict

    return config_hash(scene_to_dict(scene))


def split_dataset(ds: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded disjoint split by sample; both parts keep the input order."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    cut = int(round(ratio * len(ds)))
    return ds.subset(np.sort(perm[:cut])), ds.subset(np.sort(perm[cut:]))


# -- persistence -----------------------------------------------------------------


def encode_dataset(ds: Dataset) -> bytes:
    rows, cols = ds.shape
    flags = FLAG_RAW if ds.raw is not None else 0
    head = MAGIC + struct.pack("<HBIHHB", VERSION, ORIGINS.index(ds.origin), len(ds), rows, cols, flags)
    if flags & FLAG_RAW:
        head += struct.pack("<H", ds.raw.shape[2])
    n = len(ds)
    per = np.empty(n, dtype=[("scale", "<f8"), ("g", "<c8", (rows * cols,))] + ([("raw", "<c8", (ds.raw[0].size,))] if flags & FLAG_RAW else []))
    per["scale"] = ds.scales
    per["g"] = ds.g.reshape(n, -1)
    if flags & FLAG_RAW:
        per["raw"] = ds.raw.reshape(n, -1)
    body = head + per.tobytes()
    checksum = int(np.frombuffer(body, dtype=np.uint8).sum(dtype=np.uint64))
    return body + struct.pack("<Q", checksum)


def decode_dataset(blob: bytes, seed: int = 0, chash: str = "", ue_indices=None, num_subcarriers: int = 256) -> Dataset:
    if blob[:4] != MAGIC:
        raise ValueError("not a CSID dataset")
    body, (checksum,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if int(np.frombuffer(body, dtype=np.uint8).sum(dtype=np.uint64)) != checksum:
        raise ValueError("dataset checksum mismatch")
    version, origin, n, rows, cols, flags = struct.unpack_from("<HBIHHB", body, 4)
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = 4 + struct.calcsize("<HBIHHB")
    k = None
    if flags & FLAG_RAW:
        (k,) = struct.unpack_from("<H", body, off)
        off += 2
    dtype = [("scale", "<f8"), ("g", "<c8", (rows * cols,))] + ([("raw", "<c8", (cols * k,))] if k else [])
    per = np.frombuffer(body, dtype=dtype, count=n, offset=off)
    raw = per["raw"].reshape(n, cols, k).copy() if k else None
    return Dataset(
        per["g"].reshape(n, rows, cols).copy(),
        per["scale"].copy(),
        ORIGINS[origin],
        seed,
        chash,
        np.asarray(ue_indices if ue_indices is not None else [], dtype=np.int64),
        k or num_subcarriers,
        raw,
    )


def meta_path(path) -> FsPath:
    p = FsPath(path)
    return p.with_name(p.name + ".meta.json")


def save_dataset(ds: Dataset, path) -> None:
    FsPath(path).write_bytes(encode_dataset(ds))
    meta = {"seed": int(ds.seed), "config_hash": ds.config_hash, "num_subcarriers": int(ds.num_subcarriers), "ue_indices": ds.ue_indices.tolist()}
    meta_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    blob = FsPath(path).read_bytes()
    mp = meta_path(path)
    meta = json.loads(mp.read_text()) if mp.exists() else {}
    return decode_dataset(blob, meta.get("seed", 0), meta.get("config_hash", ""), meta.get("ue_indices"), meta.get("num_subcarriers", 256))
