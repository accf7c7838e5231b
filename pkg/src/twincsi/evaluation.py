"""Downstream metrics: NMSE, zero-forcing precoding, sum rate, estimation noise and coverage."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .raytracer import TraceConfig, coverage_mask, trace
from .scene import Scene

THERMAL_NOISE_DBM_HZ = -174.0
MAX_CONDITION = 1e8


class RankDeficient(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    eirp_dbm: float = 43.0
    noise_figure_db: float = 7.0
    num_users: int = 2
    seed: int = 0
    subcarrier_spacing: float = 30e3
    num_subcarriers: int = 256
    sum_power: float | None = None  # watts per subcarrier; defaults to EIRP split evenly over subcarriers

    def __post_init__(self):
        if self.num_users < 1:
            raise ValueError("num_users must be >= 1")
        if self.sum_power is not None and not self.sum_power > 0:
            raise ValueError("sum_power must be positive")

    @property
    def eirp_w(self) -> float:
        return dbm_to_w(self.eirp_dbm)

    @property
    def power_per_subcarrier(self) -> float:
        return self.sum_power if self.sum_power is not None else self.eirp_w / self.num_subcarriers

    @property
    def noise_dbm(self) -> float:
        return THERMAL_NOISE_DBM_HZ + 10 * math.log10(self.subcarrier_spacing) + self.noise_figure_db

    @property
    def noise_w(self) -> float:
        return dbm_to_w(self.noise_dbm)

    @property
    def estimation_noise_var(self) -> float:
        """Per-entry estimation error variance: noise over the per-subcarrier pilot power."""
        return self.noise_w / (self.eirp_w / self.num_subcarriers)


def dbm_to_w(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def nmse(h: np.ndarray, h_hat: np.ndarray) -> float:
    h = np.asarray(h)
    h_hat = np.asarray(h_hat)
    if h.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {h_hat.shape}")
    ref = np.sum(np.abs(h) ** 2)
    if ref == 0:
        raise ValueError("reference channel is all zero")
    return float(np.sum(np.abs(h - h_hat) ** 2) / ref)


def nmse_db(h, h_hat) -> float:
    return 10 * math.log10(nmse(h, h_hat))


def zf_precoder(hk: np.ndarray, power: float, subcarrier: int | None = None) -> np.ndarray:
    """F = H (H^H H)^-1 scaled to total power ``power``; columns of ``hk`` are user channels."""
    hk = np.asarray(hk, dtype=complex)
    if hk.ndim == 1:
        hk = hk[:, None]
    cond = np.linalg.cond(hk)
    if not cond < MAX_CONDITION:
        where = f" on subcarrier {subcarrier}" if subcarrier is not None else ""
        raise RankDeficient(f"user channels are rank deficient{where} (condition {cond:.3g})")
    gram = hk.conj().T @ hk
    f = hk @ np.linalg.inv(gram)
    return f * math.sqrt(power / np.sum(np.abs(f) ** 2))


def zf_precoders(h: np.ndarray, power: float) -> np.ndarray:
    """Per-subcarrier ZF for channels of shape (K, N_t, U)."""
    return np.stack([zf_precoder(h[k], power, k) for k in range(len(h))])


def sum_rate(h: np.ndarray, f: np.ndarray, noise_var: float) -> float:
    """Average spectral efficiency over subcarriers (bits/s/Hz) for (K, N_t, U) channels and precoders."""
    g = np.einsum("kau,kav->kuv", np.asarray(h).conj(), np.asarray(f))  # g[k, u, v] = h_u^H f_v
    p = np.abs(g) ** 2
    sig = np.einsum("kuu->ku", p)
    interf = p.sum(axis=2) - sig
    return float(np.sum(np.log2(1.0 + sig / (interf + noise_var))) / h.shape[0])


def noisy_channel_estimate(h: np.ndarray, cfg: EvalConfig, rng: np.random.Generator | int | None = None, noise_var: float | None = None) -> np.ndarray:
    """H + E with i.i.d. circular Gaussian entries of variance ``cfg.estimation_noise_var``."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    var = cfg.estimation_noise_var if noise_var is None else noise_var
    h = np.asarray(h)
    if var == 0:
        return h.copy()
    e = rng.standard_normal(h.shape + (2,)) @ np.array([1.0, 1j])
    return h + math.sqrt(var / 2) * e


def coverage(scene: Scene, cfg: TraceConfig = TraceConfig(), per_ue=None) -> float:
    """Fraction of the UE grid reached by at least one path."""
    per_ue = trace(scene, None, cfg) if per_ue is None else per_ue
    return float(coverage_mask(per_ue).mean())


RESULTS_HEADER = ["experiment_id", "metric", "value", "seed", "config_hash"]


def write_results_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], repr(float(r[2])), r[3], r[4]])
