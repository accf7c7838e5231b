"""Wideband geometric MIMO channel synthesis and a clustered statistical baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scene import ArrayConfig, OfdmConfig

log = logging.getLogger(__name__)

# sinc support (in taps) beyond the last kept tap before a path counts as clipped
CLIP_MARGIN_TAPS = 8


@dataclass
class ChannelMatrix:
    h: np.ndarray  # (N_t, K) complex
    ue_index: int = -1

    def __post_init__(self):
        if not np.all(np.isfinite(self.h)):
            raise ValueError("channel contains non-finite entries")


@dataclass(frozen=True)
class StatGenConfig:
    num_clusters: int = 6
    rays_per_cluster: int = 10
    delay_scale: float = 300e-9
    angle_spread: float = np.deg2rad(5.0)
    seed: int = 0

    def __post_init__(self):
        if self.num_clusters < 1 or self.rays_per_cluster < 1:
            raise ValueError("cluster and ray counts must be >= 1")
        if not (self.delay_scale > 0 and self.angle_spread >= 0):
            raise ValueError("delay_scale must be > 0 and angle_spread >= 0")


def array_response(array: ArrayConfig, azimuth, elevation, wavelength: float) -> np.ndarray:
    """Steering vector(s) a_n = exp(j 2pi/lambda <p_n - p_0, u>); shape (N_t,) or (N_t, L)."""
    az = np.asarray(azimuth, dtype=float)
    el = np.asarray(elevation, dtype=float)
    u = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=0)
    offsets = np.arange(array.num_antennas)[:, None] * array.element_spacing * np.asarray(array.axis)[None, :]
    proj = np.tensordot(offsets, u, axes=(1, 0))
    return np.exp(2j * np.pi / wavelength * proj)


def count_clipped(paths, ofdm: OfdmConfig) -> int:
    """Paths whose delay lies beyond the tap window plus the sinc margin."""
    limit = (ofdm.max_delay_taps - 1 + CLIP_MARGIN_TAPS) * ofdm.sample_period
    return sum(1 for p in paths if p.delay > limit)


def delay_domain_channel(paths, array: ArrayConfig, ofdm: OfdmConfig) -> np.ndarray:
    """h_d = sum_l alpha_l sinc(d - tau_l/T_S) a(phi_l, theta_l) for taps d = 0..D-1; shape (N_t, D).

    Paths far beyond the tap window only leak in through the sinc tail; they
    are reported through ``count_clipped`` and logged.
    """
    paths = list(paths)
    n_t, taps = array.num_antennas, ofdm.max_delay_taps
    if not paths:
        return np.zeros((n_t, taps), dtype=complex)
    gains = np.array([p.gain for p in paths], dtype=complex)
    delays = np.array([p.delay for p in paths], dtype=float)
    a = array_response(array, [p.azimuth for p in paths], [p.elevation for p in paths], ofdm.wavelength)
    pulse = np.sinc(np.arange(taps)[None, :] - delays[:, None] / ofdm.sample_period)  # (L, D)
    clipped = count_clipped(paths, ofdm)
    if clipped:
        log.warning("%d path(s) beyond the %d-tap window", clipped, taps)
    return (a * gains[None, :]) @ pulse


def dft_kernel(num_subcarriers: int, taps: int) -> np.ndarray:
    """(D, K) kernel with entries exp(-j 2pi k d / K)."""
    d = np.arange(taps)[:, None]
    k = np.arange(num_subcarriers)[None, :]
    return np.exp(-2j * np.pi * k * d / num_subcarriers)


def freq_channel(h_delay: np.ndarray, num_subcarriers: int, ue_index: int = -1) -> ChannelMatrix:
    h_delay = np.asarray(h_delay)
    if h_delay.shape[1] > num_subcarriers:
        raise ValueError("more delay taps than subcarriers")
    return ChannelMatrix(h_delay @ dft_kernel(num_subcarriers, h_delay.shape[1]), ue_index)


def channel_from_paths(paths, array: ArrayConfig, ofdm: OfdmConfig, ue_index: int = -1) -> ChannelMatrix:
    return freq_channel(delay_domain_channel(paths, array, ofdm), ofdm.num_subcarriers, ue_index)


def statistical_channels(cfg: StatGenConfig, array: ArrayConfig, ofdm: OfdmConfig, count: int) -> list[ChannelMatrix]:
    """Seeded clustered channels normalised so that E||H||_F^2 = N_t * K.

    Per sample: cluster delays are exponential and snapped to taps below D,
    cluster azimuths are uniform within the array FoV, ray angles are Laplacian
    around the cluster means, and cluster powers decay exponentially with delay.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    n_c, n_r = cfg.num_clusters, cfg.rays_per_cluster
    ts = ofdm.sample_period
    taps = ofdm.max_delay_taps
    kernel = dft_kernel(ofdm.num_subcarriers, taps)
    bore = np.arctan2(array.boresight[1], array.boresight[0])
    half = np.deg2rad(min(array.fov_deg, 360.0)) / 2
    out = []
    for i in range(count):
        tau = rng.exponential(cfg.delay_scale, n_c)
        tap = np.minimum(np.rint(tau / ts).astype(int), taps - 1)
        power = np.exp(-tap * ts / cfg.delay_scale)
        power /= power.sum()
        mean_az = bore + rng.uniform(-half, half, n_c)
        mean_el = rng.uniform(np.deg2rad(-10.0), 0.0, n_c)
        az = mean_az[:, None] + rng.laplace(0.0, cfg.angle_spread, (n_c, n_r))
        el = mean_el[:, None] + rng.laplace(0.0, cfg.angle_spread / 4, (n_c, n_r))
        g = (rng.standard_normal((n_c, n_r)) + 1j * rng.standard_normal((n_c, n_r))) * np.sqrt(power[:, None] / (2 * n_r))
        a = array_response(array, az.ravel(), el.ravel(), ofdm.wavelength)
        h_d = np.zeros((array.num_antennas, taps), dtype=complex)
        np.add.at(h_d.T, np.repeat(tap, n_r), (a * g.ravel()[None, :]).T)
        out.append(ChannelMatrix(h_d @ kernel, i))
    return out


def stack(channels: Sequence[ChannelMatrix]) -> np.ndarray:
    return np.stack([c.h for c in channels])
