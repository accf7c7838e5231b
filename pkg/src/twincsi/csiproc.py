"""Frequency-antenna channel <-> truncated, normalised delay-angular CSI.

Both transforms are unitary DFTs. Along subcarriers the kernel is
exp(+j 2pi k m / K) / sqrt(K), so that a path on delay tap d lands in row d
(the forward synthesis uses exp(-j 2pi k d / K)); along antennas the matrix is
multiplied by the Hermitian of the N_t-point DFT matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ChannelMatrix

TRUNCATED_ROWS = 32


@dataclass
class AngularDelayCsi:
    g: np.ndarray  # (rows, N_t) complex, unit Frobenius norm
    scale: float
    ue_index: int = -1
    num_subcarriers: int = 256

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if abs(np.linalg.norm(self.g) - 1.0) > 1e-6:
            raise ValueError("g must have unit Frobenius norm")


def full_delay_angular(h: np.ndarray) -> np.ndarray:
    """Untruncated G (K x N_t) for an (N_t, K) channel; batches on leading axes are allowed."""
    x = np.swapaxes(np.asarray(h), -1, -2)  # (..., K, N_t)
    x = np.fft.ifft(x, axis=-2, norm="ortho")
    return np.fft.ifft(x, axis=-1, norm="ortho")


def to_delay_angular(H: ChannelMatrix | np.ndarray, rows: int = TRUNCATED_ROWS) -> AngularDelayCsi:
    h = H.h if isinstance(H, ChannelMatrix) else np.asarray(H)
    ue = H.ue_index if isinstance(H, ChannelMatrix) else -1
    trunc = full_delay_angular(h)[:rows]
    scale = float(np.linalg.norm(trunc))
    if scale == 0.0:
        raise ValueError("cannot normalise an all-zero channel")
    return AngularDelayCsi(trunc / scale, scale, ue, h.shape[1])


def from_delay_angular(csi: AngularDelayCsi) -> ChannelMatrix:
    g = csi.g * csi.scale
    full = np.zeros((csi.num_subcarriers, g.shape[1]), dtype=complex)
    full[: g.shape[0]] = g
    x = np.fft.fft(full, axis=1, norm="ortho")
    x = np.fft.fft(x, axis=0, norm="ortho")
    return ChannelMatrix(x.T, csi.ue_index)


def batch_to_delay_angular(h: np.ndarray, rows: int = TRUNCATED_ROWS):
    """Vectorised transform for an (N, N_t, K) stack; returns (g (N, rows, N_t), scales (N,))."""
    trunc = full_delay_angular(h)[:, :rows]
    scales = np.linalg.norm(trunc, axis=(1, 2))
    if np.any(scales == 0):
        raise ValueError(f"all-zero channel at index {int(np.argmin(scales))}")
    return trunc / scales[:, None, None], scales


def batch_from_delay_angular(g: np.ndarray, scales: np.ndarray, num_subcarriers: int) -> np.ndarray:
    """Inverse of ``batch_to_delay_angular``; returns (N, N_t, K)."""
    n, rows, n_t = g.shape
    full = np.zeros((n, num_subcarriers, n_t), dtype=complex)
    full[:, :rows] = g * np.asarray(scales)[:, None, None]
    x = np.fft.fft(np.fft.fft(full, axis=2, norm="ortho"), axis=1, norm="ortho")
    return np.swapaxes(x, 1, 2)


def to_real(g: np.ndarray) -> np.ndarray:
    """Model input layout: real plane then imaginary plane, each flattened row-major."""
    g = np.asarray(g)
    lead = g.shape[:-2]
    return np.concatenate([g.real.reshape(lead + (-1,)), g.imag.reshape(lead + (-1,))], axis=-1)


def from_real(x: np.ndarray, rows: int = TRUNCATED_ROWS) -> np.ndarray:
    x = np.asarray(x)
    half = x.shape[-1] // 2
    cols = half // rows
    lead = x.shape[:-1]
    return (x[..., :half] + 1j * x[..., half:]).reshape(lead + (rows, cols))
