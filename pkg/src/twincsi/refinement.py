"""Online selection of poorly reconstructed CSI and model refinement (naive or rehearsal)."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .autoencoder import AutoencoderModel, TrainConfig, TrainResult, evaluate_nmse, train


class Selection(NamedTuple):
    indices: np.ndarray
    samples: np.ndarray
    nmse: np.ndarray


def select_candidates(model: AutoencoderModel, samples: np.ndarray, eta: float) -> Selection:
    """Samples whose reconstruction NMSE exceeds ``eta``, in input order."""
    samples = np.asarray(samples)
    err = evaluate_nmse(model, samples)
    idx = np.flatnonzero(err > eta)
    return Selection(idx, samples[idx], err[idx])


def select_top_k(model: AutoencoderModel, samples: np.ndarray, k: int) -> Selection:
    """The ``k`` worst-reconstructed samples, NMSE descending, ties to the lower index."""
    samples = np.asarray(samples)
    if not 0 <= k <= len(samples):
        raise ValueError("k must lie in [0, sample count]")
    err = evaluate_nmse(model, samples)
    order = np.lexsort((np.arange(len(err)), -err))[:k]
    return Selection(order, samples[order], err[order])


def default_threshold(model: AutoencoderModel, validation: np.ndarray, percentile: float = 90.0) -> float:
    return float(np.percentile(evaluate_nmse(model, validation), percentile))


def max_correlation(g: np.ndarray, twin: np.ndarray) -> float:
    """Largest normalised conjugate inner product between ``g`` and any twin sample."""
    u = np.asarray(g).reshape(-1)
    tw = np.asarray(twin).reshape(len(twin), -1)
    if len(tw) == 0:
        raise ValueError("twin dataset is empty")
    num = np.abs(tw.conj() @ u)
    den = np.linalg.norm(tw, axis=1) * np.linalg.norm(u)
    return float(np.max(num / den))


def max_correlations(samples: np.ndarray, twin: np.ndarray, chunk: int = 512) -> np.ndarray:
    """``max_correlation`` for every row of ``samples`` (complex matrices or flattened)."""
    s = np.asarray(samples).reshape(len(samples), -1)
    tw = np.asarray(twin).reshape(len(twin), -1)
    s = s / np.linalg.norm(s, axis=1, keepdims=True)
    tw = tw / np.linalg.norm(tw, axis=1, keepdims=True)
    out = np.empty(len(s))
    for i in range(0, len(s), chunk):
        out[i : i + chunk] = np.abs(s[i : i + chunk].conj() @ tw.T).max(axis=1)
    return out


@dataclass(frozen=True)
class RefineConfig:
    train: TrainConfig = TrainConfig(learning_rate=1e-4, epochs=10)
    refine_fraction: float | None = None  # None: uniform over the union; else share of each batch from the refine set
    max_iterations: int | None = None

    @classmethod
    def from_pretrain(cls, pre: TrainConfig, **kw) -> "RefineConfig":
        """Refinement defaults: a tenth of the pre-training learning rate, fresh optimiser state."""
        return cls(train=replace(pre, learning_rate=pre.learning_rate / 10), **kw)


def _cfg(cfg: RefineConfig) -> TrainConfig:
    if cfg.max_iterations is None:
        return cfg.train
    return replace(cfg.train, max_iterations=cfg.max_iterations, epochs=max(cfg.train.epochs, 10**9))


def refine_naive(model: AutoencoderModel, refine_set: np.ndarray, cfg: RefineConfig = RefineConfig(), **kw) -> TrainResult:
    """Continue training on the refinement samples only."""
    if len(refine_set) == 0:
        raise ValueError("refinement set is empty")
    return train(model, refine_set, _cfg(cfg), **kw)


def mixed_batches(n_twin: int, n_refine: int, batch_size: int, refine_fraction: float):
    """Batch plan drawing a fixed share of every batch from the refinement block (indices >= n_twin)."""
    k_ref = max(1, int(round(refine_fraction * batch_size)))
    k_twin = batch_size - k_ref

    def plan(epoch, rng):
        twin_order = rng.permutation(n_twin)
        batches = []
        for s in range(0, n_twin, max(k_twin, 1)):
            ref = n_twin + rng.choice(n_refine, size=k_ref, replace=n_refine < k_ref)
            batches.append(np.concatenate([twin_order[s : s + k_twin], ref]))
        return batches

    return plan


def refine_rehearsal(
    model: AutoencoderModel, twin_set: np.ndarray, refine_set: np.ndarray, cfg: RefineConfig = RefineConfig(), **kw
) -> TrainResult:
    """Continue training on the union of twin and refinement samples.

    By default batches are drawn uniformly from the shuffled union; with
    ``cfg.refine_fraction`` set, that share of every batch comes from the
    refinement samples instead.
    """
    if len(twin_set) == 0 or len(refine_set) == 0:
        raise ValueError("both twin and refinement sets must be non-empty")
    union = np.concatenate([np.asarray(twin_set), np.asarray(refine_set)]).astype(np.asarray(twin_set).dtype)
    plan = None
    if cfg.refine_fraction is not None:
        plan = mixed_batches(len(twin_set), len(refine_set), cfg.train.batch_size, cfg.refine_fraction)
    return train(model, union, _cfg(cfg), plan=plan, **kw)
