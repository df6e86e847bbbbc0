"""Posterior probability maps from stored Gibbs draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .glm import Chain


def effect_threshold(Y, fraction: float = 0.002, mask=None) -> float:
    """``fraction`` times the global mean signal (all masked voxels, all time
    points). ``Y`` is T x N over masked voxels, or a (T, H, W) stack with
    ``mask``."""
    if not fraction > 0:
        raise ValueError("effect fraction must be positive")
    Y = np.asarray(Y, dtype=np.float64)
    if mask is not None:
        Y = Y[..., np.asarray(mask, dtype=bool)]
    if Y.size == 0:
        raise ValueError("no data to compute the global mean from")
    return fraction * float(Y.mean())


def as_contrast(c, K: int) -> np.ndarray:
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    if c.shape != (K,):
        raise ValueError(f"contrast has length {c.size}, model has {K} regressors")
    if not np.any(c):
        raise ValueError("contrast is all zeros")
    return c


@dataclass
class PpmMap:
    prob: np.ndarray          # (N,) probabilities over masked voxels
    gamma: float
    contrast: np.ndarray
    threshold: float | None = None


def contrast_draws(chain: Chain | np.ndarray, c) -> np.ndarray:
    W = chain["W"] if isinstance(chain, Chain) else np.asarray(chain)
    if W.ndim != 3 or W.shape[0] < 1:
        raise ValueError("chain must hold at least one W draw of shape (K, N)")
    return np.einsum("k,skn->sn", as_contrast(c, W.shape[1]), W)


def compute_ppm(chain: Chain | np.ndarray, c, gamma: float) -> PpmMap:
    """Fraction of draws whose contrast strictly exceeds ``gamma`` per voxel."""
    cw = contrast_draws(chain, c)
    prob = np.count_nonzero(cw > gamma, axis=0) / cw.shape[0]
    return PpmMap(prob, float(gamma), np.atleast_1d(np.asarray(c, dtype=np.float64)))


def threshold_ppm(ppm: PpmMap | np.ndarray, level: float = 0.8) -> np.ndarray:
    """Active where the probability is at least ``level``."""
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"probability threshold must be in [0, 1], got {level}")
    prob = ppm.prob if isinstance(ppm, PpmMap) else np.asarray(ppm)
    return prob >= level


def detection_scores(active, truth) -> dict:
    """Sensitivity, false-positive rate and Dice overlap of boolean maps."""
    active = np.asarray(active, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = np.count_nonzero(active & truth)
    fp = np.count_nonzero(active & ~truth)
    fn = np.count_nonzero(~active & truth)
    tn = np.count_nonzero(~active & ~truth)
    return {
        "sensitivity": tp / max(tp + fn, 1),
        "fpr": fp / max(fp + tn, 1),
        "dice": 2 * tp / max(2 * tp + fp + fn, 1),
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
    }
