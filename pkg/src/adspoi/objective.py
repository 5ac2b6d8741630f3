"""Candidate scoring, negative sampling, and the ranking losses.

Slates put the positive at index 0 followed by ``n_neg`` sampled negatives.
Per-step loss is ``ce + beta * bpr`` where ``ce`` is label-smoothed sampled
softmax cross-entropy and ``bpr`` is a hinge over the ``k_hard`` highest
scoring negatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .params import ParameterSet


@dataclass
class LossTerms:
    ce: float
    bpr: float
    total: float


def score(h_proj: np.ndarray, poi, params: ParameterSet) -> np.ndarray | float:
    """phi(l) = h_proj . e_l + b_l; ``poi`` may be an index or an index array."""
    n = params["poi_bias"].shape[0]
    idx = np.asarray(poi)
    if np.any((idx < 0) | (idx >= n)):
        raise KeyError(f"POI index out of catalog range [0, {n})")
    out = params["poi_emb"][idx] @ h_proj + params["poi_bias"][idx]
    return float(out) if out.ndim == 0 else out


def sample_negatives(rng: np.random.Generator, n_pois: int, exclude: int, n_neg: int) -> np.ndarray:
    """``n_neg`` distinct indices uniformly from ``range(n_pois)`` minus ``exclude``."""
    if n_pois <= n_neg:
        raise ConfigError(f"objective.n_neg: catalog of {n_pois} POIs cannot supply {n_neg} negatives")
    draw = rng.choice(n_pois - 1, size=n_neg, replace=False)
    return draw + (draw >= exclude)


def sample_negative_matrix(rng: np.random.Generator, n_pois: int, exclude: np.ndarray, n_neg: int,
                           chunk: int = 4096) -> np.ndarray:
    """Row-wise :func:`sample_negatives` for a vector of positives.

    Rows are the ``n_neg`` smallest of iid uniform keys over the ``n_pois - 1``
    admissible ids, which is a uniform subset without replacement.
    """
    if n_pois <= n_neg:
        raise ConfigError(f"objective.n_neg: catalog of {n_pois} POIs cannot supply {n_neg} negatives")
    exclude = np.asarray(exclude, dtype=np.int64)
    rows = len(exclude)
    out = np.empty((rows, n_neg), dtype=np.int64)
    if n_pois - 1 > 16 * n_neg:
        for i in range(rows):
            out[i] = sample_negatives(rng, n_pois, int(exclude[i]), n_neg)
        return out
    for lo in range(0, rows, chunk):
        hi = min(rows, lo + chunk)
        keys = rng.random((hi - lo, n_pois - 1))
        if n_neg < n_pois - 1:
            draw = np.argpartition(keys, n_neg - 1, axis=1)[:, :n_neg]
        else:
            draw = np.argsort(keys, axis=1)
        out[lo:hi] = draw + (draw >= exclude[lo:hi, None])
    return out


_LABEL_BITS = 53


def smoothed_labels(epsilon: float, size: int) -> np.ndarray:
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"objective.epsilon: must satisfy 0 <= epsilon < 1, got {epsilon}")
    if size < 2:
        raise ConfigError(f"slate size must be >= 2, got {size}")
    # Every entry is put on the grid of multiples of 2**-53 (an absolute rounding of at most
    # 2**-54 on eps / C). On that grid all partial sums below 1 are representable, so the
    # vector sums to exactly 1.0 under any summation order.
    m = round(math.ldexp(epsilon / size, _LABEL_BITS))
    y = np.full(size, math.ldexp(m, -_LABEL_BITS))
    y[0] = math.ldexp((1 << _LABEL_BITS) - (size - 1) * m, -_LABEL_BITS)
    return y


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def ce_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray | float:
    out = -np.sum(y * log_softmax(logits), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def hard_negative_positions(logits: np.ndarray, k_hard: int) -> np.ndarray:
    """Slate positions (>= 1) of the ``k_hard`` largest negative logits; ties go to the smaller position."""
    neg = np.asarray(logits)[..., 1:]
    order = np.argsort(-neg, axis=-1, kind="stable")
    return order[..., :k_hard] + 1


def bpr_hard_loss(logits: np.ndarray, k_hard: int, margin: float) -> np.ndarray | float:
    logits = np.asarray(logits, dtype=np.float64)
    pos = hard_negative_positions(logits, k_hard)
    hard = np.take_along_axis(logits, pos, axis=-1)
    out = np.mean(np.maximum(0.0, margin - (logits[..., :1] - hard)), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def total_loss(ce, bpr, beta: float):
    return ce + beta * bpr


def loss_terms(logits: np.ndarray, epsilon: float, k_hard: int, margin: float, beta: float) -> LossTerms:
    y = smoothed_labels(epsilon, len(logits))
    ce = ce_loss(logits, y)
    bpr = bpr_hard_loss(logits, k_hard, margin)
    return LossTerms(ce, bpr, total_loss(ce, bpr, beta))


def slate_loss_and_grad(logits: np.ndarray, epsilon: float, k_hard: int, margin: float, beta: float):
    """Per-row losses and dL/dlogits for a (M, C) logit matrix.

    Returns (ce, bpr, dlogits) where ``dlogits`` is the gradient of
    ``ce + beta * bpr`` summed over rows.
    """
    M, C = logits.shape
    y = smoothed_labels(epsilon, C)
    logp = log_softmax(logits)
    ce = -(logp @ y)
    dlogits = np.exp(logp) - y
    pos = hard_negative_positions(logits, k_hard)
    gap = margin - (logits[:, :1] - np.take_along_axis(logits, pos, axis=1))
    bpr = np.maximum(0.0, gap).mean(axis=1)
    if beta:
        active = (gap > 0).astype(np.float64) * (beta / k_hard)
        dlogits[:, 0] -= active.sum(axis=1)
        np.add.at(dlogits, (np.arange(M)[:, None], pos), active)
    return ce, bpr, dlogits
