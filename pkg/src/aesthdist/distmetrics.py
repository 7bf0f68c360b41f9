"""Score-distribution construction, the EMD loss and the evaluation metrics.

Distributions are 1-d float arrays over K ordered bins whose scores are the
integers 1..K.
"""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .tensor_core import DimensionError, softmax_backward

SMOOTHING = 1e-12


class EmptyHistogramError(ValueError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


def normalize_votes(counts) -> np.ndarray:
    counts = np.asarray(counts)
    if counts.ndim != 1 or (counts < 0).any():
        raise ValueError(f"vote counts must be a non-negative 1-d array, got {counts!r}")
    total = counts.sum()
    if total < 1:
        raise EmptyHistogramError("histogram has no votes")
    return counts.astype(np.float64) / total


def _pair(p, q):
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"distributions over different bins: {p.shape} vs {q.shape}")
    return p, q


def emd(p, q, r: int = 2) -> float:
    """Earth mover's distance between ordered distributions via their CDFs."""
    p, q = _pair(p, q)
    if r not in (1, 2):
        raise ValueError(f"r must be 1 or 2, got {r}")
    d = np.abs(np.cumsum(p, axis=-1) - np.cumsum(q, axis=-1))
    return float(np.mean(d ** r) ** (1.0 / r))


def emd_rows(p, q, r: int = 2) -> np.ndarray:
    """Row-wise EMD for (N, K) batches."""
    p, q = _pair(p, q)
    d = np.abs(np.cumsum(p, axis=-1) - np.cumsum(q, axis=-1))
    return np.mean(d ** r, axis=-1) ** (1.0 / r)


def emd_loss_grad(p_hat, p) -> tuple[np.ndarray, np.ndarray]:
    """Per-row EMD (r=2) loss and its gradient with respect to the logits.

    ``p_hat`` must be the softmax of those logits. Rows with ``p_hat == p``
    sit at the (non-differentiable) minimum and get a zero gradient.
    """
    p_hat, p = _pair(p_hat, p)
    p_hat, p = np.atleast_2d(p_hat), np.atleast_2d(p)
    k = p.shape[-1]
    diff = np.cumsum(p_hat, axis=-1) - np.cumsum(p, axis=-1)
    loss = np.sqrt(np.mean(diff ** 2, axis=-1))
    safe = np.where(loss > 0, loss, 1.0)
    d_cdf = np.where(loss[:, None] > 0, diff / (k * safe[:, None]), 0.0)
    # dC_j / dp_i = 1 for i <= j, so grad_p is a reversed cumulative sum
    grad_p = np.cumsum(d_cdf[:, ::-1], axis=-1)[:, ::-1]
    return loss, softmax_backward(p_hat, grad_p)


def _kl(p, q):
    # terms with p_i = 0 vanish; q_i = 0 is smoothed so the metric stays finite
    nz = p > 0
    qn = np.where(q[nz] > 0, q[nz], SMOOTHING)
    return float(np.sum(p[nz] * np.log(p[nz] / qn)))


def kl(p, q) -> float:
    p, q = _pair(p, q)
    return _kl(p, q)


def js(p, q) -> float:
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def chi2(p, q) -> float:
    p, q = _pair(p, q)
    den = p + q
    den = np.where(den > 0, den, SMOOTHING)
    return float(np.sum((p - q) ** 2 / den))


def euclidean(p, q) -> float:
    p, q = _pair(p, q)
    return float(np.linalg.norm(p - q))


def cosine_distance(p, q) -> float:
    p, q = _pair(p, q)
    return float(1.0 - p @ q / (np.linalg.norm(p) * np.linalg.norm(q)))


def divergences(p, q) -> dict[str, float]:
    return {
        "euclidean": euclidean(p, q),
        "kl": kl(p, q),
        "js": js(p, q),
        "chi2": chi2(p, q),
        "cosine_distance": cosine_distance(p, q),
    }


def scores(k: int) -> np.ndarray:
    return np.arange(1, k + 1, dtype=np.float64)


def dist_mean(p) -> float | np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return p @ scores(p.shape[-1])


def dist_std(p) -> float | np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    s = scores(p.shape[-1])
    mu = p @ s
    return np.sqrt(np.maximum(p @ (s * s) - mu * mu, 0.0))


def _check_seq(xs, ys):
    xs, ys = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DimensionError(f"sequences differ in shape: {xs.shape} vs {ys.shape}")
    if xs.size < 2:
        raise ValueError("need at least two observations")
    return xs, ys


def _is_constant(v: np.ndarray) -> bool:
    # spread at the level of rounding noise counts as constant
    return float(np.ptp(v)) <= 1e-12 * max(1.0, float(np.max(np.abs(v))))


def plcc(xs, ys) -> float:
    xs, ys = _check_seq(xs, ys)
    if _is_constant(xs) or _is_constant(ys):
        raise UndefinedCorrelationError("correlation of a constant sequence is undefined")
    dx, dy = xs - xs.mean(), ys - ys.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    return float(dx @ dy / (sx * sy))


def srcc(xs, ys) -> float:
    """Spearman correlation with average ranks on ties."""
    xs, ys = _check_seq(xs, ys)
    return plcc(rankdata(xs), rankdata(ys))


def mse(xs, ys) -> float:
    xs, ys = _check_seq(xs, ys)
    return float(np.mean((xs - ys) ** 2))
