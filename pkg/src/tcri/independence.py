"""Dependence penalties between two learned representations.

Includes RBF Gram matrices with a median-heuristic bandwidth, the biased
HSIC estimator, its class-conditional average and the partial
cross-covariance penalty used for continuous targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


@dataclass
class GramMatrix:
    values: Tensor
    bandwidth: float

    @property
    def n(self) -> int:
        return self.values.shape[0]


def centering_matrix(n: int) -> np.ndarray:
    """H = I - (1/n) 11^T, idempotent with zero row sums."""
    return np.eye(n) - np.full((n, n), 1.0 / n)


def median_heuristic_bandwidth(X) -> float:
    """Median of the nonzero pairwise Euclidean distances between rows of X."""
    x = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("median_heuristic_bandwidth needs at least 2 samples")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))[np.triu_indices(n, k=1)]
    dist = dist[dist > 0]
    if dist.size == 0:
        raise ValueError("degenerate sample: all points identical")
    return float(np.median(dist))


def rbf_gram(X, bandwidth: float) -> GramMatrix:
    """exp(-|x_i - x_j|^2 / (2 bandwidth^2)), differentiable in X."""
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    x = T.as_tensor(X)
    if x.ndim == 1:
        x = T.reshape(x, (-1, 1))
    n, d = x.shape
    # explicit differences keep the diagonal at exactly zero distance
    diff = T.sub(T.reshape(x, (n, 1, d)), T.reshape(x, (1, n, d)))
    sqdist = T.tsum(T.square(diff), axis=2)
    return GramMatrix(T.exp(T.scale(sqdist, -0.5 / bandwidth**2)), float(bandwidth))


def _values(K) -> Tensor:
    return K.values if isinstance(K, GramMatrix) else T.as_tensor(K)


def hsic_biased(K, L) -> Tensor:
    """Biased HSIC estimate (1/n^2) tr(K H L H)."""
    k, l = _values(K), _values(L)
    if k.shape != l.shape or k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ShapeError(f"hsic_biased: incompatible shapes {k.shape} and {l.shape}")
    n = k.shape[0]
    if n < 2:
        raise ValueError("hsic_biased needs n >= 2")
    H = Tensor(centering_matrix(n))
    # tr(KHLH) = sum(HKH * HLH) for symmetric K, L; this form is exactly symmetric in (K, L)
    kc = T.matmul(T.matmul(H, k), H)
    lc = T.matmul(T.matmul(H, l), H)
    return T.scale(T.tsum(T.mul(kc, lc)), 1.0 / n**2)


def _gram_for(z: Tensor, cache: dict | None = None, key=None) -> GramMatrix:
    if cache is not None and key in cache:
        return rbf_gram(z, cache[key])
    try:
        bw = median_heuristic_bandwidth(z.data)
    except ValueError:
        # identical rows: every RBF entry is 1 regardless of bandwidth
        bw = 1.0
    if cache is not None:
        cache[key] = bw
    return rbf_gram(z, bw)


def class_conditional_hsic(Zc, Ze, y, classes: int | None = None, cache: dict | None = None, key: tuple = ()) -> Tensor:
    """Mean over classes of the biased HSIC between Zc and Ze restricted to that class.

    Bandwidths come from the median heuristic on each class's rows and are
    constants for differentiation. Classes with fewer than two rows are skipped.
    A ``cache`` dict pins bandwidths across calls (entries keyed by ``key``),
    which makes the function the exact surrogate whose gradient is returned.
    """
    zc, ze = T.as_tensor(Zc), T.as_tensor(Ze)
    if zc.ndim == 1:
        zc = T.reshape(zc, (-1, 1))
    if ze.ndim == 1:
        ze = T.reshape(ze, (-1, 1))
    labels = np.asarray(y).reshape(-1)
    if not (zc.shape[0] == ze.shape[0] == labels.shape[0]):
        raise ShapeError(f"class_conditional_hsic: row counts differ {zc.shape}, {ze.shape}, {labels.shape}")
    values = np.arange(classes) if classes is not None else np.unique(labels)
    terms = []
    for k in values:
        idx = np.flatnonzero(labels == k)
        if idx.size < 2:
            continue
        a, b = T.take_rows(zc, idx), T.take_rows(ze, idx)
        terms.append(hsic_biased(_gram_for(a, cache, key + (int(k), 0)), _gram_for(b, cache, key + (int(k), 1))))
    if not terms:
        raise ValueError("empty conditional HSIC: no class has at least 2 samples")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def partial_covariance_penalty(Zc, Ze, y) -> Tensor:
    """Squared Frobenius norm of the partial cross-covariance of Zc and Ze given y.

    Sigma_ce.y = Sigma_ce - Sigma_cy Sigma_yy^-1 Sigma_ye with centered,
    1/n-normalised empirical covariances; y is treated as data.
    """
    zc, ze = T.as_tensor(Zc), T.as_tensor(Ze)
    if zc.ndim == 1:
        zc = T.reshape(zc, (-1, 1))
    if ze.ndim == 1:
        ze = T.reshape(ze, (-1, 1))
    yv = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if yv.ndim == 1:
        yv = yv[:, None]
    n = yv.shape[0]
    if zc.shape[0] != n or ze.shape[0] != n:
        raise ShapeError(f"partial_covariance_penalty: row counts differ {zc.shape}, {ze.shape}, {yv.shape}")
    if n <= max(zc.shape[1], ze.shape[1]) + 1:
        raise ValueError(f"partial_covariance_penalty needs n > max(m, o) + 1, got n={n}")
    yc = yv - yv.mean(axis=0)
    syy = yc.T @ yc / n
    if np.min(np.diag(syy)) <= 1e-12:
        raise ValueError("degenerate target: Var(y) <= 1e-12")
    zc_c = T.sub(zc, T.mean(zc, axis=0, keepdims=True))
    ze_c = T.sub(ze, T.mean(ze, axis=0, keepdims=True))
    s_ce = T.scale(T.matmul(T.transpose(zc_c), ze_c), 1.0 / n)
    s_cy = T.scale(T.matmul(T.transpose(zc_c), Tensor(yc)), 1.0 / n)
    s_ye = T.scale(T.matmul(Tensor(yc.T), ze_c), 1.0 / n)
    partial = T.sub(s_ce, T.matmul(T.matmul(s_cy, Tensor(np.linalg.inv(syy))), s_ye))
    return T.tsum(T.square(partial))
