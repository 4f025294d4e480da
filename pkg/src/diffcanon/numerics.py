"""Deterministic linear algebra and statistics primitives.

Small dense matrices only; everything is float64 and bit-stable given
identical inputs and Rng seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidInputError, NumericalError
from .rng import Rng


@dataclass
class SvdResult:
    """Thin SVD: a = u @ diag(sigma) @ v.T with orthonormal columns."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def svd(a: np.ndarray) -> SvdResult:
    """Thin SVD with singular values sorted descending.

    Backed by LAPACK via numpy; the wrapper enforces the contract
    (finite input, descending non-negative sigma, orthonormal v).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or min(a.shape) < 1:
        raise InvalidInputError("svd expects a 2D matrix with at least one row and column")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("svd input must be finite")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"svd failed to converge: {exc}") from exc
    return SvdResult(u=u, sigma=s, v=vt.T)


def kmeans(points: np.ndarray, k: int, rng: Rng, max_iter: int = 100):
    """Lloyd's algorithm from k-means++ seeding.

    Returns (assignments, inertia). Deterministic given the rng seed;
    an emptied cluster keeps its previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise InvalidInputError(f"kmeans needs 1 <= k <= n, got k={k}, n={n}")

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass on chosen centroids; pick uniformly
            idx = int(rng.integers(0, n))
        else:
            r = rng.uniform(0.0, total)
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))

    assignments = np.zeros(n, dtype=np.int64)
    inertia = np.inf
    for _ in range(max_iter):
        dists = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assignments = np.argmin(dists, axis=1)
        new_inertia = float(dists[np.arange(n), assignments].sum())
        for j in range(k):
            members = points[assignments == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        if new_inertia >= inertia - 1e-12:
            inertia = min(inertia, new_inertia)
            break
        inertia = new_inertia
    return assignments, inertia


def nmi(assignments, labels) -> float:
    """Normalized mutual information.

    MI divided by the arithmetic mean of the two marginal entropies,
    natural log; 0/0 is defined as 0.
    """
    a = np.asarray(assignments)
    b = np.asarray(labels)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 1:
        raise InvalidInputError("nmi expects two equal-length label vectors")
    n = len(a)
    a_vals, a_inv = np.unique(a, return_inverse=True)
    b_vals, b_inv = np.unique(b, return_inverse=True)
    contingency = np.zeros((len(a_vals), len(b_vals)))
    np.add.at(contingency, (a_inv, b_inv), 1.0)
    p = contingency / n
    pa = p.sum(axis=1)
    pb = p.sum(axis=0)
    mask = p > 0
    mi = float(np.sum(p[mask] * np.log(p[mask] / np.outer(pa, pb)[mask])))
    ha = float(-np.sum(pa[pa > 0] * np.log(pa[pa > 0])))
    hb = float(-np.sum(pb[pb > 0] * np.log(pb[pb > 0])))
    denom = 0.5 * (ha + hb)
    if denom == 0.0:
        return 0.0
    return min(max(mi / denom, 0.0), 1.0)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices.

    Rows are samples; column counts may differ. Invariant to orthogonal
    right-multiplication and positive isotropic scaling of either input.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidInputError("linear_cka expects matrices with the same row count")
    if x.shape[0] < 2:
        raise InvalidInputError("linear_cka needs at least 2 rows")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    xn = np.linalg.norm(xc.T @ xc)
    yn = np.linalg.norm(yc.T @ yc)
    if xn == 0.0 or yn == 0.0:
        raise DegenerateInputError("constant features have zero centered norm")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (xn * yn))


def elbow_index(s) -> int:
    """Index of the point farthest from the chord between the endpoints.

    Works on the sequence (i, s_i), i = 0..n-1; ties break to the
    smallest index; a degenerate zero-length chord returns 0.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise InvalidInputError("elbow_index needs a 1D sequence of length >= 2")
    n = len(s)
    dx = float(n - 1)
    dy = float(s[-1] - s[0])
    norm = np.hypot(dx, dy)
    if norm == 0.0:
        return 0
    i = np.arange(n, dtype=np.float64)
    # distance from (i, s_i) to the line through (0, s_0) and (n-1, s_{n-1})
    dist = np.abs(dy * i - dx * (s - s[0])) / norm
    return int(np.argmax(dist))
