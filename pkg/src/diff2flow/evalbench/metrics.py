"""Sample-based distances between 2-D point clouds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DistanceReport:
    sliced_w2: float
    mmd_rbf: float
    n_used: int
    projections: int
    bandwidth: float


def _directions(dim: int, n_proj: int, seed: int) -> np.ndarray:
    u = np.random.default_rng(seed).standard_normal((n_proj, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def sliced_w2(a, b, n_proj: int = 128, seed: int = 0) -> float:
    """Mean squared 1-D W2 over random unit projections.

    Unequal sample sizes are matched through empirical quantiles.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("sliced_w2 needs non-empty batches")
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    u = _directions(a.shape[1], n_proj, seed)
    pa = np.sort(a @ u.T, axis=0)
    pb = np.sort(b @ u.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        m = max(pa.shape[0], pb.shape[0])
        q = (np.arange(m) + 0.5) / m
        pa = np.quantile(pa, q, axis=0, method="inverted_cdf")
        pb = np.quantile(pb, q, axis=0, method="inverted_cdf")
    return float(np.mean((pa - pb) ** 2))


def median_bandwidth(x, max_points: int = 2000) -> float:
    """Median pairwise distance (the usual RBF bandwidth heuristic)."""
    x = np.asarray(x, dtype=np.float64)[:max_points]
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(x), k=1)
    return float(np.sqrt(np.median(d2[iu])))


def mmd_rbf(a, b, bandwidth: float) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel; exactly 0 for a == b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    def k(x, y):
        d2 = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
        return np.exp(-d2 / (2.0 * bandwidth**2))

    val = k(a, a).mean() + k(b, b).mean() - 2.0 * k(a, b).mean()
    return float(max(val, 0.0))


def distance_report(samples, data, n_proj: int = 128, seed: int = 0, bandwidth: float | None = None,
                    mmd_points: int = 2000) -> DistanceReport:
    bw = median_bandwidth(data) if bandwidth is None else bandwidth
    n = min(len(samples), len(data), mmd_points)
    return DistanceReport(
        sliced_w2=sliced_w2(samples, data, n_proj, seed),
        mmd_rbf=mmd_rbf(np.asarray(samples)[:n], np.asarray(data)[:n], bw),
        n_used=n,
        projections=n_proj,
        bandwidth=bw,
    )
