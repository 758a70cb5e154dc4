"""Evaluation measures: grid-histogram empirical KL divergence and exact
empirical Wasserstein-2 distance via linear assignment."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

KL_EPS = 1e-8
W2_SIZE_GUARD = 2_000


@dataclass
class GridSpec:
    """Per-dimension bin counts with the bounding box that maps to [0,1]^d."""

    bins: tuple
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.bins = tuple(int(b) for b in self.bins)
        self.lo = np.asarray(self.lo, dtype=float).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if any(b < 1 for b in self.bins):
            raise ValueError("bin counts must be >= 1")
        if len(self.bins) != self.lo.size or self.lo.size != self.hi.size:
            raise ValueError("bins and box dimensions disagree")
        if np.any(self.hi <= self.lo):
            raise ValueError("degenerate bounding box")

    @classmethod
    def from_reference(cls, samples, bins, pad=0.05):
        """Axis-aligned hull of the reference samples, padded 5% per side."""
        samples = np.asarray(samples, dtype=float)
        lo = samples.min(axis=0)
        hi = samples.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        return cls(tuple(bins), lo - pad * span, hi + pad * span)


def _histogram(samples, grid):
    """Normalized histogram plus the out-of-box count (clamped to boundary
    bins)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValueError("empty sample set")
    if samples.shape[1] != len(grid.bins):
        raise ValueError("sample dimension does not match the grid")
    unit = (samples - grid.lo) / (grid.hi - grid.lo)
    out_of_box = int(np.sum(np.any((unit < 0.0) | (unit > 1.0), axis=1)))
    counts = np.zeros(grid.bins)
    idx = []
    for j, b in enumerate(grid.bins):
        k = np.floor(unit[:, j] * b).astype(int)
        idx.append(np.clip(k, 0, b - 1))
    np.add.at(counts, tuple(idx), 1.0)
    return counts / samples.shape[0], out_of_box


def empirical_kl(samples_p, samples_q, grid):
    """sum h log(h / h~) over grid bins (natural log).

    Zero-bin rules: bins with h = 0 contribute 0; bins with h > 0 but
    h~ = 0 substitute h~ = 1e-8, keeping the value finite.
    """
    value, _ = empirical_kl_report(samples_p, samples_q, grid)
    return value


def empirical_kl_report(samples_p, samples_q, grid):
    """(value, info) where info carries sample sizes and out-of-box counts."""
    h, out_p = _histogram(samples_p, grid)
    h_tilde, out_q = _histogram(samples_q, grid)
    mask = h > 0
    denom = np.where(h_tilde > 0, h_tilde, KL_EPS)
    value = float(np.sum(h[mask] * np.log(h[mask] / denom[mask])))
    info = {
        "n_p": int(np.atleast_2d(samples_p).shape[0]),
        "n_q": int(np.atleast_2d(samples_q).shape[0]),
        "out_of_box": out_p + out_q,
        "grid": list(grid.bins),
    }
    return value, info


def empirical_w2(samples_p, samples_q):
    """W2 between two equal-size empirical measures via exact assignment:
    sqrt(min over pairings of (1/N) sum ||x_i - y_pi(i)||^2)."""
    p = np.atleast_2d(np.asarray(samples_p, dtype=float))
    q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    if p.shape[0] == 0:
        raise ValueError("empty sample sets")
    if p.shape != q.shape:
        raise ValueError(
            f"sample sets must match in shape, got {p.shape} vs {q.shape}")
    if p.shape[0] > W2_SIZE_GUARD:
        raise ValueError(
            f"N={p.shape[0]} exceeds the exact-assignment guard "
            f"({W2_SIZE_GUARD})")
    cost = cdist(p, q, metric="sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))
