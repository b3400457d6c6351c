"""Spatial autocorrelation of model residuals.

Builds a k-nearest-neighbor spatial weights matrix over sample locations
(great-circle distances, ties broken by point index so results are
deterministic even with duplicate coordinates) and computes Moran's I
with a permutation test for significance.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geo import haversine_m

_ALTERNATIVES = ("greater", "lesser", "two-sided")


@dataclass(frozen=True)
class SpatialWeights:
    """Row-standardized KNN weights: each point has exactly k neighbors
    carrying weight 1/k, never including itself."""

    neighbors: np.ndarray  # (n, k) int indices
    k: int

    @property
    def n(self) -> int:
        return self.neighbors.shape[0]

    @property
    def row_weight(self) -> float:
        return 1.0 / self.k

    def dense(self) -> np.ndarray:
        """Materialize the full (n, n) matrix; for small n / diagnostics."""
        w = np.zeros((self.n, self.n))
        rows = np.repeat(np.arange(self.n), self.k)
        w[rows, self.neighbors.ravel()] = self.row_weight
        return w

    def lag(self, values: np.ndarray) -> np.ndarray:
        """Spatial lag: mean of each point's neighbor values."""
        return values[self.neighbors].mean(axis=1)


def knn_weights(lats, lons, k: int = 8, block_size: int = 2048) -> SpatialWeights:
    """KNN weights by great-circle distance.

    Distance ties (including exact duplicate coordinates) resolve toward
    the lower point index, keeping the matrix reproducible.
    """
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    n = lats.size
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if n <= k:
        raise DomainError(f"need more than k={k} points, got {n}")

    neighbors = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        d = haversine_m(lats[start:stop, None], lons[start:stop, None],
                        lats[None, :], lons[None, :])
        rows = np.arange(start, stop)
        d[rows - start, rows] = np.inf  # no self-neighbor
        # lexsort: distance first, point index breaks ties
        idx = np.broadcast_to(np.arange(n), d.shape)
        order = np.lexsort((idx, d), axis=1)
        neighbors[start:stop] = order[:, :k]
    return SpatialWeights(neighbors=neighbors, k=k)


def morans_i(values, weights: SpatialWeights) -> float:
    """Global Moran's I with row-standardized weights.

    I = (n / S0) * sum_ij w_ij z_i z_j / sum_i z_i^2 with z the centered
    values; S0 equals n here because every row sums to one.
    """
    z = np.asarray(values, dtype=float)
    if z.size != weights.n:
        raise DomainError(f"{z.size} values for {weights.n} weight rows")
    z = z - z.mean()
    denom = float(np.sum(z * z))
    if denom == 0.0:
        raise DomainError("Moran's I undefined for zero-variance values")
    # n / S0 == 1 for row-standardized weights
    return float(np.sum(z * weights.lag(z))) / denom


@dataclass(frozen=True)
class MoranResult:
    i_value: float
    p_value: float
    n_permutations: int
    seed: int
    alternative: str
    k: int


def morans_i_pvalue(values, weights: SpatialWeights, n_permutations: int = 999,
                    seed: int = 0, alternative: str = "greater",
                    threads: int = 1) -> MoranResult:
    """Permutation test for Moran's I.

    p = (1 + #{permuted I at least as extreme}) / (1 + n_permutations),
    so with 999 permutations the smallest attainable p is 0.001. Each
    permutation draws from its own spawned RNG stream, which makes the
    result independent of the worker count.
    """
    if n_permutations < 99:
        raise DomainError(f"need at least 99 permutations, got {n_permutations}")
    if alternative not in _ALTERNATIVES:
        raise DomainError(f"alternative must be one of {_ALTERNATIVES}")
    z = np.asarray(values, dtype=float)
    observed = morans_i(z, weights)

    seeds = np.random.SeedSequence(seed).spawn(n_permutations)

    def one(seq) -> float:
        rng = np.random.default_rng(seq)
        return morans_i(rng.permutation(z), weights)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            permuted = np.fromiter(pool.map(one, seeds), dtype=float,
                                   count=n_permutations)
    else:
        permuted = np.fromiter((one(s) for s in seeds), dtype=float,
                               count=n_permutations)

    p_greater = (1.0 + np.sum(permuted >= observed)) / (1.0 + n_permutations)
    p_lesser = (1.0 + np.sum(permuted <= observed)) / (1.0 + n_permutations)
    if alternative == "greater":
        p = p_greater
    elif alternative == "lesser":
        p = p_lesser
    else:
        p = min(1.0, 2.0 * min(p_greater, p_lesser))
    return MoranResult(i_value=observed, p_value=float(p),
                       n_permutations=n_permutations, seed=seed,
                       alternative=alternative, k=weights.k)
