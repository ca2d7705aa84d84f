"""Gaussian random Fourier features and PCA of the expanded matrix by
uniform row sampling.

Feature j of an input row x is sqrt(2) cos(<x, Z[:, j]> + b_j) with Z
standard normal and b uniform on [0, 2 pi), so <phi(x), phi(y)> / d
approximates exp(-|x - y|^2 / 2). Every feature row has squared norm close
to d, which makes uniform row sampling a valid importance sampler.
"""
import math
from dataclasses import dataclass

import numpy as np

from .linalg import DimensionError, top_k_right_singular
from .pca import PcaRun, build_sample_set


def default_features(n):
    return max(512, math.ceil(8 * math.log(max(n, 2))))


@dataclass(frozen=True)
class RffSpec:
    m: int
    d: int
    seed: int

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be positive")

    def _draw(self):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(self.seed), 6])))
        Z = rng.standard_normal((self.m, self.d))
        b = rng.uniform(0.0, 2.0 * np.pi, self.d)
        return Z, b

    @property
    def Z(self):
        return self._draw()[0]

    @property
    def b(self):
        return self._draw()[1]


def rff_expand(rows, spec, Zb=None):
    """Expand one row (m,) or a block of rows (n, m) into d features each."""
    X = np.asarray(rows, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != spec.m:
        raise DimensionError(f"rows have {X.shape[1]} entries, spec expects {spec.m}")
    Z, b = spec._draw() if Zb is None else Zb
    out = math.sqrt(2.0) * np.cos(X @ Z + b)
    return out[0] if single else out


def uniform_row_run(cluster, spec, k, r, seed=0, tag="rff"):
    """PCA of the feature expansion of M = sum_t M^t by uniform row sampling.

    Server 1 draws r row indices uniformly (q_hat = 1/n), the servers ship
    their m-dimensional shares of those rows, and server 1 sums, expands and
    rescales them. Billed: r index words plus s * r * m value words.
    """
    n, m = cluster.shape
    if m != spec.m:
        raise DimensionError(f"servers hold {m} columns, spec expects {spec.m}")
    r = int(r)
    if r < k:
        raise ValueError(f"r = {r} is below k = {k}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
    rows = rng.integers(0, n, size=r)
    cluster.next_round()
    cluster.announce(r, tag + "-collect")
    cluster.gather(r * m, tag + "-collect")
    acc = cluster.local_data[0][rows].copy()
    for x in cluster.local_data[1:]:
        acc += x[rows]
    values = rff_expand(acc, spec)
    samples = build_sample_set(rows, np.full(r, 1.0 / n), values)
    return PcaRun(top_k_right_singular(samples.B, k), samples)


def uniform_row_pca(cluster, spec, k, r, seed=0, tag="rff"):
    return uniform_row_run(cluster, spec, k, r, seed=seed, tag=tag).projection
