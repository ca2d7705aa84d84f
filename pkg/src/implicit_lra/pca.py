"""Additive-error PCA of the implicit matrix A = f(sum_t A^t) by row sampling.

One run draws r rows with probability close to their share of the z-mass,
collects them at server 1, rescales each sampled row by 1/sqrt(r * q_hat)
and returns the top-k right singular subspace of the resulting r x d
matrix B. ``boosted_pca`` repeats the run and keeps the candidate with the
largest ||B P||_F^2 measured against its own B.

Row probabilities come either from the distributed z-sampler over the
flattened n*d vector ("full" mode) or from exact central row masses
("oracle" mode, which is a test device and never billed for sampling).
"""
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .entry_functions import ConfigurationError, validate_property_p
from .linalg import Projection, frobenius_sq, top_k_right_singular
from .zsampler import SamplerExhausted, SamplerParams, ZSampler

MODES = ("full", "oracle")
PROFILES = ("lean", "desk", "nominal")


class PcaFailure(RuntimeError):
    """No run of the boosted protocol produced a projection."""


@dataclass(frozen=True)
class PcaParams:
    k: int
    epsilon: float
    delta: float = 0.5
    c: float = 1.0
    r_override: Optional[int] = None
    C: float = 1.0
    sampler: str = "full"
    profile: str = "lean"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.sampler not in MODES:
            raise ConfigurationError(f"sampler must be one of {MODES}")
        if self.profile not in PROFILES:
            raise ConfigurationError(f"profile must be one of {PROFILES}")
        if self.r < self.k:
            raise ValueError(f"r = {self.r} is below k = {self.k}")

    @property
    def r(self):
        if self.r_override is not None:
            return int(self.r_override)
        return math.ceil(1440 * self.k ** 2 / (self.epsilon ** 2 * self.c))

    @property
    def gamma(self):
        return min(0.5, math.sqrt(1.0 / self.r))

    @property
    def sampler_epsilon(self):
        """Accuracy handed to the entry sampler."""
        return self.gamma / 2.0

    @property
    def runs(self):
        return max(1, math.ceil(8 * math.log(1.0 / self.delta)))


def sampler_params(epsilon, C, length, profile="lean"):
    if profile == "lean":
        return SamplerParams.lean(epsilon, C, length)
    if profile == "desk":
        return SamplerParams.desk(epsilon, C, length)
    return SamplerParams(epsilon, C, length)


def _row_masses(cluster, fn):
    """Exact z-mass of every row of the aggregate (central; measurement only)."""
    agg = cluster.aggregate()
    return np.sum(np.asarray(fn.z(agg), dtype=np.float64), axis=1)


class RowSampler:
    """Draws row indices of the implicit matrix.

    ``draw(r)`` returns (rows, denominators): in full mode each denominator
    is the estimator's Z-hat for that draw, in oracle mode it is the exact
    total z-mass. Dividing a row's exact z-mass by its denominator gives the
    reported probability q_hat.
    """

    def __init__(self, cluster, fn, epsilon, seed=0, mode="full", C=1.0, profile="lean",
                 validate=True, tag="rows"):
        if mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if validate:
            bad = validate_property_p(fn)
            if bad is not None:
                raise ConfigurationError(f"entry function fails the shape condition: {bad}")
        self.cluster = cluster
        self.fn = fn
        self.epsilon = float(epsilon)
        self.seed = int(seed)
        self.mode = mode
        self.C = C
        self.profile = profile
        self.tag = tag
        self._sampler = None
        self._drawn = 0

    @property
    def d(self):
        return self.cluster.shape[1]

    def _entry_sampler(self):
        if self._sampler is None:
            n, d = self.cluster.shape
            params = sampler_params(self.epsilon, self.C, n * d, self.profile)
            self._sampler = ZSampler(self.cluster, self.fn, params, seed=self.seed, tag=self.tag,
                                     validate=False).prepare()
        return self._sampler

    def draw(self, r):
        r = int(r)
        if self.mode == "oracle":
            mass = _row_masses(self.cluster, self.fn)
            total = math.fsum(mass.tolist())
            if total <= 0:
                raise SamplerExhausted("aggregate matrix has zero z-mass")
            rng = np.random.Generator(np.random.Philox(
                np.random.SeedSequence([self.seed, 2, self._drawn])))
            rows = rng.choice(mass.size, size=r, p=mass / total)
            self._drawn += 1
            return rows.astype(np.int64), np.full(r, total)
        zs = self._entry_sampler()
        rows = np.empty(r, dtype=np.int64)
        den = np.empty(r)
        for q in range(r):
            smp = zs.draw(self._drawn)
            self._drawn += 1
            rows[q] = smp.index // self.d
            den[q] = smp.z_hat
        return rows, den


def collect_rows(cluster, fn, rows, tag="collect"):
    """Server 1 announces the sampled indices and every server ships its
    slices of those rows; returns (f applied to the summed rows, exact row
    z-masses). Billed: r index words plus s * r * d value words.
    """
    rows = np.asarray(rows, dtype=np.int64)
    d = cluster.shape[1]
    cluster.next_round()
    cluster.announce(rows.size, tag)
    cluster.gather(rows.size * d, tag)
    acc = cluster.local_data[0][rows].copy()
    for x in cluster.local_data[1:]:
        acc += x[rows]
    A_rows = np.asarray(fn.f(acc), dtype=np.float64)
    mass = np.sum(np.asarray(fn.z(acc), dtype=np.float64), axis=1)
    return A_rows, mass


def sample_row(cluster, fn, gamma, seed=0, mode="full", C=1.0, profile="lean"):
    """One sampled row index and its reported probability q_hat."""
    sampler = RowSampler(cluster, fn, gamma / 2.0, seed=seed, mode=mode, C=C, profile=profile)
    rows, den = sampler.draw(1)
    _, mass = collect_rows(cluster, fn, rows)
    return int(rows[0]), float(min(1.0, mass[0] / den[0]))


@dataclass
class SampleSet:
    rows: np.ndarray     # sampled row indices (with repetition)
    q_hat: np.ndarray    # reported probabilities
    values: np.ndarray   # A_i for each sampled row
    B: np.ndarray        # rescaled rows


def build_sample_set(rows, q_hat, values):
    r = rows.size
    B = values / np.sqrt(r * q_hat)[:, None]
    return SampleSet(rows, q_hat, values, B)


@dataclass
class PcaRun:
    projection: Projection
    samples: SampleSet

    @property
    def score(self):
        """||B P||_F^2 of this run's projection against its own B."""
        return frobenius_sq(self.samples.B @ self.projection.basis)


def pca_run(cluster, fn, params, seed=0, run=0, validate=True):
    """One execution of the row-sampling protocol."""
    sampler = RowSampler(cluster, fn, params.sampler_epsilon,
                         seed=int(np.random.SeedSequence([int(seed), 3, int(run)])
                                  .generate_state(1, dtype=np.uint64)[0] >> 1),
                         mode=params.sampler, C=params.C, profile=params.profile,
                         validate=validate, tag=f"run{run}-rows")
    rows, den = sampler.draw(params.r)
    values, mass = collect_rows(cluster, fn, rows, tag=f"run{run}-collect")
    # a probability is at most one; an underestimated Z-hat is capped there
    q_hat = np.minimum(1.0, mass / den)
    if np.any(~(q_hat > 0)):
        raise SamplerExhausted("sampled a row with zero z-mass")
    samples = build_sample_set(rows, q_hat, values)
    return PcaRun(top_k_right_singular(samples.B, params.k), samples)


def distributed_pca(cluster, fn, params, seed=0, validate=True):
    return pca_run(cluster, fn, params, seed=seed, validate=validate).projection


@dataclass
class BoostResult:
    projection: Projection
    best: int
    runs: List[Optional[PcaRun]] = field(default_factory=list)

    @property
    def scores(self):
        return [None if r is None else r.score for r in self.runs]


def boost(cluster, fn, params, seed=0, validate=True):
    """``params.runs`` independent runs; keep the largest own-B score."""
    if validate:
        bad = validate_property_p(fn)
        if bad is not None:
            raise ConfigurationError(f"entry function fails the shape condition: {bad}")
    runs = []
    for j in range(params.runs):
        try:
            runs.append(pca_run(cluster, fn, params, seed=seed, run=j, validate=False))
        except SamplerExhausted:
            runs.append(None)
    ok = [j for j, r in enumerate(runs) if r is not None]
    if not ok:
        raise PcaFailure(f"all {params.runs} runs failed")
    best = max(ok, key=lambda j: runs[j].score)
    return BoostResult(runs[best].projection, best, runs)


def boosted_pca(cluster, fn, params, seed=0, validate=True):
    return boost(cluster, fn, params, seed=seed, validate=validate).projection
