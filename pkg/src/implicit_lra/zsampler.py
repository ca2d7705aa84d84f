"""Distributed z-sampling of an aggregate vector a = sum_t a^t.

The estimator sorts nonzero coordinates into level classes
S_i = {j : z(a_j) in [(1+eps)^i, (1+eps)^(i+1))}, estimates class sizes from
heavy-hitter sets of the whole vector and of nested subsampled copies, and
returns a candidate list with exact values. The sampler picks a class in
proportion to its estimated mass and returns the candidate of that class
with the smallest subsampling hash.

Nominal constants are the default. They are astronomically large for small
vectors, so ``SamplerParams.desk`` and ``SamplerParams.lean`` shrink the
sketch size B, the instance count W and the repetition counts while keeping
every threshold (level windows, growth test) at its exact value.
"""
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .entry_functions import ConfigurationError, validate_property_p
from .hashing import HashFn, hash_words
from .heavy_hitters import zhh_layout


class SamplerExhausted(RuntimeError):
    """Every retry of the sampler landed on an injected coordinate."""


def _logl(l):
    # natural log; vectors of length 1 use log 2 so that the constants stay positive
    return math.log(max(int(l), 2))


@dataclass(frozen=True)
class SamplerParams:
    epsilon: float
    C: float
    l: int
    b_scale: float = 1.0
    w_scale: float = 1.0
    zhh_reps: Optional[int] = None
    e_reps: Optional[int] = None
    g_degree: Optional[int] = None

    def __post_init__(self):
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 1/2)")
        if not self.C >= 1:
            raise ValueError("C must be >= 1")
        if self.l < 1:
            raise ValueError("l must be >= 1")
        if not (0 < self.b_scale <= 1 and 0 < self.w_scale <= 1):
            raise ValueError("scales must lie in (0, 1]")

    # derived quantities -------------------------------------------------
    @property
    def log_l(self):
        return _logl(self.l)

    @property
    def T(self):
        return math.ceil(self.C * self.log_l / self.epsilon + 1)

    @property
    def B_nominal(self):
        return 40 * self.epsilon ** -4 * self.T ** 3 * self.log_l

    @property
    def W_nominal(self):
        return (5120 * self.C ** 2 * self.T ** 2 * self.epsilon ** -3 * self.log_l) ** 2

    @property
    def B(self):
        return max(1.0, self.b_scale * self.B_nominal)

    @property
    def W(self):
        return max(1, math.ceil(self.w_scale * self.W_nominal - 1e-9))

    @property
    def reps(self):
        """Z-HeavyHitters repetitions at failure probability l^(-20C)."""
        if self.zhh_reps is not None:
            return int(self.zhh_reps)
        return math.ceil(20 * 20 * self.C * self.log_l)

    @property
    def E(self):
        return int(self.e_reps) if self.e_reps is not None else math.ceil(self.C * self.log_l)

    @property
    def retries(self):
        return max(1, math.ceil(self.C * self.log_l))

    @property
    def window(self):
        base = self.C ** 2 * self.epsilon ** -2 * self.log_l
        return 4 * base, 16 * base

    @property
    def growth_divisor(self):
        return 5 * self.epsilon ** -4 * self.T ** 3 * self.log_l

    def gdom(self, length):
        return math.ceil(self.C * length / self.epsilon)

    def levels(self, length):
        return max(1, math.ceil(math.log2(self.C * length / self.epsilon)))

    def g_deg(self, length):
        if self.g_degree is not None:
            return int(self.g_degree)
        return max(2, math.ceil(20 * self.C * math.log(max(length, 2) / self.epsilon)))

    # presets --------------------------------------------------------------
    @classmethod
    def desk(cls, epsilon, C, l, B=None, W=16, zhh_reps=2, e_reps=2, g_degree=8):
        """Reduced sketch sizes for small vectors; thresholds stay exact."""
        base = cls(epsilon, C, l)
        target_b = 4.0 * max(l, 1) if B is None else float(B)
        b_scale = min(1.0, max(target_b, 1.0) / base.B_nominal)
        w_scale = min(1.0, W / base.W_nominal)
        return cls(epsilon, C, l, b_scale, w_scale, zhh_reps,
                   min(e_reps, base.E), min(g_degree, base.g_deg(l)))

    @classmethod
    def lean(cls, epsilon, C, l):
        """Single repetition everywhere; used inside the PCA row sampler."""
        return cls.desk(epsilon, C, l, zhh_reps=1, e_reps=1, g_degree=6)

    def with_scales(self, **kw):
        return replace(self, **kw)


def estimator_message_sizes(params, length):
    """Per-recipient word counts of one estimator call on a length-``length`` vector.

    Seeds: one Z-HeavyHitters seed block for the top level and for each of
    the L * E level instances, plus g and the L * E level hashes. Sketch:
    the counters of every outer bucket of every instance, per server.
    """
    p = params
    reps, nb, depth, width = zhh_layout(length, p.B, 0.5, p.reps)
    L, E = p.levels(length), p.E
    hh_seed = reps * (1 + 2 * depth) * hash_words(2)
    return {
        "zhh-seeds": hh_seed * (1 + L * E),
        "seeds": hash_words(p.g_deg(length)) + L * E * hash_words(2),
        "sketch": reps * nb * depth * width * (1 + L * E * p.W),
    }


def estimator_words(params, length, s, n_list):
    """Total words one estimator call bills on ``s`` servers with ``n_list`` candidates."""
    parts = estimator_message_sizes(params, length)
    return ((s - 1) * (parts["zhh-seeds"] + parts["seeds"]) + s * parts["sketch"]
            + s * 2 * n_list)


def level_value(i, epsilon):
    return np.power(1.0 + epsilon, np.asarray(i, dtype=np.float64))


def level_index(z_val, epsilon):
    """Class index i with (1+eps)^i <= z < (1+eps)^(i+1); works on arrays."""
    z = np.asarray(z_val, dtype=np.float64)
    if np.any(~(z > 0)):
        raise ValueError("level_index needs z > 0")
    i = np.floor(np.log(z) / math.log1p(epsilon)).astype(np.int64)
    # the logarithm can be off by one near a boundary; settle by direct comparison
    for _ in range(2):
        i = np.where(level_value(i, epsilon) > z, i - 1, i)
        i = np.where(level_value(i + 1, epsilon) <= z, i + 1, i)
    return int(i) if np.ndim(z_val) == 0 else i


class LevelEstimate:
    """Output of one estimator run over the active coordinates.

    ``s_hat`` maps class index to its estimated size and ``z_hat`` is the
    mass estimate. The candidate list (D together with every D_j) is kept
    as per-coordinate flags over the active positions: bit 0 marks D and
    bit j marks D_j.
    """

    def __init__(self, s_hat, z_hat, epsilon, g, pos, vals, flags, cls, valid, gv, cls_offset=0):
        self.s_hat = s_hat
        self.z_hat = z_hat
        self.epsilon = epsilon
        self.g = g
        self._pos, self._vals, self._flags = pos, vals, flags
        self._cls, self._valid, self._gv = cls, valid, gv
        self._cls_offset = cls_offset

    def _listed(self):
        return np.flatnonzero(self._flags)

    @property
    def list_idx(self):
        """0-based positions of the listed coordinates, ascending."""
        return self._pos[self._listed()]

    @property
    def list_vals(self):
        return self._vals[self._listed()]

    @property
    def flags(self):
        return self._flags[self._listed()]

    @property
    def D(self):
        return self._pos[(self._flags & 1) != 0]

    def level_set(self, j):
        return self._pos[((self._flags >> j) & 1) != 0]

    def recompute_z_hat(self):
        ids = sorted(self.s_hat)
        return math.fsum(self.s_hat[i] * float(level_value(i, self.epsilon)) for i in ids)


@dataclass
class InjectedVector:
    base_length: int
    runs: list  # (class index, count, value)

    @property
    def injected(self):
        return sum(c for _, c, _ in self.runs)

    @property
    def length(self):
        return self.base_length + self.injected

    def values(self):
        if not self.runs:
            return np.zeros(0)
        return np.concatenate([np.full(c, v) for _, c, v in self.runs])

    def injected_mass(self, fn):
        return math.fsum(c * float(fn.z(v)) for _, c, v in self.runs)


def considering(i, z_hat, params):
    top = float(level_value(i + 1, params.epsilon))
    return z_hat / float(params.l) ** params.C <= top <= (1 + params.epsilon) * z_hat


def growing_classes(z_hat, params):
    if z_hat <= 0:
        return []
    eps = params.epsilon
    cap = z_hat / params.growth_divisor
    lo = math.floor(math.log(z_hat / float(params.l) ** params.C) / math.log1p(eps)) - 2
    hi = math.ceil(math.log(cap) / math.log1p(eps)) + 2
    return [i for i in range(lo, hi + 1)
            if considering(i, z_hat, params) and float(level_value(i, eps)) <= cap]


def inject_coordinates(estimate, fn, params):
    """Virtual coordinates for every considering-and-growing class (owned by server 1)."""
    runs = []
    eps, T = params.epsilon, params.T
    for i in growing_classes(estimate.z_hat, params):
        target = float(level_value(i, eps))
        x = fn.z_inverse(target)
        if x is None:
            continue
        count = math.ceil(eps * estimate.z_hat / (5 * T * target))
        runs.append((i, count, x))
    inj = InjectedVector(params.l, runs)
    if inj.length > params.l * max(params.B_nominal, 1.0):
        raise ConfigurationError("injection would exceed the polynomial length bound l * B")
    return inj


def _seed_state(seed, *path):
    ss = np.random.SeedSequence([int(seed) & ((1 << 63) - 1), *[int(p) for p in path]])
    key = ss.generate_state(1, dtype=np.uint64)[0]
    return np.uint64(key), np.random.Generator(np.random.Philox(ss))


class _Engine:
    """Holds one distributed vector (s x l local values, active part only)."""

    def __init__(self, local, fn, params):
        local = np.atleast_2d(np.asarray(local, dtype=np.float64))
        self.s, self.length = local.shape
        self.fn = fn
        self.params = params
        act = np.flatnonzero(np.any(local != 0.0, axis=0))
        self.act = act
        self.vals = np.ascontiguousarray(local[:, act])
        agg = self.vals[0].copy()
        for t in range(1, self.s):
            agg += self.vals[t]
        self.agg = agg
        zv = np.asarray(fn.z(agg), dtype=np.float64) if act.size else np.zeros(0)
        self.zval = zv
        self.valid = zv > 0
        self.cls = np.zeros(act.size, dtype=np.int64)
        if self.valid.any():
            self.cls[self.valid] = level_index(zv[self.valid], params.epsilon)
        self.coords = (act + 1).astype(np.int64)
        self._ws = None
        self.cmin, self.nclasses = 0, 0
        if self.valid.any():
            vc = self.cls[self.valid]
            self.cmin = int(vc.min())
            self.nclasses = int(vc.max()) - self.cmin + 1
        self.cls_rel = np.where(self.valid, self.cls - self.cmin, 0)

    # billing -------------------------------------------------------------
    def bill(self, cluster, n_list, tag):
        parts = estimator_message_sizes(self.params, self.length)
        cluster.next_round()
        cluster.broadcast(parts["zhh-seeds"], tag + "-zhh-seeds")
        cluster.broadcast(parts["seeds"], tag + "-seeds")
        cluster.gather(parts["sketch"], tag + "-sketch")
        cluster.next_round()
        cluster.gather(2 * n_list, tag + "-lookup")

    def estimate(self, key, cluster=None, tag="zest"):
        p = self.params
        m = self.length
        reps, nb, depth, width = zhh_layout(m, p.B, 0.5, p.reps)
        L, E = p.levels(m), p.E
        if L > 62:
            raise ValueError("too many subsampling levels for the flag encoding")
        if nb >= 1 << 62 or p.W >= 1 << 62 or m >= 1 << 31:
            raise ConfigurationError(
                f"sketch constants (buckets {nb}, instances {p.W}) or length {m} exceed the "
                "64-bit kernel range; use a reduced profile such as SamplerParams.desk")
        gdom, gdeg = p.gdom(m), p.g_deg(m)
        g = HashFn.from_key(int(key), K.PURPOSE_G, 0, 0, 0, gdeg, gdom, gdom)
        n = self.act.size
        lo, hi = p.window
        if n == 0:
            flags = np.zeros(0, dtype=np.int64)
            gv = np.zeros(0, dtype=np.int64)
            dsize = np.zeros(L + 1, dtype=np.int64)
        else:
            if self._ws is None:
                self._ws = K.workspace(n)
            flags, gv, dsize = K.zest_core(self.vals, self.coords, key, reps, nb, depth, width,
                                           float(p.B), L, E, p.W, reps, gdom, gdeg,
                                           float(lo), *self._ws)
            # the kernel returns views into the reused workspace
            flags, gv = flags.copy(), gv.copy()
        if cluster is not None:
            self.bill(cluster, int(np.count_nonzero(flags)), tag)
        s_hat = {}
        if n and self.nclasses:
            counts = K.class_counts(flags, self.cls_rel, self.valid, self.nclasses, dsize, float(lo))
            best = counts[0].astype(np.float64)
            for j in range(1, L + 1):
                if dsize[j] < lo:
                    continue
                row = counts[j]
                ok = (row >= lo) & (row < hi)
                best = np.where(ok, np.maximum(best, float(2 ** j) * row), best)
            ids = np.flatnonzero(best)
            s_hat = {int(i) + self.cmin: float(best[i]) for i in ids}
        ids = np.array(sorted(s_hat), dtype=np.int64)
        counts = np.array([s_hat[i] for i in ids], dtype=np.float64)
        z_hat = math.fsum((counts * level_value(ids, p.epsilon)).tolist())
        return LevelEstimate(s_hat, z_hat, p.epsilon, g, self.act, self.agg, flags,
                             self.cls_rel, self.valid, gv, self.cmin)


def choose(est, rng, epsilon):
    """Class by estimated mass, then the smallest-g listed member of that class.

    Returns the 0-based position of the chosen coordinate, or None when the
    estimate carries no mass.
    """
    if est.z_hat <= 0:
        return None
    classes = np.array(sorted(est.s_hat), dtype=np.int64)
    weights = np.array([est.s_hat[i] for i in classes]) * level_value(classes, epsilon)
    cum = np.cumsum(weights)
    u = rng.random() * cum[-1]
    k = min(int(np.searchsorted(cum, u, side="right")), classes.size - 1)
    istar = int(classes[k])
    cmin = int(est._cls_offset)
    at = K.pick_min_g(est._flags, est._cls, est._valid, est._gv, est._pos, istar - cmin)
    if at < 0:
        raise RuntimeError(f"class {istar} has mass but no listed member")
    return int(at)


@dataclass
class Sample:
    index: int
    value: float
    q_hat: float
    z_hat: float
    attempts: int


class ZSampler:
    """Prepared sampler for one distributed vector held by a cluster.

    ``prepare`` estimates Z of the raw vector once and appends the injected
    coordinates at server 1; every ``draw`` then runs a fresh estimator on
    the injected vector with seeds derived from (seed, draw index, retry).
    """

    def __init__(self, cluster, fn, params, seed=0, tag="zs", validate=True, local=None):
        if validate:
            bad = validate_property_p(fn)
            if bad is not None:
                raise ConfigurationError(f"entry function fails the shape condition: {bad}")
        self.cluster = cluster
        self.fn = fn
        self.params = params
        self.seed = int(seed)
        self.tag = tag
        self._local = cluster.stacked() if local is None else local
        self.injection = None
        self.engine = None

    def prepare(self):
        base = _Engine(self._local, self.fn, self.params)
        key, _ = _seed_state(self.seed, 0, 0, 0)
        first = base.estimate(key, self.cluster, self.tag + "-pre")
        inj = inject_coordinates(first, self.fn, self.params)
        self.injection = inj
        if inj.injected:
            ext = np.zeros((self._local.shape[0], inj.injected))
            ext[0] = inj.values()
            self.cluster.broadcast(1, self.tag + "-inject")
            self.engine = _Engine(np.hstack([self._local, ext]), self.fn, self.params)
        else:
            self.engine = base
        return self

    def draw(self, index=0):
        if self.engine is None:
            self.prepare()
        base_len = self._local.shape[1]
        for attempt in range(self.params.retries):
            key, rng = _seed_state(self.seed, 1, index, attempt)
            est = self.engine.estimate(key, self.cluster, self.tag)
            u = choose(est, rng, self.params.epsilon)
            if u is None:
                raise SamplerExhausted("aggregate vector has zero z-mass")
            p = int(est._pos[u])
            if p < base_len:
                value = float(est._vals[u])
                # a probability is at most one; Z-hat may sit just below z(a_p)
                q_hat = min(1.0, float(self.fn.z(value)) / est.z_hat)
                return Sample(p, value, q_hat, est.z_hat, attempt + 1)
        raise SamplerExhausted(f"all {self.params.retries} attempts hit injected coordinates")


def z_estimator(cluster, fn, params, seed=0, tag="zest", validate=True):
    if validate:
        bad = validate_property_p(fn)
        if bad is not None:
            raise ConfigurationError(f"entry function fails the shape condition: {bad}")
    key, _ = _seed_state(seed, 0, 0, 0)
    return _Engine(cluster.stacked(), fn, params).estimate(key, cluster, tag)


def z_sample(cluster, fn, params, seed=0):
    """One draw: (0-based index, q_hat). Raises SamplerExhausted on failure."""
    smp = ZSampler(cluster, fn, params, seed).draw(0)
    return smp.index, smp.q_hat
