"""Linear heavy-hitter sketches and the bucketed Z-HeavyHitters protocol.

``HHSketch`` is a CountSketch-style table: ``depth`` rows, each with a
pairwise bucket hash into ``width`` counters and a pairwise sign hash.
Server 1 merges the per-server sketches (plain addition) and estimates
each candidate coordinate by the median over rows; a coordinate is reported
when its squared estimate reaches F2/(2B), with F2 the median row energy.

All hash seeds come from a counter-based stream keyed by ``(key, stream,
rep)``, shared by every server, so a sketch is reproducible from its seed
block alone.
"""
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .cluster import ProtocolError
from .entry_functions import ConfigurationError, validate_property_p
from .hashing import HashFn, hash_words


@dataclass(frozen=True)
class HHParams:
    B: float
    delta: float

    def __post_init__(self):
        if not self.B >= 1:
            raise ValueError("B must be >= 1")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")

    def depth(self, m):
        return max(1, math.ceil(4 * math.log(max(m, 1) / self.delta)))

    @property
    def width(self):
        return math.ceil(8 * self.B)


def sketch_hashes(key, stream, rep, row, m, width):
    bucket = HashFn.from_key(key, K.PURPOSE_ZHH, stream, rep, 1 + 2 * row, 2, m, width)
    sign = HashFn.from_key(key, K.PURPOSE_ZHH, stream, rep, 2 + 2 * row, 2, m, 2)
    return bucket, sign


@dataclass
class HHSketch:
    depth: int
    width: int
    m: int
    seed: tuple  # (key, stream, rep)
    counters: np.ndarray

    @classmethod
    def empty(cls, params, m, seed=(0, 0, 0)):
        d, w = params.depth(m), params.width
        return cls(d, w, m, tuple(int(x) for x in seed), np.zeros((d, w)))

    def _rows(self):
        key, stream, rep = self.seed
        idx = np.arange(1, self.m + 1, dtype=np.int64)
        for q in range(self.depth):
            bh, sh = sketch_hashes(key, stream, rep, q, self.m, self.width)
            yield bh.eval(idx) - 1, np.where(sh.eval(idx) == 1, 1.0, -1.0)

    def add_vector(self, v, support=None):
        """Sketch ``v`` (length m); coordinates outside ``support`` count as zero."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.m,):
            raise ValueError(f"vector must have length {self.m}")
        if support is not None:
            v = np.where(support, v, 0.0)
        for q, (b, sg) in enumerate(self._rows()):
            self.counters[q] += np.bincount(b, weights=sg * v, minlength=self.width)
        return self

    def merge(self, other):
        if (self.depth, self.width, self.m, self.seed) != (other.depth, other.width, other.m, other.seed):
            raise ProtocolError("cannot merge sketches built from different seeds or shapes")
        return HHSketch(self.depth, self.width, self.m, self.seed, self.counters + other.counters)

    def estimates(self, candidates=None):
        cand = np.arange(self.m) if candidates is None else np.asarray(candidates, dtype=np.int64)
        est = np.empty((self.depth, cand.size))
        for q, (b, sg) in enumerate(self._rows()):
            est[q] = sg[cand] * self.counters[q, b[cand]]
        return cand, np.median(est, axis=0)

    def f2_estimate(self):
        return float(np.median(np.sum(self.counters ** 2, axis=1)))

    def query(self, B, candidates=None):
        cand, est = self.estimates(candidates)
        F2 = self.f2_estimate()
        e2 = est * est
        hit = (e2 > 0) & (e2 >= F2 / (2.0 * B))
        return set(int(c) for c in cand[hit])

    def to_words(self):
        key, stream, rep = self.seed
        header = [self.depth, self.width, self.m, key, stream, rep]
        return header + self.counters.ravel().view(np.uint64).tolist()


def hh_sketch_build(v_local, params, seed=(0, 0, 0), support=None):
    v = np.asarray(v_local, dtype=np.float64).ravel()
    return HHSketch.empty(params, v.size, seed).add_vector(v, support)


def merge_sketches(sketches):
    it = iter(sketches)
    acc = next(it)
    for sk in it:
        acc = acc.merge(sk)
    return acc


def hh_query(cluster, params, key=0, tag="hh"):
    """Every server sketches its flattened local data; server 1 merges and queries.

    Returns 0-based coordinate indices. Billed: one seed block broadcast and
    ``s * depth * width`` counter words.
    """
    local = cluster.stacked()
    m = local.shape[1]
    cluster.next_round()
    depth = params.depth(m)
    cluster.broadcast(2 * depth * hash_words(2), tag + "-seeds")
    sketches = [hh_sketch_build(v, params, (key, 0, 0)) for v in local]
    cluster.gather(depth * params.width, tag + "-sketch")
    return merge_sketches(sketches).query(params.B)


# ---------------------------------------------------------------------------
# Z-HeavyHitters


def zhh_reps(delta):
    return math.ceil(20 * math.log(1.0 / delta))


def zhh_layout(m, B, delta, reps=None):
    """(reps, outer buckets, depth, width) of one Z-HeavyHitters call.

    Each bucket runs HeavyHitters(., B, 1/(16 B^2)), so the inner sketch
    depth is ceil(4 ln(16 B^2 m)).
    """
    if not B >= 1:
        raise ValueError("B must be >= 1")
    reps = zhh_reps(delta) if reps is None else int(reps)
    inner = HHParams(B, 1.0 / (16.0 * B * B))
    return reps, math.ceil(4 * B * B), inner.depth(m), inner.width


def zhh_words(m, B, delta, reps=None, instances=1):
    """Per-server (seed words, sketch words) of ``instances`` parallel calls.

    Seeds (outer hash and sketch hashes) are shared across instances.
    """
    reps, nb, depth, width = zhh_layout(m, B, delta, reps)
    seeds = reps * (1 + 2 * depth) * hash_words(2)
    sketch = instances * reps * nb * depth * width
    return seeds, sketch


def active_coordinates(local):
    """Positions (0-based) nonzero on at least one server."""
    return np.flatnonzero(np.any(local != 0.0, axis=0))


def z_heavy_hitters(cluster, fn, B, delta, key=0, reps=None, validate=True, tag="zhh"):
    """Heavy set D (0-based indices) of the aggregate of the local vectors."""
    if validate and fn is not None:
        bad = validate_property_p(fn)
        if bad is not None:
            raise ConfigurationError(f"entry function fails the shape condition: {bad}")
    local = cluster.stacked()
    m = local.shape[1]
    if m == 0:
        return set()
    r, nb, depth, width = zhh_layout(m, B, delta, reps)
    seeds, sketch = zhh_words(m, B, delta, reps)
    cluster.next_round()
    cluster.broadcast(seeds, tag + "-seeds")
    cluster.gather(sketch, tag + "-sketch")
    act = active_coordinates(local)
    if act.size == 0:
        return set()
    vals = np.ascontiguousarray(local[:, act])
    coords = (act + 1).astype(np.int64)
    out = np.zeros(act.size, dtype=np.bool_)
    K.zhh_mark(vals, coords, np.arange(act.size), np.zeros(act.size, dtype=np.int64), 0, r, nb,
               depth, width, float(B), np.uint64(key), out, *K.workspace(act.size)[:7])
    return set(int(i) for i in act[out])


def z_heavy_hitters_reference(local, B, delta, key=0, reps=None, stream=0, members=None):
    """Dense, slow restatement of the heavy-set search used to cross-check the kernel.

    Every nonempty outer bucket gets its own per-server sketches of the
    bucket-restricted vector, merged in server order and queried over the
    bucket's support.
    """
    local = np.atleast_2d(np.asarray(local, dtype=np.float64))
    m = local.shape[1]
    r, nb, depth, width = zhh_layout(m, B, delta, reps)
    support = np.any(local != 0.0, axis=0)
    if members is not None:
        keep = np.zeros(m, dtype=bool)
        keep[np.asarray(list(members), dtype=np.int64)] = True
        support &= keep
    idx = np.flatnonzero(support)
    D = set()
    for rep in range(r):
        outer = HashFn.from_key(key, K.PURPOSE_ZHH, stream, rep, 0, 2, m, nb)
        buckets = outer.eval(idx + 1)
        for e in np.unique(buckets):
            mask = np.zeros(m, dtype=bool)
            mask[idx[buckets == e]] = True
            sketches = []
            for v in local:
                sk = HHSketch(depth, width, m, (key, stream, rep), np.zeros((depth, width)))
                sketches.append(sk.add_vector(v, mask))
            merged = merge_sketches(sketches)
            D |= merged.query(B, np.flatnonzero(mask))
    return D
