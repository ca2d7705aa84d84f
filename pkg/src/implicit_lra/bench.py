"""Experiment harness: load a matrix, split it across servers, optionally
corrupt it, run the protocol per (k, repetition) and report errors and
communication as CSV.

Config files are flat ``key = value`` text; ``#`` starts a comment. Known
keys and their defaults are listed in ``DEFAULTS``. The entry function is
``kind`` with its parameters as plain keys (``kind = huber`` and
``k = 1.0``); the generalized mean takes its ``s`` from the server count.
"""
import csv
import io
import math
import os
import struct
import time
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .cluster import Cluster
from .entry_functions import ConfigurationError, make_function
from .linalg import additive_error, as_matrix, relative_error
from .pca import PcaParams, boost, sampler_params
from .rff import RffSpec, default_features, rff_expand, uniform_row_run
from .zsampler import estimator_words

CSV_HEADER = ("run_id,k,r,epsilon,words_used,budget_words,additive_error,"
              "relative_error,wall_ms,status")
FORMATS = ("csv-dense", "binary-f64")
PARTITIONS = ("row-split", "additive")


FUNCTION_PARAMS = {"power": ("p",), "huber": ("k",), "fair": ("c",), "gm": ("p",)}


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# datasets


def load_dataset(path, fmt="csv-dense"):
    if fmt == "csv-dense":
        return _load_csv(path)
    if fmt == "binary-f64":
        return _load_binary(path)
    raise DatasetError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def _load_csv(path):
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if rec[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(x) for x in rec]
            except ValueError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DatasetError(f"{path}: line {lineno}: expected {width} fields, got {len(vals)}")
            bad = [j for j, v in enumerate(vals) if not math.isfinite(v)]
            if bad:
                raise DatasetError(f"{path}: line {lineno}: non-finite value in column {bad[0] + 1}")
            rows.append(vals)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def _load_binary(path):
    """Little-endian: uint64 n, uint64 d, then n*d float64 in row-major order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise DatasetError(f"{path}: offset {len(raw)}: truncated header")
    n, d = struct.unpack("<QQ", raw[:16])
    need = 16 + 8 * n * d
    if len(raw) != need:
        raise DatasetError(f"{path}: offset {min(len(raw), need)}: expected {need} bytes for "
                           f"{n}x{d}, found {len(raw)}")
    A = np.frombuffer(raw, dtype="<f8", offset=16).reshape(n, d).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(A.ravel()))
    if bad.size:
        raise DatasetError(f"{path}: offset {16 + 8 * int(bad[0])}: non-finite value")
    if n < 1 or d < 1:
        raise DatasetError(f"{path}: empty matrix {n}x{d}")
    return A


def save_dataset(A, path, fmt="csv-dense"):
    A = as_matrix(A)
    if fmt == "csv-dense":
        np.savetxt(path, A, delimiter=",", fmt="%.17g")
    elif fmt == "binary-f64":
        with open(path, "wb") as fh:
            fh.write(struct.pack("<QQ", *A.shape))
            fh.write(np.ascontiguousarray(A, dtype="<f8").tobytes())
    else:
        raise DatasetError(f"unknown format {fmt!r}")


def synthetic_low_rank(n, d, rank, noise, seed):
    """Rank-``rank`` signal with decaying spectrum plus Gaussian noise."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 8])))
    U, _ = np.linalg.qr(rng.standard_normal((n, rank)))
    V, _ = np.linalg.qr(rng.standard_normal((d, rank)))
    spectrum = math.sqrt(n) * np.linspace(2.0, 1.0, rank)
    return (U * spectrum) @ V.T + noise * rng.standard_normal((n, d))


# ---------------------------------------------------------------------------
# partitioning and corruption


def partition(A, mode, s, seed=0):
    """Split ``A`` into ``s`` local matrices.

    ``additive``: random convex weights per entry; the last share is fixed
    up so that summing the shares in server order reproduces ``A`` exactly.
    ``row-split``: contiguous row blocks, zero elsewhere.
    """
    A = as_matrix(A)
    s = int(s)
    if s < 1:
        raise ValueError("s must be >= 1")
    if s == 1:
        return [A.copy()]
    if mode == "row-split":
        bounds = np.linspace(0, A.shape[0], s + 1).round().astype(int)
        out = []
        for t in range(s):
            X = np.zeros_like(A)
            X[bounds[t]:bounds[t + 1]] = A[bounds[t]:bounds[t + 1]]
            out.append(X)
        return out
    if mode != "additive":
        raise ConfigurationError(f"unknown partition mode {mode!r}; expected one of {PARTITIONS}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 9])))
    w = rng.random((s,) + A.shape)
    w /= w.sum(axis=0)
    shares = [A * w[t] for t in range(s - 1)]
    prefix = shares[0].copy()
    for X in shares[1:]:
        prefix += X
    last = A - prefix
    _exact_fix(shares, prefix, last, A)
    shares.append(last)
    return shares


def _exact_fix(shares, prefix, last, target):
    """Nudge ``last`` by ulps until ``prefix + last == target`` everywhere."""
    for _ in range(64):
        bad = prefix + last != target
        if not bad.any():
            return
        direction = np.where(prefix[bad] + last[bad] < target[bad], np.inf, -np.inf)
        last[bad] = np.nextafter(last[bad], direction)
    bad = prefix + last != target
    if bad.any():
        # give the whole entry to the last server
        for X in shares:
            X[bad] = 0.0
        last[bad] = target[bad]


def gm_shares(locals_, fn):
    """Local preprocessing of the generalized-mean path: (1/s)|M^t|^p per server."""
    if fn.local_transform is None:
        raise ConfigurationError(f"{fn.kind} has no local preprocessing")
    return [np.asarray(fn.local_transform(X), dtype=np.float64) for X in locals_]


def corrupt_entries(A, count, magnitude, seed=0):
    """Set ``count`` distinct uniformly chosen entries to +-magnitude.

    Returns (corrupted copy, flat positions in ascending order).
    """
    A = as_matrix(A).copy()
    count = int(count)
    if not 0 <= count <= A.size:
        raise ValueError(f"count must lie in [0, {A.size}]")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 10])))
    pos = np.sort(rng.choice(A.size, size=count, replace=False))
    signs = rng.choice([-1.0, 1.0], size=count)
    A.ravel()[pos] = signs * float(magnitude)
    return A, pos


# ---------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "dataset": None,
    "format": "csv-dense",
    "partition": "additive",
    "s": "2",
    "kind": "identity",
    "k": "",
    "p": "",
    "c": "",
    "ks": "5",
    "epsilon": "0.5",
    "delta": "0.5",
    "r": "",
    "C": "1",
    "sampler": "full",
    "profile": "lean",
    "budget_ratio": "1",
    "repetitions": "5",
    "seed": "0",
    "pipeline": "pca",
    "rff_features": "",
    "corrupt_count": "0",
    "corrupt_magnitude": "1e6",
    "timing": "on",
}


@dataclass
class ExperimentConfig:
    raw: Dict[str, str]
    base_dir: str = "."

    @classmethod
    def parse(cls, text, base_dir="."):
        raw = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"config line {lineno}: expected key = value")
            key, value = (x.strip() for x in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigurationError(f"config line {lineno}: unknown key {key!r}")
            if key in raw:
                raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
            raw[key] = value
        if not raw.get("dataset"):
            raise ConfigurationError("config needs a dataset path")
        cfg = cls(raw, base_dir)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.parse(fh.read(), os.path.dirname(os.path.abspath(path)))

    def get(self, key):
        return self.raw.get(key, DEFAULTS[key])

    def with_values(self, **kw):
        raw = dict(self.raw)
        raw.update({k: str(v) for k, v in kw.items()})
        return ExperimentConfig(raw, self.base_dir)

    # typed accessors
    @property
    def dataset_path(self):
        p = self.get("dataset")
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    @property
    def s(self):
        return int(self.get("s"))

    @property
    def ks(self):
        return [int(x) for x in self.get("ks").split(",") if x.strip()]

    @property
    def epsilon(self):
        return float(self.get("epsilon"))

    @property
    def delta(self):
        return float(self.get("delta"))

    @property
    def r(self):
        v = self.get("r")
        return int(v) if v else None

    @property
    def budget_ratio(self):
        return float(self.get("budget_ratio"))

    @property
    def repetitions(self):
        return int(self.get("repetitions"))

    @property
    def seed(self):
        return int(self.get("seed"))

    @property
    def timing(self):
        return self.get("timing") == "on"

    def function(self):
        kind = self.get("kind")
        wanted = FUNCTION_PARAMS.get(kind, ())
        params = {}
        for name in ("k", "p", "c"):
            v = self.get(name)
            if name in wanted:
                if not v:
                    raise ConfigurationError(f"kind {kind} needs parameter {name}")
                params[name] = float(v)
            elif v:
                raise ConfigurationError(f"parameter {name} does not apply to kind {kind}")
        if kind == "gm":
            params["s"] = self.s
        return make_function(kind, **params)

    def pca_params(self, k, r=None):
        return PcaParams(k, self.epsilon, self.delta, r_override=self.r if r is None else r,
                         C=float(self.get("C")), sampler=self.get("sampler"),
                         profile=self.get("profile"))

    def validate(self):
        if self.get("format") not in FORMATS:
            raise ConfigurationError(f"format must be one of {FORMATS}")
        if self.get("partition") not in PARTITIONS:
            raise ConfigurationError(f"partition must be one of {PARTITIONS}")
        if self.get("pipeline") not in ("pca", "rff"):
            raise ConfigurationError("pipeline must be pca or rff")
        if self.get("timing") not in ("on", "off"):
            raise ConfigurationError("timing must be on or off")
        if not self.budget_ratio > 0:
            raise ConfigurationError("budget_ratio must be positive")
        if self.s < 1 or self.repetitions < 1 or not self.ks:
            raise ConfigurationError("s, repetitions and ks must be positive")
        self.function()
        for k in self.ks:
            self.pca_params(k)

    def header_lines(self):
        keys = list(DEFAULTS)
        return [f"# {k}={self.raw[k] if k in self.raw else DEFAULTS[k]}" for k in keys]


# ---------------------------------------------------------------------------
# running


@dataclass
class ReportRow:
    run_id: int
    k: int
    r: int
    epsilon: float
    words_used: int
    budget_words: float
    additive_error: float
    relative_error: float
    wall_ms: object
    status: str

    def csv(self):
        wall = "NA" if self.wall_ms is None else f"{self.wall_ms:.3f}"
        return (f"{self.run_id},{self.k},{self.r},{self.epsilon!r},{self.words_used},"
                f"{self.budget_words!r},{self.additive_error!r},{self.relative_error!r},"
                f"{wall},{self.status}")


@dataclass
class ErrorReport:
    config: ExperimentConfig
    rows: List[ReportRow] = field(default_factory=list)
    ledgers: Dict[int, str] = field(default_factory=dict)
    projections: Dict[int, np.ndarray] = field(default_factory=dict)

    def to_csv(self):
        lines = self.config.header_lines() + [CSV_HEADER]
        lines += [row.csv() for row in sorted(self.rows, key=lambda x: (x.k, x.run_id))]
        return "\n".join(lines) + "\n"

    def ledger_text(self):
        out = io.StringIO()
        for run_id in sorted(self.ledgers):
            out.write(f"# run_id={run_id}\n")
            out.write(self.ledgers[run_id])
        return out.getvalue()

    def mean_additive(self, k):
        vals = [row.additive_error for row in self.rows if row.k == k]
        return float(np.mean(vals)) if vals else float("nan")


def prepare_matrix(cfg):
    """(server shares, target matrix f(A) for measurement, entry function)."""
    M = load_dataset(cfg.dataset_path, cfg.get("format"))
    count = int(cfg.get("corrupt_count"))
    if count:
        M, _ = corrupt_entries(M, count, float(cfg.get("corrupt_magnitude")), cfg.seed)
    fn = cfg.function()
    shares = partition(M, cfg.get("partition"), cfg.s, cfg.seed)
    if fn.local_transform is not None:
        shares = gm_shares(shares, fn)
    return shares, fn


def _target(cluster, fn, cfg):
    agg = cluster.aggregate()
    if cfg.get("pipeline") == "rff":
        return rff_expand(agg, _rff_spec(cfg, agg.shape))
    return np.asarray(fn.f(agg), dtype=np.float64)


def _rff_spec(cfg, shape):
    n, m = shape
    d = int(cfg.get("rff_features") or default_features(n))
    return RffSpec(m, d, cfg.seed)


def run_experiment(cfg, keep_projections=False):
    shares, fn = prepare_matrix(cfg)
    budget = cfg.budget_ratio * sum(X.size for X in shares)
    report = ErrorReport(cfg)
    run_id = 0
    target = None
    for k in cfg.ks:
        for rep in range(cfg.repetitions):
            cluster = Cluster(shares, seed=cfg.seed)
            if target is None:
                target = _target(cluster, fn, cfg)
            seed = int(np.random.SeedSequence([cfg.seed, 11, k, rep])
                       .generate_state(1, dtype=np.uint64)[0] >> 1)
            t0 = time.perf_counter()
            if cfg.get("pipeline") == "rff":
                r = cfg.r if cfg.r is not None else cfg.pca_params(k).r
                res = uniform_row_run(cluster, _rff_spec(cfg, cluster.shape), k, r, seed=seed)
                proj = res.projection
            else:
                params = cfg.pca_params(k)
                r = params.r
                proj = boost(cluster, fn, params, seed=seed, validate=False).projection
            wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else None
            words = cluster.total_words()
            status = "ok" if words <= budget else "over-budget"
            report.rows.append(ReportRow(run_id, k, r, cfg.epsilon, words, budget,
                                         max(0.0, additive_error(target, proj)),
                                         relative_error(target, proj), wall, status))
            report.ledgers[run_id] = cluster.ledger.to_lines()
            if keep_projections:
                report.projections[run_id] = proj.basis
            run_id += 1
    return report


# ---------------------------------------------------------------------------
# budget tuning


def predicted_words(cfg, k, r, shape, active=None):
    """Word count of one configured run with ``r`` samples.

    Full-sampler runs assume one attempt per draw and a candidate list as
    large as the active support (an upper bound for the lookup term); the
    actual ledger is measured after each run.
    """
    n, d = shape
    s = cfg.s
    if cfg.get("pipeline") == "rff":
        return r + s * r * d
    params = cfg.pca_params(k, r)
    per_run = s * r * d + r
    if params.sampler == "full":
        length = n * d
        sp = sampler_params(params.sampler_epsilon, params.C, length, params.profile)
        act = length if active is None else int(active)
        per_run += (r + 1) * estimator_words(sp, length, s, act)
    return params.runs * per_run


def tune(cfg, budget_ratio=None):
    """Largest r whose predicted cost fits the budget (None if even r = k does not)."""
    shares, _ = prepare_matrix(cfg)
    ratio = cfg.budget_ratio if budget_ratio is None else float(budget_ratio)
    budget = ratio * sum(X.size for X in shares)
    shape = shares[0].shape
    active = int(np.count_nonzero(np.any(np.stack(shares) != 0, axis=0)))
    result = {}
    for k in cfg.ks:
        cost = lambda r: predicted_words(cfg, k, r, shape, active)
        if cost(k) > budget:
            result[k] = None
            continue
        lo, hi = k, k
        while cost(hi * 2) <= budget:
            hi *= 2
        hi *= 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if cost(mid) <= budget:
                lo = mid
            else:
                hi = mid
        result[k] = lo
    return result, budget
