"""Entry functions f applied to aggregated entries, their squared forms
z = f^2, inverses, and a grid validator for the shape condition the
generalized sampler needs (z(0) = 0, z nondecreasing in |x|, x^2/z
nondecreasing in |x|).
"""
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EntryFunction:
    kind: str
    params: dict
    f: Callable
    z: Callable
    z_sup: float = math.inf
    sup_attained: bool = False
    c_z: float = 1.0
    nonneg_domain: bool = False
    # optional local preprocessing of raw shares (used by gm)
    local_transform: Optional[Callable] = field(default=None, compare=False)

    def __call__(self, x):
        return self.f(x)

    def z_inverse(self, y):
        return z_inverse(self, y)

    def describe(self):
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}({inner})"


def _arr(x):
    return np.asarray(x, dtype=np.float64)


def _identity():
    return EntryFunction("identity", {}, lambda x: _arr(x) * 1.0, lambda x: _arr(x) ** 2)


def _power(p):
    if not 0 < p <= 1:
        raise ConfigurationError("power needs 0 < p <= 1 for the shape condition")
    f = lambda x: np.sign(_arr(x)) * np.abs(_arr(x)) ** p
    z = lambda x: np.abs(_arr(x)) ** (2 * p)
    return EntryFunction("power", {"p": p}, f, z)


def _huber(k):
    if not k > 0:
        raise ConfigurationError("huber needs k > 0")
    f = lambda x: np.clip(_arr(x), -k, k)
    z = lambda x: np.minimum(_arr(x) ** 2, k * k)
    return EntryFunction("huber", {"k": k}, f, z, z_sup=k * k, sup_attained=True)


def _l1l2():
    f = lambda x: _arr(x) / np.sqrt(1.0 + _arr(x) ** 2 / 2.0)
    z = lambda x: _arr(x) ** 2 / (1.0 + _arr(x) ** 2 / 2.0)
    return EntryFunction("l1l2", {}, f, z, z_sup=2.0)


def _fair(c):
    if not c > 0:
        raise ConfigurationError("fair needs c > 0")
    f = lambda x: _arr(x) / (1.0 + np.abs(_arr(x)) / c)
    z = lambda x: (_arr(x) / (1.0 + np.abs(_arr(x)) / c)) ** 2
    return EntryFunction("fair", {"c": c}, f, z, z_sup=c * c)


def _gm(p, s):
    if not p >= 1:
        raise ConfigurationError("gm needs p >= 1")
    if not s >= 1:
        raise ConfigurationError("gm needs s >= 1")

    # inputs are sums of nonnegative local shares; clip tiny negative noise
    f = lambda x: np.maximum(_arr(x), 0.0) ** (1.0 / p)
    z = lambda x: np.maximum(_arr(x), 0.0) ** (2.0 / p)
    local = lambda M: np.abs(_arr(M)) ** p / s
    return EntryFunction("gm", {"p": p, "s": s}, f, z, nonneg_domain=True,
                         local_transform=local)


_REGISTRY = {
    "identity": (_identity, ()),
    "power": (_power, ("p",)),
    "huber": (_huber, ("k",)),
    "l1l2": (_l1l2, ()),
    "fair": (_fair, ("c",)),
    "gm": (_gm, ("p", "s")),
}

KINDS = tuple(_REGISTRY)


def make_function(kind, **params):
    """Build a registered entry function, e.g. ``make_function("huber", k=1.0)``."""
    if kind not in _REGISTRY:
        raise ConfigurationError(f"unknown function kind {kind!r}; known: {', '.join(KINDS)}")
    ctor, names = _REGISTRY[kind]
    extra = set(params) - set(names)
    missing = set(names) - set(params)
    if extra or missing:
        raise ConfigurationError(f"{kind} takes parameters {names}, got {sorted(params)}")
    args = [float(params[n]) for n in names]
    if kind == "gm":
        args[1] = int(args[1])
    return ctor(*args)


def z_inverse(fn, y, iterations=64):
    """Smallest x >= 0 with z(x) >= y, found by bisection; None beyond sup z.

    A power-of-two bracket [hi/2, hi] is located first, then refined by
    ``iterations`` bisection steps.
    """
    y = float(y)
    if y < 0:
        raise ValueError("z_inverse needs y >= 0")
    if y == 0.0:
        return 0.0
    if y > fn.z_sup or (y == fn.z_sup and not fn.sup_attained):
        return None
    z = lambda x: float(fn.z(x))
    hi = 1.0
    while z(hi) < y:
        hi *= 2.0
        if hi > 1e300:
            return None
    # shrink to a relative bracket [hi/2, hi] so tiny preimages keep full precision
    while hi > 1e-300 and z(hi / 2.0) >= y:
        hi /= 2.0
    lo = hi / 2.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if z(mid) >= y:
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class Violation:
    clause: str
    x1: float
    x2: float
    detail: str

    def __str__(self):
        return f"{self.clause} violated at x1={self.x1!r}, x2={self.x2!r}: {self.detail}"


def default_grid(decades=(-6, 6), points=2001):
    pos = np.logspace(decades[0], decades[1], points // 2)
    return np.concatenate([-pos[::-1], [0.0], pos])


def validate_property_p(fn, grid=None, tol=1e-12):
    """Check the shape condition on a probe grid.

    ``fn`` is anything with a vectorized ``z`` attribute. Returns None when
    every clause holds, else the first ``Violation`` found. Scanning the
    grid in order of |x| against the running maximum is equivalent to the
    all-pairs check.
    """
    xs = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if getattr(fn, "nonneg_domain", False):
        xs = xs[xs >= 0]
    z0 = float(np.asarray(fn.z(np.array([0.0])))[0])
    if z0 != 0.0:
        return Violation("z(0) = 0", 0.0, 0.0, f"z(0) = {z0}")
    xs = xs[xs != 0]
    xs = xs[np.argsort(np.abs(xs), kind="stable")]
    zs = np.asarray(fn.z(xs), dtype=np.float64)
    if np.any(zs <= 0):
        bad = int(np.argmax(zs <= 0))
        return Violation("z > 0 away from 0", float(xs[bad]), float(xs[bad]), f"z = {zs[bad]}")
    for name, vals in (("z nondecreasing in |x|", zs),
                       ("x^2/z nondecreasing in |x|", xs * xs / zs)):
        run = np.maximum.accumulate(vals)
        drops = np.nonzero(vals < run - tol * np.maximum(1.0, np.abs(run)))[0]
        if drops.size:
            i = int(drops[0])
            j = int(np.argmax(vals[:i]))
            return Violation(name, float(xs[i]), float(xs[j]),
                             f"{vals[i]!r} at x1 is below {vals[j]!r} at x2 although |x1| >= |x2|")
    return None


class PowerZ:
    """Bare z(x) = |x|^q, handy for building deliberately broken fixtures."""

    def __init__(self, q):
        self.q = q
        self.z = lambda x: np.abs(_arr(x)) ** q
