"""Polynomial hash families over the Mersenne prime 2^61 - 1.

A degree-t family ``h(x) = ((sum_{i<t} c_i x^i) mod p) mod w + 1`` is t-wise
independent over the field; t = 2 gives the pairwise family. A ``HashFn`` is
fully described by the flat word list ``[t, p, c_0 .. c_{t-1}, m, w]``,
which is what gets broadcast.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import _kernels as K

PRIME = K.P61
_MASK64 = (1 << 64) - 1


def _splitmix(x):
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_word(key, purpose, a, b, c, i):
    """Pure-Python mirror of the kernel's counter-based coefficient stream."""
    h = _splitmix(int(key) ^ _splitmix(purpose))
    for part in (a, b, c, i):
        h = _splitmix(h ^ (int(part) & _MASK64))
    return (h >> 3) % PRIME


@dataclass(frozen=True)
class HashFn:
    t: int
    coeffs: Tuple[int, ...]
    m: int
    w: int
    p: int = PRIME

    def __post_init__(self):
        if len(self.coeffs) != self.t:
            raise ValueError("need exactly t coefficients")
        if self.p <= max(self.m, self.w):
            raise ValueError("prime must exceed domain and range")

    @classmethod
    def from_key(cls, key, purpose, a, b, c, t, m, w):
        coeffs = tuple(derive_word(key, purpose, a, b, c, i) for i in range(t))
        return cls(t, coeffs, m, w)

    def _coeff_array(self):
        return np.array(self.coeffs, dtype=np.int64)

    def __call__(self, x):
        return self.eval(x)

    def eval(self, x):
        if np.ndim(x) == 0:
            x = int(x)
            if not 1 <= x <= self.m:
                raise ValueError(f"input {x} outside domain [1, {self.m}]")
            acc = 0
            for c in reversed(self.coeffs):
                acc = (acc * x + c) % self.p
            return acc % self.w + 1
        xs = np.asarray(x, dtype=np.int64)
        if xs.size and (xs.min() < 1 or xs.max() > self.m):
            raise ValueError(f"inputs outside domain [1, {self.m}]")
        return K.hash_many(self._coeff_array(), xs.ravel(), self.w).reshape(xs.shape)

    def to_words(self):
        return [self.t, self.p, *self.coeffs, self.m, self.w]

    @classmethod
    def from_words(cls, words):
        words = [int(v) for v in words]
        t = words[0]
        if len(words) != t + 4:
            raise ValueError(f"expected {t + 4} words, got {len(words)}")
        return cls(t, tuple(words[2:2 + t]), words[2 + t], words[3 + t], p=words[1])

    @property
    def word_count(self):
        return self.t + 4


def sample_hash(t, m, w, rng):
    if t < 2 or m < 1 or w < 1:
        raise ValueError("need t >= 2, m >= 1, w >= 1")
    coeffs = rng.integers(0, PRIME, size=t, dtype=np.int64)
    return HashFn(int(t), tuple(int(c) for c in coeffs), int(m), int(w))


def eval_hash(h, x):
    return h.eval(x)


def hash_words(t):
    """Broadcast size of one degree-t hash function."""
    return t + 4


def eval_many_seeds(coeff_rows, x, w):
    """Evaluate one input under many coefficient rows (one hash per row)."""
    return K.hash_family_at(np.ascontiguousarray(coeff_rows, dtype=np.int64), int(x), int(w))
