import numpy as np
import pytest
from scipy import stats

from implicit_lra import _kernels as K
from implicit_lra.hashing import (PRIME, HashFn, derive_word, eval_hash, eval_many_seeds,
                                  hash_words, sample_hash)


def seeds(n, t, seed):
    return np.random.default_rng(seed).integers(0, PRIME, size=(n, t), dtype=np.int64)


def test_zero_coefficients_give_constant():
    h = HashFn(2, (0, 0), 50, 7)
    assert {h(x) for x in range(1, 51)} == {1}


def test_linear_coefficients_shift_by_one():
    # h(x) = (x mod w) + 1 for c = (0, 1)
    h = HashFn(2, (0, 1), 20, 20)
    assert [h(x) for x in range(1, 21)] == [x % 20 + 1 for x in range(1, 21)]


def test_identity_coefficients():
    h = HashFn(2, (PRIME - 1, 1), 20, 20)
    assert [h(x) for x in range(1, 21)] == list(range(1, 21))


def test_eval_is_deterministic_and_in_range():
    h = sample_hash(3, 1000, 17, np.random.default_rng(0))
    xs = np.arange(1, 1001)
    a, b = h.eval(xs), h.eval(xs)
    np.testing.assert_array_equal(a, b)
    assert a.min() >= 1 and a.max() <= 17
    assert [eval_hash(h, int(x)) for x in xs[:50]] == a[:50].tolist()


def test_out_of_domain():
    h = sample_hash(2, 10, 5, np.random.default_rng(1))
    with pytest.raises(ValueError):
        h(0)
    with pytest.raises(ValueError):
        h(11)
    with pytest.raises(ValueError):
        h.eval(np.array([3, 12]))


def test_bad_parameters():
    with pytest.raises(ValueError):
        sample_hash(1, 10, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        HashFn(2, (1,), 10, 10)
    with pytest.raises(ValueError):
        HashFn(2, (1, 2), PRIME, 10)


def test_serialization_roundtrip():
    h = sample_hash(5, 300, 40, np.random.default_rng(2))
    words = h.to_words()
    assert len(words) == hash_words(5) == h.word_count
    g = HashFn.from_words(words)
    assert g == h
    xs = np.arange(1, 301)
    np.testing.assert_array_equal(g.eval(xs), h.eval(xs))
    with pytest.raises(ValueError):
        HashFn.from_words(words[:-1])


def test_kernel_matches_python_evaluation():
    h = sample_hash(6, 10 ** 6, 1013, np.random.default_rng(3))
    xs = np.random.default_rng(4).integers(1, 10 ** 6 + 1, size=200)
    np.testing.assert_array_equal(h.eval(xs), [h(int(x)) for x in xs])


def test_small_input_arithmetic_matches_general():
    r = np.random.default_rng(5)
    for _ in range(200):
        a = int(r.integers(0, PRIME))
        x = int(r.integers(0, 2 ** 31))
        assert K.mulmod61_small(a, x) == K.mulmod61(a, x) == a * x % PRIME
    coeffs = seeds(1, 7, 6)[0]
    for x in r.integers(1, 2 ** 31, size=50):
        assert K.poly61_small(coeffs, int(x)) == K.poly61(coeffs, int(x))


def test_derived_coefficients_match_kernel():
    for args in [(0, 1, 0, 0, 0, 0), (12345, 2, 3, 4, 5, 6), (2 ** 63 + 7, 3, 1, 2, 0, 1)]:
        assert derive_word(*args) == K.derive(np.uint64(args[0]), *args[1:])
        assert 0 <= derive_word(*args) < PRIME
    h = HashFn.from_key(99, 1, 0, 0, 0, 3, 100, 10)
    assert h.coeffs == tuple(derive_word(99, 1, 0, 0, 0, i) for i in range(3))


def test_pairwise_collision_rate():
    rows = seeds(100_000, 2, 7)
    a = eval_many_seeds(rows, 17, 100)
    b = eval_many_seeds(rows, 923, 100)
    rate = np.mean(a == b)
    assert 0.008 <= rate <= 0.012


def test_four_wise_triple_is_uniform():
    rows = seeds(1_000_000, 4, 8)
    h = [eval_many_seeds(rows, x, 64) - 1 for x in (1, 2, 3)]
    cells = (h[0] * 64 + h[1]) * 64 + h[2]
    counts = np.bincount(cells, minlength=64 ** 3)
    stat, p = stats.chisquare(counts)
    assert p > 0.01


def test_bucket_loads_balls_in_bins():
    m, w = 10_000, 10
    h = sample_hash(2, m, w, np.random.default_rng(9))
    loads = np.bincount(h.eval(np.arange(1, m + 1)), minlength=w + 1)[1:]
    assert np.all(np.abs(loads - m / w) <= 4 * np.sqrt(m / w))
