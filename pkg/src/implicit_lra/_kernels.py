"""Numba kernels: Mersenne-61 polynomial hashing, counter-based seed
derivation and the batched heavy-hitter / level-set core of the estimator.

Everything here is integer-exact or summation-order-exact so that the
Python reference paths in ``hashing`` and ``heavy_hitters`` reproduce the
kernels bit for bit.
"""
import numpy as np
from numba import njit

P61 = (1 << 61) - 1
_P = np.int64(P61)
_LO31 = np.int64((1 << 31) - 1)
_LO30 = np.int64((1 << 30) - 1)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

PURPOSE_ZHH = 1
PURPOSE_G = 2
PURPOSE_LEVEL = 3


@njit(cache=True)
def mulmod61(a, b):
    # a, b in [0, 2^61 - 1); split into 31-bit halves so every partial
    # product fits in a signed 64-bit integer.
    a_hi = a >> 31
    a_lo = a & _LO31
    b_hi = b >> 31
    b_lo = b & _LO31
    hh = a_hi * b_hi
    mid = a_hi * b_lo + a_lo * b_hi
    ll = a_lo * b_lo
    ll = (ll & _P) + (ll >> 61)
    res = 2 * hh + (mid >> 30) + ((mid & _LO30) << 31) + ll
    res = (res & _P) + (res >> 61)
    if res >= _P:
        res -= _P
    return res


@njit(cache=True)
def poly61(coeffs, x):
    """sum_i coeffs[i] * x**i mod p, Horner from the top coefficient."""
    t = coeffs.shape[0]
    acc = coeffs[t - 1]
    for i in range(t - 2, -1, -1):
        acc = mulmod61(acc, x) + coeffs[i]
        if acc >= _P:
            acc -= _P
    return acc


@njit(cache=True)
def hash_many(coeffs, xs, w):
    out = np.empty(xs.shape[0], dtype=np.int64)
    for i in range(xs.shape[0]):
        out[i] = poly61(coeffs, xs[i]) % w + 1
    return out


@njit(cache=True)
def hash_family_at(coeff_rows, x, w):
    """Evaluate many hash functions (one per row of coefficients) at one point."""
    out = np.empty(coeff_rows.shape[0], dtype=np.int64)
    for r in range(coeff_rows.shape[0]):
        out[r] = poly61(coeff_rows[r], x) % w + 1
    return out


@njit(cache=True)
def splitmix(x):
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def derive(key, purpose, a, b, c, i):
    h = splitmix(key ^ splitmix(np.uint64(purpose)))
    h = splitmix(h ^ np.uint64(a))
    h = splitmix(h ^ np.uint64(b))
    h = splitmix(h ^ np.uint64(c))
    h = splitmix(h ^ np.uint64(i))
    return np.int64(h >> np.uint64(3)) % _P


@njit(cache=True)
def derive_coeffs(key, purpose, a, b, c, t):
    out = np.empty(t, dtype=np.int64)
    for i in range(t):
        out[i] = derive(key, purpose, a, b, c, i)
    return out


@njit(cache=True)
def sketch_group(vals, coords, members, stream, rep, depth, width, bthr, key, out):
    """Run one HeavyHitters sketch on the coordinates ``members`` and mark hits.

    Counters are accumulated per server in member order and merged in server
    order, exactly as a dense per-server sketch followed by a merge would.
    """
    g = members.shape[0]
    s = vals.shape[0]
    est = np.empty((depth, g))
    f2 = np.empty(depth)
    buckets = np.empty(g, dtype=np.int64)
    signs = np.empty(g)
    counter = np.empty(g)
    for q in range(depth):
        bc = derive_coeffs(key, PURPOSE_ZHH, stream, rep, 1 + 2 * q, 2)
        sc = derive_coeffs(key, PURPOSE_ZHH, stream, rep, 2 + 2 * q, 2)
        for u in range(g):
            x = coords[members[u]]
            buckets[u] = poly61(bc, x) % width
            signs[u] = 1.0 if poly61(sc, x) % 2 == 0 else -1.0
        tot = 0.0
        for u in range(g):
            # first member of its bucket computes the merged counter
            first = True
            for v in range(u):
                if buckets[v] == buckets[u]:
                    first = False
                    counter[u] = counter[v]
                    break
            if not first:
                continue
            merged = 0.0
            for t in range(s):
                c = 0.0
                for v in range(u, g):
                    if buckets[v] == buckets[u]:
                        c += signs[v] * vals[t, members[v]]
                merged = merged + c if t > 0 else c
            counter[u] = merged
            tot += merged * merged
        f2[q] = tot
        for u in range(g):
            est[q, u] = signs[u] * counter[u]
    F2 = np.median(f2)
    col = np.empty(depth)
    for u in range(g):
        for q in range(depth):
            col[q] = est[q, u]
        e = np.median(col)
        if e * e > 0.0 and e * e >= F2 / (2.0 * bthr):
            out[members[u]] = True


@njit(cache=True)
def mulmod61_small(a, x):
    """a * x mod p for a < p and 0 <= x < 2^31 (two multiplications)."""
    hi = (a >> 31) * x
    lo = (a & _LO31) * x
    res = (hi >> 30) + ((hi & _LO30) << 31) + (lo & _P) + (lo >> 61)
    res = (res & _P) + (res >> 61)
    if res >= _P:
        res -= _P
    return res


@njit(cache=True)
def pair_hash(c0, c1, x):
    # degree-2 polynomial c0 + c1 x for inputs below 2^31
    acc = mulmod61_small(c1, x) + c0
    if acc >= _P:
        acc -= _P
    return acc


@njit(cache=True)
def poly61_small(coeffs, x):
    """Same value as ``poly61`` for inputs below 2^31."""
    t = coeffs.shape[0]
    acc = coeffs[t - 1]
    for i in range(t - 2, -1, -1):
        acc = mulmod61_small(acc, x) + coeffs[i]
        if acc >= _P:
            acc -= _P
    return acc


def workspace(n):
    """Scratch arrays for ``zhh_mark_ws`` sized for up to ``n`` members.

    Returns (tab, once, twice, kb, fslot, multi, hit, scr). ``tab`` is the
    exact grouping table (int32, all -1); ``once``/``twice`` are a two-bit
    prefilter per slot (uint64 bit words, all zero). Both are left in that
    state by every call, so one workspace serves many calls. ``scr`` holds
    the int64 rows used by ``zest_core``; rows 6 and 7 are a fixed
    ``arange`` and a fixed zero row. Reusing the buffers avoids fresh page
    faults on every estimator call, which dominate at this size.
    """
    n = max(int(n), 1)
    cap = 1
    while cap < 2 * n:
        cap *= 2
    fbits = 64
    while fbits < 4 * n and fbits < (1 << 22):
        fbits *= 2
    return (np.full(cap, -1, dtype=np.int32), np.zeros(fbits // 64, dtype=np.uint64),
            np.zeros(fbits // 64, dtype=np.uint64), np.empty(n, dtype=np.int64),
            np.empty(n, dtype=np.int64), np.empty(n, dtype=np.int64),
            np.zeros(n, dtype=np.bool_), _scratch(n))


def _scratch(n):
    scr = np.zeros((8, n + 1), dtype=np.int64)
    scr[6] = np.arange(n + 1)
    return scr


@njit(cache=True)
def zhh_mark(vals, coords, members, inst, stream, reps, nbuckets, depth, width, bthr, key, out,
             tab, once, twice, kb, fslot, multi, hit):
    """Z-HeavyHitters over every instance ``inst[u]`` at once; hits set ``out``.

    Each repetition hashes members into ``nbuckets`` outer buckets with one
    pairwise hash shared by all instances; a group is an (instance, bucket)
    pair.  Singleton groups are decided in closed form: a lone coordinate is
    reported exactly when its aggregate value is nonzero, which is what the
    sketch would return since no other coordinate touches its counters.
    """
    flags = np.zeros(out.shape[0], dtype=np.int64)
    zhh_mark_ws(vals, coords, members, inst, stream, reps, nbuckets, depth, width, bthr, key,
                flags, 1, tab, once, twice, kb, fslot, multi, hit)
    for i in range(out.shape[0]):
        if flags[i] != 0:
            out[i] = True


@njit(cache=True)
def zhh_mark_ws(vals, coords, members, inst, stream, reps, nbuckets, depth, width, bthr, key,
                flags, bit, tab, once, twice, kb, fslot, multi, hit):
    """Workspace version of ``zhh_mark``; hits set ``bit`` in ``flags``.

    A member whose prefilter slot is hit once cannot share its group with
    anyone and is settled directly; the rest go through the exact grouping
    table.
    """
    n = members.shape[0]
    if n == 0:
        return
    fmask = once.shape[0] * 64 - 1
    s = vals.shape[0]
    one = np.uint64(1)
    for rep in range(reps):
        c0 = derive(key, PURPOSE_ZHH, stream, rep, 0, 0)
        c1 = derive(key, PURPOSE_ZHH, stream, rep, 0, 1)
        for u in range(n):
            b = pair_hash(c0, c1, coords[members[u]]) % nbuckets
            kb[u] = b
            fs = (b ^ (inst[u] * 0x9E3779B97F4A7C1)) & fmask
            fslot[u] = fs
            w = fs >> 6
            mk = one << np.uint64(fs & 63)
            if once[w] & mk:
                twice[w] |= mk
            else:
                once[w] |= mk
        nm = 0
        for u in range(n):
            fs = fslot[u]
            if twice[fs >> 6] & (one << np.uint64(fs & 63)):
                multi[nm] = u
                nm += 1
            else:
                m = members[u]
                acc = 0.0
                for t in range(s):
                    acc += vals[t, m]
                if acc != 0.0:
                    flags[m] |= bit
        for u in range(n):
            w = fslot[u] >> 6
            once[w] = 0
            twice[w] = 0
        if nm == 0:
            continue
        _group_exact(vals, coords, members, inst, kb, multi[:nm], stream, rep, depth, width,
                     bthr, key, flags, bit, tab, hit)


@njit(cache=True)
def _group_exact(vals, coords, members, inst, kb, sub, stream, rep, depth, width, bthr, key,
                 flags, bit, tab, hit):
    n = sub.shape[0]
    mask = tab.shape[0] - 1
    s = vals.shape[0]
    cnt = np.zeros(n, dtype=np.int64)
    nxt = np.full(n, -1, dtype=np.int64)
    last = np.empty(n, dtype=np.int64)
    slots = np.empty(n, dtype=np.int64)
    for a in range(n):
        u = sub[a]
        b = kb[u]
        iv = inst[u]
        slot = (b ^ (iv * 0x9E3779B97F4A7C1)) & mask
        while True:
            v = tab[slot]
            if v < 0:
                tab[slot] = a
                cnt[a] = 1
                last[a] = a
                slots[a] = slot
                break
            if kb[sub[v]] == b and inst[sub[v]] == iv:
                cnt[v] += 1
                nxt[last[v]] = a
                last[v] = a
                break
            slot = (slot + 1) & mask
    for a in range(n):
        c = cnt[a]
        if c == 0:
            continue
        tab[slots[a]] = -1
        if c == 1:
            m = members[sub[a]]
            acc = 0.0
            for t in range(s):
                acc += vals[t, m]
            if acc != 0.0:
                flags[m] |= bit
            continue
        grp = np.empty(c, dtype=np.int64)
        v = a
        for q in range(c):
            grp[q] = members[sub[v]]
            v = nxt[v]
        grp.sort()
        for q in range(c):
            hit[grp[q]] = False
        sketch_group(vals, coords, grp, stream, rep, depth, width, bthr, key, hit)
        for q in range(c):
            if hit[grp[q]]:
                flags[grp[q]] |= bit


@njit(cache=True)
def zest_core(vals, coords, key, reps0, nbuckets, depth, width, bthr,
              levels, e_reps, wbuckets, reps_lvl, gdom, gdeg, window_lo,
              tab, once, twice, kb, fslot, multi, hit, scr):
    """Round one of the estimator.

    ``vals`` is s x n (local values of the n active coordinates), ``coords``
    their 1-based positions in the full vector.  Returns per-coordinate
    flags (bit 0: top-level heavy set D, bit j: level set D_j), the g
    values, and the size of every D_j.

    A level whose whole member set S_j is already inside D and smaller than
    ``window_lo`` is not sketched: D_j is a subset of S_j, so it adds nothing
    to the candidate list, and no class count there can reach the window.
    Its flag bit and size are then left at zero.

    The returned flags and g values are views into ``scr`` and are
    overwritten by the next call on the same workspace.
    """
    n = coords.shape[0]
    flags = scr[0, :n]
    flags[:] = 0
    zhh_mark_ws(vals, coords, scr[6, :n], scr[7, :n], 0, reps0, nbuckets,
                depth, width, bthr, key, flags, 1, tab, once, twice, kb, fslot, multi, hit)
    gc = derive_coeffs(key, PURPOSE_G, 0, 0, 0, gdeg)
    gv = scr[1, :n]
    # deepest level containing each coordinate: S_j = {g <= floor(gdom / 2^j)}
    lev = scr[2, :n]
    per = np.zeros(levels + 2, dtype=np.int64)
    for u in range(n):
        g = poly61_small(gc, coords[u]) % gdom + 1
        gv[u] = g
        j = 0
        while j < levels and j < 62 and g <= (gdom >> (j + 1)):
            j += 1
        lev[u] = j
        per[j] += 1
    # counting sort by level, deepest first, so S_j is a prefix
    start = np.zeros(levels + 2, dtype=np.int64)
    acc = 0
    for j in range(levels, -1, -1):
        start[j] = acc
        acc += per[j]
    order = scr[3, :n]
    for u in range(n):
        order[start[lev[u]]] = u
        start[lev[u]] += 1
    sizes = np.zeros(levels + 1, dtype=np.int64)
    inst = scr[4, :n]
    cnt = 0
    for j in range(levels, 0, -1):
        cnt += per[j]
        sizes[j] = cnt
    # outside[k]: members among order[:k] that are not in D
    outside = scr[5, :n + 1]
    outside[0] = 0
    for k in range(n):
        outside[k + 1] = outside[k] + (1 if (flags[order[k]] & 1) == 0 else 0)
    for j in range(1, levels + 1):
        m = sizes[j]
        if m == 0:
            break
        if m < window_lo and outside[m] == 0:
            break
        mem = order[:m]
        bit = np.int64(1) << j
        for e in range(1, e_reps + 1):
            h0 = derive(key, PURPOSE_LEVEL, j, e, 0, 0)
            h1 = derive(key, PURPOSE_LEVEL, j, e, 0, 1)
            for u in range(m):
                inst[u] = pair_hash(h0, h1, coords[mem[u]]) % wbuckets
            stream = 1 + (j - 1) * e_reps + (e - 1)
            zhh_mark_ws(vals, coords, mem, inst[:m], stream, reps_lvl, nbuckets, depth, width,
                        bthr, key, flags, bit, tab, once, twice, kb, fslot, multi, hit)
    dsize = np.zeros(levels + 1, dtype=np.int64)
    for u in range(n):
        f = flags[u]
        j = 0
        while f != 0:
            if f & 1:
                dsize[j] += 1
            f >>= 1
            j += 1
    return flags, gv, dsize


@njit(cache=True)
def class_counts(flags, cls, valid, nclasses, dsize, window_lo):
    """Per-class member counts of D (row 0) and of every D_j large enough
    for the window rule (row j); other rows stay zero."""
    levels = dsize.shape[0] - 1
    out = np.zeros((levels + 1, nclasses), dtype=np.int64)
    for u in range(flags.shape[0]):
        f = flags[u]
        if f == 0 or not valid[u]:
            continue
        c = cls[u]
        if f & 1:
            out[0, c] += 1
        f >>= 1
        j = 1
        while f != 0:
            if (f & 1) and dsize[j] >= window_lo:
                out[j, c] += 1
            f >>= 1
            j += 1
    return out


@njit(cache=True)
def pick_min_g(flags, cls, valid, gv, pos, target):
    """Listed valid member of class ``target`` with the smallest g (ties to
    the smaller position); -1 when there is none."""
    best = -1
    for u in range(flags.shape[0]):
        if flags[u] == 0 or not valid[u] or cls[u] != target:
            continue
        if best < 0 or gv[u] < gv[best] or (gv[u] == gv[best] and pos[u] < pos[best]):
            best = u
    return best
