"""Numba kernels over the half-Z tile layout.

Tiles exist only for i < j and p != q. Tile ``(i, j, p, q)`` holds the
``(n-2) x (n-2)`` block of z coefficients over ``k not in {i, j}`` (rows)
and ``r not in {p, q}`` (columns), in increasing order.

A symmetric family is a facility triple ``a < b < c`` with distinct
locations ``la, lb, lc``. Its three stored ("upper") members are

    tile(a, b, la, lb)[c, lc]
    tile(a, c, la, lc)[b, lb]
    tile(b, c, lb, lc)[a, la]

Each z entry belongs to exactly one family, so a kernel that owns a set of
families can write all of their entries without locking.
"""
import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def pair_id(i, j, n):
    return i * (2 * n - i - 1) // 2 + (j - i - 1)


@nb.njit(cache=True, inline="always")
def tile_id(i, j, p, q, n):
    qq = q - 1 if q > p else q
    return pair_id(i, j, n) * (n * (n - 1)) + p * (n - 1) + qq


@nb.njit(cache=True, inline="always")
def local(k, i, j):
    r = k
    if k > i:
        r -= 1
    if k > j:
        r -= 1
    return r


@nb.njit(cache=True, nogil=True)
def family_update(D, ZU, ZV, s_tile, n, kz, phi, slow, pa, pb, lo, hi):
    """Type 1 and Type 2 ascent over the families owned by pairs ``lo..hi-1``.

    Every upper member gives away ``kz`` of its slack plus its y share
    ``s_tile / (n-2)``; the next member in cyclic order receives ``phi`` of
    that and the one after it ``1 - phi``. In slow mode the y share is taken
    out of the tile itself (it lives in the tile's Z-LAP value); in fast mode
    it was already taken out of the y coefficient by the caller.
    """
    inv = 1.0 / (n - 2)
    psi = 1.0 - phi
    for pid in range(lo, hi):
        a = pa[pid]
        b = pb[pid]
        for c in range(b + 1, n):
            r1 = c - 2
            r2 = b - 1
            r3 = a
            for la in range(n):
                for lb in range(n):
                    if lb == la:
                        continue
                    t1 = tile_id(a, b, la, lb, n)
                    y1 = s_tile[t1] * inv
                    for lc in range(n):
                        if lc == la or lc == lb:
                            continue
                        t2 = tile_id(a, c, la, lc, n)
                        t3 = tile_id(b, c, lb, lc, n)
                        c1 = local(lc, la, lb)
                        c2 = local(lb, la, lc)
                        c3 = local(la, lb, lc)
                        x1 = D[t1, r1, c1]
                        x2 = D[t2, r2, c2]
                        x3 = D[t3, r3, c3]
                        g1 = max(x1 - ZU[t1, r1] - ZV[t1, c1], 0.0)
                        g2 = max(x2 - ZU[t2, r2] - ZV[t2, c2], 0.0)
                        g3 = max(x3 - ZU[t3, r3] - ZV[t3, c3], 0.0)
                        y2 = s_tile[t2] * inv
                        y3 = s_tile[t3] * inv
                        d1 = kz * g1 + y1
                        d2 = kz * g2 + y2
                        d3 = kz * g3 + y3
                        if slow:
                            o1, o2, o3 = d1, d2, d3
                        else:
                            o1, o2, o3 = kz * g1, kz * g2, kz * g3
                        D[t1, r1, c1] = x1 - o1 + phi * d3 + psi * d2
                        D[t2, r2, c2] = x2 - o2 + phi * d1 + psi * d3
                        D[t3, r3, c3] = x3 - o3 + phi * d2 + psi * d1


@nb.njit(cache=True, nogil=True)
def second_phase(D, ZU, ZV, n, tol, pa, pb, skipped, lo, hi):
    """Per family: members with slack > tol drop by their slack and the total
    is spread evenly over the binding members. ``skipped[pid]`` counts
    families with no binding member (left untouched)."""
    for pid in range(lo, hi):
        a = pa[pid]
        b = pb[pid]
        cnt = 0
        for c in range(b + 1, n):
            for la in range(n):
                for lb in range(n):
                    if lb == la:
                        continue
                    t1 = tile_id(a, b, la, lb, n)
                    for lc in range(n):
                        if lc == la or lc == lb:
                            continue
                        t2 = tile_id(a, c, la, lc, n)
                        t3 = tile_id(b, c, lb, lc, n)
                        r1, c1 = c - 2, local(lc, la, lb)
                        r2, c2 = b - 1, local(lb, la, lc)
                        r3, c3 = a, local(la, lb, lc)
                        g1 = D[t1, r1, c1] - ZU[t1, r1] - ZV[t1, c1]
                        g2 = D[t2, r2, c2] - ZU[t2, r2] - ZV[t2, c2]
                        g3 = D[t3, r3, c3] - ZU[t3, r3] - ZV[t3, c3]
                        n1, n2, n3 = g1 > tol, g2 > tol, g3 > tol
                        k = int(n1) + int(n2) + int(n3)
                        if k == 0:
                            continue
                        if k == 3:
                            cnt += 1
                            continue
                        total = 0.0
                        if n1:
                            total += g1
                        if n2:
                            total += g2
                        if n3:
                            total += g3
                        share = total / (3 - k)
                        D[t1, r1, c1] += -g1 if n1 else share
                        D[t2, r2, c2] += -g2 if n2 else share
                        D[t3, r3, c3] += -g3 if n3 else share
        skipped[pid] = cnt


@nb.njit(cache=True, nogil=True)
def induced_z(D, ZU, ZV, perm, n):
    """Sum of the z coefficients a permutation switches on, and the largest
    z slack among them."""
    total = 0.0
    worst = -np.inf
    for a in range(n):
        for b in range(a + 1, n):
            pa_, pb_ = perm[a], perm[b]
            t = tile_id(a, b, pa_, pb_, n)
            for c in range(n):
                if c == a or c == b:
                    continue
                r = local(c, a, b)
                col = local(perm[c], pa_, pb_)
                v = D[t, r, col]
                total += v
                s = v - ZU[t, r] - ZV[t, col]
                if s > worst:
                    worst = s
    return total, worst


@nb.njit(cache=True)
def restrict_tiles(D, n, f, l, out):
    """Copy the tiles of a store with facility ``f`` fixed at location ``l``
    into the ``n-1`` layout of ``out`` (rows of f, columns of l removed)."""
    n1 = n - 1
    for i1 in range(n1):
        i = i1 + 1 if i1 >= f else i1
        for j1 in range(i1 + 1, n1):
            j = j1 + 1 if j1 >= f else j1
            rf = local(f, i, j)
            for p1 in range(n1):
                p = p1 + 1 if p1 >= l else p1
                for q1 in range(n1):
                    if q1 == p1:
                        continue
                    q = q1 + 1 if q1 >= l else q1
                    cl = local(l, p, q)
                    src = tile_id(i, j, p, q, n)
                    dst = tile_id(i1, j1, p1, q1, n1)
                    m1 = n1 - 2
                    for r in range(m1):
                        rr = r + 1 if r >= rf else r
                        for c in range(m1):
                            cc = c + 1 if c >= cl else c
                            out[dst, r, c] = D[src, rr, cc]


@nb.njit(cache=True)
def fixed_z_to_y(D, n, f, l, cnew):
    """Fold every z whose triple contains ``(f, l)`` into the y coefficient of
    the other two members, written in child numbering into ``cnew``."""
    for j in range(n):
        if j == f:
            continue
        for k in range(j + 1, n):
            if k == f:
                continue
            for q in range(n):
                if q == l:
                    continue
                for r in range(n):
                    if r == l or r == q:
                        continue
                    # sort the triple (f,l), (j,q), (k,r) by facility
                    if f < j:
                        a, la, b, lb, c, lc = f, l, j, q, k, r
                    elif f < k:
                        a, la, b, lb, c, lc = j, q, f, l, k, r
                    else:
                        a, la, b, lb, c, lc = j, q, k, r, f, l
                    v = (D[tile_id(a, b, la, lb, n), c - 2, local(lc, la, lb)]
                         + D[tile_id(a, c, la, lc, n), b - 1, local(lb, la, lc)]
                         + D[tile_id(b, c, lb, lc, n), a, local(la, lb, lc)])
                    j1 = j - 1 if j > f else j
                    k1 = k - 1 if k > f else k
                    q1 = q - 1 if q > l else q
                    r1 = r - 1 if r > l else r
                    cnew[j1, k1, q1, r1] += v
