"""Fused loops for the dual sweeps (numba).

The column caps and the row log-sums of ``T = min(a_f - C_fg/eps, kappa_g)``
are computed without forming any F x G temporary.
"""
from __future__ import annotations

import math

import numba as nb
import numpy as np

# entries this far (in scaled units) below their row maximum are below double precision
_NEGLIGIBLE = 40.0


@nb.njit(cache=True)
def water_levels(C, inv_eps, a, budget, max_iter=200, kappa0=None):
    """Column water levels of ``L = a[:, None] - C * inv_eps`` spending ``budget`` each.

    Newton's method on the convex decreasing ``h(k) = sum_f (L_fg - k)_+ - budget``.
    The start is ``max_f L_fg - budget`` (left of the root) or, when given,
    ``kappa0``; one Newton step from any point with a nonempty active set lands
    left of the root, after which the iterates increase monotonically.
    """
    F, G = C.shape
    colmax = np.full(G, -np.inf)
    warm = False
    if kappa0 is not None:
        warm = budget > 0.0
    kappa = colmax.copy()
    if warm:
        kappa[:] = kappa0
    else:
        for f in range(F):
            for g in range(G):
                v = a[f] - C[f, g] * inv_eps
                if v > kappa[g]:
                    kappa[g] = v
        if budget <= 0.0:
            return kappa
        for g in range(G):
            kappa[g] -= budget
    S = np.empty(G)
    n = np.empty(G)
    done = np.zeros(G, dtype=np.bool_)
    first = warm
    for _ in range(max_iter):
        S[:] = 0.0
        n[:] = 0.0
        for f in range(F):
            af = a[f]
            for g in range(G):
                v = af - C[f, g] * inv_eps
                if v > colmax[g]:
                    colmax[g] = v
                if v > kappa[g]:
                    S[g] += v
                    n[g] += 1.0
        moved = False
        for g in range(G):
            if done[g]:
                continue
            if n[g] == 0.0:
                # warm start above every entry: restart from the column maximum
                kappa[g] = colmax[g] - budget
                moved = True
                continue
            new = (S[g] - budget) / n[g]
            if first:
                if new != kappa[g]:
                    moved = True
                kappa[g] = new
            elif new > kappa[g] + 1e-15 * abs(kappa[g]):
                kappa[g] = new
                moved = True
            else:
                if new > kappa[g]:
                    kappa[g] = new
                done[g] = True
        first = False
        if not moved:
            break
    return kappa


@nb.njit(cache=True)
def row_logsums(C, inv_eps, a, kappa):
    """``log sum_g exp(T_fg)`` per row and ``sum_fg exp(T_fg)``."""
    F, G = C.shape
    out = np.empty(F)
    total = 0.0
    for f in range(F):
        af = a[f]
        m = -np.inf
        for g in range(G):
            v = af - C[f, g] * inv_eps
            if v > kappa[g]:
                v = kappa[g]
            if v > m:
                m = v
        s = 0.0
        lo = m - _NEGLIGIBLE
        for g in range(G):
            v = af - C[f, g] * inv_eps
            if v > kappa[g]:
                v = kappa[g]
            if v > lo:
                s += math.exp(v - m)
        out[f] = m + math.log(s)
        if out[f] > -745.0:
            total += math.exp(out[f])
    return out, total


@nb.njit(cache=True)
def plan_log(C, inv_eps, a, kappa):
    F, G = C.shape
    T = np.empty((F, G))
    for f in range(F):
        for g in range(G):
            v = a[f] - C[f, g] * inv_eps
            T[f, g] = v if v < kappa[g] else kappa[g]
    return T


@nb.njit(cache=True)
def transport_terms(C, inv_eps, a, kappa, shift):
    """Terms of the transport objective for ``log M = min(L, kappa) + shift[:, None]``.

    Returns ``(<C, M>, sum M log M - M + 1, sum_g max_f M, row sums of M)``.
    """
    F, G = C.shape
    cost = 0.0
    ent = 0.0
    colmax = np.zeros(G)
    rows = np.zeros(F)
    for f in range(F):
        af = a[f]
        sf = shift[f]
        rs = 0.0
        for g in range(G):
            v = af - C[f, g] * inv_eps
            if v > kappa[g]:
                v = kappa[g]
            v += sf
            if v < -745.0:
                ent += 1.0
                continue
            m = math.exp(v)
            cost += C[f, g] * m
            ent += m * v - m + 1.0
            rs += m
            if m > colmax[g]:
                colmax[g] = m
        rows[f] = rs
    return cost, ent, colmax.sum(), rows


@nb.njit(cache=True)
def wright_omega(x):
    """Elementwise ``w > 0`` with ``w + log w = x`` (Newton on ``t = log w``)."""
    out = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        xi = x[i]
        if xi < -2.0:
            t = xi
        elif xi > 3.0:
            t = math.log(xi - math.log(xi))
        else:
            t = 0.0
        for _ in range(100):
            et = math.exp(t)
            step = (et + t - xi) / (et + 1.0)
            t -= step
            if abs(step) <= 1e-16 * max(1.0, abs(t)):
                break
        out[i] = math.exp(t)
    return out


@nb.njit(cache=True)
def row_sweep(C, inv_eps, a, kappa, idx_f, idx_g, vals):
    """Row log-sums of ``exp(T)`` plus what the objective of the shifted plan needs.

    For each row returns the log-sum ``lr``, ``c1 = sum_g C exp(T - m)`` and
    ``t1 = sum_g (T - m) exp(T - m)`` with ``m`` the row maximum, and stores the
    entries within the negligible range of their row maximum in the buffers
    (``idx_f``, ``idx_g``, ``vals`` = ``T``). Returns ``(lr, m, c1, t1, s, count)``.
    """
    F, G = C.shape
    lr = np.empty(F)
    mx = np.empty(F)
    c1 = np.empty(F)
    t1 = np.empty(F)
    ss = np.empty(F)
    cnt = 0
    cap = idx_f.shape[0]
    for f in range(F):
        af = a[f]
        m = -np.inf
        for g in range(G):
            v = af - C[f, g] * inv_eps
            if v > kappa[g]:
                v = kappa[g]
            if v > m:
                m = v
        s = 0.0
        sc = 0.0
        st = 0.0
        lo = m - _NEGLIGIBLE
        for g in range(G):
            v = af - C[f, g] * inv_eps
            if v > kappa[g]:
                v = kappa[g]
            if v > lo:
                d = v - m
                e = math.exp(d)
                s += e
                sc += C[f, g] * e
                st += d * e
                if cnt < cap:
                    idx_f[cnt] = f
                    idx_g[cnt] = g
                    vals[cnt] = v
                cnt += 1
        lr[f] = m + math.log(s)
        mx[f] = m
        c1[f] = sc
        t1[f] = st
        ss[f] = s
    return lr, mx, c1, t1, ss, cnt


@nb.njit(cache=True)
def column_max_log(idx_f, idx_g, vals, count, shift, G):
    out = np.full(G, -np.inf)
    for i in range(count):
        v = vals[i] + shift[idx_f[i]]
        g = idx_g[i]
        if v > out[g]:
            out[g] = v
    return out
