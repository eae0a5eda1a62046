"""Compiled inner loops for the blockwise row updates.

Layout shared by every kernel:

    S, P   (n, R, C)  linear scores and within-block softmax probabilities
    LF     (n, R)     log f_r(Y_i | x_i), summed over responses
    yidx   (n, M)     column of the observed category inside C
    W      (n, R)     observation weights (posterior / n)
    active (R,)       components taking part in the fit

All loops run in a fixed order, so results are bit-reproducible.
"""

import numpy as np
from numba import njit

GLOBAL, LOCAL, SEP_GROUP, SEP_L1 = 0, 1, 2, 3


@njit(cache=True, error_model="numpy")
def _softmax_row(s, p, offsets, ys):
    """Block softmax of one score row into ``p``; returns the log density of ``ys``."""
    M = offsets.shape[0] - 1
    acc = 0.0
    prod = 1.0
    for m in range(M):
        lo = offsets[m]
        hi = offsets[m + 1]
        mx = s[lo]
        for c in range(lo + 1, hi):
            if s[c] > mx:
                mx = s[c]
        tot = 0.0
        for c in range(lo, hi):
            e = np.exp(s[c] - mx)
            p[c] = e
            tot += e
        inv = 1.0 / tot
        for c in range(lo, hi):
            p[c] *= inv
        acc += s[ys[m]] - mx
        prod *= tot
        if prod > 1e280:
            acc -= np.log(prod)
            prod = 1.0
    return acc - np.log(prod)


@njit(cache=True, error_model="numpy")
def refresh(S, offsets, yidx, active, P, LF):
    n, R, _ = S.shape
    for i in range(n):
        for r in range(R):
            if active[r]:
                LF[i, r] = _softmax_row(S[i, r], P[i, r], offsets, yidx[i])
            else:
                LF[i, r] = 0.0


@njit(cache=True, error_model="numpy")
def weighted_loglik(LF, W, active):
    n, R = LF.shape
    total = 0.0
    for i in range(n):
        for r in range(R):
            if active[r] and W[i, r] != 0.0:
                total += W[i, r] * LF[i, r]
    return total


@njit(cache=True, error_model="numpy")
def row_gradient(P, xj, yidx, W, active, G):
    n, R, C = P.shape
    M = yidx.shape[1]
    G[:, :] = 0.0
    for i in range(n):
        xi = xj[i]
        if xi == 0.0:
            continue
        for r in range(R):
            w = W[i, r]
            if not active[r] or w == 0.0:
                continue
            a = w * xi
            pr = P[i, r]
            g = G[r]
            for c in range(C):
                g[c] -= a * pr[c]
            for m in range(M):
                g[yidx[i, m]] += a


@njit(cache=True, error_model="numpy")
def trial_step(S, P, LF, xj, D, offsets, yidx, W, active, S2, P2, LF2):
    """Fill ``S2, P2, LF2`` for scores ``S + outer(xj, D)``.

    Returns the new weighted log-likelihood. Components whose block of D
    is zero (or that are inactive) are copied unchanged.
    """
    n, R, C = S.shape
    M = offsets.shape[0] - 1
    changed = np.zeros(R, dtype=np.bool_)
    for r in range(R):
        if active[r]:
            for c in range(C):
                if D[r, c] != 0.0:
                    changed[r] = True
                    break
    total = 0.0
    for i in range(n):
        xi = xj[i]
        for r in range(R):
            s1 = S[i, r]
            s2 = S2[i, r]
            p2 = P2[i, r]
            if not changed[r]:
                s2[:] = s1
                p2[:] = P[i, r]
                LF2[i, r] = LF[i, r]
            else:
                d = D[r]
                acc = 0.0
                prod = 1.0
                for m in range(M):
                    lo = offsets[m]
                    hi = offsets[m + 1]
                    mx = -np.inf
                    for c in range(lo, hi):
                        v = s1[c] + xi * d[c]
                        s2[c] = v
                        if v > mx:
                            mx = v
                    tot = 0.0
                    for c in range(lo, hi):
                        e = np.exp(s2[c] - mx)
                        p2[c] = e
                        tot += e
                    inv = 1.0 / tot
                    for c in range(lo, hi):
                        p2[c] *= inv
                    acc += s2[yidx[i, m]] - mx
                    prod *= tot
                    if prod > 1e280:
                        acc -= np.log(prod)
                        prod = 1.0
                LF2[i, r] = acc - np.log(prod)
            if active[r] and W[i, r] != 0.0:
                total += W[i, r] * LF2[i, r]
    return total


@njit(cache=True, error_model="numpy")
def _shrink_group(u, out, r, lo, hi, thresh):
    s = 0.0
    for c in range(lo, hi):
        s += u[r, c] * u[r, c]
    norm = np.sqrt(s)
    if norm <= thresh:
        for c in range(lo, hi):
            out[r, c] = 0.0
    else:
        f = 1.0 - thresh / norm
        for c in range(lo, hi):
            out[r, c] = f * u[r, c]


@njit(cache=True, error_model="numpy")
def prox(u, lam, tau, kind, offsets, out):
    R, C = u.shape
    M = offsets.shape[0] - 1
    if kind == GLOBAL:
        s = 0.0
        for r in range(R):
            for c in range(C):
                s += u[r, c] * u[r, c]
        norm = np.sqrt(s)
        t = lam[0] * tau
        f = 0.0 if norm <= t else 1.0 - t / norm
        for r in range(R):
            for c in range(C):
                out[r, c] = f * u[r, c]
    elif kind == LOCAL:
        for r in range(R):
            _shrink_group(u, out, r, 0, C, lam[0] * tau)
    else:
        for m in range(M):
            t = lam[m] * tau
            for r in range(R):
                if kind == SEP_GROUP:
                    _shrink_group(u, out, r, offsets[m], offsets[m + 1], t)
                else:
                    for c in range(offsets[m], offsets[m + 1]):
                        a = abs(u[r, c]) - t
                        if a <= 0.0:
                            out[r, c] = 0.0
                        elif u[r, c] > 0:
                            out[r, c] = a
                        else:
                            out[r, c] = -a


@njit(cache=True, error_model="numpy")
def sweep(S, P, LF, S2, P2, LF2, XT, coef, W, yidx, offsets, active, perm,
          penalized, lam, kind, taus, init_step, shrink, max_halvings, fixed, slack, ll):
    """One pass of proximal row updates in the order ``perm``.

    Accepted trials swap the primary and scratch buffers instead of copying.
    Returns ``(loglik, rejections, status, j, swaps)``; status is 0 on
    success, 1 when the line search for row j ran out of halvings and 2 when
    the objective became non-finite at row j. An odd ``swaps`` means the
    current state lives in the buffers passed as scratch.
    """
    p, R, C = coef.shape
    zero_lam = np.zeros_like(lam)
    G = np.empty((R, C))
    U = np.empty((R, C))
    NEW = np.empty((R, C))
    D = np.empty((R, C))
    rejections = 0
    swaps = 0
    for jj in range(p):
        j = perm[jj]
        xj = XT[j]
        tau_th = taus[j]
        if not np.isfinite(tau_th):
            continue
        row_gradient(P, xj, yidx, W, active, G)
        lj = lam if penalized[j] else zero_lam
        tau = tau_th if fixed else init_step
        done = False
        for k in range(max_halvings + 1):
            for r in range(R):
                for c in range(C):
                    U[r, c] = coef[j, r, c] + tau * G[r, c]
            prox(U, lj, tau, kind, offsets, NEW)
            gd = 0.0
            dd = 0.0
            nz = False
            for r in range(R):
                for c in range(C):
                    if not active[r]:
                        NEW[r, c] = coef[j, r, c]
                    d = NEW[r, c] - coef[j, r, c]
                    D[r, c] = d
                    if d != 0.0:
                        nz = True
                    gd += G[r, c] * d
                    dd += d * d
            if not nz:
                rejections += k
                done = True
                break
            ll_new = trial_step(S, P, LF, xj, D, offsets, yidx, W, active, S2, P2, LF2)
            if not np.isfinite(ll_new):
                return ll, rejections, 2, j, swaps
            if fixed or ll_new >= ll + gd - dd / (2.0 * tau) - slack * (1.0 + abs(ll)):
                S, S2 = S2, S
                P, P2 = P2, P
                LF, LF2 = LF2, LF
                swaps += 1
                for r in range(R):
                    for c in range(C):
                        coef[j, r, c] = NEW[r, c]
                ll = ll_new
                rejections += k
                done = True
                break
            tau *= shrink
        if not done:
            return ll, rejections, 1, j, swaps
    return ll, rejections, 0, -1, swaps
