"""Compiled inner loops for the group-lasso solvers.

All kernels work on the Gram form of the loss

    F(B) = 1/2 tr(B' S B) - tr(B' L) + lam * sum_j v_j ||B_j||

and keep the negative gradient G = L - S B up to date, so a row update costs
O(p q) and rows that stay at zero cost O(q) to check.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _row_update(S, G, B, j, thr):
    # returns the largest absolute change in row j
    p, q = B.shape
    sjj = S[j, j]
    nrm = 0.0
    for k in range(q):
        z = G[j, k] + sjj * B[j, k]
        nrm += z * z
    nrm = np.sqrt(nrm)
    if sjj <= 0.0 or nrm <= thr:
        scale = 0.0
    else:
        scale = (1.0 - thr / nrm) / sjj
    change = 0.0
    for k in range(q):
        new = scale * (G[j, k] + sjj * B[j, k])
        d = new - B[j, k]
        if d != 0.0:
            for i in range(p):
                G[i, k] -= S[i, j] * d
            B[j, k] = new
            if abs(d) > change:
                change = abs(d)
    return change


@njit(cache=True)
def _row_norm(B, j):
    s = 0.0
    for k in range(B.shape[1]):
        s += B[j, k] * B[j, k]
    return np.sqrt(s)


@njit(cache=True)
def _sweep(S, G, B, thr, rows, tol):
    # one pass over ``rows``.  With tol > 0 a sweep passes when every block
    # moved by at most tol * (1 + ||row||); with tol < 0 it passes when every
    # S_jj * change^2 is at most -tol (objective-scale rule).
    ok = True
    for r in range(rows.shape[0]):
        j = rows[r]
        ch = _row_update(S, G, B, j, thr[j])
        if tol > 0:
            if ch > tol * (1.0 + _row_norm(B, j)):
                ok = False
        elif S[j, j] * ch * ch > -tol:
            ok = False
    return ok


@njit(cache=True)
def _objective(S, L, B, thr):
    p, q = B.shape
    val = 0.0
    for j in range(p):
        for k in range(q):
            if B[j, k] != 0.0:
                sb = 0.0
                for i in range(p):
                    sb += S[j, i] * B[i, k]
                val += B[j, k] * (0.5 * sb - L[j, k])
        if thr[j] > 0.0:
            val += thr[j] * _row_norm(B, j)
    return val


@njit(cache=True)
def group_cd(S, L, thr, B0, tol, max_sweeps, trace):
    """Block coordinate descent with an active-set strategy.

    ``thr`` holds lam * v_j per row.  Returns (B, sweeps, converged, objs)
    where ``objs`` records the objective after every sweep when ``trace``.
    """
    p, q = L.shape
    B = B0.copy()
    G = L.copy()
    for j in range(p):
        for k in range(q):
            if B[j, k] != 0.0:
                for i in range(p):
                    G[i, k] -= S[i, j] * B[j, k]
    all_rows = np.arange(p)
    objs = np.empty(max_sweeps + 1)
    n_obj = 0
    if trace:
        objs[0] = _objective(S, L, B, thr)
        n_obj = 1
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        ok = _sweep(S, G, B, thr, all_rows, tol)
        sweeps += 1
        if trace:
            objs[n_obj] = _objective(S, L, B, thr)
            n_obj += 1
        if ok:
            converged = True
            break
        # iterate on the current support until it settles
        cnt = 0
        for j in range(p):
            if _row_norm(B, j) > 0.0:
                cnt += 1
        act = np.empty(cnt, dtype=np.int64)
        cnt = 0
        for j in range(p):
            if _row_norm(B, j) > 0.0:
                act[cnt] = j
                cnt += 1
        while sweeps < max_sweeps:
            ok = _sweep(S, G, B, thr, act, tol)
            sweeps += 1
            if trace:
                objs[n_obj] = _objective(S, L, B, thr)
                n_obj += 1
            if ok:
                break
    return B, sweeps, converged, objs[:n_obj]


@njit(cache=True)
def lasso_paths(S, L, lams, v, null, rel_tol, max_sweeps, kstop, sat):
    """Independent single-response lasso paths for every column of L.

    ``lams`` is q x K (decreasing along each row); the fit for grid point k
    warm-starts from grid point k-1 and column c stops after grid point
    ``kstop[c]``.  Sweeps stop when every S_jj * change^2 is at most
    ``rel_tol * null[c]`` (null[c] is the loss of the zero fit).  When the
    fit explains more than a fraction ``sat`` of null[c] the remaining grid
    points reuse the current fit.  Returns (coef K x p x q, worst sweep
    count, number of grid points that hit ``max_sweeps``).
    """
    p, q = L.shape
    K = lams.shape[1]
    out = np.zeros((K, p, q))
    worst = 0
    n_fail = 0
    thr = np.empty(p)
    for c in range(q):
        b = np.zeros((p, 1))
        l = np.empty((p, 1))
        for j in range(p):
            l[j, 0] = L[j, c]
        saturated = False
        for k in range(kstop[c] + 1):
            if saturated:
                for j in range(p):
                    out[k, j, c] = b[j, 0]
                continue
            for j in range(p):
                thr[j] = lams[c, k] * v[j]
            b, sw, conv, _ = group_cd(S, l, thr, b, -rel_tol * null[c], max_sweeps, False)
            fit = 0.0
            for j in range(p):
                if b[j, 0] != 0.0:
                    sb = 0.0
                    for i in range(p):
                        sb += S[j, i] * b[i, 0]
                    fit += b[j, 0] * (l[j, 0] - 0.5 * sb)
            if fit > sat * null[c]:
                saturated = True
            if sw > worst:
                worst = sw
            if not conv:
                n_fail += 1
            for j in range(p):
                out[k, j, c] = b[j, 0]
    return out, worst, n_fail


@njit(cache=True)
def row_soft_threshold(A, thr):
    p, q = A.shape
    out = np.zeros_like(A)
    for j in range(p):
        nrm = _row_norm(A, j)
        if nrm > thr[j]:
            s = 1.0 - thr[j] / nrm
            for k in range(q):
                out[j, k] = s * A[j, k]
    return out
