"""Compiled per-row kernels shared by the rate and decision modules.

Everything here works on plain float64 arrays and is single threaded, so the
floating-point reduction order of each call is fixed.
"""

import math

import numpy as np
from numba import njit

# projection status codes
PROJ_INSIDE = 0
PROJ_BINDING = 1
PROJ_INFEASIBLE = 2

# DRO row status codes
ROW_FEASIBLE = 1
ROW_EMPTY = 2
ROW_CONSTANT = 3


@njit(cache=True)
def smooth_project(p, q, delta, x):
    """Minimize KL(x, q) over ``{x : tv(x, p) <= delta}``; write x in place.

    The minimizer is ``clip(p, a*q, b*q)`` where ``a`` solves
    ``sum (a q - p)^+ = delta`` and ``b`` solves ``sum (p - b q)^+ = delta``
    once the mass of ``p`` outside the support of ``q`` is removed.
    Returns ``(status, a, b)``.
    """
    m = p.size
    tv = 0.0
    for j in range(m):
        tv += abs(p[j] - q[j])
    tv *= 0.5
    if tv <= delta:
        for j in range(m):
            x[j] = q[j]
        return PROJ_INSIDE, 1.0, 1.0
    zero_mass = 0.0
    npos = 0
    for j in range(m):
        if q[j] > 0.0:
            npos += 1
        else:
            zero_mass += p[j]
    if zero_mass > delta:
        for j in range(m):
            x[j] = 0.0
        return PROJ_INFEASIBLE, 0.0, 0.0
    ratio = np.empty(npos)
    qq = np.empty(npos)
    pp = np.empty(npos)
    k = 0
    for j in range(m):
        if q[j] > 0.0:
            ratio[k] = p[j] / q[j]
            qq[k] = q[j]
            pp[k] = p[j]
            k += 1
    order = np.argsort(ratio, kind="mergesort")
    a = 1.0
    cq = 0.0
    cp = 0.0
    for k in range(npos):
        o = order[k]
        cq += qq[o]
        cp += pp[o]
        a = (delta + cp) / cq
        if k == npos - 1 or a <= ratio[order[k + 1]]:
            break
    need = delta - zero_mass
    b = 0.0
    cq = 0.0
    cp = 0.0
    for k in range(npos - 1, -1, -1):
        o = order[k]
        cq += qq[o]
        cp += pp[o]
        b = (cp - need) / cq
        if k == 0 or b >= ratio[order[k - 1]]:
            break
    if b < 0.0:
        b = 0.0
    for j in range(m):
        if q[j] > 0.0:
            v = a * q[j]
            if v < p[j]:
                v = p[j]
            u = b * q[j]
            if v > u:
                v = u
            x[j] = v
        else:
            x[j] = 0.0
    return PROJ_BINDING, a, b


@njit(cache=True)
def convolve_row(P, K, q):
    n, m = K.shape
    for j in range(m):
        q[j] = 0.0
    for i in range(n):
        pi = P[i]
        if pi != 0.0:
            for j in range(m):
                q[j] += pi * K[i, j]


@njit(cache=True)
def kl_row(x, q):
    s = 0.0
    for j in range(x.size):
        if x[j] > 0.0:
            if q[j] <= 0.0:
                return math.inf
            s += x[j] * math.log(x[j] / q[j])
    return s


@njit(cache=True)
def smoothed_value(P, K, phat, delta, q, x):
    """I^delta(phat, P); fills q = K^T P and the inner minimizer x."""
    convolve_row(P, K, q)
    status, a, b = smooth_project(phat, q, delta, x)
    if status == PROJ_INFEASIBLE:
        return math.inf, status, a, b
    if status == PROJ_INSIDE:
        return 0.0, status, a, b
    return kl_row(x, q), status, a, b


@njit(cache=True)
def smoothed_grad(K, q, x, g):
    """Gradient of P -> I^delta(phat, P), namely -K (x / q)."""
    n, m = K.shape
    for i in range(n):
        s = 0.0
        for j in range(m):
            if q[j] > 0.0:
                s += K[i, j] * (x[j] / q[j])
        g[i] = -s


@njit(cache=True)
def smoothed_hess(K, phat, q, x, status, a, b, H):
    """Hessian of P -> I^delta(phat, P) on the piece containing P."""
    n, m = K.shape
    for i in range(n):
        for k in range(n):
            H[i, k] = 0.0
    if status != PROJ_BINDING:
        return
    qU = 0.0
    qD = 0.0
    for j in range(m):
        if q[j] > 0.0:
            if x[j] > phat[j]:
                qU += q[j]
            elif x[j] < phat[j]:
                qD += q[j]
    kU = np.zeros(n)
    kD = np.zeros(n)
    for j in range(m):
        if q[j] <= 0.0:
            continue
        if x[j] > phat[j]:
            for i in range(n):
                kU[i] += K[i, j]
        elif x[j] < phat[j]:
            for i in range(n):
                kD[i] += K[i, j]
        elif phat[j] > 0.0:
            wj = phat[j] / (q[j] * q[j])
            for i in range(n):
                kij = K[i, j] * wj
                if kij != 0.0:
                    for k in range(n):
                        H[i, k] += kij * K[k, j]
    cu = a / qU if qU > 0.0 else 0.0
    cd = b / qD if qD > 0.0 else 0.0
    for i in range(n):
        for k in range(n):
            H[i, k] += cu * kU[i] * kU[k] + cd * kD[i] * kD[k]


@njit(cache=True)
def cholesky_solve(A, rhs, out):
    """Solve A out = rhs for symmetric positive definite A (A overwritten)."""
    n = A.shape[0]
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= A[j, k] * A[j, k]
        if s <= 0.0:
            return False
        d = math.sqrt(s)
        A[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= A[i, k] * A[j, k]
            A[i, j] = s / d
    for i in range(n):
        s = rhs[i]
        for k in range(i):
            s -= A[i, k] * out[k]
        out[i] = s / A[i, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, n):
            s -= A[k, i] * out[k]
        out[i] = s / A[i, i]
    return True


@njit(cache=True)
def em_step_smoothed(P, K, phat, delta, q, x, Pn):
    """One majorize-minimize step decreasing I^delta(phat, .); returns (value, lower bound)."""
    val, status, a, b = smoothed_value(P, K, phat, delta, q, x)
    n, m = K.shape
    if status == PROJ_INFEASIBLE:
        return val, math.inf
    gmax = -math.inf
    tot = 0.0
    for i in range(n):
        s = 0.0
        for j in range(m):
            if q[j] > 0.0:
                s += K[i, j] * (x[j] / q[j])
        if s > gmax:
            gmax = s
        Pn[i] = P[i] * s
        tot += Pn[i]
    for i in range(n):
        Pn[i] /= tot
    # convexity: I(P*) >= I(P) + min_i grad_i - grad.P with grad.P = -1
    return val, val - (gmax - 1.0)


@njit(cache=True)
def phase_one(K, phat, r, delta, max_iter, P):
    """Find a strictly positive P with I^delta(phat, P) < r, or certify none exists.

    Returns ``ROW_FEASIBLE`` with P filled, or ``ROW_EMPTY``.
    """
    n, m = K.shape
    q = np.empty(m)
    x = np.empty(m)
    Pn = np.empty(n)
    for i in range(n):
        P[i] = 1.0 / n
    target = r * (1.0 - 1e-6)
    found = False
    for it in range(max_iter):
        val, lb = em_step_smoothed(P, K, phat, delta, q, x, Pn)
        if val < target:
            found = True
            break
        if lb > r:
            return ROW_EMPTY
        for i in range(n):
            P[i] = Pn[i]
    if not found:
        return ROW_EMPTY
    positive = True
    for i in range(n):
        if P[i] <= 0.0:
            positive = False
    if positive:
        return ROW_FEASIBLE
    Pm = np.empty(n)
    eps = 1e-3
    while eps > 1e-16:
        for i in range(n):
            Pm[i] = (1.0 - eps) * P[i] + eps / n
        val, status, a, b = smoothed_value(Pm, K, phat, delta, q, x)
        if val < r:
            for i in range(n):
                P[i] = Pm[i]
            return ROW_FEASIBLE
        eps *= 1e-3
    return ROW_EMPTY


@njit(cache=True)
def barrier_objective(c, P, t, r, phi):
    f = -math.log(r - phi)
    for i in range(P.size):
        f -= t * c[i] * P[i] + math.log(P[i])
    return f


@njit(cache=True)
def barrier_solve(c, K, phat, r, delta, P, tol, mu):
    """Maximize c.P over the simplex subject to I^delta(phat, P) <= r.

    ``c`` must be scaled to [0, 1] and ``P`` must be strictly positive and
    strictly feasible on entry; it is updated in place along the central path
    of the log barrier ``-t c.P - log(r - I) - sum log P``.  Stops when the
    duality gap bound ``(n + 1) / t`` drops below ``tol``.  Returns the number
    of Newton steps taken.
    """
    n, m = K.shape
    q = np.empty(m)
    x = np.empty(m)
    g = np.empty(n)
    H = np.empty((n, n))
    A = np.empty((n, n))
    grad = np.empty(n)
    gy = np.empty(n)
    u = np.empty(n)
    v = np.empty(n)
    dP = np.empty(n)
    Pn = np.empty(n)
    qn = np.empty(m)
    xn = np.empty(m)
    t = 1.0
    steps = 0
    while True:
        for inner in range(200):
            phi, status, a, b = smoothed_value(P, K, phat, delta, q, x)
            s = r - phi
            smoothed_grad(K, q, x, g)
            smoothed_hess(K, phat, q, x, status, a, b, H)
            for i in range(n):
                grad[i] = -t * c[i] + g[i] / s - 1.0 / P[i]
                gy[i] = P[i] * grad[i]
            inv_s2 = 1.0 / (s * s)
            for i in range(n):
                for k in range(n):
                    A[i, k] = P[i] * (H[i, k] / s + g[i] * g[k] * inv_s2) * P[k]
                A[i, i] += 1.0
            # dy = -A^{-1}(gy + nu P) with P.dy = 0
            if not cholesky_solve(A, gy, u):
                break
            for i in range(n):
                for k in range(n):
                    A[i, k] = P[i] * (H[i, k] / s + g[i] * g[k] * inv_s2) * P[k]
                A[i, i] += 1.0
            cholesky_solve(A, P, v)
            pu = 0.0
            pv = 0.0
            for i in range(n):
                pu += P[i] * u[i]
                pv += P[i] * v[i]
            nu = -pu / pv
            dec = 0.0
            for i in range(n):
                dP[i] = -P[i] * (u[i] + nu * v[i])
                dec -= grad[i] * dP[i]
            steps += 1
            if dec * 0.5 <= 1e-10:
                break
            f0 = barrier_objective(c, P, t, r, phi)
            step = 1.0
            for i in range(n):
                if dP[i] < 0.0:
                    lim = -0.99 * P[i] / dP[i]
                    if lim < step:
                        step = lim
            moved = False
            for ls in range(60):
                ok = True
                tot = 0.0
                for i in range(n):
                    Pn[i] = P[i] + step * dP[i]
                    tot += Pn[i]
                    if Pn[i] <= 0.0:
                        ok = False
                if ok:
                    # keep rounding drift from leaving the simplex
                    for i in range(n):
                        Pn[i] /= tot
                    phn, stn, an, bn = smoothed_value(Pn, K, phat, delta, qn, xn)
                    if phn < r:
                        fn = barrier_objective(c, Pn, t, r, phn)
                        if fn <= f0 - 0.25 * step * dec:
                            moved = True
                            break
                step *= 0.5
            if not moved:
                break
            for i in range(n):
                P[i] = Pn[i]
        if (n + 1) / t < tol:
            break
        t *= mu
    return steps


@njit(cache=True)
def scale_costs(c, cn):
    lo = c[0]
    hi = c[0]
    for i in range(c.size):
        if c[i] < lo:
            lo = c[i]
        if c[i] > hi:
            hi = c[i]
    span = hi - lo
    for i in range(c.size):
        cn[i] = (c[i] - lo) / span if span > 0.0 else 0.0
    return lo, span


@njit(cache=True)
def dro_value(c, K, phat, r, delta, P_start, tol, mu, P):
    """Worst-case expectation of ``c`` over the smoothed ambiguity set.

    ``P_start`` is a strictly feasible interior point (from ``phase_one``).
    Returns the value ``c.P`` at the final barrier iterate, which is a
    feasible point, so the value is a lower bound within ``tol * span``.
    """
    n = c.size
    cn = np.empty(n)
    lo, span = scale_costs(c, cn)
    for i in range(n):
        P[i] = P_start[i]
    if span <= 0.0:
        return c[0]
    barrier_solve(cn, K, phat, r, delta, P, tol, mu)
    val = 0.0
    for i in range(n):
        val += c[i] * P[i]
    return val


@njit(cache=True)
def dro_prescribe_row(C, K, phat, r, delta, eps, tol, mu, prune, values, solved, W):
    """Evaluate the OT-DRO predictor for every decision row of ``C``.

    With ``prune`` set, a decision whose lower bound (its cost under any
    worst-case witness found so far) already exceeds the best solved value by
    more than ``eps`` is not solved; ``values`` then holds that lower bound and
    ``solved`` is False.  Returns ``(status, z, budget)``; ``W[z]`` holds the
    witness of the chosen decision.
    """
    nz, n = C.shape
    P0 = np.empty(n)
    status = phase_one(K, phat, r, delta, 20000, P0)
    if status == ROW_EMPTY:
        for z in range(nz):
            values[z] = -math.inf
            solved[z] = True
        return ROW_EMPTY, 0, -math.inf
    start = np.empty(nz)
    for z in range(nz):
        s = 0.0
        for i in range(n):
            s += C[z, i] * P0[i]
        start[z] = s
    order = np.argsort(start, kind="mergesort")
    best = math.inf
    nw = 0
    widx = np.empty(nz, dtype=np.int64)
    P = np.empty(n)
    for k in range(nz):
        z = order[k]
        lb = start[z]
        for w in range(nw):
            s = 0.0
            for i in range(n):
                s += C[z, i] * W[widx[w], i]
            if s > lb:
                lb = s
        if prune and lb > best + eps:
            values[z] = lb
            solved[z] = False
            continue
        v = dro_value(C[z], K, phat, r, delta, P0, tol, mu, P)
        if lb > v:
            v = lb
        values[z] = v
        solved[z] = True
        for i in range(n):
            W[z, i] = P[i]
        widx[nw] = z
        nw += 1
        if v < best:
            best = v
    for z in range(nz):
        if solved[z] and values[z] <= best + eps:
            return ROW_FEASIBLE, z, values[z]
    return ROW_FEASIBLE, order[0], values[order[0]]


@njit(cache=True)
def kl_dro_value(c, a, rho, P):
    """sup {c.P : KL(a, P) <= rho} over the simplex, with witness in P.

    Uses the one-dimensional dual ``min_eta eta - exp(-rho) prod (eta - c_i)^a_i``
    written in terms of ``u = eta - max c`` for stability, and bisects on the
    sign of its derivative in ``log u``.
    """
    n = c.size
    cmax = c[0]
    cmin = c[0]
    imax = -1
    for i in range(n):
        if c[i] > cmax:
            cmax = c[i]
        if c[i] < cmin:
            cmin = c[i]
    span = cmax - cmin
    if span <= 0.0:
        for i in range(n):
            P[i] = a[i]
        return cmax
    # argmax of c outside the support of a takes any leftover mass
    for i in range(n):
        if a[i] == 0.0 and (imax < 0 or c[i] > c[imax]):
            imax = i
    e = math.exp(-rho)
    u_hi = e * span / (-math.expm1(-rho)) + span + 1.0
    lo = math.log(span) - 80.0
    hi = math.log(u_hi)

    def mass(u):
        # total mass of the stationary point; sum a = 1 gives 1 - sum a d/(u+d) = sum a u/(u+d)
        L = 0.0
        rest = 0.0
        for i in range(n):
            if a[i] > 0.0:
                d = cmax - c[i]
                L += a[i] * math.log1p(d / u)
                rest += a[i] * u / (u + d)
        return math.exp(L - rho) * rest, L

    m_lo, L = mass(math.exp(lo))
    if m_lo <= 1.0 and imax >= 0 and c[imax] == cmax:
        u = math.exp(lo)
    else:
        for it in range(200):
            mid = 0.5 * (lo + hi)
            m_mid, L = mass(math.exp(mid))
            if m_mid > 1.0:
                lo = mid
            else:
                hi = mid
        u = math.exp(hi)
    m_u, L = mass(u)
    scale = math.exp(L - rho)
    tot = 0.0
    for i in range(n):
        if a[i] > 0.0:
            P[i] = scale * a[i] * u / (u + cmax - c[i])
            tot += P[i]
        else:
            P[i] = 0.0
    if imax >= 0 and tot < 1.0:
        P[imax] += 1.0 - tot
    else:
        for i in range(n):
            P[i] /= tot
    return cmax - u * math.expm1(L - rho)


@njit(cache=True)
def em_deconvolve(phat, K, tol, max_iter, P, trace):
    """Multiplicative EM for max_P sum_j phat_j log (K^T P)_j from the uniform start.

    ``trace`` receives the log-likelihood per iteration (up to its length).
    Returns ``(iterations, converged)``.
    """
    n, m = K.shape
    q = np.empty(m)
    Pn = np.empty(n)
    for i in range(n):
        P[i] = 1.0 / n
    convolve_row(P, K, q)
    ll = 0.0
    for j in range(m):
        if phat[j] > 0.0:
            ll += phat[j] * math.log(q[j])
    if trace.size > 0:
        trace[0] = ll
    for it in range(1, max_iter + 1):
        tot = 0.0
        for i in range(n):
            s = 0.0
            for j in range(m):
                if phat[j] > 0.0:
                    s += K[i, j] * phat[j] / q[j]
            Pn[i] = P[i] * s
            tot += Pn[i]
        for i in range(n):
            P[i] = Pn[i] / tot
        convolve_row(P, K, q)
        new = 0.0
        for j in range(m):
            if phat[j] > 0.0:
                new += phat[j] * math.log(q[j])
        if it < trace.size:
            trace[it] = new
        gain = new - ll
        ll = new
        if gain < tol:
            return it, True
    return max_iter, False


@njit(cache=True)
def sinkhorn_log(M, a, b, f, g, tol, max_iter, check_every, errs):
    """Log-domain Sinkhorn on ``log T_ij = M_ij + f_i + g_j``.

    ``M`` already contains ``log a_i + log b_j - d_ij`` (``-inf`` for
    forbidden entries), so ``f`` and ``g`` are the potentials of
    ``T = a b exp(f + g - d)``; they are updated in place starting from the
    given ``g``.  The marginal error, ``max`` of the L1 row and column errors,
    is stored in ``errs`` every ``check_every`` iterations.  Returns
    ``(iterations, error, n_checkpoints)``.
    """
    n, m = M.shape
    rows = np.empty(n)
    cols = np.empty(m)
    la = np.log(a)
    lb = np.log(b)
    err = math.inf
    nck = 0
    it = 0
    while it < max_iter:
        it += 1
        for i in range(n):
            mx = -math.inf
            for j in range(m):
                v = M[i, j] + g[j]
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(m):
                s += math.exp(M[i, j] + g[j] - mx)
            f[i] = la[i] - (mx + math.log(s))
        for j in range(m):
            mx = -math.inf
            for i in range(n):
                v = M[i, j] + f[i]
                if v > mx:
                    mx = v
            s = 0.0
            for i in range(n):
                s += math.exp(M[i, j] + f[i] - mx)
            g[j] = lb[j] - (mx + math.log(s))
        for i in range(n):
            rows[i] = 0.0
        for j in range(m):
            cols[j] = 0.0
        for i in range(n):
            for j in range(m):
                t = math.exp(M[i, j] + f[i] + g[j])
                rows[i] += t
                cols[j] += t
        er = 0.0
        ec = 0.0
        for i in range(n):
            er += abs(rows[i] - a[i])
        for j in range(m):
            ec += abs(cols[j] - b[j])
        err = er if er > ec else ec
        if it % check_every == 0 and nck < errs.size:
            errs[nck] = err
            nck += 1
        if err <= tol:
            break
    return it, err, nck
