"""Compiled inner loops for the EM fit.

All arrays are float64 except ``codes``. The math mirrors the reference
descriptions in :mod:`matchsens.em`.
"""

import math

import numpy as np
from numba import njit

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
STEP_TOL = 1e-4


@njit(cache=True)
def softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True)
def expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True)
def logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit(cache=True)
def linear_predictor(Xl, kappa, out):
    n, k = Xl.shape
    for i in range(n):
        s = 0.0
        for j in range(k):
            s += Xl[i, j] * kappa[j]
        out[i] = s


@njit(cache=True)
def estep(Xl, kappa, Xk, psi, a, codes, z, y, beta, sigma, lp0, lp1, lam, delta, w1):
    """Fill ``w1`` with P(U=1 | data) and return the observed log-likelihood."""
    n = y.shape[0]
    kl = Xl.shape[1]
    kk = Xk.shape[1]
    inv = 0.5 / (sigma * sigma)
    total = 0.0
    for i in range(n):
        eta = 0.0
        for j in range(kl):
            eta += Xl[i, j] * kappa[j]
        mu = a[codes[i]] + beta * z[i]
        for j in range(kk):
            mu += Xk[i, j] * psi[j]
        s = 2.0 * z[i] - 1.0
        r0 = y[i] - mu
        r1 = r0 - delta
        l0 = lp0 - softplus(-s * eta) - inv * r0 * r0
        l1 = lp1 - softplus(-s * (eta + lam)) - inv * r1 * r1
        lse = logaddexp(l0, l1)
        if l1 == -np.inf:
            w1[i] = 0.0
        else:
            w1[i] = math.exp(l1 - lse)
        total += lse
    return total - n * (math.log(sigma) + HALF_LOG_2PI)


@njit(cache=True)
def outcome_step(M, D, y, codes, sizes, w1, delta, coef, a):
    """Within-set least squares of ``y - delta*w1``; returns sigma.

    ``M`` maps a response vector to the coefficients of the demeaned
    design ``D``; set effects go to ``a``.
    """
    n = y.shape[0]
    p = D.shape[1]
    n_sets = sizes.shape[0]
    t = np.empty(n)
    for i in range(n):
        t[i] = y[i] - delta * w1[i]
    for j in range(p):
        s = 0.0
        for i in range(n):
            s += M[j, i] * t[i]
        coef[j] = s
    for g in range(n_sets):
        a[g] = 0.0
    part = np.empty(n)
    for i in range(n):
        v = t[i]
        for j in range(p):
            v -= D[i, j] * coef[j]
        part[i] = v
        a[codes[i]] += v
    for g in range(n_sets):
        a[g] /= sizes[g]
    rss = 0.0
    for i in range(n):
        r = part[i] - a[codes[i]]
        rss += r * r + delta * delta * w1[i] * (1.0 - w1[i])
    return math.sqrt(rss / n)


@njit(cache=True)
def q2(Xl, kappa, z, w1, lam):
    n, k = Xl.shape
    total = 0.0
    for i in range(n):
        eta = 0.0
        for j in range(k):
            eta += Xl[i, j] * kappa[j]
        s = 2.0 * z[i] - 1.0
        total -= (1.0 - w1[i]) * softplus(-s * eta) + w1[i] * softplus(-s * (eta + lam))
    return total


@njit(cache=True)
def _cholesky_solve(A, b):
    # A symmetric positive definite; returns (x, ok)
    k = A.shape[0]
    L = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1):
            s = A[i, j]
            for m in range(j):
                s -= L[i, m] * L[j, m]
            if i == j:
                if s <= 1e-300 or not np.isfinite(s):
                    return b * 0.0, False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    # relative conditioning guard
    dmax = 0.0
    dmin = np.inf
    for i in range(k):
        dmax = max(dmax, L[i, i])
        dmin = min(dmin, L[i, i])
    if dmin < 1e-10 * dmax:
        return b * 0.0, False
    x = np.empty(k)
    for i in range(k):
        s = b[i]
        for m in range(i):
            s -= L[i, m] * x[m]
        x[i] = s / L[i, i]
    for i in range(k - 1, -1, -1):
        s = x[i]
        for m in range(i + 1, k):
            s -= L[m, i] * x[m]
        x[i] = s / L[i, i]
    return x, True


@njit(cache=True)
def _logistic_parts(eta):
    """(pi, 1 - pi, log pi, log(1 - pi)) for pi = expit(eta), one exp and one log."""
    if eta >= 0.0:
        e = math.exp(-eta)
        d = 1.0 + e
        l = math.log1p(e)
        return 1.0 / d, e / d, -l, -eta - l
    e = math.exp(eta)
    d = 1.0 + e
    l = math.log1p(e)
    return e / d, 1.0 / d, eta - l, -l


@njit(cache=True)
def logistic_pass(Xl, z, w1, lam, kappa, grad, info):
    """Q2 at ``kappa``; fills its gradient and (symmetric) information."""
    n, k = Xl.shape
    grad[:] = 0.0
    info[:, :] = 0.0
    xr = np.empty(k)
    total = 0.0
    for i in range(n):
        eta = 0.0
        for j in range(k):
            xr[j] = Xl[i, j]
            eta += xr[j] * kappa[j]
        p0, q0, lpi0, lqi0 = _logistic_parts(eta)
        p1, q1, lpi1, lqi1 = _logistic_parts(eta + lam)
        w = w1[i]
        zi = z[i]
        if zi > 0.5:
            total += (1.0 - w) * lpi0 + w * lpi1
        else:
            total += (1.0 - w) * lqi0 + w * lqi1
        r = zi - (1.0 - w) * p0 - w * p1
        h = (1.0 - w) * p0 * q0 + w * p1 * q1
        for j in range(k):
            grad[j] += xr[j] * r
            hx = h * xr[j]
            for m in range(j + 1):
                info[j, m] += hx * xr[m]
    for j in range(k):
        for m in range(j + 1, k):
            info[j, m] = info[m, j]
    return total


@njit(cache=True)
def _norm(v):
    s = 0.0
    for j in range(v.shape[0]):
        s += v[j] * v[j]
    return math.sqrt(s)


@njit(cache=True)
def newton(Xl, z, w1, lam, kappa, grad, info, cur, gtol, max_iter, kappa_max, defer):
    """Newton ascent on Q2 from ``kappa``, whose Q2/gradient/information are given.

    Steps with a Newton decrement below 1e-6 lie in the quadratic
    convergence region and are taken in full; every other step is halved
    until Q2 does not decrease. Each evaluated trial point supplies the
    gradient and information for the next step. With ``defer`` a full
    quadratic-region step is returned unevaluated, leaving the gradient
    check to the caller.

    Convergence needs both a gradient norm below ``gtol`` and a Newton
    step below ``STEP_TOL``.

    Returns 0 converged, 1 singular information, 2 separation,
    3 iteration limit, 4 deferred step taken.
    """
    k = kappa.shape[0]
    trial = np.empty(k)
    for _ in range(max_iter):
        small = _norm(grad) < gtol
        step, ok = _cholesky_solve(info, grad)
        if not ok:
            return 0 if small else 1
        # Under separation the gradient vanishes while Newton steps stay
        # O(1), so a small gradient alone does not mean convergence.
        if small and _norm(step) < STEP_TOL:
            return 0
        decrement = 0.0
        for j in range(k):
            decrement += step[j] * grad[j]
        full = decrement < 1e-6
        t = 1.0
        while True:
            for j in range(k):
                trial[j] = kappa[j] + t * step[j]
            if full and defer:
                break
            val = logistic_pass(Xl, z, w1, lam, trial, grad, info)
            if full or val >= cur or t < 1e-10:
                break
            t *= 0.5
        moved = 0.0
        big = 0.0
        for j in range(k):
            moved = max(moved, abs(trial[j] - kappa[j]))
            kappa[j] = trial[j]
            if j > 0:
                big = max(big, abs(kappa[j]))
        if big > kappa_max or not np.isfinite(big):
            return 2
        if full and defer:
            return 4
        if moved == 0.0:
            return 0
        cur = val
    return 3


@njit(cache=True)
def treatment_step(Xl, z, w1, lam, kappa, gtol, max_iter, kappa_max):
    """Newton/IRLS for the weighted logistic part of Q, in place on ``kappa``.

    Returns a status code: 0 converged, 1 singular information,
    2 separation, 3 iteration limit.
    """
    k = kappa.shape[0]
    grad = np.empty(k)
    info = np.empty((k, k))
    cur = logistic_pass(Xl, z, w1, lam, kappa, grad, info)
    return newton(Xl, z, w1, lam, kappa, grad, info, cur, gtol, max_iter, kappa_max, False)


@njit(cache=True)
def fused_pass(Xl, kappa, Xk, psi, a, codes, z, y, beta, sigma, lp0, lp1, lam, delta,
               w_old, w_new, grad, info, check_old):
    """E-step fused with a logistic pass.

    Writes the posterior weights at the current parameters to ``w_new``
    and returns ``(loglik, q2, gnorm_old)``. ``q2``, ``grad`` and ``info``
    describe the logistic part of Q built from ``w_new`` at ``kappa``
    (the start of the next M-step). When ``check_old`` is set,
    ``gnorm_old`` is the gradient norm of the same objective built from
    ``w_old``: the convergence test of the M-step that produced ``kappa``.
    """
    n = y.shape[0]
    kl = Xl.shape[1]
    kk = Xk.shape[1]
    inv = 0.5 / (sigma * sigma)
    total = 0.0
    qtot = 0.0
    grad[:] = 0.0
    info[:, :] = 0.0
    gold = np.zeros(kl)
    xr = np.empty(kl)
    for i in range(n):
        eta = 0.0
        for j in range(kl):
            xr[j] = Xl[i, j]
            eta += xr[j] * kappa[j]
        mu = a[codes[i]] + beta * z[i]
        for j in range(kk):
            mu += Xk[i, j] * psi[j]
        p0, q0, lpi0, lqi0 = _logistic_parts(eta)
        p1, q1, lpi1, lqi1 = _logistic_parts(eta + lam)
        zi = z[i]
        if zi > 0.5:
            lz0 = lpi0
            lz1 = lpi1
        else:
            lz0 = lqi0
            lz1 = lqi1
        r0 = y[i] - mu
        r1 = r0 - delta
        l0 = lp0 + lz0 - inv * r0 * r0
        l1 = lp1 + lz1 - inv * r1 * r1
        if l1 == -np.inf:
            w = 0.0
            lse = l0
        elif l0 == -np.inf:
            w = 1.0
            lse = l1
        elif l1 >= l0:
            e = math.exp(l0 - l1)
            lse = l1 + math.log1p(e)
            w = 1.0 / (1.0 + e)
        else:
            e = math.exp(l1 - l0)
            lse = l0 + math.log1p(e)
            w = e / (1.0 + e)
        total += lse
        if check_old:
            wo = w_old[i]
            ro = zi - (1.0 - wo) * p0 - wo * p1
            for j in range(kl):
                gold[j] += xr[j] * ro
        w_new[i] = w
        if w > 0.0:
            qtot += w * lz1
        if w < 1.0:
            qtot += (1.0 - w) * lz0
        r = zi - (1.0 - w) * p0 - w * p1
        h = (1.0 - w) * p0 * q0 + w * p1 * q1
        for j in range(kl):
            grad[j] += xr[j] * r
            hx = h * xr[j]
            for m in range(j + 1):
                info[j, m] += hx * xr[m]
    for j in range(kl):
        for m in range(j + 1, kl):
            info[j, m] = info[m, j]
    return total - n * (math.log(sigma) + HALF_LOG_2PI), qtot, _norm(gold)


@njit(cache=True)
def em_loop(Xl, Xk, M, D, y, z, codes, sizes, lp0, lp1, lam, delta,
            kappa, psi_beta, a, sigma, tol, max_iter, gtol, irls_max, kappa_max,
            w1, trace):
    """Run EM in place. ``psi_beta`` holds (psi..., beta).

    Each iteration: outcome M-step, logistic M-step (Newton to gradient
    norm < ``gtol``), E-step. The E-step pass doubles as the first Newton
    pass of the next logistic M-step and as the convergence check of a
    final Newton step left unevaluated.

    Returns (iterations, status, sigma) with status 0 converged,
    1 iteration limit, 2 singular information, 3 separation,
    4 degenerate sigma.
    """
    kk = Xk.shape[1]
    kl = Xl.shape[1]
    grad = np.empty(kl)
    info = np.empty((kl, kl))
    w_old = np.empty_like(w1)
    ll, cur, _ = fused_pass(Xl, kappa, Xk, psi_beta[:kk], a, codes, z, y, psi_beta[kk],
                            sigma, lp0, lp1, lam, delta, w_old, w1, grad, info, False)
    trace[0] = ll
    it = 0
    while it < max_iter:
        it += 1
        w_old[:] = w1
        sigma = outcome_step(M, D, y, codes, sizes, w_old, delta, psi_beta, a)
        if not sigma > 0.0:
            return it, 4, sigma
        st = newton(Xl, z, w_old, lam, kappa, grad, info, cur, gtol, irls_max, kappa_max, True)
        while True:
            if st == 1:
                return it, 2, sigma
            if st == 2:
                return it, 3, sigma
            ll_new, cur, gold = fused_pass(Xl, kappa, Xk, psi_beta[:kk], a, codes, z, y,
                                           psi_beta[kk], sigma, lp0, lp1, lam, delta,
                                           w_old, w1, grad, info, st == 4)
            if st != 4 or gold < gtol:
                break
            st = treatment_step(Xl, z, w_old, lam, kappa, gtol, irls_max, kappa_max)
        trace[it] = ll_new
        if abs(ll_new - ll) < tol:
            return it, 0, sigma
        ll = ll_new
    return it, 1, sigma
