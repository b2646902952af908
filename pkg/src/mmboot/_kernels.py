"""Compiled inner loops for the coordinate-ascent fit.

Everything here works on compressed data: ``X`` holds the distinct response
patterns (U, J) and ``w`` their (possibly fractional) weights.
"""
import math

import numpy as np
from numba import njit

from .special import digamma_scalar, lgamma_scalar, trigamma_scalar


@njit(cache=True)
def log_tables(pi):
    return np.log(pi), np.log1p(-pi)


@njit(cache=True)
def dirichlet_norm(alpha):
    s = 0.0
    out = 0.0
    for k in range(alpha.shape[0]):
        s += alpha[k]
        out -= lgamma_scalar(alpha[k])
    return out + lgamma_scalar(s)


@njit(cache=True)
def _expected_log_lambda(phi_u, elog):
    s = 0.0
    for k in range(phi_u.shape[0]):
        s += phi_u[k]
    ds = digamma_scalar(s)
    for k in range(phi_u.shape[0]):
        elog[k] = digamma_scalar(phi_u[k]) - ds
    return s


@njit(cache=True)
def row_elbo(alpha, norm_alpha, x_u, lp1, lp0, phi_u, delta_u, elog):
    J, K = delta_u.shape
    s = _expected_log_lambda(phi_u, elog)
    e = norm_alpha - lgamma_scalar(s)
    for k in range(K):
        e += (alpha[k] - phi_u[k]) * elog[k] + lgamma_scalar(phi_u[k])
    for j in range(J):
        for k in range(K):
            d = delta_u[j, k]
            if d > 0.0:
                ll = lp1[j, k] if x_u[j] == 1 else lp0[j, k]
                e += d * (elog[k] + ll - math.log(d))
    return e


@njit(cache=True)
def delta_step(x_u, lp1, lp0, elog, delta_u):
    J, K = delta_u.shape
    for j in range(J):
        m = -np.inf
        for k in range(K):
            v = elog[k] + (lp1[j, k] if x_u[j] == 1 else lp0[j, k])
            delta_u[j, k] = v
            if v > m:
                m = v
        tot = 0.0
        for k in range(K):
            v = math.exp(delta_u[j, k] - m)
            delta_u[j, k] = v
            tot += v
        for k in range(K):
            delta_u[j, k] /= tot


@njit(cache=True)
def phi_step(alpha, delta_u, phi_u):
    J, K = delta_u.shape
    for k in range(K):
        acc = alpha[k]
        for j in range(J):
            acc += delta_u[j, k]
        phi_u[k] = acc


@njit(cache=True)
def optimize_row(alpha, norm_alpha, x_u, lp1, lp0, phi_u, delta_u, tol, max_iter, elog):
    """Alternate delta and phi updates for one pattern until the per-row
    ELBO stalls. Returns (elbo, sweeps, converged)."""
    e_prev = -np.inf
    e = -np.inf
    for it in range(max_iter):
        _expected_log_lambda(phi_u, elog)
        delta_step(x_u, lp1, lp0, elog, delta_u)
        phi_step(alpha, delta_u, phi_u)
        e = row_elbo(alpha, norm_alpha, x_u, lp1, lp0, phi_u, delta_u, elog)
        if it > 0 and abs(e - e_prev) <= tol * max(abs(e), 1.0):
            return e, it + 1, True
        e_prev = e
    return e, max_iter, False


@njit(cache=True)
def polish_row(alpha, norm_alpha, x_u, lp1, lp0, phi_u, delta_u, tol, max_iter, elog,
               phi_try, delta_try):
    """Re-solve one pattern's variational problem from K + 1 further starts
    (mass on each group, and the symmetric point) and keep the best optimum.

    With small alpha the per-pattern problem has several local optima, one
    per dominant group, so a single warm start can sit in a poor one.
    Returns (elbo, improved, converged).
    """
    K = alpha.shape[0]
    J = x_u.shape[0]
    best = row_elbo(alpha, norm_alpha, x_u, lp1, lp0, phi_u, delta_u, elog)
    improved = False
    all_ok = True
    for s in range(K + 1):
        for k in range(K):
            if s == K:
                phi_try[k] = alpha[k] + J / K
            else:
                phi_try[k] = alpha[k] + (J if k == s else 0.0)
        e, _, ok = optimize_row(alpha, norm_alpha, x_u, lp1, lp0, phi_try, delta_try,
                                tol, max_iter, elog)
        all_ok = all_ok and ok
        if e > best + 1e-9 * max(abs(best), 1.0):
            best = e
            improved = True
            phi_u[:] = phi_try
            delta_u[:, :] = delta_try
    return best, improved, all_ok


@njit(cache=True)
def polish_rows(X, alpha, pi, phi, delta, tol, max_iter):
    U, J = X.shape
    K = alpha.shape[0]
    lp1, lp0 = log_tables(pi)
    norm = dirichlet_norm(alpha)
    elog = np.empty(K)
    phi_try = np.empty(K)
    delta_try = np.empty((J, K))
    n_improved = 0
    for u in range(U):
        _, imp, _ = polish_row(alpha, norm, X[u], lp1, lp0, phi[u], delta[u], tol, max_iter,
                               elog, phi_try, delta_try)
        if imp:
            n_improved += 1
    return n_improved


@njit(cache=True)
def initial_phi(alpha, J, U):
    K = alpha.shape[0]
    phi = np.empty((U, K))
    for u in range(U):
        for k in range(K):
            phi[u, k] = alpha[k] + J / K
    return phi


@njit(cache=True)
def elbo_rows(X, alpha, pi, phi, delta):
    U = X.shape[0]
    lp1, lp0 = log_tables(pi)
    norm = dirichlet_norm(alpha)
    elog = np.empty(alpha.shape[0])
    out = np.empty(U)
    for u in range(U):
        out[u] = row_elbo(alpha, norm, X[u], lp1, lp0, phi[u], delta[u], elog)
    return out


@njit(cache=True)
def profile_rows(X, alpha, pi, phi, tol, max_iter):
    """Profiled ELBO per pattern: the best of a warm start from ``phi``
    (updated in place) and the restarts of :func:`polish_row`."""
    U, J = X.shape
    K = alpha.shape[0]
    lp1, lp0 = log_tables(pi)
    norm = dirichlet_norm(alpha)
    elog = np.empty(K)
    delta_u = np.empty((J, K))
    phi_try = np.empty(K)
    delta_try = np.empty((J, K))
    out = np.empty(U)
    n_bad = 0
    for u in range(U):
        _, _, ok = optimize_row(alpha, norm, X[u], lp1, lp0, phi[u], delta_u, tol, max_iter, elog)
        e, _, ok2 = polish_row(alpha, norm, X[u], lp1, lp0, phi[u], delta_u, tol, max_iter,
                               elog, phi_try, delta_try)
        out[u] = e
        if not (ok and ok2):
            n_bad += 1
    return out, n_bad


@njit(cache=True)
def alpha_objective(alpha, S, N):
    return N * dirichlet_norm(alpha) + np.sum((alpha - 1.0) * S)


@njit(cache=True)
def alpha_gradient(alpha, S, N):
    K = alpha.shape[0]
    ds = digamma_scalar(np.sum(alpha))
    g = np.empty(K)
    for k in range(K):
        g[k] = N * (ds - digamma_scalar(alpha[k])) + S[k]
    return g


@njit(cache=True)
def newton_alpha(alpha0, S, N, floor, max_steps, backtrack, grad_tol):
    """Newton-Raphson on g(alpha) = N log B(alpha)^-1 + sum (alpha_k - 1) S_k.

    The Hessian N psi'(sum alpha) 11^T - N diag(psi'(alpha_k)) is inverted in
    O(K) by Sherman-Morrison. Returns (alpha, status) with status 0 = ok,
    1 = no ascent step found from alpha0.
    """
    K = alpha0.shape[0]
    a = alpha0.copy()
    if K == 1 or N <= 0.0:
        return a, 0
    f = alpha_objective(a, S, N)
    moved = False
    for _ in range(max_steps):
        g = alpha_gradient(a, S, N)
        if np.max(np.abs(g)) < grad_tol:
            return a, 0
        z = N * trigamma_scalar(np.sum(a))
        h = np.empty(K)
        for k in range(K):
            h[k] = -N * trigamma_scalar(a[k])
        c = np.sum(g / h) / (1.0 / z + np.sum(1.0 / h))
        step = (g - c) / h
        s = 1.0
        accepted = False
        while s > 1e-12:
            cand = a - s * step
            if np.all(cand >= floor):
                fc = alpha_objective(cand, S, N)
                if fc >= f:
                    if fc > f or np.max(np.abs(cand - a)) > 0.0:
                        accepted = True
                    break
            s *= backtrack
        if not accepted:
            # a Newton decrement at rounding level means a is already optimal
            if moved or abs(np.dot(g, step)) <= 1e-12 * max(1.0, abs(f)):
                return a, 0
            return a, 1
        moved = True
        a = cand
        f = fc
    return a, 0


@njit(cache=True)
def total_elbo(X, w, alpha, pi, phi, delta):
    e = elbo_rows(X, alpha, pi, phi, delta)
    return np.sum(w * e)


@njit(cache=True)
def fit_core(X, w, alpha, pi, phi, delta, eps, alpha_floor, max_outer, max_inner,
             inner_tol, rel_tol, newton_max, backtrack, update_pi, update_alpha, trace,
             polish_iter):
    """Block coordinate ascent. ``alpha``, ``pi``, ``phi``, ``delta`` are
    updated in place; ``trace`` receives the ELBO after each outer sweep.

    Each outer sweep gives every pattern at most ``max_inner`` local sweeps.
    Convergence needs a stalled ELBO, every pattern's local problem solved to
    ``inner_tol`` and no pattern improvable by :func:`polish_row`.

    Returns (iterations, converged, alpha_warnings, inner_nonconverged).
    """
    U, J = X.shape
    K = alpha.shape[0]
    N = np.sum(w)
    elog = np.empty(K)
    alpha_warn = 0
    inner_bad = 0
    e_prev = -np.inf
    for t in range(max_outer):
        lp1, lp0 = log_tables(pi)
        norm = dirichlet_norm(alpha)
        inner_bad = 0
        for u in range(U):
            _, _, ok = optimize_row(alpha, norm, X[u], lp1, lp0, phi[u], delta[u],
                                    inner_tol, max_inner, elog)
            if not ok:
                inner_bad += 1
        if update_pi:
            for j in range(J):
                for k in range(K):
                    num = 0.0
                    den = 0.0
                    for u in range(U):
                        wd = w[u] * delta[u, j, k]
                        den += wd
                        if X[u, j] == 1:
                            num += wd
                    if den > 0.0:
                        p = num / den
                        pi[j, k] = min(max(p, eps), 1.0 - eps)
        if update_alpha and K > 1:
            S = np.zeros(K)
            for u in range(U):
                _expected_log_lambda(phi[u], elog)
                for k in range(K):
                    S[k] += w[u] * elog[k]
            new_alpha, status = newton_alpha(alpha, S, N, alpha_floor, newton_max, backtrack,
                                             1e-10 * max(N, 1.0))
            alpha_warn += status
            alpha[:] = new_alpha
        e = total_elbo(X, w, alpha, pi, phi, delta)
        trace[t] = e
        if t > 0 and inner_bad == 0 and abs(e - e_prev) < rel_tol * abs(e_prev):
            # before stopping, make sure no pattern sits in a poor local optimum
            if polish_rows(X, alpha, pi, phi, delta, inner_tol, polish_iter) == 0:
                return t + 1, True, alpha_warn, 0
            e = total_elbo(X, w, alpha, pi, phi, delta)
        e_prev = e
    return max_outer, False, alpha_warn, inner_bad
