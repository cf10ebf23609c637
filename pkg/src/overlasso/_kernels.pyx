# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: block coordinate descent and the overlap-norm ADMM.

Both routines mirror ``_kernels_py`` line for line; the two must stay in sync.
"""
import numpy as np

from libc.math cimport sqrt, fabs
from libc.stdlib cimport malloc, free

cdef double EIG_FLOOR = 1e-12
# a block whose rotated score is within this relative slack of the threshold stays at zero
cdef double ZERO_SLACK = 1e-12


cdef void _secular(const double* bt, const double* lam, Py_ssize_t m,
                   double t, double bnorm, double* wt) noexcept nogil:
    # mu > 0 with mu * ||bt / (lam + mu)|| = t; requires bnorm > t > 0
    cdef Py_ssize_t i, it
    cdef double lo = -1.0, hi = -1.0, lmin = 0.0, lmax = 0.0, mu, q2, q, dq, g, gp, new
    cdef int first = 1
    for i in range(m):
        if bt[i] != 0.0:
            if first:
                lmin = lam[i]
                lmax = lam[i]
                first = 0
            else:
                if lam[i] < lmin:
                    lmin = lam[i]
                if lam[i] > lmax:
                    lmax = lam[i]
    lo = t * lmin / (bnorm - t)
    hi = t * lmax / (bnorm - t)
    mu = hi
    if hi - lo > 1e-15 * hi:
        for it in range(200):
            q2 = 0.0
            dq = 0.0
            for i in range(m):
                if bt[i] != 0.0:
                    q2 += bt[i] * bt[i] / ((lam[i] + mu) * (lam[i] + mu))
                    dq += bt[i] * bt[i] / ((lam[i] + mu) * (lam[i] + mu) * (lam[i] + mu))
            q = sqrt(q2)
            g = 1.0 / q - mu / t
            if g == 0.0:
                break
            if g > 0.0:
                lo = mu
            else:
                hi = mu
            gp = dq / (q2 * q) - 1.0 / t
            new = mu - g / gp
            if not (new > lo and new < hi):
                new = 0.5 * (lo + hi)
            if fabs(new - mu) <= 1e-15 * mu:
                mu = new
                break
            mu = new
    for i in range(m):
        wt[i] = bt[i] / (lam[i] + mu)


cdef double _block_update(const double[:, ::1] XT, Py_ssize_t a, Py_ssize_t m,
                          const double* lam, const double* Q, double t,
                          double* w, double* r, Py_ssize_t n, double inv_n,
                          double* s, double* ss, double* ws, double* bt,
                          double* wt, double* wnew) noexcept nogil:
    """Exact minimisation over one block; returns the KKT residual seen on entry."""
    cdef Py_ssize_t i, j, k
    cdef double acc, wn = 0.0, sn = 0.0, kkt, bn = 0.0, d, lmax = 0.0
    for j in range(m):
        acc = 0.0
        for i in range(n):
            acc += XT[a + j, i] * r[i]
        s[j] = acc * inv_n
        wn += w[a + j] * w[a + j]
        sn += s[j] * s[j]
    wn = sqrt(wn)
    sn = sqrt(sn)
    if wn > 0.0:
        kkt = 0.0
        for j in range(m):
            d = s[j] - t * w[a + j] / wn
            kkt += d * d
        kkt = sqrt(kkt)
    else:
        kkt = sn - t
        if kkt < 0.0:
            kkt = 0.0

    for j in range(m):
        if lam[j] > lmax:
            lmax = lam[j]
    # eigen coordinates: bt = Q^T s + Lambda Q^T w
    for k in range(m):
        acc = 0.0
        d = 0.0
        for j in range(m):
            acc += Q[j * m + k] * s[j]
            d += Q[j * m + k] * w[a + j]
        ss[k] = acc
        ws[k] = d
        if lam[k] <= EIG_FLOOR * lmax or lmax <= 0.0:
            bt[k] = 0.0
        else:
            bt[k] = acc + lam[k] * d
        bn += bt[k] * bt[k]
    bn = sqrt(bn)

    if bn <= t * (1.0 + ZERO_SLACK):
        for k in range(m):
            wt[k] = 0.0
    elif t == 0.0:
        for k in range(m):
            if bt[k] != 0.0:
                wt[k] = bt[k] / lam[k]
            else:
                wt[k] = 0.0
    else:
        _secular(bt, lam, m, t, bn, wt)

    for j in range(m):
        acc = 0.0
        for k in range(m):
            acc += Q[j * m + k] * wt[k]
        wnew[j] = acc
    for j in range(m):
        d = wnew[j] - w[a + j]
        if d != 0.0:
            for i in range(n):
                r[i] -= d * XT[a + j, i]
            w[a + j] = wnew[j]
    return kkt


cdef double _objective(const double* r, Py_ssize_t n, const double* w,
                       const Py_ssize_t[::1] starts, const double[::1] pen,
                       Py_ssize_t M) noexcept nogil:
    cdef Py_ssize_t g, j, i
    cdef double loss = 0.0, penalty = 0.0, nrm
    for i in range(n):
        loss += r[i] * r[i]
    for g in range(M):
        if pen[g] > 0.0:
            nrm = 0.0
            for j in range(starts[g], starts[g + 1]):
                nrm += w[j] * w[j]
            penalty += pen[g] * sqrt(nrm)
    return loss / n + 2.0 * penalty


cdef double _full_kkt(const double[:, ::1] XT, const Py_ssize_t[::1] starts,
                      const double[::1] pen, Py_ssize_t M, const double* w,
                      const double* r, Py_ssize_t n, double inv_n) noexcept nogil:
    cdef Py_ssize_t g, j, i, a, b
    cdef double worst = 0.0, acc, wn, sn, kkt, d, t
    cdef double* s
    for g in range(M):
        t = pen[g]
        if t < 0.0:
            continue
        a = starts[g]
        b = starts[g + 1]
        wn = 0.0
        for j in range(a, b):
            wn += w[j] * w[j]
        wn = sqrt(wn)
        sn = 0.0
        kkt = 0.0
        for j in range(a, b):
            acc = 0.0
            for i in range(n):
                acc += XT[j, i] * r[i]
            acc *= inv_n
            sn += acc * acc
            if wn > 0.0:
                d = acc - t * w[j] / wn
                kkt += d * d
        if wn > 0.0:
            kkt = sqrt(kkt)
        else:
            kkt = sqrt(sn) - t
        if kkt > worst:
            worst = kkt
    return worst


def bcd_solve(const double[:, ::1] XT, const Py_ssize_t[::1] starts,
              const double[::1] evals, const double[::1] evecs,
              const Py_ssize_t[::1] qoff, const double[::1] pen,
              double[::1] w, double[::1] r, double tol, Py_ssize_t max_iter,
              double[::1] history):
    """Cyclic block coordinate descent on the latent (duplicated) problem.

    Minimises ``(1/n)||r||^2 + 2 sum_g pen[g] ||w_g||`` where ``r = y - XT.T @ w``.
    ``pen[g] < 0`` freezes block ``g`` at zero. ``w`` and ``r`` are updated in
    place; ``history[k]`` receives the objective after sweep ``k``.

    Returns ``(sweeps, converged, kkt)``.
    """
    cdef Py_ssize_t M = starts.shape[0] - 1
    cdef Py_ssize_t n = XT.shape[1]
    cdef double inv_n = 1.0 / n
    cdef Py_ssize_t g, a, m, j, it = 0, n_act, maxm = 1, k
    cdef double kkt = np.inf, visit, worst
    cdef bint converged = False
    cdef double* wp = &w[0]
    cdef double* rp = &r[0]
    cdef Py_ssize_t* act

    for g in range(M):
        if starts[g + 1] - starts[g] > maxm:
            maxm = starts[g + 1] - starts[g]
    cdef double* buf = <double*> malloc(6 * maxm * sizeof(double))
    act = <Py_ssize_t*> malloc(M * sizeof(Py_ssize_t))
    if buf == NULL or act == NULL:
        free(buf)
        free(act)
        raise MemoryError()
    try:
        with nogil:
            while it < max_iter:
                for g in range(M):
                    if pen[g] < 0.0:
                        continue
                    a = starts[g]
                    m = starts[g + 1] - a
                    _block_update(XT, a, m, &evals[a], &evecs[qoff[g]], pen[g], wp, rp,
                                  n, inv_n, buf, buf + maxm, buf + 2 * maxm,
                                  buf + 3 * maxm, buf + 4 * maxm, buf + 5 * maxm)
                history[it] = _objective(rp, n, wp, starts, pen, M)
                it += 1
                kkt = _full_kkt(XT, starts, pen, M, wp, rp, n, inv_n)
                if kkt <= tol:
                    converged = True
                    break
                n_act = 0
                for g in range(M):
                    if pen[g] < 0.0:
                        continue
                    for j in range(starts[g], starts[g + 1]):
                        if w[j] != 0.0:
                            act[n_act] = g
                            n_act += 1
                            break
                if n_act == 0:
                    continue
                while it < max_iter:
                    worst = 0.0
                    for k in range(n_act):
                        g = act[k]
                        a = starts[g]
                        m = starts[g + 1] - a
                        visit = _block_update(XT, a, m, &evals[a], &evecs[qoff[g]], pen[g],
                                              wp, rp, n, inv_n, buf, buf + maxm,
                                              buf + 2 * maxm, buf + 3 * maxm,
                                              buf + 4 * maxm, buf + 5 * maxm)
                        if visit > worst:
                            worst = visit
                    history[it] = _objective(rp, n, wp, starts, pen, M)
                    it += 1
                    if worst <= 0.5 * tol:
                        break
            if not converged:
                kkt = _full_kkt(XT, starts, pen, M, wp, rp, n, inv_n)
                converged = kkt <= tol
    finally:
        free(buf)
        free(act)
    return it, bool(converged), kkt


cdef double _norm_gap(const double[::1] beta, const Py_ssize_t[::1] idx,
                      const Py_ssize_t[::1] starts, const unsigned char[::1] allowed,
                      const double[::1] w, const double[::1] u, double rho,
                      double* gnorm, Py_ssize_t* best, double* esum, double* asum,
                      double* acnt, double* value_out) noexcept nogil:
    """Duality gap of the w-iterate after a feasibility repair."""
    cdef Py_ssize_t M = starts.shape[0] - 1
    cdef Py_ssize_t p = beta.shape[0]
    cdef Py_ssize_t g, j, i
    cdef double acc, value = 0.0, lower = 0.0, scale = 1.0, d
    for i in range(p):
        best[i] = -1
        esum[i] = beta[i]
        asum[i] = 0.0
        acnt[i] = 0.0
    for g in range(M):
        acc = 0.0
        if allowed[g]:
            for j in range(starts[g], starts[g + 1]):
                acc += w[j] * w[j]
        gnorm[g] = sqrt(acc)
    for g in range(M):
        if not allowed[g]:
            continue
        for j in range(starts[g], starts[g + 1]):
            i = idx[j]
            esum[i] -= w[j]
            asum[i] -= rho * u[j]
            acnt[i] += 1.0
            if best[i] < 0 or gnorm[g] > gnorm[best[i]]:
                best[i] = g
    # repaired group norms: the residual of index i goes to its heaviest group
    for g in range(M):
        if not allowed[g]:
            gnorm[g] = 0.0
            continue
        acc = 0.0
        for j in range(starts[g], starts[g + 1]):
            i = idx[j]
            d = w[j]
            if best[i] == g:
                d += esum[i]
            acc += d * d
        gnorm[g] = sqrt(acc)
        value += gnorm[g]
    for i in range(p):
        if acnt[i] > 0.0:
            asum[i] /= acnt[i]
        lower += asum[i] * beta[i]
    for g in range(M):
        if not allowed[g]:
            continue
        acc = 0.0
        for j in range(starts[g], starts[g + 1]):
            acc += asum[idx[j]] * asum[idx[j]]
        acc = sqrt(acc)
        if acc > scale:
            scale = acc
    value_out[0] = value
    return value - lower / scale


def norm_admm(const double[::1] beta, const Py_ssize_t[::1] idx,
              const Py_ssize_t[::1] starts, const unsigned char[::1] allowed,
              const double[::1] cnt, double[::1] w, double[::1] u, double rho,
              double tol, Py_ssize_t max_iter):
    """ADMM for ``min sum_g ||w_g||`` subject to ``B w = beta``.

    ``idx[j]`` is the original predictor of latent coordinate ``j`` and
    ``cnt[i]`` the number of allowed groups covering predictor ``i``. ``w`` and
    the scaled dual ``u`` are updated in place.

    Returns ``(iterations, converged, gap, value, rho)``; ``value`` is the
    objective of the repaired (exactly feasible) iterate.
    """
    cdef Py_ssize_t M = starts.shape[0] - 1
    cdef Py_ssize_t p = beta.shape[0]
    cdef Py_ssize_t D = w.shape[0]
    cdef Py_ssize_t g, j, i, it = 0
    cdef double nrm, shrink, rp, rd, d, gap = np.inf, value = np.inf, zj
    cdef bint converged = False
    z_arr = np.empty(D)
    cdef double[::1] z = z_arr
    cdef double* corr = <double*> malloc(p * sizeof(double))
    cdef double* gnorm = <double*> malloc(M * sizeof(double))
    cdef Py_ssize_t* best = <Py_ssize_t*> malloc(p * sizeof(Py_ssize_t))
    cdef double* esum = <double*> malloc(p * sizeof(double))
    cdef double* asum = <double*> malloc(p * sizeof(double))
    cdef double* acnt = <double*> malloc(p * sizeof(double))
    if corr == NULL or gnorm == NULL or best == NULL or esum == NULL or asum == NULL or acnt == NULL:
        free(corr); free(gnorm); free(best); free(esum); free(asum); free(acnt)
        raise MemoryError()
    try:
        with nogil:
            # z starts as the projection of w + u
            for i in range(p):
                corr[i] = -beta[i]
            for g in range(M):
                if allowed[g]:
                    for j in range(starts[g], starts[g + 1]):
                        corr[idx[j]] += w[j] + u[j]
            for g in range(M):
                for j in range(starts[g], starts[g + 1]):
                    if allowed[g]:
                        z[j] = w[j] + u[j] - corr[idx[j]] / cnt[idx[j]]
                    else:
                        z[j] = 0.0
            while it < max_iter:
                it += 1
                for g in range(M):
                    if not allowed[g]:
                        for j in range(starts[g], starts[g + 1]):
                            w[j] = 0.0
                            u[j] = 0.0
                        continue
                    nrm = 0.0
                    for j in range(starts[g], starts[g + 1]):
                        d = z[j] - u[j]
                        nrm += d * d
                    nrm = sqrt(nrm)
                    if nrm * rho <= 1.0:
                        shrink = 0.0
                    else:
                        shrink = 1.0 - 1.0 / (rho * nrm)
                    for j in range(starts[g], starts[g + 1]):
                        w[j] = shrink * (z[j] - u[j])
                for i in range(p):
                    corr[i] = -beta[i]
                for g in range(M):
                    if allowed[g]:
                        for j in range(starts[g], starts[g + 1]):
                            corr[idx[j]] += w[j] + u[j]
                rp = 0.0
                rd = 0.0
                for g in range(M):
                    if not allowed[g]:
                        continue
                    for j in range(starts[g], starts[g + 1]):
                        zj = w[j] + u[j] - corr[idx[j]] / cnt[idx[j]]
                        rd += (zj - z[j]) * (zj - z[j])
                        z[j] = zj
                        d = w[j] - zj
                        rp += d * d
                        u[j] += d
                rp = sqrt(rp)
                rd = rho * sqrt(rd)
                if it % 10 == 0:
                    gap = _norm_gap(beta, idx, starts, allowed, w, u, rho,
                                    gnorm, best, esum, asum, acnt, &value)
                    if gap <= tol * (1.0 + value):
                        converged = True
                        break
                    if it % 50 == 0 and it <= 20000:
                        if rp > 10.0 * rd:
                            rho *= 2.0
                            for j in range(D):
                                u[j] *= 0.5
                        elif rd > 10.0 * rp:
                            rho *= 0.5
                            for j in range(D):
                                u[j] *= 2.0
            if not converged:
                gap = _norm_gap(beta, idx, starts, allowed, w, u, rho,
                                gnorm, best, esum, asum, acnt, &value)
                converged = gap <= tol * (1.0 + value)
    finally:
        free(corr); free(gnorm); free(best); free(esum); free(asum); free(acnt)
    return it, bool(converged), gap, value, rho
