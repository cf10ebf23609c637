"""Pure-Python (numpy) versions of the compiled kernels.

Used when the Cython extension is not built, or when ``OVERLASSO_PURE=1``.
Same algorithms, same stopping rules, same return conventions as
``_kernels.pyx``; results agree up to floating point rounding.
"""
import numpy as np

EIG_FLOOR = 1e-12
# a block whose rotated score is within this relative slack of the threshold stays at zero
ZERO_SLACK = 1e-12


def _secular(bt, lam, t, bnorm):
    nz = bt != 0.0
    lmin = lam[nz].min()
    lmax = lam[nz].max()
    lo = t * lmin / (bnorm - t)
    hi = t * lmax / (bnorm - t)
    mu = hi
    if hi - lo > 1e-15 * hi:
        b2 = bt[nz] ** 2
        lz = lam[nz]
        for _ in range(200):
            den = lz + mu
            q2 = np.sum(b2 / den**2)
            dq = np.sum(b2 / den**3)
            q = np.sqrt(q2)
            g = 1.0 / q - mu / t
            if g == 0.0:
                break
            if g > 0.0:
                lo = mu
            else:
                hi = mu
            gp = dq / (q2 * q) - 1.0 / t
            new = mu - g / gp
            if not lo < new < hi:
                new = 0.5 * (lo + hi)
            if abs(new - mu) <= 1e-15 * mu:
                mu = new
                break
            mu = new
    return bt / (lam + mu)


def _block_update(XT, a, m, lam, Q, t, w, r, inv_n):
    Xg = XT[a:a + m]
    s = (Xg @ r) * inv_n
    wg = w[a:a + m]
    wn = np.sqrt(wg @ wg)
    if wn > 0.0:
        kkt = np.linalg.norm(s - t * wg / wn)
    else:
        kkt = max(np.linalg.norm(s) - t, 0.0)
    lmax = lam.max()
    ss = Q.T @ s
    ws = Q.T @ wg
    keep = (lam > EIG_FLOOR * lmax) & (lmax > 0.0)
    bt = np.where(keep, ss + lam * ws, 0.0)
    bn = np.sqrt(bt @ bt)
    if bn <= t * (1.0 + ZERO_SLACK):
        wt = np.zeros(m)
    elif t == 0.0:
        wt = np.zeros(m)
        nz = bt != 0.0
        wt[nz] = bt[nz] / lam[nz]
    else:
        wt = _secular(bt, lam, t, bn)
    wnew = Q @ wt
    d = wnew - wg
    if np.any(d != 0.0):
        r -= d @ Xg
        w[a:a + m] = wnew
    return kkt


def _objective(r, w, starts, pen):
    n = r.shape[0]
    penalty = 0.0
    for g in range(len(starts) - 1):
        if pen[g] > 0.0:
            penalty += pen[g] * np.sqrt(np.sum(w[starts[g]:starts[g + 1]] ** 2))
    return (r @ r) / n + 2.0 * penalty


def _full_kkt(XT, starts, pen, w, r, inv_n):
    worst = 0.0
    score = (XT @ r) * inv_n
    for g in range(len(starts) - 1):
        t = pen[g]
        if t < 0.0:
            continue
        a, b = starts[g], starts[g + 1]
        wg = w[a:b]
        wn = np.sqrt(wg @ wg)
        if wn > 0.0:
            kkt = np.linalg.norm(score[a:b] - t * wg / wn)
        else:
            kkt = np.linalg.norm(score[a:b]) - t
        worst = max(worst, kkt)
    return worst


def bcd_solve(XT, starts, evals, evecs, qoff, pen, w, r, tol, max_iter, history):
    M = len(starts) - 1
    n = XT.shape[1]
    inv_n = 1.0 / n
    blocks = []
    for g in range(M):
        a = starts[g]
        m = starts[g + 1] - a
        blocks.append((a, m, evals[a:a + m], evecs[qoff[g]:qoff[g] + m * m].reshape(m, m)))
    it = 0
    kkt = np.inf
    converged = False
    while it < max_iter:
        for g in range(M):
            if pen[g] < 0.0:
                continue
            a, m, lam, Q = blocks[g]
            _block_update(XT, a, m, lam, Q, pen[g], w, r, inv_n)
        history[it] = _objective(r, w, starts, pen)
        it += 1
        kkt = _full_kkt(XT, starts, pen, w, r, inv_n)
        if kkt <= tol:
            converged = True
            break
        act = [g for g in range(M)
               if pen[g] >= 0.0 and np.any(w[starts[g]:starts[g + 1]] != 0.0)]
        if not act:
            continue
        while it < max_iter:
            worst = 0.0
            for g in act:
                a, m, lam, Q = blocks[g]
                worst = max(worst, _block_update(XT, a, m, lam, Q, pen[g], w, r, inv_n))
            history[it] = _objective(r, w, starts, pen)
            it += 1
            if worst <= 0.5 * tol:
                break
    if not converged:
        kkt = _full_kkt(XT, starts, pen, w, r, inv_n)
        converged = kkt <= tol
    return it, bool(converged), kkt


def _norm_gap(beta, idx, starts, allowed, w, u, rho):
    M = len(starts) - 1
    p = beta.shape[0]
    group_of = np.repeat(np.arange(M), np.diff(starts))
    live = allowed[group_of].astype(bool)
    gnorm = np.zeros(M)
    np.add.at(gnorm, group_of[live], w[live] ** 2)
    gnorm = np.sqrt(gnorm)
    # heaviest allowed group per predictor, ties to the lowest group index
    best = np.full(p, -1)
    for j in np.flatnonzero(live):
        i, g = idx[j], group_of[j]
        if best[i] < 0 or gnorm[g] > gnorm[best[i]]:
            best[i] = g
    esum = beta - np.bincount(idx[live], weights=w[live], minlength=p)
    acnt = np.bincount(idx[live], minlength=p).astype(float)
    asum = -np.bincount(idx[live], weights=rho * u[live], minlength=p)
    asum = np.divide(asum, acnt, out=np.zeros(p), where=acnt > 0)
    v = w.copy()
    hit = live & (best[idx] == group_of)
    v[hit] += esum[idx[hit]]
    vn = np.zeros(M)
    np.add.at(vn, group_of[live], v[live] ** 2)
    value = np.sqrt(vn).sum()
    an = np.zeros(M)
    np.add.at(an, group_of[live], asum[idx[live]] ** 2)
    scale = max(1.0, np.sqrt(an).max() if M else 1.0)
    return value - (asum @ beta) / scale, value


def norm_admm(beta, idx, starts, allowed, cnt, w, u, rho, tol, max_iter):
    M = len(starts) - 1
    group_of = np.repeat(np.arange(M), np.diff(starts))
    live = allowed[group_of].astype(bool)
    p = beta.shape[0]
    safe_cnt = np.where(cnt > 0, cnt, 1.0)

    def project(x):
        corr = np.bincount(idx[live], weights=x[live], minlength=p) - beta
        return np.where(live, x - (corr / safe_cnt)[idx], 0.0)

    w[~live] = 0.0
    u[~live] = 0.0
    z = project(w + u)
    sizes = np.diff(starts)
    it = 0
    gap, value = np.inf, np.inf
    converged = False
    while it < max_iter:
        it += 1
        x = z - u
        nrm = np.sqrt(np.add.reduceat(x**2, starts[:-1])) if len(x) else np.zeros(0)
        with np.errstate(divide="ignore"):
            shrink = np.where(nrm * rho <= 1.0, 0.0, 1.0 - 1.0 / (rho * nrm))
        shrink = np.where(allowed.astype(bool), shrink, 0.0)
        w[:] = np.repeat(shrink, sizes) * x
        u[~live] = 0.0
        znew = project(w + u)
        rd = rho * np.linalg.norm(znew[live] - z[live])
        z = znew
        d = np.where(live, w - z, 0.0)
        rp = np.linalg.norm(d)
        u += d
        if it % 10 == 0:
            gap, value = _norm_gap(beta, idx, starts, allowed, w, u, rho)
            if gap <= tol * (1.0 + value):
                converged = True
                break
            if it % 50 == 0 and it <= 20000:
                if rp > 10.0 * rd:
                    rho *= 2.0
                    u *= 0.5
                elif rd > 10.0 * rp:
                    rho *= 0.5
                    u *= 2.0
    if not converged:
        gap, value = _norm_gap(beta, idx, starts, allowed, w, u, rho)
        converged = gap <= tol * (1.0 + value)
    return it, bool(converged), gap, value, rho
