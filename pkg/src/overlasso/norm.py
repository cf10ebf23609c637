"""The overlap norm ``||beta||_{2,1,G}`` and structured-sparsity counts.

The norm is the minimum of ``sum_g ||v_g||`` over decompositions
``sum_g v_g = beta`` with ``supp(v_g) ⊆ g``. It is computed on the duplicated
coordinates (one free coordinate per (group, member) pair) by ADMM, with a
duality-gap certificate as the stopping rule.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from . import kernels
from .model import Decomposition, GroupCollection

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000
ORACLE_MAX_FREE = 6


@dataclass
class NormResult:
    value: float
    decomposition: Decomposition
    converged: bool
    tolerance: float
    gap: float = 0.0
    iterations: int = 0


def _layout(groups: GroupCollection):
    idx = np.concatenate(groups.groups).astype(np.intp)
    starts = np.concatenate([[0], np.cumsum(groups.sizes)]).astype(np.intp)
    return idx, starts


def _repair(beta, idx, starts, allowed, w):
    """Make ``w`` exactly feasible: each predictor's residual goes to its heaviest group."""
    M = len(starts) - 1
    p = beta.shape[0]
    group_of = np.repeat(np.arange(M), np.diff(starts))
    live = allowed[group_of].astype(bool)
    gnorm = np.sqrt(np.bincount(group_of, weights=np.where(live, w, 0.0) ** 2, minlength=M))
    best = np.full(p, -1)
    for j in np.flatnonzero(live):
        i, g = idx[j], group_of[j]
        if best[i] < 0 or gnorm[g] > gnorm[best[i]]:
            best[i] = g
    resid = beta - np.bincount(idx[live], weights=w[live], minlength=p)
    v = np.where(live, w, 0.0)
    hit = live & (best[idx] == group_of)
    v[hit] += resid[idx[hit]]
    return v


def _zero_tol(beta) -> float:
    return 1e-8 * (1.0 + float(np.linalg.norm(beta)))


def overlap_norm(beta, groups: GroupCollection, tolerance: float = DEFAULT_TOL,
                 max_iter: int = DEFAULT_MAX_ITER, allowed=None, rng=None,
                 backend: Optional[str] = None) -> NormResult:
    """Compute the overlap norm and a norm-minimizing decomposition.

    Parameters
    ----------
    beta : array of shape (p,)
    groups : GroupCollection
    tolerance : float
        Relative duality gap at which the solver stops.
    allowed : bool array of shape (M,), optional
        Restrict the decomposition to these groups (others are forced to 0).
    rng : numpy Generator, optional
        Randomize the starting point; used to probe non-unique minimizers.
    backend : {'cython', 'python'}, optional
        Kernel to use; defaults to the one selected at import.

    Returns
    -------
    NormResult
        ``value`` is the objective of an exactly feasible decomposition, hence
        an upper bound on the norm even when ``converged`` is False.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape[0] != groups.p:
        raise ValueError(f"beta has length {beta.shape[0]}, groups are over p={groups.p}")
    M = groups.M
    allowed = np.ones(M, dtype=np.uint8) if allowed is None else np.asarray(allowed, dtype=np.uint8)
    if allowed.shape != (M,):
        raise ValueError("allowed mask must have one entry per group")
    idx, starts = _layout(groups)
    group_of = np.repeat(np.arange(M), groups.sizes)
    live = allowed[group_of].astype(bool)
    cnt = np.bincount(idx[live], minlength=groups.p).astype(float)
    if np.any((cnt == 0) & (beta != 0)):
        raise ValueError("beta is nonzero on a predictor that no allowed group covers")
    zt = _zero_tol(beta)

    if not np.any(beta):
        dec = Decomposition(groups, np.zeros(idx.size), zero_tol=zt)
        return NormResult(0.0, dec, True, tolerance)
    if cnt.max() <= 1 and rng is None:
        # at most one allowed group per predictor: the restriction is the only decomposition
        v = np.where(live, beta[idx], 0.0)
        dec = Decomposition(groups, v, zero_tol=zt)
        return NormResult(dec.value(), dec, True, tolerance)

    scale = float(np.max(np.abs(beta)))
    b = beta / scale
    safe = np.where(cnt > 0, cnt, 1.0)
    if rng is None:
        w = np.where(live, (b / safe)[idx], 0.0)
        u = np.zeros(idx.size)
    else:
        # random split of each predictor over its groups, random dual start
        raw = np.where(live, rng.uniform(0.05, 1.0, idx.size), 0.0)
        tot = np.bincount(idx, weights=raw, minlength=groups.p)
        tot = np.where(tot > 0, tot, 1.0)
        w = raw / tot[idx] * b[idx]
        u = np.where(live, 0.3 * rng.standard_normal(idx.size), 0.0)
    impl = kernels if backend is None else kernels.get_backend(backend)
    its, converged, gap, _, _ = impl.norm_admm(
        b, idx, starts, allowed, cnt, w, u, 1.0, float(tolerance), int(max_iter))
    v = _repair(b, idx, starts, allowed, w) * scale
    dec = Decomposition(groups, v, zero_tol=zt)
    return NormResult(dec.value(), dec, bool(converged), tolerance, float(gap) * scale, int(its))


def overlap_norm_value(beta, groups, tolerance=DEFAULT_TOL) -> float:
    return overlap_norm(beta, groups, tolerance).value


def overlap_norm_oracle(beta, groups: GroupCollection, grid_steps: Optional[int] = None) -> float:
    """Brute-force overlap norm for desk-scale instances (at most 6 free coordinates).

    An optimal decomposition splits every predictor ``beta_i`` into same-sign
    pieces, so the search runs over simplex fractions per shared predictor: a
    full tensor grid, repeated zooming around the incumbent, then a
    Nelder-Mead polish.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    if not np.any(beta):
        return 0.0
    shared = []  # (predictor, [groups containing it])
    fixed = []
    for i in range(groups.p):
        owners = [k for k, g in enumerate(groups) if i in set(g.tolist())]
        if not owners:
            if beta[i] != 0:
                raise ValueError("beta is nonzero on an uncovered predictor")
            continue
        if beta[i] == 0:
            continue
        if len(owners) == 1:
            fixed.append((i, owners[0]))
        else:
            shared.append((i, owners))
    n_free = sum(len(o) - 1 for _, o in shared)
    if n_free > ORACLE_MAX_FREE:
        raise ValueError(f"{n_free} free coordinates exceed the oracle cap of {ORACLE_MAX_FREE}")

    M = groups.M
    base = np.zeros(M)  # squared mass that is never split
    for i, k in fixed:
        base[k] += beta[i] ** 2

    def evaluate(F):
        # F: (K, n_free) fractions; last piece of each predictor takes the remainder
        F = np.atleast_2d(F)
        sq = np.tile(base, (F.shape[0], 1))
        col = 0
        for i, owners in shared:
            m = len(owners)
            part = F[:, col:col + m - 1]
            rest = 1.0 - part.sum(axis=1)
            for t, k in enumerate(owners[:-1]):
                sq[:, k] += (part[:, t] * beta[i]) ** 2
            sq[:, owners[-1]] += (rest * beta[i]) ** 2
            col += m - 1
        return np.sqrt(sq).sum(axis=1)

    if n_free == 0:
        return float(evaluate(np.zeros((1, 0)))[0])

    def feasible(F):
        ok = np.all((F >= 0) & (F <= 1), axis=1)
        col = 0
        for _, owners in shared:
            m = len(owners)
            ok &= F[:, col:col + m - 1].sum(axis=1) <= 1.0 + 1e-12
            col += m - 1
        return ok

    if grid_steps is None:
        grid_steps = max(3, int(round(2e5 ** (1.0 / n_free))))
    axis = np.linspace(0.0, 1.0, grid_steps)
    F = np.array(list(itertools.product(axis, repeat=n_free)))
    F = F[feasible(F)]
    vals = evaluate(F)
    best = F[np.argmin(vals)]
    best_val = float(vals.min())

    h = 1.0 / (grid_steps - 1)
    offsets = np.array(list(itertools.product(np.linspace(-1, 1, 5), repeat=n_free)))
    while h > 1e-10:
        cand = np.clip(best + h * offsets, 0.0, 1.0)
        cand = cand[feasible(cand)]
        vals = evaluate(cand)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best, best_val = cand[k], float(vals[k])
        else:
            h *= 0.5

    def penalized(x):
        x = np.asarray(x)[None, :]
        if not feasible(x)[0]:
            return best_val + 1.0
        return float(evaluate(x)[0])

    res = optimize.minimize(penalized, best, method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    return float(min(best_val, res.fun))


@dataclass
class SparsityReport:
    active: np.ndarray  # J_v of the computed decomposition (0-based)
    count: int  # M_v
    min_count: int  # pruned upper bound on M(beta)
    pruned_active: np.ndarray
    norm: NormResult


def structured_sparsity(beta, groups: GroupCollection, tolerance: float = DEFAULT_TOL) -> SparsityReport:
    """Active groups of a minimizing decomposition, and a pruned estimate of ``M(beta)``.

    The pruning pass tries to drop each active group (smallest first) and
    keeps the drop when the re-solved norm is unchanged, i.e. within
    ``100 * tolerance * (1 + value)``. ``min_count`` is therefore an upper bound
    on ``M(beta)`` that is exact whenever the dropped groups are the redundant
    ones.
    """
    beta = np.asarray(beta, dtype=float).ravel()
    res = overlap_norm(beta, groups, tolerance)
    dec = res.decomposition
    active = dec.active
    allowed = np.ones(groups.M, dtype=np.uint8)
    allowed[np.setdiff1d(np.arange(groups.M), active)] = 0
    current = res
    slack = 100.0 * tolerance * (1.0 + res.value)
    order = active[np.argsort(dec.norms()[active], kind="stable")]
    nz = beta != 0
    for g in order:
        trial = allowed.copy()
        trial[g] = 0
        covered = np.zeros(groups.p, dtype=bool)
        for k in np.flatnonzero(trial):
            covered[groups[k]] = True
        if np.any(nz & ~covered):
            continue
        alt = overlap_norm(beta, groups, tolerance, allowed=trial)
        if alt.value <= res.value + slack:
            allowed = trial
            current = alt
    pruned = current.decomposition.active
    return SparsityReport(active, int(active.size), int(pruned.size), pruned, res)


@dataclass
class DirectionReport:
    per_group: np.ndarray
    holds: bool


def check_direction_uniqueness(dec_a: Decomposition, dec_b: Decomposition,
                               tolerance: float = 1e-5) -> DirectionReport:
    """Per group: one of the parts is zero, or both have the same unit direction."""
    if dec_a.groups != dec_b.groups:
        raise ValueError("decompositions use different group collections")
    va, vb = dec_a.vector(), dec_b.vector()
    scale = 1.0 + max(np.linalg.norm(va), np.linalg.norm(vb))
    if np.linalg.norm(va - vb) > 1e-6 * scale:
        raise ValueError("decompositions are of different vectors")
    zt = max(dec_a.zero_tol(), dec_b.zero_tol())
    verdicts = np.ones(dec_a.groups.M, dtype=bool)
    for g in range(dec_a.groups.M):
        a, b = dec_a.block(g), dec_b.block(g)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na <= zt or nb <= zt:
            continue
        verdicts[g] = np.linalg.norm(a / na - b / nb) <= tolerance
    return DirectionReport(verdicts, bool(verdicts.all()))
