"""Overlapping grouped lasso via the duplicated design.

Objective (no hidden factors)::

    (1/n) ||y - X beta||^2 + 2 lam * min_V sum_g w_g ||v_g||

Duplicating each group's columns turns the min over decompositions into a
plain disjoint group lasso over latent coefficients, solved by cyclic block
coordinate descent with exact block updates (see ``_kernels.pyx``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .model import Decomposition, FitResult, GroupCollection, ProblemInstance, ols_fit
from .norm import overlap_norm

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITERS = 100_000


@dataclass
class DuplicatedDesign:
    """``X_tilde = [X_g]_{g in G}`` plus the maps back to the original predictors."""

    X_tilde: np.ndarray  # (n, D)
    starts: np.ndarray  # block g is columns starts[g]:starts[g+1]
    back: np.ndarray  # latent column -> original predictor
    groups: GroupCollection
    _eig: Optional[tuple] = field(default=None, repr=False)

    @property
    def n_latent(self) -> int:
        return int(self.starts[-1])

    def block(self, g: int) -> slice:
        return slice(self.starts[g], self.starts[g + 1])

    def collapse(self, latent) -> np.ndarray:
        """Sum duplicated coefficients back onto the original predictors."""
        return np.bincount(self.back, weights=latent, minlength=self.groups.p)

    def eigen(self):
        """Cached eigendecompositions of ``X_g^T X_g / n`` (values, flat row-major vectors, offsets)."""
        if self._eig is None:
            n = self.X_tilde.shape[0]
            vals, vecs, qoff = [], [], [0]
            for g in range(self.groups.M):
                Xg = self.X_tilde[:, self.block(g)]
                lam, Q = np.linalg.eigh(Xg.T @ Xg / n)
                vals.append(np.maximum(lam, 0.0))
                vecs.append(np.ascontiguousarray(Q).ravel())
                qoff.append(qoff[-1] + Q.size)
            evals = np.concatenate(vals)
            evecs = np.concatenate(vecs)
            qoff = np.asarray(qoff, dtype=np.intp)
            for a in (evals, evecs, qoff):
                a.setflags(write=False)
            self._eig = (evals, evecs, qoff)
        return self._eig


def duplicate_design(instance: ProblemInstance, groups: GroupCollection) -> DuplicatedDesign:
    if groups.p != instance.p:
        raise ValueError(f"groups are over p={groups.p}, instance has p={instance.p}")
    back = np.concatenate(groups.groups).astype(np.intp)
    starts = np.concatenate([[0], np.cumsum(groups.sizes)]).astype(np.intp)
    X_tilde = instance.X[:, back]
    X_tilde.setflags(write=False)
    return DuplicatedDesign(X_tilde, starts, back, groups)


@dataclass
class SolverConfig:
    lam: float
    tolerance: float = DEFAULT_TOL
    max_iters: int = DEFAULT_MAX_ITERS
    weights: Optional[np.ndarray] = None  # per-group; inf freezes a group at zero
    warm_start: Optional[np.ndarray] = None  # latent coefficients

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(np.isnan(w)) or np.any(w < 0):
                raise ValueError("weights must be >= 0 (inf allowed)")
            self.weights = w


def _penalties(lam, weights, M):
    """Per-block penalty ``lam * w_g``; -1 marks a frozen block."""
    if weights is None:
        return np.full(M, float(lam))
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (M,):
        raise ValueError(f"expected {M} weights, got {weights.shape}")
    pen = np.where(np.isinf(weights), -1.0, lam * np.where(np.isinf(weights), 0.0, weights))
    return pen


def objective(instance: ProblemInstance, design: DuplicatedDesign, latent, lam, weights=None) -> float:
    """Latent objective ``(1/n)||y - X_tilde w||^2 + 2 lam sum_g w_g ||w_g||``."""
    r = instance.y - design.X_tilde @ latent
    pen = _penalties(lam, weights, design.groups.M)
    total = 0.0
    for g in range(design.groups.M):
        blk = latent[design.block(g)]
        if pen[g] < 0:
            if np.any(blk != 0):
                return np.inf
            continue
        total += pen[g] * np.linalg.norm(blk)
    return float(r @ r / instance.n + 2.0 * total)


def lambda_max(instance: ProblemInstance, groups: GroupCollection, weights=None) -> float:
    """Smallest lambda at which beta_hat = 0: ``max_g ||X_g^T y|| / (n w_g)``."""
    scores = np.array([np.linalg.norm(instance.X[:, g].T @ instance.y) / instance.n for g in groups])
    if weights is None:
        return float(scores.max())
    weights = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(np.isinf(weights), 0.0, scores / weights)
    if np.any((weights == 0) & (scores > 0)):
        return np.inf
    ratio = np.nan_to_num(ratio, nan=0.0)
    return float(ratio.max())


def fit(instance: ProblemInstance, groups: GroupCollection, config: SolverConfig,
        design: Optional[DuplicatedDesign] = None, backend=None) -> FitResult:
    """Fit the (optionally weighted) overlapping grouped lasso at one lambda.

    Non-convergence within ``config.max_iters`` sweeps is reported through
    ``converged`` rather than raised.
    """
    design = design if design is not None else duplicate_design(instance, groups)
    impl = kernels if backend is None else kernels.get_backend(backend)
    pen = _penalties(config.lam, config.weights, groups.M)
    D = design.n_latent
    if config.warm_start is not None:
        w = np.array(config.warm_start, dtype=float)
        if w.shape != (D,):
            raise ValueError("warm start has the wrong length")
    else:
        w = np.zeros(D)
    for g in np.flatnonzero(pen < 0):
        w[design.block(g)] = 0.0
    r = instance.y - design.X_tilde @ w
    evals, evecs, qoff = design.eigen()
    XT = np.ascontiguousarray(design.X_tilde.T)
    history = np.empty(config.max_iters)
    sweeps, converged, kkt = impl.bcd_solve(
        XT, design.starts, evals, evecs, qoff, pen, w, r,
        float(config.tolerance), int(config.max_iters), history)
    dec = Decomposition(groups, w)
    beta = design.collapse(w)
    weights = None if config.weights is None else np.asarray(config.weights, dtype=float)
    res = FitResult(
        beta_hat=beta,
        decomposition=dec,
        lam=float(config.lam),
        weights=weights,
        iterations=int(sweeps),
        objective=objective(instance, design, w, config.lam, weights),
        kkt_residual=float(kkt),
        converged=bool(converged),
        history=history[:sweeps].copy(),
    )
    return res


@dataclass
class KKTReport:
    max_residual: float
    per_group: np.ndarray


def kkt_check(instance: ProblemInstance, groups: GroupCollection, result: FitResult) -> KKTReport:
    """First-order optimality residuals of a fit, recomputed from scratch.

    Active block: ``||(1/n) X_g^T (y - X beta_hat) - lam w_g v_g / ||v_g||||``.
    Inactive block: ``max(0, ||(1/n) X_g^T (y - X beta_hat)|| - lam w_g)``.
    Frozen blocks (infinite weight) contribute 0.
    """
    resid = instance.y - instance.X @ result.beta_hat
    score = instance.X.T @ resid / instance.n
    weights = result.weights if result.weights is not None else np.ones(groups.M)
    out = np.zeros(groups.M)
    dec = result.decomposition
    for k, g in enumerate(groups):
        if np.isinf(weights[k]):
            continue
        t = result.lam * weights[k]
        v = dec.block(k)
        nv = np.linalg.norm(v)
        s = score[g]
        if nv > 0:
            out[k] = np.linalg.norm(s - t * v / nv)
        else:
            out[k] = max(0.0, np.linalg.norm(s) - t)
    return KKTReport(float(out.max()) if out.size else 0.0, out)


def fit_path(instance: ProblemInstance, groups: GroupCollection, lambdas: Sequence[float],
             config: Optional[SolverConfig] = None, design: Optional[DuplicatedDesign] = None,
             rel_tol: Optional[float] = None) -> list:
    """Warm-started fits along a strictly descending lambda grid.

    If ``rel_tol`` is given, each point uses tolerance ``rel_tol * max(lam, lam_min_floor)``
    instead of the fixed ``config.tolerance``.
    """
    lambdas = [float(l) for l in lambdas]
    if any(l < 0 for l in lambdas):
        raise ValueError("lambdas must be >= 0")
    if any(b >= a for a, b in zip(lambdas, lambdas[1:])):
        raise ValueError("lambdas must be strictly descending")
    config = config if config is not None else SolverConfig(lam=lambdas[0] if lambdas else 0.0)
    design = design if design is not None else duplicate_design(instance, groups)
    warm = config.warm_start
    floor = min([l for l in lambdas if l > 0], default=1.0)
    out = []
    for lam in lambdas:
        tol = config.tolerance if rel_tol is None else rel_tol * max(lam, floor)
        cfg = SolverConfig(lam=lam, tolerance=tol, max_iters=config.max_iters,
                           weights=config.weights, warm_start=warm)
        res = fit(instance, groups, cfg, design=design)
        res.gamma = None
        out.append(res)
        warm = res.decomposition.latent
    return out


def adaptive_weights(instance: ProblemInstance, groups: GroupCollection, gamma: float,
                     tolerance: float = 1e-10):
    """Weights ``1 / ||v_g^OLS||^gamma`` from a norm-minimizing decomposition of the OLS fit.

    Groups with ``v_g^OLS = 0`` get ``inf`` (frozen at zero). Returns the
    weights and the decomposition used, since the latter need not be unique.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    beta_ols = ols_fit(instance)
    # predictors outside every group are fixed at zero by the estimator
    beta_ols = np.where(groups.membership > 0, beta_ols, 0.0)
    dec = overlap_norm(beta_ols, groups, tolerance).decomposition
    norms = dec.norms()
    with np.errstate(divide="ignore"):
        weights = np.where(norms > dec.zero_tol(), 1.0 / norms**gamma, np.inf)
    return weights, dec


def fit_adaptive(instance: ProblemInstance, groups: GroupCollection, lam: float, gamma: float,
                 tolerance: float = DEFAULT_TOL, max_iters: int = DEFAULT_MAX_ITERS,
                 design: Optional[DuplicatedDesign] = None) -> FitResult:
    weights, _ = adaptive_weights(instance, groups, gamma)
    res = fit(instance, groups, SolverConfig(lam=lam, tolerance=tolerance, max_iters=max_iters,
                                             weights=weights), design=design)
    res.gamma = float(gamma)
    return res


def lambda_grid(lam_max: float, num: int = 50, ratio: float = 1e-4) -> np.ndarray:
    """``num`` log-spaced values from ``lam_max`` down to ``ratio * lam_max``."""
    if num == 1:
        return np.array([lam_max])
    return np.geomspace(lam_max, ratio * lam_max, num)
