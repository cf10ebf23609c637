"""Finite-sample constants, the restricted-eigenvalue estimate, and bound checks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ._parallel import pmap
from .model import GroupCollection, ProblemInstance
from .norm import overlap_norm, structured_sparsity
from .solver import SolverConfig, duplicate_design, fit

# diag(X^T X / n) must be within this of 1 for the finite-sample results
NORMALIZATION_TOL = 1e-6
MAX_EXCLUDED_FRACTION = 0.05


@dataclass
class TheoryConstants:
    lambda_theorem: float
    lambda_alt: float
    lambda_oracle: float
    A: float
    q: float
    q_alt: float
    q_oracle: float
    rho_g: np.ndarray
    rho_X: float
    kappa_upper: float
    s: Optional[int]
    M: int
    max_size: int
    min_size: int
    overlap: int
    n: int
    sigma: float

    @property
    def complexity(self) -> float:
        """``max_g|g| + A sqrt(max_g|g|) log M``, the factor shared by both bounds."""
        return self.max_size + self.A * math.sqrt(self.max_size) * math.log(self.M)

    def nominal(self, which: str = "theorem") -> float:
        q = {"theorem": self.q, "alt": self.q_alt, "oracle": self.q_oracle}[which]
        return 1.0 - self.M ** (1.0 - q)

    def lasso_advantage(self, p: int) -> bool:
        """Whether ``sqrt(max|g|) log M + max|g| < log p``."""
        return math.sqrt(self.max_size) * math.log(self.M) + self.max_size < math.log(p)

    def to_json(self) -> dict:
        out = asdict(self)
        out["rho_g"] = self.rho_g.tolist()
        return out


def group_rho(X: np.ndarray, groups: GroupCollection) -> np.ndarray:
    """``rho_g = ||(X_g^T X_g / n)^{1/2}||_op``, the scale of the group score.

    ``X_g^T eps / (sigma sqrt(n))`` has covariance ``X_g^T X_g / n``, so its squared
    norm is at most ``rho_g^2`` times a chi-squared with ``|g|`` degrees. This is
    the spectral norm of the Cholesky factor of ``X_g^T X_g / n``; it equals 1
    for orthonormal blocks.
    """
    n = X.shape[0]
    out = np.empty(groups.M)
    for k, g in enumerate(groups):
        Xg = X[:, g]
        out[k] = math.sqrt(max(np.linalg.eigvalsh(Xg.T @ Xg / n)[-1], 0.0))
    return out


def compute_constants(instance: ProblemInstance, groups: GroupCollection, A: float,
                      sigma: float, s: Optional[int] = None) -> TheoryConstants:
    if not A > 8:
        raise ValueError("A must exceed 8")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    X = instance.X
    n, p = X.shape
    diag = np.einsum("ij,ij->j", X, X) / n
    if np.max(np.abs(diag - 1.0)) > NORMALIZATION_TOL:
        raise ValueError("the diagonal of X^T X / n must be 1 (column-unit-diag normalization)")
    M = groups.M
    gmax, gmin, ovl = groups.max_size, groups.min_size, groups.overlap
    logM = math.log(M)
    lam = 2 * sigma * math.sqrt(gmax * ovl) / math.sqrt(n) * math.sqrt(1 + A * logM / math.sqrt(gmax))
    lam_alt = 2 * sigma * math.sqrt(ovl) / math.sqrt(n) * math.sqrt(gmax + A * logM)
    lam_oracle = 2 * sigma * math.sqrt(gmax) / math.sqrt(n) * math.sqrt(1 + A * logM / math.sqrt(gmax))
    rho = group_rho(X, groups)
    inv2 = float(np.min(rho ** -2.0))
    q = inv2 * min(A * math.sqrt(gmin) / 8, 8 * logM)
    q_alt = inv2 * min(A / 8, 8 * logM / gmax)
    q_oracle = min(A * math.sqrt(gmin) / 8, 8 * logM)
    rho_X = float(np.linalg.eigvalsh(X.T @ X / n)[0]) if n >= p else 0.0
    rho_X = max(rho_X, 0.0)
    kappa_upper = math.sqrt(rho_X / (M * ovl))
    return TheoryConstants(lam, lam_alt, lam_oracle, float(A), q, q_alt, q_oracle, rho, rho_X,
                           kappa_upper, s, M, gmax, gmin, ovl, n, float(sigma))


def prediction_bound(c: TheoryConstants, kappa: float) -> float:
    """Right-hand side for ``(1/n)||X(beta_hat - beta0)||^2``."""
    return 64 * c.sigma**2 / (kappa**2 * c.n) * c.complexity


def estimation_bound(c: TheoryConstants, kappa: float) -> float:
    """Right-hand side for ``||beta_hat - beta0||_{2,1,G}``."""
    return 32 * c.sigma / (kappa * math.sqrt(c.n)) * math.sqrt(c.complexity)


# --------------------------------------------------------------------------
# restricted eigenvalue


@dataclass
class KappaEstimate:
    kappa_hat: float
    delta: np.ndarray
    J: np.ndarray
    kappa_upper: float
    below_upper: Optional[bool]
    evaluations: int
    s: int


def _cone_ratio(delta, X, groups, s, tol):
    """True restricted-eigenvalue ratio of ``delta`` (inf when off the cone)."""
    res = overlap_norm(delta, groups, tol)
    norms = res.decomposition.norms()
    order = np.argsort(-norms, kind="stable")
    J = order[:s]
    top = norms[J].sum()
    rest = norms.sum() - top
    if top <= 0 or rest > 3 * top * (1 + 1e-12):
        return np.inf, res.decomposition, J
    num = np.linalg.norm(X @ delta) / math.sqrt(X.shape[0])
    return num / top, res.decomposition, J


def _draw_cone_direction(groups, s, rng):
    M = groups.M
    J = rng.choice(M, size=s, replace=False)
    Jc = np.setdiff1d(np.arange(M), J)
    delta = np.zeros(groups.p)
    inside = 0.0
    for k in J:
        v = rng.standard_normal(len(groups[k]))
        inside += np.linalg.norm(v)
        delta[groups[k]] += v
    if Jc.size:
        u = rng.uniform(0, 3)
        parts = [rng.standard_normal(len(groups[k])) for k in Jc]
        outside = sum(np.linalg.norm(v) for v in parts)
        for k, v in zip(Jc, parts):
            delta[groups[k]] += v * (u * inside / outside)
    return delta


def _refine(delta, X, G, design, groups, s, tol, steps):
    ratio, dec, J = _cone_ratio(delta, X, groups, s, tol)
    evals = 1
    w = dec.latent.copy()
    eta = 0.1
    for _ in range(steps):
        d = design.collapse(w)
        Gd = G @ d
        num = math.sqrt(max(d @ Gd, 0.0))
        if num == 0:
            break
        grad_num = Gd[design.back] / num
        den = 0.0
        grad_den = np.zeros_like(w)
        for k in J:
            blk = design.block(k)
            nb = np.linalg.norm(w[blk])
            den += nb
            if nb > 0:
                grad_den[blk] = w[blk] / nb
        grad = grad_num / den - num * grad_den / den**2
        gn = np.linalg.norm(grad)
        if gn == 0:
            break
        scale = np.linalg.norm(w)
        cand = w - eta * scale * grad / gn
        new_delta = design.collapse(cand)
        r2, dec2, J2 = _cone_ratio(new_delta, X, groups, s, tol)
        evals += 1
        if r2 < ratio:
            ratio, delta, J = r2, new_delta, J2
            w = dec2.latent / np.linalg.norm(dec2.latent)
            eta = min(eta * 1.5, 0.5)
        else:
            eta *= 0.5
            if eta < 1e-7:
                break
    return ratio, delta, J, evals


def estimate_kappa(instance: ProblemInstance, groups: GroupCollection, s: int,
                   samples: int = 200, seed=0, refine_starts: int = 5,
                   refine_steps: int = 300, tolerance: float = 1e-9) -> KappaEstimate:
    """Sampled upper estimate of the restricted-eigenvalue constant ``kappa(s)``.

    Every evaluated direction is cone-feasible, so its ratio is at least the
    true ``kappa(s)``; the minimum over directions estimates it from above.
    Random cone directions are followed by a descent refinement of the best
    few (gradient step on the latent ratio, accepted only when the re-solved
    true ratio drops).
    """
    if not 1 <= s <= groups.M:
        raise ValueError(f"s must lie in [1, {groups.M}]")
    X = instance.X
    n = instance.n
    G = X.T @ X / n
    design = duplicate_design(instance, groups)
    rng = np.random.default_rng(seed)
    found = []
    for _ in range(samples):
        delta = _draw_cone_direction(groups, s, rng)
        ratio, _, J = _cone_ratio(delta, X, groups, s, tolerance)
        found.append((ratio, delta, J))
    evaluations = samples
    found.sort(key=lambda t: t[0])
    best = found[0]
    for ratio, delta, J in found[:refine_starts]:
        if not np.isfinite(ratio):
            continue
        r, d, Jr, ev = _refine(delta, X, G, design, groups, s, tolerance, refine_steps)
        evaluations += ev
        if r < best[0]:
            best = (r, d, Jr)
    rho_X = float(np.linalg.eigvalsh(G)[0]) if n >= instance.p else 0.0
    upper = math.sqrt(max(rho_X, 0.0) / (groups.M * groups.overlap))
    below = None if rho_X <= 0 else bool(best[0] <= upper + 1e-8)
    return KappaEstimate(float(best[0]), best[1], np.sort(best[2]), upper, below, evaluations, s)


# --------------------------------------------------------------------------
# Monte Carlo bound checks


@dataclass
class BoundReport:
    kind: str
    lam: float
    kappa: float
    nominal_rate: float
    trials: int
    excluded: int
    prediction_lhs: np.ndarray
    prediction_rhs: float
    estimation_lhs: np.ndarray
    estimation_rhs: float
    holds_prediction: np.ndarray
    holds_estimation: np.ndarray
    constants: Optional[TheoryConstants] = None
    extra: dict = field(default_factory=dict)

    @property
    def holds(self) -> np.ndarray:
        return self.holds_prediction & self.holds_estimation

    @property
    def empirical_hold_rate(self) -> float:
        used = self.trials - self.excluded
        return float(self.holds.sum() / used) if used else float("nan")

    @property
    def valid(self) -> bool:
        return self.excluded <= MAX_EXCLUDED_FRACTION * self.trials

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "lambda": self.lam,
            "kappa": self.kappa,
            "nominal_rate": self.nominal_rate,
            "trials": self.trials,
            "excluded": self.excluded,
            "valid": self.valid,
            "empirical_hold_rate": self.empirical_hold_rate,
            "prediction_rhs": self.prediction_rhs,
            "estimation_rhs": self.estimation_rhs,
            "prediction_hold_rate": _rate(self.holds_prediction, self.trials - self.excluded),
            "estimation_hold_rate": _rate(self.holds_estimation, self.trials - self.excluded),
            "constants": None if self.constants is None else self.constants.to_json(),
            **self.extra,
        }

    def rows(self):
        for t in range(len(self.prediction_lhs)):
            yield [t, self.prediction_lhs[t], self.prediction_rhs, self.estimation_lhs[t],
                   self.estimation_rhs, bool(self.holds_prediction[t]),
                   bool(self.holds_estimation[t])]

    csv_header = ["trial", "prediction_lhs", "prediction_rhs", "estimation_lhs",
                  "estimation_rhs", "holds_prediction", "holds_estimation"]


def _rate(flags, used):
    return float(np.sum(flags) / used) if used else float("nan")


def _noise_draw(instance, sigma, seed, t):
    rng = np.random.default_rng([int(seed), int(t)])
    return instance.X @ instance.beta0 + sigma * rng.standard_normal(instance.n)


def _theorem_trial(args):
    instance, groups, lam, sigma, seed, t, tol, max_iters = args
    y = _noise_draw(instance, sigma, seed, t)
    res = fit(instance.with_response(y), groups, SolverConfig(lam=lam, tolerance=tol, max_iters=max_iters))
    if not res.converged:
        return None
    delta = res.beta_hat - instance.beta0
    pred = float(np.sum((instance.X @ delta) ** 2) / instance.n)
    norm = overlap_norm(delta, groups, 1e-9)
    return pred, norm.value, norm.decomposition.norms()


def _require_truth(instance):
    if instance.beta0 is None or instance.sigma is None:
        raise ValueError("the instance must carry beta0 and sigma")


def verify_theorem1(instance: ProblemInstance, groups: GroupCollection, A: float = 9.0,
                    trials: int = 200, seed=0, lambda_rule: str = "theorem",
                    kappa: Optional[float] = None, s: Optional[int] = None,
                    tolerance: float = 1e-9, max_iters: int = 100_000, jobs: int = 1,
                    kappa_samples: int = 200) -> BoundReport:
    """Monte Carlo check of the prediction and overlap-norm estimation bounds.

    Noise is redrawn per trial from ``(seed, trial)``; the design and ``beta0``
    stay fixed. Fits that do not converge are excluded and counted.
    """
    _require_truth(instance)
    sigma = float(instance.sigma)
    if s is None:
        s = max(1, structured_sparsity(instance.beta0, groups).min_count)
    c = compute_constants(instance, groups, A, sigma, s)
    if kappa is None:
        kappa = estimate_kappa(instance, groups, s, samples=kappa_samples, seed=seed).kappa_hat
    if lambda_rule == "theorem":
        lam, nominal = c.lambda_theorem, c.nominal("theorem")
    elif lambda_rule == "alt":
        lam, nominal = c.lambda_alt, c.nominal("alt")
    else:
        raise ValueError("lambda_rule must be 'theorem' or 'alt'")
    out = pmap(_theorem_trial,
               [(instance, groups, lam, sigma, seed, t, tolerance, max_iters) for t in range(trials)],
               jobs)
    pred = np.full(trials, np.nan)
    est = np.full(trials, np.nan)
    for t, r in enumerate(out):
        if r is not None:
            pred[t], est[t] = r[0], r[1]
    excluded = int(np.isnan(pred).sum())
    p_rhs, e_rhs = prediction_bound(c, kappa), estimation_bound(c, kappa)
    return BoundReport(
        kind=f"theorem1:{lambda_rule}", lam=lam, kappa=float(kappa), nominal_rate=nominal,
        trials=trials, excluded=excluded, prediction_lhs=pred, prediction_rhs=p_rhs,
        estimation_lhs=est, estimation_rhs=e_rhs,
        holds_prediction=np.nan_to_num(pred, nan=np.inf) <= p_rhs,
        holds_estimation=np.nan_to_num(est, nan=np.inf) <= e_rhs,
        constants=c, extra={"s": s},
    )


def verify_oracle_inequality(instance: ProblemInstance, groups: GroupCollection, A: float = 9.0,
                             trials: int = 200, seed=0, tolerance: float = 1e-9,
                             max_iters: int = 100_000, jobs: int = 1) -> BoundReport:
    """Check ``(1/n)||X D||^2 + lam ||D||_{2,1,G} <= 4 lam sum_{g in J} ||v_g^D||`` with ``D = beta_hat - beta0``.

    ``lam`` is the oracle-inequality choice (no overlap factor); ``J`` is the active set
    of the computed norm-minimizing decomposition of ``beta0``. In the report
    the "prediction" columns hold the left side and the "estimation" columns
    the right side; ``holds_estimation`` is all true.
    """
    _require_truth(instance)
    sigma = float(instance.sigma)
    c = compute_constants(instance, groups, A, sigma)
    lam = c.lambda_oracle
    J = overlap_norm(instance.beta0, groups, 1e-10).decomposition.active
    out = pmap(_theorem_trial,
               [(instance, groups, lam, sigma, seed, t, tolerance, max_iters) for t in range(trials)],
               jobs)
    lhs = np.full(trials, np.nan)
    rhs = np.full(trials, np.nan)
    for t, r in enumerate(out):
        if r is not None:
            pred, nv, norms = r
            lhs[t] = pred + lam * nv
            rhs[t] = 4 * lam * norms[J].sum()
    excluded = int(np.isnan(lhs).sum())
    holds = np.nan_to_num(lhs, nan=np.inf) <= np.nan_to_num(rhs, nan=-np.inf) + 1e-12
    rep = BoundReport(
        kind="oracle", lam=lam, kappa=float("nan"), nominal_rate=c.nominal("oracle"),
        trials=trials, excluded=excluded, prediction_lhs=lhs, prediction_rhs=float("nan"),
        estimation_lhs=rhs, estimation_rhs=float("nan"), holds_prediction=holds,
        holds_estimation=np.ones(trials, dtype=bool), constants=c,
        extra={"J": (J + 1).tolist(), "lasso_advantage": c.lasso_advantage(instance.p)},
    )
    return rep


# --------------------------------------------------------------------------
# auxiliary inequalities


def chi2_tail_bound(D: int, x: float) -> float:
    """Upper bound on ``P(chi2_D > D + x)``: ``exp(-min(x, x^2/D) / 8)``."""
    if D < 1:
        raise ValueError("D must be >= 1")
    if not x > 0:
        raise ValueError("x must be positive")
    return math.exp(-min(x, x * x / D) / 8.0)


def chi2_tail_check(D_values=(1, 2, 4, 8, 16), x_factors=(0.5, 1, 2, 4),
                    samples: int = 1_000_000, seed=0):
    """Compare the bound with Monte Carlo tails on a ``(D, x = factor * D)`` grid.

    Returns a list of ``(D, x, bound, mc_tail, holds)``.
    """
    rows = []
    for D in D_values:
        draws = np.random.default_rng([int(seed), int(D)]).chisquare(D, samples)
        for f in x_factors:
            x = f * D
            tail = float(np.mean(draws > D + x))
            bound = chi2_tail_bound(D, x)
            rows.append((D, x, bound, tail, tail <= bound))
    return rows


def holder_extension_check(alpha, beta, groups: GroupCollection, tolerance: float = 1e-8):
    """``alpha^T beta <= sqrt(G_overlap) * max_g ||alpha_g|| * ||beta||_{2,1,G}``."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    lhs = float(alpha @ beta)
    amax = max(np.linalg.norm(alpha[g]) for g in groups)
    rhs = math.sqrt(groups.overlap) * amax * overlap_norm(beta, groups).value
    return lhs, rhs, lhs <= rhs + tolerance
