"""Support partitions, identifiability probes, and the adaptive-estimator asymptotic study."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._parallel import pmap
from .model import GroupCollection, ProblemInstance, ols_fit
from .norm import overlap_norm, structured_sparsity
from .solver import SolverConfig, adaptive_weights, fit


@dataclass
class SupportPartition:
    H: np.ndarray
    H_c: np.ndarray
    G_H: np.ndarray
    G_Hc: np.ndarray
    G_Ho: np.ndarray

    def to_json(self) -> dict:
        return {k: (getattr(self, k) + 1).tolist() for k in ("H", "H_c", "G_H", "G_Hc", "G_Ho")}


def partition_support(beta0, groups: GroupCollection, zero_tol: float = 0.0) -> SupportPartition:
    if zero_tol < 0:
        raise ValueError("zero_tol must be >= 0")
    beta0 = np.asarray(beta0, dtype=float)
    in_H = np.abs(beta0) > zero_tol
    G_H, G_Hc, G_Ho = [], [], []
    for k, g in enumerate(groups):
        inside = in_H[g]
        if inside.all():
            G_H.append(k)
        elif not inside.any():
            G_Hc.append(k)
        else:
            G_Ho.append(k)
    as_idx = lambda xs: np.asarray(xs, dtype=np.intp)
    return SupportPartition(np.flatnonzero(in_H), np.flatnonzero(~in_H),
                            as_idx(G_H), as_idx(G_Hc), as_idx(G_Ho))


def separation_of_support_holds(beta0, groups: GroupCollection, zero_tol: float = 0.0) -> bool:
    """Some sub-collection covers exactly ``H`` and the rest covers exactly ``H^c``.

    With every predictor covered this is the same as ``G_Ho`` being empty.
    """
    part = partition_support(beta0, groups, zero_tol)
    if part.G_Ho.size:
        return False
    covered_H = np.zeros(groups.p, dtype=bool)
    for k in part.G_H:
        covered_H[groups[k]] = True
    covered_Hc = np.zeros(groups.p, dtype=bool)
    for k in part.G_Hc:
        covered_Hc[groups[k]] = True
    return bool(np.array_equal(np.flatnonzero(covered_H), part.H)
                and np.array_equal(np.flatnonzero(covered_Hc), part.H_c))


@dataclass
class AssumptionVerdict:
    verdict: str  # "violated" or "consistent"
    non_unique_at: list = field(default_factory=list)  # probe points with two distinct minimizers
    straddling_mass: float = 0.0  # largest ||v_g|| over G_Ho among minimizers of beta0
    probes: int = 0

    @property
    def violated(self) -> bool:
        return self.verdict == "violated"

    def to_json(self) -> dict:
        return {"verdict": self.verdict, "non_unique_probes": len(self.non_unique_at),
                "straddling_mass": self.straddling_mass, "probes": self.probes}


def _minimizers(b, groups, starts, rng, tol):
    found = [overlap_norm(b, groups, tol).decomposition]
    for _ in range(starts):
        found.append(overlap_norm(b, groups, tol, rng=rng).decomposition)
    # the pruning pass can land on a different minimizer than the plain solve
    sp = structured_sparsity(b, groups, tol)
    if sp.min_count < sp.count:
        allowed = np.zeros(groups.M, dtype=np.uint8)
        allowed[sp.pruned_active] = 1
        found.append(overlap_norm(b, groups, tol, allowed=allowed).decomposition)
    return found


def check_assumption_correct(beta0, groups: GroupCollection, perturbations: int = 20,
                             radius: float = 1e-2, seed=0, starts: int = 4,
                             tolerance: float = 1e-10, pattern_tol: float = 1e-4) -> AssumptionVerdict:
    """Falsification probe for local uniqueness of the minimizing decomposition.

    Re-solves the norm from several random starts (and after pruning) at
    ``beta0`` and at random points within ``radius`` of it. The verdict is
    "violated" when two minimizers differ in their per-group norms by more
    than ``pattern_tol * (1 + ||b||)`` at some probe point, or when a minimizer of
    ``beta0`` puts mass above that level on a straddling group. Otherwise
    "consistent", which is only a failure to find a counterexample.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    beta0 = np.asarray(beta0, dtype=float)
    rng = np.random.default_rng(seed)
    part = partition_support(beta0, groups)
    points = [beta0]
    for _ in range(perturbations):
        d = rng.standard_normal(groups.p)
        d *= radius * rng.uniform() / np.linalg.norm(d)
        points.append(beta0 + d)
    out = AssumptionVerdict("consistent", probes=len(points))
    for i, b in enumerate(points):
        decs = _minimizers(b, groups, starts, rng, tolerance)
        tol_b = pattern_tol * (1.0 + np.linalg.norm(b))
        norms = np.array([d.norms() for d in decs])
        if np.max(norms.max(axis=0) - norms.min(axis=0)) > tol_b:
            out.non_unique_at.append(i)
        if i == 0 and part.G_Ho.size:
            out.straddling_mass = float(norms[:, part.G_Ho].max())
    if out.non_unique_at or out.straddling_mass > pattern_tol * (1.0 + np.linalg.norm(beta0)):
        out.verdict = "violated"
    return out


# --------------------------------------------------------------------------
# asymptotic study


@dataclass(frozen=True)
class LambdaRule:
    """``lam(n) = c * n^(-a)``."""

    c: float = 1.0
    a: float = 0.7

    def __call__(self, n: int) -> float:
        return self.c * n ** (-self.a)

    def validate(self, gamma: float) -> None:
        """Require ``sqrt(n) lam -> 0`` and ``n^((gamma+1)/2) lam -> inf``."""
        if not self.c > 0:
            raise ValueError("lambda rule constant must be positive")
        if not self.a > 0.5:
            raise ValueError(f"sqrt(n)*lambda = c n^{0.5 - self.a:g} does not vanish (need a > 1/2)")
        if not self.a < (gamma + 1) / 2:
            raise ValueError(f"n^((gamma+1)/2)*lambda does not diverge (need a < {(gamma + 1) / 2:g})")


def ar1_covariance(p: int, rho: float) -> np.ndarray:
    i = np.arange(p)
    return rho ** np.abs(i[:, None] - i[None, :])


def population_gram(p: int, design: str = "identity", rho: float = 0.3) -> np.ndarray:
    if design == "identity":
        return np.eye(p)
    if design == "ar1":
        return ar1_covariance(p, rho)
    raise ValueError(f"unknown design {design!r}")


def _disjoint_pairs(p):
    return GroupCollection([[2 * i, 2 * i + 1] for i in range(p // 2)], p)


def correct_groups_preset():
    """Disjoint pairs over p=10 with the signal on the first two pairs."""
    groups = _disjoint_pairs(10)
    beta0 = np.zeros(10)
    beta0[:4] = [1.0, -0.5, 0.75, 1.0]
    return groups, beta0


def wrong_groups_preset():
    """Same pairs, signal on {1,2,3}: the pair {3,4} straddles the support."""
    groups = _disjoint_pairs(10)
    beta0 = np.zeros(10)
    beta0[:3] = [1.0, -0.5, 0.75]
    return groups, beta0


def straddle_preset():
    """Pairs plus a bridging group {2,3}; the minimizing decomposition leaves the bridge empty."""
    groups = GroupCollection([[0, 1], [2, 3], [1, 2], [4, 5]], 6)
    beta0 = np.zeros(6)
    beta0[:2] = [1.0, 1.0]
    return groups, beta0


PRESETS = {"correct": correct_groups_preset, "wrong": wrong_groups_preset,
           "straddle": straddle_preset}


def support_tolerance(beta_hat) -> float:
    return 1e-6 * float(np.max(np.abs(beta_hat), initial=0.0)) + 1e-12


def _draw_design(L, n, rng):
    return rng.standard_normal((n, L.shape[0])) @ L.T


def _study_trial(args):
    groups, beta0, H, sigma, L, n, gamma, lam, seed, trial, tol, max_iters = args
    rng = np.random.default_rng([int(seed), int(n), int(trial)])
    X = _draw_design(L, n, rng)
    y = X @ beta0 + sigma * rng.standard_normal(n)
    inst = ProblemInstance(X, y, beta0=beta0, sigma=sigma)
    weights, dec = adaptive_weights(inst, groups, gamma)
    res = fit(inst, groups, SolverConfig(lam=lam, tolerance=tol, max_iters=max_iters, weights=weights))
    b = res.beta_hat
    supp = np.flatnonzero(np.abs(b) > support_tolerance(b))
    Hc = np.setdiff1d(np.arange(groups.p), H)
    return {
        "converged": res.converged,
        "recovered": bool(np.array_equal(supp, H)),
        "false_positive": bool(np.intersect1d(supp, Hc).size > 0),
        "max_abs_hc": float(np.max(np.abs(b[Hc]), initial=0.0)),
        "z": math.sqrt(n) * (b[H] - beta0[H]),
        "ols_norms": dec.norms(),
    }


@dataclass
class AsymptoticReport:
    n_grid: list
    gamma: float
    lambda_rule: LambdaRule
    sigma: float
    trials: int
    H: np.ndarray
    recovery_rate: list
    false_positive_rate: list
    covariance: list  # empirical covariance of sqrt(n)(beta_hat_H - beta0_H), per n
    target: np.ndarray  # sigma^2 M_H^{-1}
    frobenius_error: list
    hc_quantiles: list  # (50%, 90%, 99%) of max |beta_hat_{H^c}| per n
    excluded: list
    per_trial: list = field(default_factory=list, repr=False)

    def covariance_non_increasing(self, allowance: float = 1.2) -> bool:
        e = self.frobenius_error
        return all(b <= allowance * a for a, b in zip(e, e[1:]))

    def to_json(self) -> dict:
        return {
            "n_grid": list(self.n_grid),
            "gamma": self.gamma,
            "lambda_rule": {"c": self.lambda_rule.c, "a": self.lambda_rule.a},
            "sigma": self.sigma,
            "trials": self.trials,
            "H": (self.H + 1).tolist(),
            "recovery_rate": self.recovery_rate,
            "false_positive_rate": self.false_positive_rate,
            "covariance": [c.tolist() for c in self.covariance],
            "target_covariance": self.target.tolist(),
            "frobenius_relative_error": self.frobenius_error,
            "max_abs_hc_quantiles": self.hc_quantiles,
            "excluded": self.excluded,
        }

    csv_header = ["n", "trial", "converged", "recovered", "false_positive", "max_abs_hc", "ols_group_norms"]

    def rows(self):
        for r in self.per_trial:
            yield [r["n"], r["trial"], r["converged"], r["recovered"], r["false_positive"],
                   r["max_abs_hc"], " ".join(f"{x:.17g}" for x in r["ols_norms"])]


def run_asymptotic_study(groups: GroupCollection, beta0, sigma: float, n_grid: Sequence[int],
                         gamma: float = 1.0, lambda_rule: LambdaRule = LambdaRule(),
                         trials: int = 300, seed=0, design: str = "identity",
                         gram: Optional[np.ndarray] = None, tolerance: float = 1e-9,
                         max_iters: int = 100_000, jobs: int = 1) -> AsymptoticReport:
    """Monte Carlo for the adaptive estimator over a grid of sample sizes.

    Rows of ``X`` are i.i.d. ``N(0, M)`` so that ``X^T X / n -> M``. Each
    ``(n, trial)`` pair has its own RNG stream.
    """
    lambda_rule.validate(gamma)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    beta0 = np.asarray(beta0, dtype=float)
    p = groups.p
    Mpop = population_gram(p, design) if gram is None else np.asarray(gram, dtype=float)
    L = np.linalg.cholesky(Mpop)
    H = partition_support(beta0, groups).H
    target = sigma**2 * np.linalg.inv(Mpop[np.ix_(H, H)])
    report = AsymptoticReport(list(map(int, n_grid)), float(gamma), lambda_rule, float(sigma),
                              trials, H, [], [], [], target, [], [], [])
    for n in n_grid:
        lam = lambda_rule(n)
        out = pmap(_study_trial, [(groups, beta0, H, sigma, L, int(n), gamma, lam, seed, t,
                                   tolerance, max_iters) for t in range(trials)], jobs)
        kept = [r for r in out if r["converged"]]
        report.excluded.append(trials - len(kept))
        report.recovery_rate.append(float(np.mean([r["recovered"] for r in kept])))
        report.false_positive_rate.append(float(np.mean([r["false_positive"] for r in kept])))
        Z = np.array([r["z"] for r in kept])
        C = np.atleast_2d(np.cov(Z, rowvar=False))
        C = 0.5 * (C + C.T)
        report.covariance.append(C)
        report.frobenius_error.append(float(np.linalg.norm(C - target) / np.linalg.norm(target)))
        hc = np.array([r["max_abs_hc"] for r in kept])
        report.hc_quantiles.append([float(x) for x in np.quantile(hc, [0.5, 0.9, 0.99])])
        for t, r in enumerate(out):
            report.per_trial.append({"n": int(n), "trial": t, **{k: r[k] for k in
                                     ("converged", "recovered", "false_positive", "max_abs_hc", "ols_norms")}})
    return report


def _ols_trial(args):
    groups, beta0, sigma, L, n, gamma, seed, trial = args
    rng = np.random.default_rng([int(seed), int(n), int(trial)])
    X = _draw_design(L, n, rng)
    y = X @ beta0 + sigma * rng.standard_normal(n)
    dec = overlap_norm(ols_fit(ProblemInstance(X, y)), groups, 1e-10).decomposition
    return n ** (gamma / 2) * dec.norms() ** gamma


def ols_straddle_statistic(groups: GroupCollection, beta0, sigma: float, n_grid: Sequence[int],
                           gamma: float = 1.0, trials: int = 200, seed=0, design: str = "identity",
                           quantile: float = 0.95, jobs: int = 1):
    """Quantiles over trials of ``n^(gamma/2) ||v_g^OLS||^gamma`` for each straddling group.

    Returns an array of shape ``(len(n_grid), |G_Ho|)``. Boundedness in
    probability shows up as quantiles that stop growing with ``n``.
    """
    beta0 = np.asarray(beta0, dtype=float)
    G_Ho = partition_support(beta0, groups).G_Ho
    L = np.linalg.cholesky(population_gram(groups.p, design))
    rows = []
    for n in n_grid:
        stats = np.array(pmap(_ols_trial, [(groups, beta0, sigma, L, int(n), gamma, seed, t)
                                           for t in range(trials)], jobs))
        rows.append(np.quantile(stats[:, G_Ho], quantile, axis=0))
    return np.array(rows)
