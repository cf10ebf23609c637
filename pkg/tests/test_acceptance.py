"""Acceptance checks, one PASS/FAIL line per criterion.

Run under pytest (lines are collected in the terminal summary) or directly
with ``python tests/test_acceptance.py``.
"""
import contextlib
import io
import math
import os
import sys
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import conftest  # noqa: E402
from oracles import group_lasso_bst, lasso_cd, orthonormal_blocks  # noqa: E402
from overlasso.asymptotics import LambdaRule, PRESETS, check_assumption_correct, run_asymptotic_study  # noqa: E402
from overlasso.cli import main as cli_main  # noqa: E402
from overlasso.experiments import ExperimentConfig, plateau_index, run_experiment  # noqa: E402
from overlasso.model import (GroupCollection, ProblemInstance, generate_instance,  # noqa: E402
                             make_contiguous_groups, ols_fit, random_group_collection,
                             singleton_groups)
from overlasso.norm import overlap_norm, overlap_norm_oracle  # noqa: E402
from overlasso.solver import SolverConfig, fit, fit_path, kkt_check, lambda_grid, lambda_max  # noqa: E402
from overlasso.theory import chi2_tail_check, estimate_kappa, holder_extension_check, verify_theorem1  # noqa: E402

JOBS = os.cpu_count() or 1


def record(label, ok, detail):
    line = f"CRITERION {label}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def check(*results):
    assert all(results)


def _free(beta, G):
    return sum(max(0, int(G.membership[i]) - 1) for i in np.flatnonzero(beta))


def test_criterion_1_norm_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, done = 0.0, 0
    while done < 100:
        p = int(rng.integers(1, 7))
        G = random_group_collection(p, int(rng.integers(1, min(4, 2**p - 1) + 1)), rng)
        beta = rng.standard_normal(p) * rng.uniform(0.1, 10)
        if _free(beta, G) > 6:  # beyond the brute-force oracle's reach
            continue
        worst = max(worst, abs(overlap_norm(beta, G).value - overlap_norm_oracle(beta, G)))
        done += 1
    chain = overlap_norm(np.ones(3), GroupCollection([[0, 1], [1, 2]], 3)).value
    runtime = time.perf_counter() - t0
    check(record("1", worst <= 1e-4 and abs(chain - math.sqrt(5)) <= 1e-6 and runtime < 30,
                 f"max |norm - oracle| = {worst:.2e} over 100 instances; example = {chain:.9f}; "
                 f"{runtime:.1f}s"))


def test_criterion_2_reductions():
    worst_lasso = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        X = rng.standard_normal((40, 10))
        b = np.zeros(10)
        b[:3] = rng.standard_normal(3)
        inst = ProblemInstance(X, X @ b + 0.3 * rng.standard_normal(40))
        G = singleton_groups(10)
        lams = lambda_grid(lambda_max(inst, G), 10, 1e-3)
        for r in fit_path(inst, G, lams, SolverConfig(lam=lams[0], tolerance=1e-12)):
            worst_lasso = max(worst_lasso, np.max(np.abs(r.beta_hat - lasso_cd(X, inst.y, r.lam))))
    worst_group = 0.0
    G = GroupCollection([[0, 1, 2], [3, 4], [5, 6, 7, 8], [9, 10, 11]], 12)
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        X = orthonormal_blocks(rng.standard_normal((50, 12)), G)
        y = X[:, :5] @ rng.standard_normal(5) + 0.3 * rng.standard_normal(50)
        inst = ProblemInstance(X, y)
        lams = lambda_grid(lambda_max(inst, G), 10, 1e-3)
        for r in fit_path(inst, G, lams, SolverConfig(lam=lams[0], tolerance=1e-12)):
            worst_group = max(worst_group, np.max(np.abs(r.beta_hat - group_lasso_bst(X, y, G, r.lam))))
    a = record("2a", worst_lasso <= 1e-6, f"singleton fits vs lasso CD: max diff {worst_lasso:.2e}")
    b = record("2b", worst_group <= 1e-6, f"disjoint fits vs block soft-threshold: max diff {worst_group:.2e}")
    check(a, b)


def test_criterion_3_optimality():
    tol = 1e-8
    worst_ratio, fits = 0.0, 0
    for seed in range(10):
        G = make_contiguous_groups(24, 4, 1 + seed % 4)
        inst = generate_instance(24, 48, G, 2, 0.1, seed)
        lams = lambda_grid(lambda_max(inst, G), 10, 1e-3)
        for r in fit_path(inst, G, lams, SolverConfig(lam=lams[0], tolerance=tol)):
            if r.converged:
                fits += 1
                worst_ratio = max(worst_ratio, kkt_check(inst, G, r).max_residual / tol)
    worst_ols = 0.0
    for seed in range(5):
        G = make_contiguous_groups(12, 4, 3)
        inst = generate_instance(12, 60, G, 2, 0.1, seed, normalization="column-unit-diag")
        r = fit(inst, G, SolverConfig(lam=0.0, tolerance=1e-12))
        worst_ols = max(worst_ols, np.max(np.abs(r.beta_hat - ols_fit(inst))))
    zero = True
    for seed in range(5):
        G = make_contiguous_groups(24, 4, 2)
        inst = generate_instance(24, 48, G, 2, 0.1, seed)
        lmax = lambda_max(inst, G)
        for factor in (1.0, 1.5):
            zero &= not np.any(fit(inst, G, SolverConfig(lam=factor * lmax)).beta_hat)
    a = record("3a", worst_ratio <= 10, f"max KKT residual / tolerance = {worst_ratio:.2f} over {fits} fits")
    b = record("3b", worst_ols <= 1e-6, f"lambda = 0 vs OLS: max diff {worst_ols:.2e}")
    c = record("3c", zero, "lambda >= lambda_max gives exact zeros")
    check(a, b, c)


def desk_theorem_family():
    G = make_contiguous_groups(64, 8, 2)
    return generate_instance(64, 128, G, 2, 0.1, 1, normalization="column-unit-diag"), G


def test_criterion_4_theorem1():
    inst, G = desk_theorem_family()
    t0 = time.perf_counter()
    rep = verify_theorem1(inst, G, A=9.0, trials=200, seed=0, jobs=JOBS)
    runtime = time.perf_counter() - t0
    ok = rep.valid and rep.empirical_hold_rate >= rep.nominal_rate and runtime < 300
    check(record("4", ok, f"hold rate {rep.empirical_hold_rate:.3f} vs nominal {rep.nominal_rate:.3f}; "
                          f"kappa_hat {rep.kappa:.4f}; excluded {rep.excluded}; {runtime:.1f}s"))


def test_criterion_5_inequalities():
    rows = chi2_tail_check(samples=1_000_000, seed=0)
    chi_viol = sum(1 for r in rows if not r[4])
    rng = np.random.default_rng(5)
    holder_viol = 0
    for _ in range(1000):
        p = int(rng.integers(2, 9))
        G = random_group_collection(p, int(rng.integers(1, min(4, 2**p - 1) + 1)), rng)
        holder_viol += not holder_extension_check(rng.standard_normal(p), rng.standard_normal(p), G)[2]
    a = record("5a", chi_viol == 0, f"chi-squared tail bound: {chi_viol} violations on {len(rows)} grid points")
    b = record("5b", holder_viol == 0, f"Holder extension: {holder_viol} violations in 1000 draws")
    check(a, b)


def test_criterion_6_kappa():
    inst = ProblemInstance(math.sqrt(8) * np.eye(8), np.zeros(8))
    details, conv, below = [], True, True
    for s in (1, 2, 4):
        est = estimate_kappa(inst, singleton_groups(8), s, samples=200, seed=0)
        target = 1 / math.sqrt(s)
        conv &= target - 1e-9 <= est.kappa_hat <= 1.05 * target
        below &= est.below_upper
        details.append(f"s={s}: {est.kappa_hat:.4f} (1/sqrt(s)={target:.4f}, upper={est.kappa_upper:.4f})")
    rng = np.random.default_rng(6)
    for G in (make_contiguous_groups(16, 4, 2), make_contiguous_groups(16, 4, 3)):
        X = rng.standard_normal((64, 16))
        X /= np.sqrt((X**2).mean(axis=0))
        est = estimate_kappa(ProblemInstance(X, np.zeros(64)), G, 2, samples=100, seed=0)
        below &= est.below_upper
        details.append(f"gaussian M={G.M}: {est.kappa_hat:.4f} (upper={est.kappa_upper:.4f})")
    a = record("6a", conv, "identity design within 5% above 1/sqrt(s); " + "; ".join(details[:3]))
    b = record("6b", below, "kappa_hat <= kappa_upper; " + "; ".join(details))
    check(a, b)


@pytest.mark.slow
def test_criterion_7_simulation():
    t0 = time.perf_counter()
    ov = run_experiment(ExperimentConfig("overlap_study", scale_factor=0.25, trials=20, sigma=0.01), jobs=JOBS)
    ss = run_experiment(ExperimentConfig("sample_size_study", scale_factor=0.25, trials=20, sigma=0.01),
                        jobs=JOBS)
    runtime = time.perf_counter() - t0

    def diff(a, b):
        ca, cb = ov.cell(a), ov.cell(b)
        d = ca.mean["overlap"] - cb.mean["overlap"]
        return d, math.hypot(ca.stderr["overlap"], cb.stderr["overlap"])

    parts, ok_a = [], True
    for o in (2, 3, 4):
        d, se = diff(o, 1)
        ok_a &= d >= se
        parts.append(f"o={o}: +{d:.4f} (se {se:.4f})")
    d5, se5 = diff(5, 1)
    ok_b = abs(d5) <= 2 * se5
    means_o = [c.mean["overlap"] for c in ss.cells]
    means_l = [c.mean["lasso"] for c in ss.cells]
    io, il = plateau_index(means_o), plateau_index(means_l)
    ns = [c.n for c in ss.cells]
    ok_c = io <= il - 1
    a = record("7a", ok_a, "overlap 2,3,4 worse than 1 by >= 1 se; " + "; ".join(parts))
    b = record("7b", ok_b, f"overlap 5 within 2 se of 1: diff {d5:+.4f} (se {se5:.4f})")
    c = record("7c", ok_c, f"plateau n: overlap lasso {ns[io]}, lasso {ns[il]}; "
                           f"means {[round(m, 4) for m in means_o]} vs {[round(m, 4) for m in means_l]}")
    d = record("7-runtime", runtime < 600, f"{runtime:.0f}s")
    check(a, b, c, d)


@pytest.mark.slow
def test_criterion_8_asymptotics():
    groups, beta0 = PRESETS["correct"]()
    rule = LambdaRule(1.0, 0.7)
    grid = [250, 1000, 4000]
    rep = run_asymptotic_study(groups, beta0, 1.0, grid, 1.0, rule, trials=300, seed=0, jobs=JOBS)
    wg, wb = PRESETS["wrong"]()
    wrong = run_asymptotic_study(wg, wb, 1.0, grid, 1.0, rule, trials=300, seed=0, jobs=JOBS)
    frob = [round(x, 4) for x in rep.frobenius_error]
    a = record("8a", rep.recovery_rate[-1] >= 0.9,
               f"exact support recovery {[round(x, 3) for x in rep.recovery_rate]} over n={grid}")
    b = record("8b", rep.frobenius_error[-1] <= 0.15, f"covariance Frobenius relative error at n=4000: {frob[-1]}")
    c = record("8c", rep.covariance_non_increasing(1.2), f"Frobenius error non-increasing (1.2x): {frob}")
    d = record("8d", min(wrong.false_positive_rate) >= 0.2,
               f"wrong groups false-positive rate {[round(x, 3) for x in wrong.false_positive_rate]}")
    check(a, b, c, d)


def test_criterion_9_pathologies():
    nested = GroupCollection([[0, 1], [2, 3], [0, 1, 2, 3], [4]], 5)
    v_nested = check_assumption_correct(np.array([1.0, 1.0, 0.0, 0.0, 2.0]), nested, seed=0)
    triangle = GroupCollection([[0, 1], [1, 2], [0, 2]], 3)
    v_tri = check_assumption_correct(np.ones(3), triangle, seed=0)
    groups, beta0 = PRESETS["correct"]()
    v_ok = check_assumption_correct(beta0, groups, seed=0)
    v_ok2 = check_assumption_correct(np.array([1.0, 2.0, 0.0, 0.0, 0.0, 0.0]),
                                     GroupCollection([[0, 1], [2, 3, 4], [5]], 6), seed=0)
    a = record("9-nested", v_nested.violated,
               f"{v_nested.verdict} (straddling mass {v_nested.straddling_mass:.3f}, "
               f"non-unique at {len(v_nested.non_unique_at)} probes)")
    b = record("9-triangle", v_tri.violated,
               f"{v_tri.verdict} (non-unique at {len(v_tri.non_unique_at)} of {v_tri.probes} probes)")
    c = record("9-disjoint", v_ok.verdict == "consistent" and v_ok2.verdict == "consistent",
               f"{v_ok.verdict}, {v_ok2.verdict}")
    check(a, b, c)


def _read_dir(path):
    return {name: open(os.path.join(path, name), "rb").read() for name in sorted(os.listdir(path))}


def reproducibility(workdir):
    """Run a few subcommands three ways plus a manifest replay and compare bytes."""
    cwd = os.getcwd()
    os.chdir(workdir)
    try:
        with open("b.json", "w") as fh:
            fh.write("[1, 2, -0.5, 0, 3]")
        with open("g.json", "w") as fh:
            fh.write('{"p": 5, "groups": [[1, 2], [2, 3, 4], [4, 5], [1, 5]]}')
        runs = {
            "norm": ["norm", "--beta", "b.json", "--groups", "g.json"],
            "theorem1": ["verify", "theorem1", "--trials", "12", "--samples-kappa", "20", "--seed", "4"],
            "asymptotics": ["asymptotics", "--n-grid", "100", "200", "--trials", "8", "--seed", "1"],
            "simulate": ["simulate", "--scale-factor", "0.125", "--trials", "2", "--seed", "2"],
        }
        same_config, same_jobs, replay = True, True, True
        with contextlib.redirect_stdout(io.StringIO()), contextlib.redirect_stderr(io.StringIO()):
            for name, argv in runs.items():
                outs = {}
                for tag, jobs in (("a", "1"), ("b", "1"), ("c", "2")):
                    assert cli_main(["--out", f"{name}-{tag}", "--jobs", jobs] + argv) == 0
                    outs[tag] = _read_dir(f"{name}-{tag}")
                assert cli_main(["--out", f"{name}-r", "--from-manifest", f"{name}-a/manifest.json"]) == 0
                outs["r"] = _read_dir(f"{name}-r")
                same_config &= outs["a"] == outs["b"]
                same_jobs &= outs["a"] == outs["c"]
                replay &= outs["a"] == outs["r"]
    finally:
        os.chdir(cwd)
    a = record("10a", same_config, f"identical config and seed give byte-identical outputs ({', '.join(runs)})")
    b = record("10b", same_jobs, "--jobs 1 vs --jobs 2 give byte-identical outputs")
    c = record("10c", replay, "--from-manifest replay gives byte-identical outputs")
    return a, b, c


def test_criterion_10_reproducibility(tmp_path):
    check(*reproducibility(tmp_path))


CRITERIA = [test_criterion_1_norm_oracle, test_criterion_2_reductions, test_criterion_3_optimality,
            test_criterion_4_theorem1, test_criterion_5_inequalities, test_criterion_6_kappa,
            test_criterion_7_simulation, test_criterion_8_asymptotics, test_criterion_9_pathologies]


if __name__ == "__main__":
    import tempfile

    failed = 0
    for fn in CRITERIA:
        try:
            fn()
        except AssertionError:
            failed += 1
    with tempfile.TemporaryDirectory() as tmp:
        failed += not all(reproducibility(tmp))
    sys.exit(1 if failed else 0)
