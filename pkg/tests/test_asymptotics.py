import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from overlasso.asymptotics import (LambdaRule, PRESETS, ar1_covariance, check_assumption_correct,
                                   ols_straddle_statistic, partition_support, population_gram,
                                   run_asymptotic_study, separation_of_support_holds,
                                   support_tolerance)
from overlasso.model import GroupCollection, random_group_collection

NESTED = GroupCollection([[0, 1], [2, 3], [0, 1, 2, 3], [4]], 5)


def nested_beta(a=1.0, c=2.0):
    return np.array([a, a, 0.0, 0.0, c])


class TestPartition:
    def test_nested_example(self):
        part = partition_support(nested_beta(), NESTED)
        assert part.H.tolist() == [0, 1, 4]
        assert part.G_H.tolist() == [0, 3]
        assert part.G_Hc.tolist() == [1]
        assert part.G_Ho.tolist() == [2]
        assert part.to_json()["G_H"] == [1, 4]
        assert not separation_of_support_holds(nested_beta(), NESTED)

    def test_zero_tol(self):
        beta = np.array([1.0, 1e-9, 0.0, 0.0, 1.0])
        assert partition_support(beta, NESTED).G_Ho.tolist() == [2]
        assert partition_support(beta, NESTED, zero_tol=1e-6).G_Ho.tolist() == [0, 2]
        with pytest.raises(ValueError):
            partition_support(beta, NESTED, zero_tol=-1.0)

    def test_separation_holds_for_union_of_groups(self):
        groups, beta0 = PRESETS["correct"]()
        assert separation_of_support_holds(beta0, groups)
        groups, beta0 = PRESETS["wrong"]()
        assert not separation_of_support_holds(beta0, groups)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_partition_properties(self, seed):
        rng = np.random.default_rng(seed)
        p = int(rng.integers(2, 9))
        G = random_group_collection(p, int(rng.integers(1, min(6, 2**p - 1) + 1)), rng)
        beta = rng.standard_normal(p) * (rng.uniform(size=p) < 0.5)
        part = partition_support(beta, G)
        sets = [set(part.G_H.tolist()), set(part.G_Hc.tolist()), set(part.G_Ho.tolist())]
        assert sum(map(len, sets)) == G.M and set.union(*sets) == set(range(G.M))
        assert separation_of_support_holds(beta, G) == (part.G_Ho.size == 0)


class TestAssumptionProbe:
    def test_nested_violated(self):
        v = check_assumption_correct(nested_beta(), NESTED, perturbations=5, seed=0)
        assert v.violated
        assert v.straddling_mass > 0.1 or v.non_unique_at

    def test_disjoint_consistent(self):
        groups, beta0 = PRESETS["correct"]()
        v = check_assumption_correct(beta0, groups, perturbations=5, seed=0)
        assert v.verdict == "consistent" and v.straddling_mass == 0.0
        assert v.to_json()["probes"] == 6

    def test_bridge_consistent(self):
        groups, beta0 = PRESETS["straddle"]()
        assert check_assumption_correct(beta0, groups, perturbations=5, seed=0).verdict == "consistent"

    def test_rejects_radius(self):
        with pytest.raises(ValueError):
            check_assumption_correct(nested_beta(), NESTED, radius=0.0)


class TestLambdaRule:
    def test_window(self):
        LambdaRule(1.0, 0.7).validate(1.0)
        LambdaRule(1.0, 1.4).validate(2.0)
        for a in (0.4, 0.5, 1.0, 1.2):
            with pytest.raises(ValueError):
                LambdaRule(1.0, a).validate(1.0)
        with pytest.raises(ValueError):
            LambdaRule(0.0, 0.7).validate(1.0)

    def test_value(self):
        assert LambdaRule(2.0, 0.7)(1000) == pytest.approx(2.0 * 1000 ** -0.7)

    def test_study_rejects_rule(self):
        groups, beta0 = PRESETS["correct"]()
        with pytest.raises(ValueError):
            run_asymptotic_study(groups, beta0, 1.0, [50], lambda_rule=LambdaRule(1.0, 0.4), trials=2)


def test_population_gram():
    assert np.array_equal(population_gram(3), np.eye(3))
    C = ar1_covariance(4, 0.3)
    assert C[0, 3] == pytest.approx(0.027) and np.all(np.linalg.eigvalsh(C) > 0)
    with pytest.raises(ValueError):
        population_gram(3, "block")


def test_support_tolerance():
    assert support_tolerance(np.zeros(3)) == 1e-12
    assert support_tolerance(np.array([0.0, -2.0])) == pytest.approx(2e-6 + 1e-12)


class TestStudy:
    def test_small_correct_study(self):
        groups, beta0 = PRESETS["correct"]()
        rep = run_asymptotic_study(groups, beta0, 1.0, [200, 800], trials=40, seed=3)
        assert rep.H.tolist() == [0, 1, 2, 3]
        assert rep.excluded == [0, 0]
        assert rep.recovery_rate[1] >= rep.recovery_rate[0] - 0.1
        assert rep.recovery_rate[1] >= 0.7
        assert np.allclose(rep.target, np.eye(4))
        assert all(c.shape == (4, 4) for c in rep.covariance)
        assert len(list(rep.rows())) == 80
        assert rep.to_json()["H"] == [1, 2, 3, 4]

    def test_deterministic_and_jobs_invariant(self):
        groups, beta0 = PRESETS["correct"]()
        a = run_asymptotic_study(groups, beta0, 1.0, [100], trials=6, seed=5, jobs=1)
        b = run_asymptotic_study(groups, beta0, 1.0, [100], trials=6, seed=5, jobs=2)
        assert a.to_json() == b.to_json()

    def test_wrong_groups_false_positives(self):
        groups, beta0 = PRESETS["wrong"]()
        rep = run_asymptotic_study(groups, beta0, 1.0, [400], trials=20, seed=0)
        assert rep.false_positive_rate[0] >= 0.2

    def test_ar1_target(self):
        groups, beta0 = PRESETS["correct"]()
        rep = run_asymptotic_study(groups, beta0, 0.5, [100], trials=3, design="ar1")
        expected = 0.25 * np.linalg.inv(ar1_covariance(10, 0.3)[:4, :4])
        assert np.allclose(rep.target, expected)

    def test_covariance_monotone_flag(self):
        groups, beta0 = PRESETS["correct"]()
        rep = run_asymptotic_study(groups, beta0, 1.0, [100], trials=3)
        rep.frobenius_error = [0.3, 0.35, 0.2]
        assert rep.covariance_non_increasing()
        rep.frobenius_error = [0.3, 0.37, 0.2]
        assert not rep.covariance_non_increasing()


def test_straddle_statistic_bounded():
    groups, beta0 = PRESETS["straddle"]()
    q = ols_straddle_statistic(groups, beta0, 1.0, [100, 400, 1600, 6400], trials=100, seed=0)
    assert q.shape == (4, 1)
    # O_p(1): no growth with n once past the first sizes
    assert q[-1, 0] <= 1.5 * q[1, 0]
    assert np.all(np.isfinite(q))
