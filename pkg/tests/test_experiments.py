import json

import numpy as np
import pytest

from oracles import group_lasso_bst
from overlasso.experiments import (ExperimentConfig, plateau_index, run_experiment,
                                   run_overlap_study, run_sample_size_study, select_lambda)
from overlasso.model import (ProblemInstance, generate_instance, make_contiguous_groups,
                             recovery_error, singleton_groups)
from overlasso.solver import SolverConfig, fit, lambda_grid, lambda_max


def small(**kw):
    base = dict(scale_factor=0.125, trials=3, overlaps=(1, 4), n_grid=(96, 192), grid_size=12)
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("o, k", [(1, 8), (2, 7), (4, 6), (8, 5)])
    def test_active_groups_full_scale(self, o, k):
        assert ExperimentConfig().k_active(o) == k

    @pytest.mark.parametrize("o, last", [(1, 64), (4, 33)])
    def test_full_scale_support(self, o, last):
        G = make_contiguous_groups(512, 8, o)
        support = np.unique(np.concatenate(G.groups[:ExperimentConfig().k_active(o)]))
        assert support.tolist() == list(range(last))

    def test_scaling(self):
        cfg = ExperimentConfig(scale_factor=0.25)
        assert (cfg.p_eff, cfg.n_eff, cfg.n_grid_eff) == (128, 48, (12, 24, 48, 96, 192))
        assert cfg.k_active(1) == 2

    @pytest.mark.parametrize("kw", [dict(experiment="x"), dict(selection="cv"), dict(scale_factor=0.0),
                                    dict(trials=0), dict(sigma=-1.0), dict(overlaps=(9,)),
                                    dict(scale_factor=0.01)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_json_roundtrip(self):
        cfg = small(selection="holdout")
        assert ExperimentConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg


class TestSelection:
    def test_noiseless_oracle_picks_smallest(self):
        G = make_contiguous_groups(32, 8, 2)
        inst = generate_instance(32, 64, G, 2, 0.0, 4)
        grid = lambda_grid(lambda_max(inst, G), 10)
        sel = select_lambda(inst, G, "oracle", grid=grid)
        assert sel.index == 9 and sel.lam == grid[-1]
        assert np.argmin(sel.scores) == 9

    def test_single_value_grid(self):
        G = make_contiguous_groups(32, 8, 2)
        inst = generate_instance(32, 64, G, 2, 0.01, 4)
        for rule in ("oracle", "holdout"):
            sel = select_lambda(inst, G, rule, grid=[0.05])
            assert sel.index == 0 and sel.lam == 0.05
            ref = fit(inst, G, SolverConfig(lam=0.05, tolerance=1e-9))
            assert np.allclose(sel.fit.beta_hat, ref.beta_hat, atol=1e-6)

    def test_oracle_beats_holdout(self):
        G = make_contiguous_groups(64, 8, 3)
        for seed in range(3):
            inst = generate_instance(64, 40, G, 2, 0.05, seed)
            o = select_lambda(inst, G, "oracle", grid=lambda_grid(lambda_max(inst, G), 15))
            h = select_lambda(inst, G, "holdout", grid=lambda_grid(lambda_max(inst, G), 15), seed=seed)
            assert o.scores[o.index] <= recovery_error(h.fit.beta_hat, inst.beta0) + 1e-12

    def test_holdout_deterministic(self):
        G = make_contiguous_groups(32, 8, 2)
        inst = generate_instance(32, 30, G, 1, 0.1, 1)
        a = select_lambda(inst, G, "holdout", seed=[1, 2])
        b = select_lambda(inst, G, "holdout", seed=[1, 2])
        assert a.index == b.index and np.array_equal(a.fit.beta_hat, b.fit.beta_hat)

    def test_holdout_scores_are_validation_mse(self):
        G = singleton_groups(6)
        rng = np.random.default_rng(0)
        X = rng.standard_normal((20, 6))
        inst = ProblemInstance(X, X[:, 0] + 0.1 * rng.standard_normal(20))
        grid = [0.5, 0.1]
        sel = select_lambda(inst, G, "holdout", grid=grid, seed=7)
        perm = np.random.default_rng(7).permutation(20)
        val, train = np.sort(perm[:4]), np.sort(perm[4:])
        sub = ProblemInstance(X[train], inst.y[train])
        b = fit(sub, G, SolverConfig(lam=0.1, tolerance=1e-10)).beta_hat
        assert sel.scores[1] == pytest.approx(np.mean((inst.y[val] - X[val] @ b) ** 2), rel=1e-5)

    def test_oracle_needs_truth(self):
        inst = ProblemInstance(np.eye(4), np.ones(4))
        with pytest.raises(ValueError):
            select_lambda(inst, singleton_groups(4), "oracle")
        with pytest.raises(ValueError):
            select_lambda(inst, singleton_groups(4), "bic")


def test_overlap_one_matches_disjoint_group_lasso():
    G = make_contiguous_groups(24, 8, 1)
    assert G.overlap == 1
    inst = generate_instance(24, 60, G, 1, 0.05, 2)
    lam = 0.3 * lambda_max(inst, G)
    b = fit(inst, G, SolverConfig(lam=lam, tolerance=1e-11)).beta_hat
    ref = group_lasso_bst(inst.X, inst.y, [list(g) for g in G], lam)
    assert np.allclose(b, ref, atol=1e-6)


class TestRuns:
    def test_overlap_study(self):
        res = run_overlap_study(small())
        assert [c.value for c in res.cells] == [1, 4]
        c = res.cell(4)
        assert (c.p, c.n, c.overlap, c.k_active) == (64, 24, 4, 1)
        assert c.support_size == 8
        assert set(c.mean) == {"lasso", "overlap"}
        assert len(list(res.trial_rows())) == 2 * 2 * 3
        with pytest.raises(KeyError):
            res.cell(3)

    def test_sample_size_study_and_files(self, tmp_path):
        res = run_sample_size_study(small(experiment="sample_size_study"))
        assert [c.n for c in res.cells] == [12, 24]
        paths = res.write(tmp_path)
        data = json.loads(open(paths["result"]).read())
        assert data["axis"] == "n" and "runtime" not in data["cells"][0]
        assert open(paths["plot"]).readline().strip() == "n,lasso_mean,lasso_se,overlap_mean,overlap_se"

    def test_wrong_runner(self):
        with pytest.raises(ValueError):
            run_sample_size_study(small())
        with pytest.raises(ValueError):
            run_overlap_study(small(experiment="sample_size_study"))

    def test_deterministic_across_jobs(self):
        a = run_experiment(small(), jobs=1)
        b = run_experiment(small(), jobs=2)
        assert a.to_json() == b.to_json()
        assert a.per_trial == b.per_trial


def test_plateau_index():
    assert plateau_index([1.0, 0.5, 0.108, 0.105, 0.1]) == 2
    assert plateau_index([1.0, 0.5, 0.2]) == 2
    assert plateau_index([0.1, 0.1]) == 0
