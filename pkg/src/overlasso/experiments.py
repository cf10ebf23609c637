"""Simulation study: overlapping grouped lasso against the lasso on contiguous groups."""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ._parallel import pmap
from .model import (FitResult, GroupCollection, ProblemInstance, generate_instance,
                    make_contiguous_groups, recovery_error, singleton_groups, write_csv)
from .solver import SolverConfig, duplicate_design, fit_path, lambda_grid, lambda_max

EXPERIMENTS = ("overlap_study", "sample_size_study")
RULES = ("oracle", "holdout")
ESTIMATORS = ("lasso", "overlap")


@dataclass
class ExperimentConfig:
    experiment: str = "overlap_study"
    p: int = 512
    n: int = 192
    group_size: int = 8
    overlaps: tuple = (1, 2, 3, 4, 5, 6, 7, 8)
    n_grid: tuple = (48, 96, 192, 384, 768)
    sample_overlap: int = 4
    signal_span: int = 64
    sigma: float = 0.01
    trials: int = 20
    seed: int = 0
    selection: str = "oracle"
    scale_factor: float = 1.0
    grid_size: int = 50
    grid_ratio: float = 1e-4
    tolerance: float = 1e-9
    max_iters: int = 100_000

    def __post_init__(self):
        self.overlaps = tuple(int(o) for o in self.overlaps)
        self.n_grid = tuple(int(n) for n in self.n_grid)
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"experiment must be one of {EXPERIMENTS}")
        if self.selection not in RULES:
            raise ValueError(f"selection must be one of {RULES}")
        if not 0 < self.scale_factor <= 1:
            raise ValueError("scale_factor must lie in (0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        for o in self.overlaps + (self.sample_overlap,):
            if not 1 <= o <= self.group_size:
                raise ValueError(f"overlap {o} outside [1, {self.group_size}]")
        if self.scaled(self.signal_span) < self.group_size:
            raise ValueError("scaled signal span is smaller than one group")

    def scaled(self, value: int) -> int:
        return max(1, int(round(value * self.scale_factor)))

    @property
    def p_eff(self) -> int:
        return self.scaled(self.p)

    @property
    def n_eff(self) -> int:
        return self.scaled(self.n)

    @property
    def n_grid_eff(self) -> tuple:
        return tuple(self.scaled(n) for n in self.n_grid)

    def k_active(self, overlap: int) -> int:
        """``ceil((span - size) / (size + overlap)) + 1`` on the (scaled) signal span."""
        span = self.scaled(self.signal_span)
        return math.ceil((span - self.group_size) / (self.group_size + overlap)) + 1

    def cells(self) -> list:
        """(cell value, p, n, overlap) per cell."""
        if self.experiment == "overlap_study":
            return [(o, self.p_eff, self.n_eff, o) for o in self.overlaps]
        return [(n, self.p_eff, n, self.sample_overlap) for n in self.n_grid_eff]

    def to_json(self) -> dict:
        out = asdict(self)
        out["overlaps"] = list(self.overlaps)
        out["n_grid"] = list(self.n_grid)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        return cls(**obj)


@dataclass
class LambdaSelection:
    lam: float
    index: int
    fit: FitResult
    scores: np.ndarray  # criterion value along the grid


def select_lambda(instance: ProblemInstance, groups: GroupCollection, rule: str = "oracle",
                  grid=None, seed=0, tolerance: float = 1e-9,
                  max_iters: int = 100_000) -> LambdaSelection:
    """Pick lambda on a warm-started path.

    ``oracle`` minimizes recovery error against ``beta0``. ``holdout`` fits
    the path on a random 80% of the rows, scores mean squared prediction error
    on the other 20%, and refits the chosen point on all rows.
    """
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}")
    if rule == "oracle" and instance.beta0 is None:
        raise ValueError("the oracle rule needs beta0")
    if grid is None:
        grid = lambda_grid(lambda_max(instance, groups))
    grid = np.asarray(grid, dtype=float)
    cfg = SolverConfig(lam=float(grid[0]), tolerance=tolerance, max_iters=max_iters)
    design = duplicate_design(instance, groups)
    if rule == "oracle":
        path = fit_path(instance, groups, grid, cfg, design=design)
        scores = np.array([recovery_error(r.beta_hat, instance.beta0) for r in path])
        k = int(np.argmin(scores))
        return LambdaSelection(float(grid[k]), k, path[k], scores)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(instance.n)
    n_val = max(1, int(round(0.2 * instance.n)))
    val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    sub = ProblemInstance(instance.X[train], instance.y[train])
    path = fit_path(sub, groups, grid, cfg)
    scores = np.array([np.mean((instance.y[val] - instance.X[val] @ r.beta_hat) ** 2) for r in path])
    k = int(np.argmin(scores))
    full = fit_path(instance, groups, grid[:k + 1], cfg, design=design)[-1]
    return LambdaSelection(float(grid[k]), k, full, scores)


@dataclass
class CellResult:
    value: int  # overlap or n
    p: int
    n: int
    overlap: int
    k_active: int
    support_size: int
    mean: dict
    stderr: dict
    lam_median: dict
    excluded: dict
    runtime: float = 0.0

    def to_json(self) -> dict:
        out = asdict(self)
        out.pop("runtime")
        return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    cells: list
    per_trial: list = field(default_factory=list, repr=False)

    @property
    def axis(self) -> str:
        return "overlap" if self.config.experiment == "overlap_study" else "n"

    def cell(self, value) -> CellResult:
        for c in self.cells:
            if c.value == value:
                return c
        raise KeyError(value)

    def to_json(self) -> dict:
        return {"experiment": self.config.experiment, "axis": self.axis,
                "config": self.config.to_json(), "cells": [c.to_json() for c in self.cells]}

    def trial_rows(self):
        for r in self.per_trial:
            yield [r["value"], r["trial"], r["estimator"], r["lambda"], r["recovery_error"], r["converged"]]

    def plot_rows(self):
        for c in self.cells:
            yield [c.value, c.mean["lasso"], c.stderr["lasso"], c.mean["overlap"], c.stderr["overlap"]]

    def write(self, directory) -> dict:
        """Write result JSON, per-trial CSV and plot-data CSV; runtimes go to a separate file."""
        os.makedirs(directory, exist_ok=True)
        paths = {
            "result": os.path.join(directory, "result.json"),
            "trials": os.path.join(directory, "trials.csv"),
            "plot": os.path.join(directory, "plot_data.csv"),
            "timing": os.path.join(directory, "timing.json"),
        }
        with open(paths["result"], "w") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_csv(paths["trials"], [self.axis, "trial", "estimator", "lambda", "recovery_error", "converged"],
                  self.trial_rows())
        write_csv(paths["plot"], [self.axis, "lasso_mean", "lasso_se", "overlap_mean", "overlap_se"],
                  self.plot_rows())
        with open(paths["timing"], "w") as fh:
            json.dump({str(c.value): c.runtime for c in self.cells}, fh, indent=2)
        return paths


def _trial(args):
    cfg, code, value, p, n, overlap, trial = args
    groups = make_contiguous_groups(p, cfg.group_size, overlap)
    k = cfg.k_active(overlap)
    inst = generate_instance(p, n, groups, k, cfg.sigma, [cfg.seed, code, value, trial])
    out = {}
    for name, G in (("lasso", singleton_groups(p)), ("overlap", groups)):
        sel = select_lambda(inst, G, cfg.selection, seed=[cfg.seed, code, value, trial],
                            tolerance=cfg.tolerance, max_iters=cfg.max_iters)
        out[name] = (sel.lam, recovery_error(sel.fit.beta_hat, inst.beta0), sel.fit.converged)
    return out


def _run(cfg: ExperimentConfig, jobs: int) -> ExperimentResult:
    code = EXPERIMENTS.index(cfg.experiment)
    cells, rows = [], []
    for value, p, n, overlap in cfg.cells():
        groups = make_contiguous_groups(p, cfg.group_size, overlap)
        k = cfg.k_active(overlap)
        if k > groups.M:
            raise ValueError(f"k={k} exceeds the {groups.M} groups available at overlap {overlap}")
        support = int(np.unique(np.concatenate(groups.groups[:k])).size)
        t0 = time.perf_counter()
        out = pmap(_trial, [(cfg, code, value, p, n, overlap, t) for t in range(cfg.trials)], jobs)
        runtime = time.perf_counter() - t0
        mean, se, lam_med, excl = {}, {}, {}, {}
        for name in ESTIMATORS:
            errs, lams = [], []
            for t, o in enumerate(out):
                lam, err, ok = o[name]
                rows.append({"value": value, "trial": t, "estimator": name, "lambda": lam,
                             "recovery_error": err, "converged": ok})
                if ok:
                    errs.append(err)
                    lams.append(lam)
            excl[name] = cfg.trials - len(errs)
            errs = np.array(errs)
            mean[name] = float(errs.mean()) if errs.size else float("nan")
            se[name] = float(errs.std(ddof=1) / math.sqrt(errs.size)) if errs.size > 1 else float("nan")
            lam_med[name] = float(np.median(lams)) if lams else float("nan")
        cells.append(CellResult(value, p, n, overlap, k, support, mean, se, lam_med, excl, runtime))
    return ExperimentResult(cfg, cells, rows)


def run_overlap_study(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    if config.experiment != "overlap_study":
        raise ValueError("config is not an overlap study")
    return _run(config, jobs)


def run_sample_size_study(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    if config.experiment != "sample_size_study":
        raise ValueError("config is not a sample-size study")
    return _run(config, jobs)


def run_experiment(config: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    return _run(config, jobs)


def plateau_index(means, rel: float = 0.1) -> int:
    """First grid index whose mean is within ``rel`` of the last one."""
    means = np.asarray(means, dtype=float)
    target = means[-1] * (1 + rel)
    return int(np.flatnonzero(means <= target)[0])
