"""Command-line interface.

Every run writes ``manifest.json`` (resolved configuration, version, seed,
input hashes) next to its outputs; ``--from-manifest`` replays one. Exit
status: 0 success, 1 invalid input, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .asymptotics import (PRESETS, LambdaRule, check_assumption_correct, partition_support,
                          run_asymptotic_study, separation_of_support_holds)
from .experiments import ExperimentConfig, run_experiment
from .model import (GroupCollection, ProblemInstance, generate_instance, make_contiguous_groups,
                    random_group_collection, singleton_groups, support_of_first_groups)
from .norm import overlap_norm, structured_sparsity
from .solver import SolverConfig, adaptive_weights, fit, fit_path, kkt_check, lambda_grid, lambda_max
from .theory import (chi2_tail_check, estimate_kappa, holder_extension_check,
                     verify_oracle_inequality, verify_theorem1)

OUTPUT_ENV = "OVERLASSO_OUTPUT_DIR"
DEFAULT_OUTPUT = "overlasso-out"
# not part of the resolved configuration: where results go and how many workers compute them
_RUNTIME_KEYS = {"out", "jobs", "from_manifest", "format", "handler", "command"}
_INPUT_KEYS = ("beta", "groups", "instance", "beta0")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


@dataclass
class Output:
    payload: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    primary: str = ""  # table printed for --format csv
    failure: str = ""  # non-empty marks a numerical failure
    unwritten: tuple = ()  # tables available to --format csv but not saved


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise FileNotFoundError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed JSON in {path}: {exc}") from None


def _load_vector(path, key):
    obj = _load_json(path)
    if isinstance(obj, dict):
        if key not in obj:
            raise ValueError(f"{path} has no {key!r} entry")
        obj = obj[key]
    arr = np.asarray(obj, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{path}: expected a flat list of numbers")
    return arr


def _load_groups(path, p=None):
    obj = _load_json(path)
    try:
        groups = GroupCollection.from_json(obj, p)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: cannot read groups ({exc})") from None
    if p is not None and groups.p != p:
        raise ValueError(f"{path}: groups are over p={groups.p}, data has p={p}")
    return groups


def _load_instance(path):
    obj = _load_json(path)
    try:
        return ProblemInstance.from_json(obj)
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc}") from None


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


# --------------------------------------------------------------------------
# subcommands


def cmd_norm(args) -> Output:
    beta = _load_vector(args.beta, "beta")
    groups = _load_groups(args.groups, beta.size)
    res = overlap_norm(beta, groups, args.tolerance, args.max_iters)
    sp = structured_sparsity(beta, groups, args.tolerance)
    payload = {
        "value": res.value,
        "converged": res.converged,
        "duality_gap": res.gap,
        "iterations": res.iterations,
        "tolerance": res.tolerance,
        "decomposition": res.decomposition.to_json(),
        "J_v": (res.decomposition.active + 1).tolist(),
        "M_v": res.decomposition.count,
        "M_beta_upper": sp.min_count,
    }
    rows = [[k + 1, int(i) + 1, float(v)] for k, g in enumerate(groups)
            for i, v in zip(g, res.decomposition.block(k))]
    return Output(payload, {"decomposition": (["group", "index", "value"], rows)}, "decomposition",
                  "" if res.converged else "overlap norm did not converge")


def cmd_fit(args) -> Output:
    inst = _load_instance(args.instance)
    groups = _load_groups(args.groups, inst.p)
    weights = None
    if args.adaptive:
        weights, _ = adaptive_weights(inst, groups, args.gamma)
    if args.path or args.lambdas:
        lams = args.lambdas or lambda_grid(lambda_max(inst, groups, weights), args.num, args.ratio).tolist()
        cfg = SolverConfig(lam=lams[0], tolerance=args.tolerance, max_iters=args.max_iters, weights=weights)
        results = fit_path(inst, groups, lams, cfg)
        for r in results:
            r.gamma = args.gamma if args.adaptive else None
    else:
        if args.lam is None:
            raise ValueError("give --lambda, --lambdas or --path")
        cfg = SolverConfig(lam=args.lam, tolerance=args.tolerance, max_iters=args.max_iters, weights=weights)
        r = fit(inst, groups, cfg)
        r.gamma = args.gamma if args.adaptive else None
        results = [r]
    fits = []
    for r in results:
        js = r.to_json()
        js["kkt_check"] = kkt_check(inst, groups, r).max_residual
        fits.append(js)
    payload = fits[0] if len(fits) == 1 else {"path": fits}
    header = ["index"] + [f"lambda_{k + 1}" for k in range(len(results))]
    coef = [[i + 1] + [float(r.beta_hat[i]) for r in results] for i in range(inst.p)]
    bad = [r.lam for r in results if not r.converged]
    fail = f"solver did not converge at lambda={bad}" if bad else ""
    unwritten = () if args.coef_csv else ("coefficients",)
    return Output(payload, {"coefficients": (header, coef)}, "coefficients", fail, unwritten)


def _desk_family(args):
    """Column-normalized Gaussian design with signal on the first groups."""
    groups = make_contiguous_groups(args.p, args.group_size, args.overlap)
    inst = generate_instance(args.p, args.n, groups, args.k, args.sigma, args.seed,
                             normalization="column-unit-diag")
    return inst, groups


def cmd_verify(args) -> Output:
    if args.check == "chi2":
        rows = chi2_tail_check(samples=args.samples, seed=args.seed)
        viol = sum(1 for r in rows if not r[4])
        payload = {"check": "chi2", "samples": args.samples, "violations": viol,
                   "grid": [{"D": D, "x": x, "bound": b, "monte_carlo": t, "holds": h}
                            for D, x, b, t, h in rows]}
        return Output(payload, {"trials": (["D", "x", "bound", "monte_carlo", "holds"], rows)}, "trials")
    if args.check == "holder":
        rng = np.random.default_rng(args.seed)
        rows = []
        for t in range(args.trials):
            p = int(rng.integers(2, 9))
            G = random_group_collection(p, int(rng.integers(1, min(4, 2**p - 1) + 1)), rng)
            lhs, rhs, ok = holder_extension_check(rng.standard_normal(p), rng.standard_normal(p), G)
            rows.append([t, p, G.M, G.overlap, lhs, rhs, ok])
        viol = sum(1 for r in rows if not r[-1])
        payload = {"check": "holder", "draws": args.trials, "violations": viol}
        return Output(payload, {"trials": (["draw", "p", "M", "overlap", "lhs", "rhs", "holds"], rows)}, "trials")

    if args.instance:
        inst = _load_instance(args.instance)
        groups = _load_groups(args.groups, inst.p) if args.groups else None
        if groups is None:
            raise ValueError("--instance needs --groups")
    else:
        inst, groups = _desk_family(args)
    if args.check == "kappa":
        s = args.s
        if s is None:
            s = 1 if inst.beta0 is None else max(1, structured_sparsity(inst.beta0, groups).min_count)
        est = estimate_kappa(inst, groups, s, samples=args.samples_kappa, seed=args.seed)
        payload = {"check": "kappa", "s": s, "kappa_hat": est.kappa_hat,
                   "kappa_upper": est.kappa_upper, "below_upper": est.below_upper,
                   "evaluations": est.evaluations, "J": (est.J + 1).tolist(),
                   "certificate": est.delta.tolist()}
        rows = [[i + 1, float(v)] for i, v in enumerate(est.delta)]
        return Output(payload, {"certificate": (["index", "delta"], rows)}, "certificate")
    if args.check == "theorem1":
        rep = verify_theorem1(inst, groups, args.A, args.trials, args.seed, args.lambda_rule,
                              s=args.s, jobs=args.jobs, kappa_samples=args.samples_kappa)
    else:
        rep = verify_oracle_inequality(inst, groups, args.A, args.trials, args.seed, jobs=args.jobs)
    payload = {"check": args.check, **rep.to_json()}
    if args.check == "theorem1":
        table = (rep.csv_header, list(rep.rows()))
    else:
        table = (["trial", "lhs", "rhs", "holds"],
                 [[t, rep.prediction_lhs[t], rep.estimation_lhs[t], bool(rep.holds[t])]
                  for t in range(rep.trials)])
    fail = "" if rep.valid else f"{rep.excluded} of {rep.trials} trials excluded (solver failures)"
    return Output(payload, {"trials": table}, "trials", fail)


def cmd_asymptotics(args) -> Output:
    if args.groups or args.beta0:
        if not (args.groups and args.beta0):
            raise ValueError("--groups and --beta0 go together")
        beta0 = _load_vector(args.beta0, "beta0")
        groups = _load_groups(args.groups, beta0.size)
    else:
        groups, beta0 = PRESETS[args.preset]()
    rule = LambdaRule(args.lambda_constant, args.lambda_exponent)
    rule.validate(args.gamma)
    rep = run_asymptotic_study(groups, beta0, args.sigma, args.n_grid, args.gamma, rule,
                               args.trials, args.seed, design=args.design, jobs=args.jobs)
    payload = rep.to_json()
    part = partition_support(beta0, groups)
    payload["partition"] = part.to_json()
    payload["separation_of_support"] = separation_of_support_holds(beta0, groups)
    payload["covariance_non_increasing"] = rep.covariance_non_increasing()
    summary = [[n, rep.recovery_rate[i], rep.false_positive_rate[i], rep.frobenius_error[i]]
               for i, n in enumerate(rep.n_grid)]
    tables = {"trials": (rep.csv_header, list(rep.rows())),
              "summary": (["n", "recovery_rate", "false_positive_rate", "frobenius_error"], summary)}
    fail = ""
    if max(rep.excluded) > 0.05 * args.trials:
        fail = f"too many solver failures: {rep.excluded}"
    return Output(payload, tables, "summary", fail)


def cmd_simulate(args) -> Output:
    cfg = ExperimentConfig(experiment=args.experiment, scale_factor=args.scale_factor,
                           trials=args.trials, seed=args.seed, sigma=args.sigma,
                           selection=args.selection)
    res = run_experiment(cfg, jobs=args.jobs)
    for c in res.cells:
        sys.stderr.write(f"{res.axis}={c.value}: {c.runtime:.1f}s\n")
    tables = {
        "trials": ([res.axis, "trial", "estimator", "lambda", "recovery_error", "converged"],
                   list(res.trial_rows())),
        "plot_data": ([res.axis, "lasso_mean", "lasso_se", "overlap_mean", "overlap_se"],
                      list(res.plot_rows())),
    }
    excluded = sum(sum(c.excluded.values()) for c in res.cells)
    fail = ""
    if excluded > 0.05 * 2 * cfg.trials * len(res.cells):
        fail = f"{excluded} fits did not converge"
    return Output(res.to_json(), tables, "plot_data", fail)


def _parse_kv(tokens):
    out = {}
    for tok in tokens:
        key, sep, val = tok.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {tok!r}")
        try:
            out[key] = int(val)
        except ValueError:
            raise ValueError(f"{key} must be an integer, got {val!r}") from None
    return out


def cmd_groups(args) -> Output:
    if args.contiguous:
        kv = _parse_kv(args.contiguous)
        missing = {"p", "size", "overlap"} - kv.keys()
        if missing:
            raise ValueError(f"--contiguous needs {sorted(missing)}")
        groups = make_contiguous_groups(kv["p"], kv["size"], kv["overlap"])
    elif args.singletons:
        groups = singleton_groups(args.singletons)
    else:
        raise ValueError("give --contiguous or --singletons")
    payload = groups.to_json()
    payload["overlap"] = groups.overlap
    rows = [[k + 1, i] for k, g in enumerate(groups.to_list(one_based=True)) for i in g]
    return Output(payload, {"groups": (["group", "index"], rows)}, "groups")


def cmd_instance(args) -> Output:
    groups = make_contiguous_groups(args.p, args.group_size, args.overlap)
    inst = generate_instance(args.p, args.n, groups, args.k, args.sigma, args.seed, args.normalization)
    payload = {"instance": inst.to_json(), "groups": groups.to_json(),
               "support": (support_of_first_groups(groups, args.k) + 1).tolist()}
    return Output(payload, {}, "")


def cmd_assumption(args) -> Output:
    beta0 = _load_vector(args.beta0, "beta0")
    groups = _load_groups(args.groups, beta0.size)
    v = check_assumption_correct(beta0, groups, args.perturbations, args.radius, args.seed)
    payload = {**v.to_json(), "partition": partition_support(beta0, groups).to_json(),
               "separation_of_support": separation_of_support_holds(beta0, groups)}
    return Output(payload)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="overlasso", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"overlasso {__version__}")
    parser.add_argument("--from-manifest", metavar="PATH", help="replay the run recorded in a manifest")
    parser.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or {DEFAULT_OUTPUT})")
    parser.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    parser.add_argument("--format", choices=("json", "csv"), default="json", help="stdout format")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, seed=True):
        if seed:
            p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=argparse.SUPPRESS)
        p.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
        p.add_argument("--format", choices=("json", "csv"), default=argparse.SUPPRESS)

    p = sub.add_parser("norm", help="overlap norm and a minimizing decomposition")
    p.add_argument("--beta", required=True, help="JSON list (or {\"beta\": [...]})")
    p.add_argument("--groups", required=True, help="JSON groups, 1-based")
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=100_000)
    common(p, seed=False)
    p.set_defaults(handler=cmd_norm)

    p = sub.add_parser("fit", help="fit at one lambda or along a path")
    p.add_argument("--instance", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--lambdas", type=float, nargs="+")
    p.add_argument("--path", action="store_true", help="log-spaced grid from lambda_max")
    p.add_argument("--num", type=int, default=50)
    p.add_argument("--ratio", type=float, default=1e-4)
    p.add_argument("--adaptive", action="store_true")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=100_000)
    p.add_argument("--coef-csv", action="store_true", help="also write coefficients.csv")
    common(p, seed=False)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("verify", help="finite-sample bound and inequality checks")
    p.add_argument("check", choices=("theorem1", "oracle", "chi2", "holder", "kappa"))
    p.add_argument("--instance")
    p.add_argument("--groups")
    p.add_argument("--A", type=float, default=9.0)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--s", type=int)
    p.add_argument("--lambda-rule", choices=("theorem", "alt"), default="theorem")
    p.add_argument("--samples", type=int, default=1_000_000, help="chi-squared draws per D")
    p.add_argument("--samples-kappa", type=int, default=200)
    p.add_argument("--p", type=int, default=64)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--overlap", type=int, default=2)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.1)
    common(p)
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser("asymptotics", help="adaptive estimator Monte Carlo over n")
    p.add_argument("--preset", choices=sorted(PRESETS), default="correct")
    p.add_argument("--groups")
    p.add_argument("--beta0")
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--lambda-exponent", type=float, default=0.7)
    p.add_argument("--lambda-constant", type=float, default=1.0)
    p.add_argument("--n-grid", type=int, nargs="+", default=[250, 1000, 4000])
    p.add_argument("--trials", type=int, default=300)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--design", choices=("identity", "ar1"), default="identity")
    common(p)
    p.set_defaults(handler=cmd_asymptotics)

    p = sub.add_parser("simulate", help="overlap and sample-size studies")
    p.add_argument("--experiment", choices=("overlap_study", "sample_size_study"), default="overlap_study")
    p.add_argument("--scale-factor", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--selection", choices=("oracle", "holdout"), default="oracle")
    common(p)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("groups", help="emit a group collection")
    p.add_argument("--contiguous", nargs=3, metavar="KEY=VALUE", help="p=.. size=.. overlap=..")
    p.add_argument("--singletons", type=int, metavar="P")
    common(p, seed=False)
    p.set_defaults(handler=cmd_groups)

    p = sub.add_parser("instance", help="generate a synthetic instance")
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--overlap", type=int, default=1)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--sigma", type=float, default=0.01)
    p.add_argument("--normalization", choices=("row-unit-norm", "column-unit-diag", "none"),
                   default="row-unit-norm")
    common(p)
    p.set_defaults(handler=cmd_instance)

    p = sub.add_parser("assumption", help="probe local uniqueness of the minimizing decomposition")
    p.add_argument("--beta0", required=True)
    p.add_argument("--groups", required=True)
    p.add_argument("--perturbations", type=int, default=20)
    p.add_argument("--radius", type=float, default=1e-2)
    common(p)
    p.set_defaults(handler=cmd_assumption)
    return parser


HANDLERS = {"norm": cmd_norm, "fit": cmd_fit, "verify": cmd_verify, "asymptotics": cmd_asymptotics,
            "simulate": cmd_simulate, "groups": cmd_groups, "instance": cmd_instance,
            "assumption": cmd_assumption}


def _manifest(args) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in _RUNTIME_KEYS}
    inputs = {}
    for key in _INPUT_KEYS:
        path = config.get(key)
        if path:
            inputs[key] = {"path": path, "sha256": _sha256(path)}
    return {"tool": "overlasso", "version": __version__, "command": args.command,
            "seed": config.get("seed"), "config": config, "inputs": inputs}


def _write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return _finite(float(x))
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _clean(obj):
    """Replace non-finite floats with null so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def _resolve(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.from_manifest:
        if args.command:
            raise ValueError("--from-manifest replaces the subcommand; give one or the other")
        man = _load_json(args.from_manifest)
        try:
            command, config = man["command"], man["config"]
        except (KeyError, TypeError):
            raise ValueError(f"{args.from_manifest} is not a manifest") from None
        if command not in HANDLERS:
            raise ValueError(f"unknown command {command!r} in manifest")
        replay = argparse.Namespace(**config)
        replay.command = command
        replay.handler = HANDLERS[command]
        for key in ("out", "jobs", "format"):
            setattr(replay, key, getattr(args, key))
        replay.from_manifest = args.from_manifest
        return replay
    if not args.command:
        parser.error("a subcommand is required")
    return args


def main(argv=None) -> int:
    try:
        args = _resolve(argv)
        if args.jobs is not None and args.jobs < 1:
            raise ValueError("--jobs must be >= 1")
        if args.jobs is None:
            args.jobs = os.cpu_count() or 1
        out_dir = args.out or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
        result = args.handler(args)
        manifest = _manifest(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (ValueError, KeyError, TypeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except (RuntimeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return 2

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(_dump(manifest))
    payload = _clean(result.payload)
    with open(os.path.join(out_dir, "result.json"), "w") as fh:
        fh.write(_dump(payload))
    for name, (header, rows) in result.tables.items():
        if name in result.unwritten:
            continue
        _write_table(os.path.join(out_dir, f"{name}.csv"), header, rows)
    if args.command == "instance":
        with open(os.path.join(out_dir, "instance.json"), "w") as fh:
            fh.write(_dump(payload["instance"]))
        with open(os.path.join(out_dir, "groups.json"), "w") as fh:
            fh.write(_dump(payload["groups"]))

    if args.format == "csv" and result.primary:
        buf = io.StringIO()
        header, rows = result.tables[result.primary]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    elif args.command == "instance":
        sys.stdout.write(_dump({k: v for k, v in payload.items() if k != "instance"}))
    else:
        sys.stdout.write(_dump(payload))
    if result.failure:
        sys.stderr.write(f"numerical failure: {result.failure}\n")
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
