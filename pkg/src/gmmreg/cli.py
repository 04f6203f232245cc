"""Command-line front end.

Every command writes its data files plus ``manifest.json`` (command, fully
resolved config, seed, tool version, inputs, outputs) into ``--out``;
``gmmreg rerun manifest.json`` replays it.  Exit codes: 0 success, 1 usage,
2 I/O, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .cost import SENTINEL_COST, CostModel, GridBudgetError, OutlierModel, cost_surface, local_minima, make_objective
from .covest import InputNoise, fisher_covariance, propagation_from_objective
from .credibility import run_campaign
from .egomotion import (AnnealConfig, EgoConfig, RadarScan, ReplaySpec, read_scans, read_truth, run_sequence,
                        scan_to_json, synthetic_replay, integrate_trajectory, trajectory_csv, truth_csv)
from .geometry import MotionParams, PolarTarget, SensorOffset
from .metrics import PointSet
from .optim import DivergenceError, NonFiniteError, OptimizerConfig, minimize, numeric_hessian
from .scenario import KINDS, ScenarioSpec, generate

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# file formats ---------------------------------------------------------------------

def pointset_to_json(ps: PointSet) -> str:
    return json.dumps({"label": ps.label, "mu": ps.mu.tolist(), "cov": ps.cov.tolist()})


def pointset_from_json(path: str) -> PointSet:
    with open(path) as fh:
        d = json.load(fh)
    return PointSet(np.array(d["mu"], dtype=float), np.array(d["cov"], dtype=float), d.get("label", "F"))


def _write(out_dir: str, name: str, text: str, outputs: list) -> None:
    with open(os.path.join(out_dir, name), "w") as fh:
        fh.write(text)
    outputs.append(name)


def _write_manifest(args, outputs: list, inputs: list) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out", "command")}
    body = {"command": args.command, "config": config, "seed": config.get("seed", config.get("base_seed")),
            "version": __version__, "inputs": inputs, "outputs": sorted(outputs)}
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _abs(path):
    return None if path is None else os.path.abspath(path)


# shared flag groups ---------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--metric", choices=["p2d", "d2d"], default="d2d")
    p.add_argument("--fusion", choices=["summing", "likelihood"], default="likelihood")
    p.add_argument("--outlier", choices=["none", "uniform", "corrupted"], default="corrupted")
    p.add_argument("--alpha", type=float, default=0.2)
    p.add_argument("--outlier-variance", type=float, default=100.0)
    p.add_argument("--uniform-density", type=float, default=None)


def _add_optim_flags(p):
    p.add_argument("--method", choices=["gd", "newton", "gauss_newton", "lm"], default="lm")
    p.add_argument("--step-alpha", type=float, default=0.1)
    p.add_argument("--lm-lambda0", type=float, default=1e-3)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--grad-tol", type=float, default=1e-8)


def _add_scenario_flags(p):
    p.add_argument("--kind", choices=list(KINDS), default="overlapped2d")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--theta-g", type=float, nargs="+", default=None,
                   help="ground truth: tx for oned_basic, tx ty phi_z (rad) for 2D")
    p.add_argument("--n-inliers", type=int, default=None)
    p.add_argument("--n-outliers-prev", type=int, default=None)
    p.add_argument("--n-outliers-curr", type=int, default=None)
    p.add_argument("--n-cluster-points", type=int, default=None)
    p.add_argument("--cluster-spread", choices=["tight", "loose"], default=None)
    p.add_argument("--sigma-r", type=float, default=0.2)
    p.add_argument("--sigma-phi", type=float, default=0.03)
    p.add_argument("--dt", type=float, default=0.2)


def _model(args, dim: int) -> CostModel:
    if args.outlier == "none":
        out = OutlierModel()
    elif args.outlier == "uniform":
        out = OutlierModel("uniform", args.alpha, uniform_density=args.uniform_density)
    else:
        out = OutlierModel.corrupted(args.alpha, args.outlier_variance, dim)
    return CostModel(args.metric, args.fusion, out)


def _optim(args) -> OptimizerConfig:
    return OptimizerConfig(args.method, args.step_alpha, args.lm_lambda0, args.max_iter, args.grad_tol)


def _spec(args) -> ScenarioSpec:
    kw = {"seed": args.seed, "sigma_r": args.sigma_r, "sigma_phi": args.sigma_phi, "dt": args.dt}
    for name in ("n_inliers", "n_outliers_prev", "n_outliers_curr", "n_cluster_points", "cluster_spread"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    if args.theta_g is not None:
        tg = list(args.theta_g)
        if args.kind == "oned_basic":
            if len(tg) != 1:
                raise UsageError("oned_basic takes a single --theta-g value (tx)")
            tg = tg + [0.0, 0.0]
        elif len(tg) != 3:
            raise UsageError("2D scenarios take --theta-g tx ty phi_z")
        kw["theta_g"] = MotionParams.pose(*tg)
    return ScenarioSpec.defaults(args.kind, **kw)


# commands ----------------------------------------------------------------------------

def cmd_scenario(args) -> int:
    spec = _spec(args)
    inst = generate(spec)
    outputs: list = []
    _write(args.out, "F.json", pointset_to_json(inst.F) + "\n", outputs)
    _write(args.out, "M.json", pointset_to_json(inst.M) + "\n", outputs)
    meta = {"kind": spec.kind, "theta_g": inst.theta_g.as_pose().tolist(), "dt": spec.dt,
            "correspondence": [list(p) for p in inst.correspondence],
            "outliers_prev": list(inst.outliers_prev), "outliers_curr": list(inst.outliers_curr),
            "F_true": inst.F_true.tolist(), "M_true": inst.M_true.tolist()}
    _write(args.out, "instance.json", json.dumps(meta, indent=2) + "\n", outputs)
    v = inst.theta_g.as_pose() / spec.dt
    _write(args.out, "truth.csv", truth_csv([(spec.dt, *v)]), outputs)
    if inst.F_polar is not None:
        lines = []
        for t, polar in ((0.0, inst.F_polar), (spec.dt, inst.M_polar)):
            targets = [PolarTarget(*row) for row in polar]
            lines.append(scan_to_json(RadarScan(t, tuple(targets), max(len(targets), 1))))
        _write(args.out, "scans.jsonl", "\n".join(lines) + "\n", outputs)
    _write_manifest(args, outputs, [])
    return EXIT_OK


def _init_vector(args, dim: int) -> np.ndarray:
    n = 1 if dim == 1 else 3
    if args.init_theta is not None:
        if len(args.init_theta) != n:
            raise UsageError(f"--init-theta needs {n} value(s) for {dim}D point sets")
        return np.array(args.init_theta, dtype=float)
    return np.zeros(n)


def cmd_register(args) -> int:
    F, M = pointset_from_json(args.F), pointset_from_json(args.M)
    if F.dim != M.dim:
        raise UsageError("F and M have different dimensions")
    model = _model(args, F.dim)
    f = make_objective(M, F, model)
    x0 = _init_vector(args, F.dim)
    warnings = []
    f0 = f(x0)
    saturated = f0 >= SENTINEL_COST
    if saturated and model.fusion == "likelihood" and model.outlier.kind == "none":
        msg = ("objective is saturated at the initial guess (a target has zero likelihood); "
               "use a robust outlier model such as --outlier corrupted --alpha 0.2")
        warnings.append(msg)
        print(f"warning: {msg}", file=sys.stderr)
    res = minimize(f, x0, _optim(args))
    cov = None
    diag = {"saturated_at_init": bool(saturated), "iterations": res.iterations, "converged": res.converged,
            "message": res.message, "final_grad_norm": res.trace[-1][2]}
    try:
        if args.cov_method == "fisher":
            cov = fisher_covariance(f, res.x, check_gradient=False)
        elif args.cov_method == "error_propagation":
            shape = M.mu.shape

            def fz(z, th):
                return make_objective(M.with_arrays(z.reshape(shape), M.cov), F, model)(th)

            cov = propagation_from_objective(fz, M.mu.reshape(-1), res.x, InputNoise(tuple(M.cov)))
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        diag["covariance_error"] = str(exc)
    try:
        eig = np.linalg.eigvalsh(numeric_hessian(f, res.x))
        diag["hessian_eigenvalues"] = eig.tolist()
        diag["local_minimum"] = bool(np.all(eig > 0))
    except (ArithmeticError, np.linalg.LinAlgError):
        diag["local_minimum"] = False
    result = {"theta_hat": res.x.tolist(), "objective": res.objective_value,
              "sigma_theta": None if cov is None else cov.to_json(), "diagnostics": diag,
              "warnings": warnings, "trace": "trace.csv"}
    outputs: list = []
    _write(args.out, "result.json", json.dumps(result, indent=2, sort_keys=True) + "\n", outputs)
    _write(args.out, "trace.csv", res.trace_csv(), outputs)
    _write_manifest(args, outputs, [args.F, args.M])
    return EXIT_OK


def cmd_surface(args) -> int:
    F, M = pointset_from_json(args.F), pointset_from_json(args.M)
    if F.dim != M.dim:
        raise UsageError("F and M have different dimensions")
    grid = [args.tx] + ([args.ty, args.phi] if args.ty is not None or args.phi is not None else [])
    if len(grid) == 3 and (args.ty is None or args.phi is None):
        raise UsageError("a pose grid needs --tx, --ty and --phi")
    base = None if args.base is None else np.array(args.base, dtype=float)
    surf = cost_surface(M, F, _model(args, F.dim), [tuple(g) for g in grid], base, args.budget,
                        jobs=args.jobs)
    outputs: list = []
    _write(args.out, "surface.csv", surf.to_csv(), outputs)
    summary = {"argmin": surf.argopt_point().tolist(), "min_value": float(surf.values[surf.argopt]),
               "n_saturated": int(np.sum(surf.values >= SENTINEL_COST))}
    if len(grid) == 1:
        mins = local_minima(surf.values)
        summary["local_minima"] = [float(surf.coords()[0][i]) for i in mins]
    _write(args.out, "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", outputs)
    _write_manifest(args, outputs, [args.F, args.M])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    spec = _spec(args)
    if args.N < 1:
        raise UsageError("--N must be >= 1")
    report = run_campaign(spec, _model(args, spec.dim), _optim(args), args.cov_method, args.N, args.base_seed,
                          args.init, args.jobs)
    outputs: list = []
    _write(args.out, "report.json", report.to_json() + "\n", outputs)
    _write(args.out, "trials.csv", report.trials_csv(), outputs)
    _write_manifest(args, outputs, [])
    return EXIT_OK


def _ego_config(args) -> EgoConfig:
    return EgoConfig(SensorOffset(*args.sensor), args.alpha, args.outlier_sigma**2 * np.eye(2), args.doppler,
                     AnnealConfig(args.anneal, args.anneal_factor, args.anneal_rounds), _optim(args))


def cmd_ego(args) -> int:
    scans = read_scans(args.scans, default_sigma_v=args.default_sigma_v)
    if len(scans) < 2:
        raise UsageError("need at least two scans")
    cfg = _ego_config(args)
    steps = run_sequence(scans, cfg)
    ts = [s.timestamp for s in scans]
    poses = integrate_trajectory([s for _, s in steps], ts)
    outputs: list = []
    _write(args.out, "states.jsonl", "".join(s.to_json(t) + "\n" for t, s in steps), outputs)
    _write(args.out, "trajectory.csv", trajectory_csv(ts, poses), outputs)
    inputs = [args.scans]
    if args.truth:
        truth = read_truth(args.truth)
        est = np.array([s.theta_hat.vector for _, s in steps])
        if len(truth) != len(est):
            raise UsageError(f"truth has {len(truth)} rows for {len(est)} scan pairs")
        err = est - truth[:, 1:]
        score = {"mean_error": err.mean(axis=0).tolist(), "error_variance": err.var(axis=0).tolist(),
                 "median_sigma": np.median([np.sqrt(np.diag(s.sigma_theta)) for _, s in steps], axis=0).tolist(),
                 "n_converged": int(sum(s.converged for _, s in steps)), "n_steps": len(steps)}
        _write(args.out, "score.json", json.dumps(score, indent=2, sort_keys=True) + "\n", outputs)
        inputs.append(args.truth)
    _write_manifest(args, outputs, inputs)
    return EXIT_OK


def cmd_replay_data(args) -> int:
    spec = ReplaySpec(args.n_steps, args.vx, args.vy, args.omega, args.dt, args.n_landmarks, args.max_range,
                      args.sigma_r, args.sigma_phi, args.sigma_v, args.seed)
    scans, truth = synthetic_replay(spec, SensorOffset(*args.sensor))
    outputs: list = []
    _write(args.out, "scans.jsonl", "".join(scan_to_json(s) + "\n" for s in scans), outputs)
    _write(args.out, "truth.csv", truth_csv(truth), outputs)
    _write_manifest(args, outputs, [])
    return EXIT_OK


def cmd_rerun(args) -> int:
    with open(args.manifest) as fh:
        man = json.load(fh)
    cmd = man["command"]
    if cmd == "rerun":
        raise UsageError("cannot rerun a rerun manifest")
    out = args.out or os.path.dirname(os.path.abspath(args.manifest))
    config = {k: v for k, v in man["config"].items() if k not in ("command", "out", "func")}
    ns = argparse.Namespace(**config, out=out, command=cmd)
    ns.func = COMMANDS[cmd]
    os.makedirs(out, exist_ok=True)
    return ns.func(ns)


COMMANDS = {"scenario": cmd_scenario, "register": cmd_register, "surface": cmd_surface,
            "evaluate": cmd_evaluate, "ego": cmd_ego, "replay-data": cmd_replay_data}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmmreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("scenario", help="generate a synthetic scenario")
    _add_scenario_flags(s)
    s.set_defaults(func=cmd_scenario)

    r = sub.add_parser("register", help="register M onto F")
    r.add_argument("--F", required=True, type=_abs)
    r.add_argument("--M", required=True, type=_abs)
    _add_model_flags(r)
    _add_optim_flags(r)
    r.add_argument("--init", choices=["zero"], default="zero")
    r.add_argument("--init-theta", type=float, nargs="+", default=None)
    r.add_argument("--cov-method", choices=["fisher", "error_propagation", "none"], default="fisher")
    r.set_defaults(func=cmd_register)

    g = sub.add_parser("surface", help="dump the objective over a grid")
    g.add_argument("--F", required=True, type=_abs)
    g.add_argument("--M", required=True, type=_abs)
    _add_model_flags(g)
    g.add_argument("--tx", type=float, nargs=3, required=True, metavar=("LO", "HI", "STEPS"))
    g.add_argument("--ty", type=float, nargs=3, default=None, metavar=("LO", "HI", "STEPS"))
    g.add_argument("--phi", type=float, nargs=3, default=None, metavar=("LO", "HI", "STEPS"))
    g.add_argument("--base", type=float, nargs=3, default=None)
    g.add_argument("--budget", type=int, default=10**7)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_surface)

    e = sub.add_parser("evaluate", help="Monte-Carlo credibility campaign")
    _add_scenario_flags(e)
    _add_model_flags(e)
    _add_optim_flags(e)
    e.add_argument("--cov-method", choices=["fisher", "error_propagation"], default="fisher")
    e.add_argument("--N", type=int, default=200)
    e.add_argument("--base-seed", type=int, default=0)
    e.add_argument("--init", choices=["truth", "zero"], default="truth")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_evaluate)

    o = sub.add_parser("ego", help="ego-motion over a scan JSON-lines file")
    o.add_argument("--scans", required=True, type=_abs)
    o.add_argument("--truth", default=None, type=_abs)
    o.add_argument("--doppler", action="store_true")
    o.add_argument("--anneal", action="store_true")
    o.add_argument("--anneal-factor", type=float, default=10.0)
    o.add_argument("--anneal-rounds", type=int, default=2)
    o.add_argument("--alpha", type=float, default=0.2)
    o.add_argument("--outlier-sigma", type=float, default=10.0, help="outlier std-dev in metres")
    o.add_argument("--sensor", type=float, nargs=3, default=[0.0, 0.0, 0.0], metavar=("X_S", "Y_S", "ALPHA_S"))
    o.add_argument("--default-sigma-v", type=float, default=0.1)
    _add_optim_flags(o)
    o.set_defaults(func=cmd_ego)

    d = sub.add_parser("replay-data", help="synthetic scan sequence of a static map")
    d.add_argument("--n-steps", type=int, default=50)
    d.add_argument("--vx", type=float, default=2.0)
    d.add_argument("--vy", type=float, default=0.0)
    d.add_argument("--omega", type=float, default=0.0)
    d.add_argument("--dt", type=float, default=0.2)
    d.add_argument("--n-landmarks", type=int, default=40)
    d.add_argument("--max-range", type=float, default=30.0)
    d.add_argument("--sigma-r", type=float, default=0.2)
    d.add_argument("--sigma-phi", type=float, default=0.03)
    d.add_argument("--sigma-v", type=float, default=0.1)
    d.add_argument("--sensor", type=float, nargs=3, default=[0.0, 0.0, 0.0], metavar=("X_S", "Y_S", "ALPHA_S"))
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_replay_data)

    m = sub.add_parser("rerun", help="replay a manifest")
    m.add_argument("manifest")
    m.set_defaults(func=cmd_rerun)

    for sp in (s, r, g, e, o, d, m):
        sp.add_argument("--out", default=None if sp is m else ".", help="output directory")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.out is not None:
            os.makedirs(args.out, exist_ok=True)
        return args.func(args)
    except UsageError as exc:
        print(f"gmmreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GridBudgetError as exc:
        print(f"gmmreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"gmmreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, NonFiniteError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"gmmreg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"gmmreg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
