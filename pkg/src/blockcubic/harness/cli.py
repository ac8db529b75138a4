"""Command line entry point: ``run``, ``gen``, ``certify`` and ``solve-sub``."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import yaml

from ..blocks import SamplingSpec
from ..cubsolve import Coupling, CubicSubproblem, NumericalFailure, solve
from ..rbcn import RATES, DistanceMonitor, NotApplicable, RbcnConfig, certificate_iterations, compute_beta, rbcn_run
from .data import gen_synthetic_cubic, gen_synthetic_logistic, gen_synthetic_poisson, write_libsvm
from .experiment import Instance, load_config, reference_optimum, run_experiment

__all__ = ["main", "build_parser"]


def _cmd_run(args) -> int:
    cfg = load_config(args.config).replace(
        taus=args.tau, methods=args.method, seed=args.seed, output=args.output, target=args.target,
        max_iterations=args.max_iterations, max_epochs=args.max_epochs,
    )
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    result = run_experiment(cfg, log=log)
    for r in result.runs:
        print(f"{r['method']:6s} tau={r['tau']:<5d} {r['status']:15s} final={r['final']!r} "
              f"time_ms={r['time_ms']!r}")
    print(f"wrote {result.output}")
    return 1 if result.all_failed else 0


def _cmd_gen(args) -> int:
    if args.kind == "cubic":
        p = gen_synthetic_cubic(args.N, args.seed, form=args.form)
        # c_i / 6 |x|^3 is stored as a cubed-abs loss with weight c_i / 2
        c = np.array([2.0 * float(np.asarray(phi.loss.c)) for phi in p.phi])
        np.savez(args.output, C=p.g.C if args.form == "residual" else p.g.M,
                 d=p.g.d if args.form == "residual" else p.g.q, c=c)
    else:
        make = gen_synthetic_poisson if args.kind == "poisson" else gen_synthetic_logistic
        ds = make(args.m, args.d, args.seed)
        with open(args.output, "w", encoding="utf-8") as f:
            write_libsvm(ds, f)
    print(f"wrote {args.output}")
    return 0


def _cmd_certify(args) -> int:
    problem = gen_synthetic_cubic(args.N, args.seed, form=args.form)
    inst = Instance("synthetic_cubic", f"synthetic_cubic_N{args.N}_s{args.seed}", problem=problem)
    f_star, x_star = reference_optimum(inst)
    spec = SamplingSpec(tau=args.tau, seed=args.seed)
    mon = DistanceMonitor(x_star)
    f0 = None
    for r in range(args.runs):
        cfg = RbcnConfig(sampling=SamplingSpec(tau=args.tau, seed=r), max_iterations=args.max_iterations,
                         target_accuracy=args.eps, stall_tol=0.0)
        f0 = rbcn_run(problem, cfg, f_star=f_star, callback=mon).objectives()[0]
    G, A = problem.g.G, problem.g.A
    consts = dict(
        n=problem.partition.n, tau=args.tau, eps=args.eps, rho=args.rho, F0_gap=float(f0 - f_star),
        L=float(np.linalg.eigvalsh(A).max()), mu=max(float(np.linalg.eigvalsh(G).min()), 0.0),
        H_F=problem.H_F, D=mon.max_distance, estimated=True,
    )
    if args.rate != "sublinear":
        consts["beta"] = compute_beta(problem, spec)
    try:
        cert = certificate_iterations(args.rate, **consts)
    except NotApplicable as e:
        print(f"not applicable: {e}", file=sys.stderr)
        return 1
    sys.stdout.write(cert.report())
    sys.stdout.write(f"F_star = {f_star!r}\n")
    return 0


def _load_subproblem(path: str) -> CubicSubproblem:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    coupling = data.get("coupling")
    if coupling is not None:
        coupling = Coupling(coupling["B"], coupling.get("diag", 0.0), coupling.get("linear", 0.0))
    return CubicSubproblem(
        np.asarray(data["Q"], float), np.asarray(data["b"], float), float(data["H"]),
        coupling=coupling, lo=data.get("lo"), hi=data.get("hi"),
    )


def _cmd_solve_sub(args) -> int:
    sub = _load_subproblem(args.file)
    sol = solve(sub)
    out = {
        "y": sol.y.tolist(),
        "model_value": sol.model_value,
        "tau": sol.tau,
        "kkt_residual": sol.kkt_residual,
        "converged": sol.converged,
    }
    print(json.dumps(out, indent=2))
    return 0 if sol.converged else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="blockcubic", description="Randomized block cubic Newton toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a YAML config")
    run.add_argument("config")
    run.add_argument("--tau", type=int, action="append", help="override the tau list (repeatable)")
    run.add_argument("--method", action="append", help="override the method list (repeatable)")
    run.add_argument("--seed", type=int)
    run.add_argument("--output")
    run.add_argument("--target", type=float)
    run.add_argument("--max-iterations", type=int)
    run.add_argument("--max-epochs", type=float)
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=_cmd_run)

    gen = sub.add_parser("gen", help="write a synthetic instance")
    gen.add_argument("kind", choices=("cubic", "poisson", "logistic"))
    gen.add_argument("-o", "--output", required=True,
                     help="LIBSVM file; for 'cubic' an .npz with C, d (smooth part) and c")
    gen.add_argument("--N", type=int, default=64)
    gen.add_argument("--m", type=int, default=200)
    gen.add_argument("--d", type=int, default=40)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--form", choices=("residual", "quadratic"), default="residual")
    gen.set_defaults(func=_cmd_gen)

    cert = sub.add_parser("certify", help="iteration bound for the synthetic cubic problem")
    cert.add_argument("--rate", choices=RATES, default="sublinear")
    cert.add_argument("--N", type=int, default=32)
    cert.add_argument("--seed", type=int, default=0)
    cert.add_argument("--form", choices=("residual", "quadratic"), default="residual")
    cert.add_argument("--tau", type=int, default=4)
    cert.add_argument("--eps", type=float, default=1e-6)
    cert.add_argument("--rho", type=float, default=0.1)
    cert.add_argument("--runs", type=int, default=5, help="seeded runs used to estimate D")
    cert.add_argument("--max-iterations", type=int, default=200_000)
    cert.set_defaults(func=_cmd_certify)

    ss = sub.add_parser("solve-sub", help="solve one cubic subproblem from a YAML/JSON file")
    ss.add_argument("file", help="keys Q, b, H and optional coupling {B, diag, linear}, lo, hi")
    ss.set_defaults(func=_cmd_solve_sub)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError, NumericalFailure) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
