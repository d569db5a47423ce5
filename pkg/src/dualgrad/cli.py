"""Command-line front end for reproducible experiments.

Subcommands: ``generate`` (seeded random instance), ``solve`` (one run
with a trace CSV), ``compare`` (weighted vs centralized step to the same
tolerance), ``dmpc`` (compile a networked system file), ``probe``
(inequality and error-bound checks).  Every command is deterministic
given its flags.  Exit codes: 0 success, 2 usage error, 3 numeric error.
"""

import argparse
import hashlib
import sys

import numpy as np

from . import dmpc, error_bound, gen, jsonio, model, reference
from .dual_algo import StopRule, load_trace_csv, run
from .errors import (ConvergenceError, GenerationError, NumericsError,
                     StructureError, UnsupportedInstanceError)
from .stepsize import compute_weights, global_dual_lipschitz

STOP_FLAGS = {"rel": "relative_primal", "prox": "prox_residual", "cap": "iteration_cap"}


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return digest.hexdigest()


def _load_or_make_reference(problem, problem_path, ref_flag, parser):
    """Resolve --ref: an explicit file, or 'auto' with a content-hash cache."""
    if ref_flag is None:
        return None
    if ref_flag != "auto":
        doc = jsonio.load(ref_flag)
        stored = doc.get("problem_sha256")
        if stored is not None and stored != _sha256(problem_path):
            parser.error(f"reference {ref_flag} was computed for a different problem file")
        return reference.reference_from_doc(doc, problem.graph)
    digest = _sha256(problem_path)
    cache_path = str(problem_path) + ".ref.json"
    try:
        doc = jsonio.load(cache_path)
        if doc.get("problem_sha256") == digest:
            return reference.reference_from_doc(doc, problem.graph)
    except (OSError, ValueError, KeyError):
        pass
    ref = reference.solve_reference(problem)
    reference.save_reference(ref, cache_path, extra={"problem_sha256": digest})
    return ref


def _cmd_generate(args, parser):
    if args.omega > args.m:
        parser.error("--omega must not exceed --m")
    problem = gen.generate(args.m, args.n, args.omega, args.gamma, args.seed)
    model.save_problem(problem, args.out)
    graph = problem.graph
    print(f"wrote {args.out}")
    print(f"n={graph.n_total} p={graph.p_total} q={graph.q_total} "
          f"omega={graph.max_degree}")
    return 0


def _cmd_solve(args, parser):
    problem = model.load_problem(args.problem)
    mode = STOP_FLAGS[args.stop]
    ref = _load_or_make_reference(problem, args.problem, args.ref, parser)
    if mode == "relative_primal" and ref is None:
        parser.error("--stop rel needs --ref (give a file or 'auto')")
    weights, _ = compute_weights(problem)
    lipschitz = global_dual_lipschitz(problem)
    stop = StopRule(mode, eps=args.eps, cap=args.cap)
    trace = run(problem, algo=args.algo, stop=stop, reference=ref,
                weights=weights, lipschitz=lipschitz)
    if args.trace:
        trace.write_csv(args.trace)
    print(f"algorithm={args.algo} status={trace.status} iterations={trace.iterations}")
    print(f"lipschitz_global={lipschitz:.17g} "
          f"w_max={weights.overline_w:.17g} w_min={weights.underline_w:.17g}")
    last = len(trace) - 1
    print(f"dual={trace.dual[last]:.17g} f={trace.f[last]:.17g} "
          f"infeas_w={trace.infeas_w[last]:.17g} prox_w={trace.prox_w[last]:.17g}")
    if ref is not None:
        print(f"dual_subopt={trace.dual_subopt[last]:.17g} "
              f"primal_subopt={trace.primal_subopt[last]:.17g} "
              f"dist_z={trace.dist_z[last]:.17g}")
    return 0


def _cmd_compare(args, parser):
    problem = model.load_problem(args.problem)
    ref = _load_or_make_reference(problem, args.problem, "auto", parser)
    weights, _ = compute_weights(problem)
    lipschitz = global_dual_lipschitz(problem)
    stop = StopRule("relative_primal", eps=args.eps, cap=args.cap)
    trace_dg = run(problem, algo="dg", stop=stop, reference=ref, weights=weights)
    trace_cg = run(problem, algo="cg", stop=stop, reference=ref,
                   weights=weights, lipschitz=lipschitz)
    k_dg, k_cg = trace_dg.iterations, trace_cg.iterations
    report = {
        "problem": str(args.problem),
        "eps": args.eps,
        "k_dg": int(k_dg),
        "k_cg": int(k_cg),
        "ratio": float(k_dg) / float(k_cg) if k_cg else float("nan"),
        "dg_converged": trace_dg.status == "converged",
        "cg_converged": trace_cg.status == "converged",
        "omega": int(problem.graph.max_degree),
        "lipschitz_global": lipschitz,
        "w_max": weights.overline_w,
        "w_min": weights.underline_w,
        "f_star": ref.f_star,
    }
    jsonio.dump(report, args.out)
    print(f"k_dg={k_dg} k_cg={k_cg} ratio={report['ratio']:.6g}")
    if not (report["dg_converged"] and report["cg_converged"]):
        print("warning: at least one run hit its iteration cap", file=sys.stderr)
    return 0


def _cmd_dmpc(args, parser):
    system = dmpc.load_system(args.system)
    if args.horizon is not None:
        if args.horizon < 1:
            parser.error("--horizon must be at least 1")
        system = dmpc.NetworkedSystem(
            system.subsystems, system.adjacency, args.horizon, system.x0)
    problem = dmpc.build_problem(system)
    model.save_problem(problem, args.out)
    graph = problem.graph
    print(f"wrote {args.out}")
    print(f"n={graph.n_total} p={graph.p_total} q={graph.q_total} "
          f"omega={graph.max_degree} horizon={system.horizon}")
    return 0


def _cmd_probe(args, parser):
    problem = model.load_problem(args.problem)
    ref = _load_or_make_reference(problem, args.problem, args.ref or "auto", parser)
    weights, _ = compute_weights(problem)
    campaign = error_bound.inequality_campaign(
        problem, weights, ref.lambda_ref, pairs=args.pairs, seed=args.seed)
    report = {
        "problem": str(args.problem),
        "pairs": campaign.pairs,
        "descent_violations": campaign.descent_violations,
        "lemma4_violations": campaign.lemma4_violations,
        "lipschitz3_violations": campaign.lipschitz3_violations,
        "worst_margins": {
            "descent": campaign.worst_descent_margin,
            "gradient_residual": campaign.worst_lemma4_margin,
            "prox_lipschitz": campaign.worst_lipschitz3_margin,
        },
    }
    if error_bound.full_row_rank(problem):
        iters = args.iterations
        if args.trace:
            iters = int(load_trace_csv(args.trace)["k"][-1])
        replay = run(problem, algo="dg",
                     stop=StopRule("iteration_cap", eps=1.0, cap=iters),
                     weights=weights)
        probe = error_bound.probe_error_bound(problem, replay, ref, weights=weights)
        report["error_bound"] = {
            "kappa_hat": probe.kappa_hat,
            "median_ratio": probe.median_ratio,
            "samples": int(probe.ratios.size),
            "excluded": probe.excluded,
            "violations": probe.violations,
        }
        if all(obj.gamma == 0 for obj in problem.objectives):
            sigma_dw = error_bound.strong_concavity_constant(problem, weights)
            report["error_bound"]["sigma_dw"] = sigma_dw
            report["error_bound"]["kappa_strongly_concave"] = 2.0 / sigma_dw
    else:
        report["error_bound"] = None
        report["error_bound_note"] = (
            "constraint matrix is not full row rank; ratio probe skipped"
        )
    jsonio.dump(report, args.out)
    violations = campaign.total_violations
    print(f"inequality violations: {violations} over {campaign.pairs} pairs")
    if report["error_bound"] is not None:
        print(f"kappa_hat={report['error_bound']['kappa_hat']:.6g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dualgrad",
        description="Distributed dual gradient toolkit for block-separable convex programs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="draw a seeded random instance")
    p_gen.add_argument("--m", type=int, required=True, help="number of blocks")
    p_gen.add_argument("--n", type=int, required=True, help="variables per block")
    p_gen.add_argument("--omega", type=int, required=True, help="coupling degree")
    p_gen.add_argument("--gamma", action="store_true",
                       help="include the softplus term in the objectives")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True, help="problem file to write")

    p_solve = sub.add_parser("solve", help="run one algorithm on a problem file")
    p_solve.add_argument("--problem", required=True)
    p_solve.add_argument("--algo", choices=("dg", "cg"), default="dg")
    p_solve.add_argument("--eps", type=float, default=1e-4)
    p_solve.add_argument("--stop", choices=tuple(STOP_FLAGS), default="rel")
    p_solve.add_argument("--cap", type=int, default=1_000_000)
    p_solve.add_argument("--trace", help="trace CSV to write")
    p_solve.add_argument("--ref", help="reference file, or 'auto' to compute and cache")
    p_solve.add_argument("--jobs", type=int, default=1,
                         help="worker count; results are identical for any value")

    p_cmp = sub.add_parser("compare", help="weighted vs centralized step, same tolerance")
    p_cmp.add_argument("--problem", required=True)
    p_cmp.add_argument("--eps", type=float, default=1e-2)
    p_cmp.add_argument("--cap", type=int, default=1_000_000)
    p_cmp.add_argument("--out", required=True, help="report JSON to write")

    p_dmpc = sub.add_parser("dmpc", help="compile a networked system into a problem file")
    p_dmpc.add_argument("--system", required=True, help="system description file")
    p_dmpc.add_argument("--horizon", type=int, help="override the stored horizon")
    p_dmpc.add_argument("--out", required=True)

    p_probe = sub.add_parser("probe", help="inequality and error-bound checks")
    p_probe.add_argument("--problem", required=True)
    p_probe.add_argument("--trace", help="trace CSV fixing the replay length")
    p_probe.add_argument("--ref", help="reference file, or 'auto' (default)")
    p_probe.add_argument("--out", required=True, help="report JSON to write")
    p_probe.add_argument("--pairs", type=int, default=100)
    p_probe.add_argument("--seed", type=int, default=0)
    p_probe.add_argument("--iterations", type=int, default=500,
                         help="replay length when no trace is given")
    return parser


_COMMANDS = {
    "generate": _cmd_generate,
    "solve": _cmd_solve,
    "compare": _cmd_compare,
    "dmpc": _cmd_dmpc,
    "probe": _cmd_probe,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return _COMMANDS[args.command](args, parser)
    except (ConvergenceError, NumericsError, GenerationError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (StructureError, UnsupportedInstanceError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
