"""Command-line runner: ``cmfc run`` for scenarios, ``cmfc acceptance`` for the checks.

Exit codes: 0 success, 2 scenario/parse error, 3 non-convergence,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .acceptance import SUITES, run_suite
from .discrete_bridge import DeterministicScenario, PreconditionError, convergence_study
from .fj_problems import run_toy_suite
from .fj_solver import MultiplierRecoveryError
from .lq_mfc import RiccatiBlowup, mfg_solve, riccati_solve, solve_constrained, solve_unconstrained
from .mvsde import (
    ControlPolicy,
    TimeGrid,
    directional_derivative_check,
    picard_iterate,
    spot_check_lipschitz,
    standard_normals,
)
from .report_io import RunReport, emit_csv, jsonable, moments_table, write_json
from .scenario import Scenario, ScenarioError, load_scenario

EXIT_OK, EXIT_PARSE, EXIT_NONCONVERGED, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("cmfc")


class NotConverged(RuntimeError):
    pass


def _grid(sc: Scenario) -> TimeGrid:
    return TimeGrid(sc.model().T, int(sc.get("run.M")))


def _lq_results(rep) -> dict:
    return {
        "cost": {"mean": rep.cost.mean, "ci95_halfwidth": rep.cost.halfwidth},
        "iterations": rep.iterations,
        "converged": rep.converged,
        "history": rep.history,
        "smp": rep.smp.to_dict(),
        "regression_residuals": rep.adjoint.regression_residuals,
        "basis_degrees": rep.adjoint.degrees,
    }


def _stage_data(report: RunReport, rep, grid: TimeGrid) -> None:
    ens = rep.ensemble
    m = moments_table(ens)
    report.data["paths"] = ens
    report.data["moments"] = (grid.nodes, m["mean_x"], m["var_x"], m["mean_a"])
    report.data["adjoint"] = (grid, rep.adjoint)


def _run_lq_unconstrained(sc: Scenario, report: RunReport) -> None:
    model, grid = sc.model(), _grid(sc)
    rep = solve_unconstrained(model, grid, sc.get("run.N"), sc.get("run.seed"), max_iter=sc.get("run.max_iter"),
                              damping=sc.get("run.damping"), tol=sc.get("run.tol"), degree=sc.get("run.degree"))
    ric = riccati_solve(model, TimeGrid(model.T, max(1000, grid.M)))
    report.results = _lq_results(rep)
    report.results["riccati"] = {
        "value": ric.value,
        "relative_difference": abs(rep.cost.mean - ric.value) / abs(ric.value) if ric.value else abs(rep.cost.mean),
    }
    _stage_data(report, rep, grid)
    if not rep.converged:
        raise NotConverged(f"fixed point not converged after {rep.iterations} iterations")


def _run_lq_constrained(sc: Scenario, report: RunReport) -> None:
    model, grid = sc.model(), _grid(sc)
    kw = dict(max_iter=sc.get("run.max_iter"), damping=sc.get("run.damping"), tol=sc.get("run.tol"),
              degree=sc.get("run.degree"))
    N, seed = sc.get("run.N"), sc.get("run.seed")
    base = solve_unconstrained(replace(model, h=None), grid, N, seed, **kw)
    rep = solve_constrained(model, grid, N, seed, warm_start=base, **kw)
    report.results = _lq_results(rep)
    report.results["unconstrained_cost"] = {"mean": base.cost.mean, "ci95_halfwidth": base.cost.halfwidth}
    report.results["feasibility_quantiles"] = rep.feasibility_quantiles
    report.results["eta"] = {
        "min": float(rep.eta.min()),
        "active_fraction": float((rep.eta > 0).mean()),
        "l2_norm": float(np.sqrt(np.mean(np.sum(grid.dt * rep.eta[:, :-1] ** 2, axis=1)))),
    }
    _stage_data(report, rep, grid)
    if not rep.converged:
        raise NotConverged(f"constrained fixed point not converged after {rep.iterations} iterations")


def _run_mfg(sc: Scenario, report: RunReport) -> None:
    model, grid = sc.model(), _grid(sc)
    rep = mfg_solve(model, grid, sc.get("run.N"), sc.get("run.seed"), outer_iter=sc.get("run.outer_iter"),
                    tol=sc.get("run.outer_tol"), damping=sc.get("run.damping"), inner_iter=sc.get("run.max_iter"),
                    degree=sc.get("run.degree"))
    report.results = {
        "consistency_residuals": rep.residuals,
        "outer_iterations": rep.outer_iterations,
        "converged": rep.converged,
        "converged_by_tolerance": rep.converged_by_tolerance,
        "flow_mean_x": rep.flow_mean_x,
        "flow_mean_a": rep.flow_mean_a,
        "inner": _lq_results(rep.inner),
    }
    _stage_data(report, rep.inner, grid)
    if not rep.converged:
        raise NotConverged(f"consistency residual {rep.residuals[-1]:.3g} after {rep.outer_iterations} outer iterations")


def _run_bridge(sc: Scenario, report: RunReport) -> None:
    model = sc.model()
    DeterministicScenario.from_lq(model)  # precondition check before any work
    tab = convergence_study(model, sc.get("run.dt_list"))
    report.results = {
        "dt": tab.dt,
        "sup_error": tab.sup_error,
        "sup_error_right_node": tab.sup_error_right,
        "order_estimate": tab.order_estimate,
        "slope": tab.slope,
        "transversality_relative": tab.transversality,
    }
    report.data["comparison"] = tab


def _run_fj_suite(sc: Scenario, report: RunReport) -> None:
    entries = run_toy_suite()
    report.results = {
        "problems": {
            e.name: {"r0": e.r0, "stationarity": e.stationarity, "slackness": e.slackness,
                     "normalization_error": e.normalization_error, "licq": e.licq, "mfcq": e.mfcq,
                     "verdicts_match": e.verdicts_match, "passed": e.passes()}
            for e in entries
        },
        "passed": all(e.passes() for e in entries),
    }


def _run_mvsde_check(sc: Scenario, report: RunReport) -> None:
    model, grid = sc.model(), _grid(sc)
    N, seed = sc.get("run.N"), sc.get("run.seed")
    dyn = model.dynamics()
    alpha = 0.5 * standard_normals(seed, (901,), (N, grid.M + 1)).reshape(N, grid.M + 1, 1)
    policy = ControlPolicy.open_loop(alpha)
    ens, plog = picard_iterate(dyn, policy, grid, N, seed, max_iter=sc.get("run.max_iter"))
    errs = []
    for j in range(sc.get("run.directions")):
        K = standard_normals(seed, (902, j), (N, grid.M + 1)).reshape(N, grid.M + 1, 1)
        rep = directional_derivative_check(dyn, policy, grid, N, seed, model.cost(), K, eps_list=(sc.get("run.eps"),))
        errs.append({"analytic": rep.analytic, "finite_difference": rep.finite_differences[0],
                     "relative_error": rep.relative_errors[0]})
    report.results = {
        "picard_distances": plog.distances,
        "picard_converged": plog.converged,
        "derivative_checks": errs,
        "lipschitz_sampled": spot_check_lipschitz(dyn, grid, seed=seed),
        "lipschitz_declared": dyn.lipschitz,
    }
    m = moments_table(ens)
    report.data["paths"] = ens
    report.data["moments"] = (grid.nodes, m["mean_x"], m["var_x"], m["mean_a"])
    if not plog.converged:
        raise NotConverged(f"Picard iteration not converged after {plog.iterations} iterations")


RUNNERS = {
    "lq-unconstrained": _run_lq_unconstrained,
    "lq-constrained": _run_lq_constrained,
    "mfg": _run_mfg,
    "bridge": _run_bridge,
    "fj-suite": _run_fj_suite,
    "mvsde-check": _run_mvsde_check,
}

NUMERICAL_ERRORS = (FloatingPointError, np.linalg.LinAlgError, RiccatiBlowup, MultiplierRecoveryError, OverflowError)


def _emit(report: RunReport, sc: Scenario, out: Path) -> None:
    particles = sc.get("output.particles")
    wanted = {"paths": sc.get("output.paths"), "adjoint": sc.get("output.adjoint"), "moments": True, "comparison": True}
    for what in ("paths", "moments", "adjoint", "comparison"):
        if wanted[what] and what in report.data:
            emit_csv(report, what, out, particles)


def run_scenario(path, overrides=(), out_dir=None, threads: int = 0) -> tuple[RunReport, int]:
    """Parse, dispatch, write outputs. Returns the report and the exit code."""
    sc = load_scenario(path, overrides)
    out = Path(out_dir) if out_dir is not None else Path(path).with_suffix("")
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(sc.mode, sc.digest())
    code = EXIT_OK
    t0 = time.perf_counter()
    try:
        RUNNERS[sc.mode](sc, report)
    except NotConverged as exc:
        report.status = f"not converged: {exc}"
        code = EXIT_NONCONVERGED
    except NUMERICAL_ERRORS as exc:
        report.status = f"numerical failure: {exc}"
        code = EXIT_NUMERICAL
    report.timings["solve"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    _emit(report, sc, out)
    report.timings["output"] = time.perf_counter() - t1
    payload = report.to_dict()
    payload["threads"] = threads
    payload["scenario"] = sc.values
    write_json(out / "report.json", payload)
    return report, code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmfc", description="Constrained mean-field control experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("--scenario", required=True, metavar="PATH")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                     help="override a scenario key, e.g. run.seed=7 (repeatable)")
    run.add_argument("--out", metavar="DIR", help="output directory (default: scenario path without suffix)")
    run.add_argument("--threads", type=int, default=0, metavar="N", help="worker threads, 0 = auto")
    run.add_argument("--verbose", action="store_true")
    acc = sub.add_parser("acceptance", help="run the acceptance checks")
    acc.add_argument("--suite", default="fast", help=f"one of {', '.join(SUITES)}")
    acc.add_argument("--out", metavar="FILE", help="write the JSON summary here as well")
    acc.add_argument("--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "acceptance":
        if args.suite not in SUITES:
            print(f"error: unknown suite {args.suite!r}; expected one of {', '.join(SUITES)}", file=sys.stderr)
            return EXIT_PARSE
        summary = run_suite(args.suite, echo=lambda line: print(line, file=sys.stderr))
        text = json.dumps(jsonable(summary), indent=2)
        print(text)
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
        return EXIT_OK
    if args.threads < 0:
        print("error: --threads must be >= 0", file=sys.stderr)
        return EXIT_PARSE
    try:
        report, code = run_scenario(args.scenario, args.overrides, args.out, args.threads)
    except (ScenarioError, PreconditionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    log.info("mode %s finished with status %s", report.mode, report.status)
    if args.verbose and report.mode == "bridge":
        for d, left, right in zip(report.results["dt"], report.results["sup_error"], report.results["sup_error_right_node"]):
            log.info("dt=%g left-node error %.3e right-node error %.3e", d, left, right)
    print(json.dumps({"status": report.status, "artifacts": report.artifacts}))
    return code


if __name__ == "__main__":
    sys.exit(main())
