"""Acceptance checks with machine-readable pass/fail output.

The ``fast`` suite runs every check once at its stated size. The ``full``
suite adds replicate seeds for the Monte-Carlo checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .discrete_bridge import convergence_study
from .fj_problems import run_toy_suite
from .lq_mfc import LqModel, lq_oracle_discrete, mfg_solve, riccati_solve, solve_constrained, solve_unconstrained
from .mf_bsde import DriverSpec, solve_backward
from .mvsde import (
    ControlPolicy,
    InitialLaw,
    MeanFieldDynamics,
    TimeGrid,
    directional_derivative_check,
    picard_iterate,
    simulate_forward,
    standard_normals,
)

SUITES = ("fast", "full")
DETERMINISTIC = dict(s1=0.0, s2=0.0, s3=0.0, s4=0.0, v0=0.0)


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    elapsed: float
    details: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.id}: {self.name} ({self.elapsed:.1f} s)"

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "passed": self.passed, "elapsed": self.elapsed, "details": self.details}


def _timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0


def _rms(a) -> float:
    return float(np.sqrt(np.mean(np.square(a))))


def unconstrained_lq(seed: int = 0, cache: dict | None = None) -> CriterionResult:
    t0 = time.perf_counter()
    model = LqModel.benchmark()
    ric = riccati_solve(model, TimeGrid(model.T, 1000))
    orc = lq_oracle_discrete(model, 1e-3)
    rep, mc_time = _timed(solve_unconstrained, model, TimeGrid(model.T, 100), 50_000, seed)
    if cache is not None:
        cache[("unconstrained", seed)] = (rep, mc_time)
    mc_rel = abs(rep.cost.mean - ric.value) / ric.value
    ric_rel = abs(ric.value - orc.value) / orc.value
    ok = bool(rep.converged and mc_rel < 0.01 and ric_rel < 0.005 and mc_time < 60.0)
    return CriterionResult(1, f"unconstrained LQ cross-validation (seed {seed})", ok, time.perf_counter() - t0, {
        "mc_cost": rep.cost.mean, "mc_halfwidth": rep.cost.halfwidth, "riccati": ric.value, "oracle": orc.value,
        "mc_vs_riccati": mc_rel, "riccati_vs_oracle": ric_rel, "mc_runtime": mc_time,
        "iterations": rep.iterations, "converged": rep.converged,
    })


def zero_cost() -> CriterionResult:
    t0 = time.perf_counter()
    rep = solve_unconstrained(LqModel.benchmark(q=0.0, ell=0.0), TimeGrid(1.0, 100), 5000, 0, max_iter=1)
    a, y = _rms(rep.ensemble.controls), _rms(rep.adjoint.Y)
    ok = bool(rep.iterations == 1 and a < 1e-10 and y < 1e-10)
    return CriterionResult(2, "degenerate zero-cost case", ok, time.perf_counter() - t0,
                           {"control_rms": a, "adjoint_rms": y, "iterations": rep.iterations})


def constrained_lq(seed: int = 0, cache: dict | None = None) -> CriterionResult:
    t0 = time.perf_counter()
    model = LqModel.benchmark()
    grid = TimeGrid(model.T, 100)
    hit = (cache or {}).get(("unconstrained", seed))
    if hit is None:
        hit = _timed(solve_unconstrained, model, grid, 50_000, seed)
    un, un_time = hit
    con, con_time = _timed(solve_constrained, replace(model, h=0.5), grid, 50_000, seed, warm_start=un)
    eta_norm = float(np.sqrt(np.mean(np.sum(grid.dt * con.eta[:, :-1] ** 2, axis=1))))
    violation = con.smp.primal_feasibility[0]
    slack = con.smp.slackness_integral[0]
    ok = bool(
        con.converged
        and violation <= 1e-12
        and slack < 1e-3 * (1 + eta_norm)
        and np.all(con.eta >= 0)
        and con.cost.mean >= un.cost.mean - 2 * un.cost.halfwidth
        and un_time + con_time < 120.0
    )
    return CriterionResult(3, f"constrained LQ h = 0.5 (seed {seed})", ok, time.perf_counter() - t0, {
        "cost": con.cost.mean, "halfwidth": con.cost.halfwidth, "unconstrained_cost": un.cost.mean,
        "unconstrained_halfwidth": un.cost.halfwidth, "max_violation": violation, "slackness": slack,
        "eta_norm": eta_norm, "eta_min": float(con.eta.min()), "active_fraction": float((con.eta > 0).mean()),
        "runtime": un_time + con_time, "iterations": con.iterations,
    })


def fj_suite() -> CriterionResult:
    entries, elapsed = _timed(run_toy_suite)
    ok = bool(len(entries) == 8 and all(e.passes() for e in entries) and elapsed < 5.0)
    return CriterionResult(4, "Fritz-John certificate suite", ok, elapsed, {
        e.name: {"r0": e.r0, "stationarity": e.stationarity, "slackness": e.slackness,
                 "normalization_error": e.normalization_error, "licq": e.licq, "mfcq": e.mfcq,
                 "verdicts_match": e.verdicts_match} for e in entries
    })


def bridge() -> CriterionResult:
    model = LqModel.benchmark(**DETERMINISTIC)
    tab, elapsed = _timed(convergence_study, model, [1 / 10, 1 / 20, 1 / 40, 1 / 80])
    decreasing = all(a > b for a, b in zip(tab.sup_error, tab.sup_error[1:]))
    ok = bool(decreasing and tab.slope is not None and 0.8 <= tab.slope <= 1.2
              and tab.transversality[-1] <= 0.05 and elapsed < 10.0)
    return CriterionResult(5, "adjoint-as-multiplier bridge", ok, elapsed, {
        "dt": tab.dt, "sup_error": tab.sup_error, "order_estimate": tab.order_estimate, "slope": tab.slope,
        "transversality_relative": tab.transversality[-1],
    })


def frechet(seed: int = 0, directions: int = 5, eps: float = 1e-4) -> CriterionResult:
    t0 = time.perf_counter()
    model = LqModel.benchmark()
    grid = TimeGrid(model.T, 50)
    N = 2000
    alpha = 0.5 * standard_normals(seed, (901,), (N, (grid.M + 1))).reshape(N, grid.M + 1, 1)
    errs = []
    for j in range(directions):
        K = standard_normals(seed, (902, j), (N, grid.M + 1)).reshape(N, grid.M + 1, 1)
        rep = directional_derivative_check(
            model.dynamics(), ControlPolicy.open_loop(alpha), grid, N, seed, model.cost(), K, eps_list=(eps,)
        )
        errs.append(rep.relative_errors[0])
    ok = bool(max(errs) < 1e-4)
    return CriterionResult(6, f"Frechet derivative check (seed {seed})", ok, time.perf_counter() - t0,
                           {"relative_errors": errs, "eps": eps})


def picard() -> CriterionResult:
    t0 = time.perf_counter()
    model = LqModel.benchmark()
    grid = TimeGrid(model.T, 50)
    ric = riccati_solve(model, grid)
    policy = ControlPolicy.from_feedback(
        lambda t, x, mx: ric.K1[grid.step_of(t)] * (x - mx) + ric.K2[grid.step_of(t)] * mx
    )
    dyn = model.dynamics()
    N = 2000
    ens, log = picard_iterate(dyn, policy, grid, N, 5)
    direct = simulate_forward(dyn, policy, grid, N, 5, ens.increments)
    d = np.array(log.distances)
    monotone = bool(np.all(np.diff(d[1:]) < 0))
    gap = _rms(ens.states - direct.states)
    ok = bool(log.converged and monotone and gap < 1e-10)
    return CriterionResult(7, "Picard law-freezing scheme", ok, time.perf_counter() - t0,
                           {"distances": log.distances, "rms_gap_to_direct": gap})


def martingale() -> CriterionResult:
    t0 = time.perf_counter()
    grid = TimeGrid(1.0, 20)
    N = 1000
    dyn = MeanFieldDynamics(
        1, 1, 1,
        lambda t, x, mx, ma, u: np.zeros_like(x),
        lambda t, x, mx, ma, u: np.ones((x.shape[0], 1, 1)),
        InitialLaw.point(0.0),
    )
    ens = simulate_forward(dyn, ControlPolicy.open_loop(np.zeros((N, grid.M + 1, 1))), grid, N, 0)
    spec = DriverSpec(lambda t, x, mx, ma, u, y, my, z, mz: np.zeros_like(y), lambda x, mx: x.copy())
    sol = solve_backward(ens, spec)
    y_err = np.max(np.abs(sol.Y - ens.states), axis=(0, 2))
    z_err = np.max(np.abs(sol.Z - 1.0), axis=(0, 2, 3))
    ok = bool(y_err.max() < 1e-8 and z_err.max() < 1e-8)
    return CriterionResult(8, "BSDE martingale identity", ok, time.perf_counter() - t0,
                           {"max_y_error": float(y_err.max()), "max_z_error": float(z_err.max())})


def mfg(seed: int = 0) -> CriterionResult:
    t0 = time.perf_counter()
    dec = mfg_solve(LqModel.benchmark(b2=0.0, ell=0.0), TimeGrid(1.0, 50), 10_000, seed)
    cpl = mfg_solve(LqModel.benchmark(), TimeGrid(1.0, 50), 10_000, seed)
    ok = bool(
        dec.outer_iterations == 1 and dec.residuals == [0.0]
        and cpl.converged_by_tolerance and cpl.residuals[-1] < 1e-3 and cpl.outer_iterations <= 20
    )
    return CriterionResult(9, f"mean-field game consistency (seed {seed})", ok, time.perf_counter() - t0, {
        "decoupled_residuals": dec.residuals, "coupled_residuals": cpl.residuals,
        "coupled_outer_iterations": cpl.outer_iterations,
    })


def criteria(suite: str) -> list[Callable[[dict], CriterionResult]]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {', '.join(SUITES)}")
    checks = [
        lambda c: unconstrained_lq(0, c),
        lambda c: zero_cost(),
        lambda c: constrained_lq(0, c),
        lambda c: fj_suite(),
        lambda c: bridge(),
        lambda c: frechet(0),
        lambda c: picard(),
        lambda c: martingale(),
        lambda c: mfg(0),
    ]
    if suite == "full":
        for s in (1, 2):
            checks.append(lambda c, s=s: unconstrained_lq(s, c))
            checks.append(lambda c, s=s: constrained_lq(s, c))
            checks.append(lambda c, s=s: frechet(s))
        checks.append(lambda c: mfg(1))
    return checks


def run_suite(suite: str = "fast", echo: Callable[[str], None] | None = None) -> dict:
    cache: dict = {}
    t0 = time.perf_counter()
    results = []
    for check in criteria(suite):
        res = check(cache)
        results.append(res)
        if echo is not None:
            echo(res.line())
    return {
        "suite": suite,
        "passed": all(r.passed for r in results),
        "elapsed": time.perf_counter() - t0,
        "criteria": [r.to_dict() for r in results],
    }
