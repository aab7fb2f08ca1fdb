"""Fritz-John / KKT certificates for cone-constrained finite-dimensional programs.

The program is

    minimize f(x)  subject to  g_i(x) <=_{K_i} 0,  h_j(x) = 0,  x in C,

where ``g <=_K 0`` means ``-g in K`` and C is a box. A certificate is a tuple
``(r0, lambda_i, mu_j, xi)`` with ``r0 >= 0``, ``lambda_i`` in the dual cone,
``xi`` in the normal cone of C at x, normalized so that
``r0 + sum |lambda_i|_1 + sum |mu_j|_1 = 1`` and

    -xi = r0 grad f + sum Dg_i^T lambda_i - sum Dh_j^T mu_j.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import qr
from scipy.optimize import linprog, lsq_linear

from .cones import (
    BoxSet,
    ConeSpec,
    boundary_distance,
    contains,
    dual_contains,
    normal_cone_generators,
    normal_cone_residual,
)

ValueJac = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

ACTIVE_RTOL = 1e-6
STATIONARITY_TOL = 1e-6
SLACKNESS_TOL = 1e-8
NORMALIZATION_TOL = 1e-10


class InfeasiblePointError(ValueError):
    """The candidate point violates a constraint block."""


class MultiplierRecoveryError(RuntimeError):
    """No normalized multiplier bundle drives the stationarity residual to zero."""

    def __init__(self, message: str, certificate: FjCertificate | None, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.certificate = certificate
        self.residual = residual


@dataclass
class InequalityBlock:
    fn: ValueJac
    cone: ConeSpec
    name: str = ""


@dataclass
class EqualityBlock:
    fn: ValueJac
    name: str = ""


@dataclass
class NlpProblem:
    """Finite-dimensional cone-constrained program.

    ``objective`` maps x to ``(f, grad f)``; every block maps x to
    ``(values, Jacobian)``. ``split_index`` marks the first factor X1 of
    X = X1 x X2 used by the constraint qualifications (0 means X1 = X).
    """

    dim: int
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]]
    inequalities: list[InequalityBlock] = field(default_factory=list)
    equalities: list[EqualityBlock] = field(default_factory=list)
    box: BoxSet | None = None
    split_index: int = 0
    name: str = ""

    def __post_init__(self):
        if self.box is None:
            self.box = BoxSet.whole_space(self.dim)
        if self.box.dim != self.dim:
            raise ValueError("box dimension does not match problem dimension")

    def eval_inequality(self, i: int, x) -> tuple[np.ndarray, np.ndarray]:
        val, jac = self.inequalities[i].fn(np.asarray(x, dtype=float))
        val = np.atleast_1d(np.asarray(val, dtype=float))
        jac = np.atleast_2d(np.asarray(jac, dtype=float)).reshape(val.shape[0], self.dim)
        if val.shape[0] != self.inequalities[i].cone.dim:
            raise ValueError(f"inequality block {i} output does not match its cone dimension")
        return val, jac

    def eval_equality(self, j: int, x) -> tuple[np.ndarray, np.ndarray]:
        val, jac = self.equalities[j].fn(np.asarray(x, dtype=float))
        val = np.atleast_1d(np.asarray(val, dtype=float))
        jac = np.atleast_2d(np.asarray(jac, dtype=float)).reshape(val.shape[0], self.dim)
        return val, jac

    def eval_objective(self, x) -> tuple[float, np.ndarray]:
        f, grad = self.objective(np.asarray(x, dtype=float))
        return float(f), np.asarray(grad, dtype=float).reshape(self.dim)

    def block_label(self, kind: str, idx: int) -> str:
        blocks = self.inequalities if kind == "ineq" else self.equalities
        name = blocks[idx].name
        return f"{kind}[{idx}]" + (f" ({name})" if name else "")


@dataclass
class FjCertificate:
    r0: float
    lambdas: list[np.ndarray]
    mus: list[np.ndarray]
    xi: np.ndarray
    residual: float = float("nan")

    def total(self) -> float:
        return (
            abs(self.r0)
            + sum(float(np.abs(lam).sum()) for lam in self.lambdas)
            + sum(float(np.abs(mu).sum()) for mu in self.mus)
        )

    def scaled(self, factor: float) -> FjCertificate:
        return FjCertificate(
            self.r0 * factor,
            [lam * factor for lam in self.lambdas],
            [mu * factor for mu in self.mus],
            self.xi * factor,
            self.residual * abs(factor),
        )

    def normalized(self) -> FjCertificate:
        tot = self.total()
        if tot == 0.0:
            raise ValueError("all-zero multiplier bundle cannot be normalized")
        return FjCertificate(
            self.r0 / tot,
            [lam / tot for lam in self.lambdas],
            [mu / tot for mu in self.mus],
            self.xi / tot,
            self.residual / tot,
        )


@dataclass
class FjResidualReport:
    stationarity_residual: float
    slackness_residuals: list[float]
    dual_feasibility: float
    normal_cone_residual: float
    normalization_error: float

    def passes(
        self,
        stationarity_tol: float = STATIONARITY_TOL,
        slackness_tol: float = SLACKNESS_TOL,
        normalization_tol: float = NORMALIZATION_TOL,
    ) -> bool:
        return (
            self.stationarity_residual <= stationarity_tol
            and all(s <= slackness_tol for s in self.slackness_residuals)
            and self.dual_feasibility <= slackness_tol
            and self.normal_cone_residual <= slackness_tol
            and self.normalization_error <= normalization_tol
        )


@dataclass
class CqReport:
    licq: bool | None = None
    rank: int = 0
    rows: int = 0
    mfcq: bool | None = None
    witness: np.ndarray | None = None
    margin: float = 0.0
    active_set: list[int] = field(default_factory=list)


# feasibility / activity ---------------------------------------------------


def _activity_band(g: np.ndarray) -> float:
    return ACTIVE_RTOL * (1.0 + float(np.linalg.norm(g)))


def check_feasible(problem: NlpProblem, x, tol: float = 1e-8) -> None:
    x = np.asarray(x, dtype=float)
    if not problem.box.contains(x, tol):
        raise InfeasiblePointError("point lies outside the feasible box C")
    for i, blk in enumerate(problem.inequalities):
        g, _ = problem.eval_inequality(i, x)
        if not contains(blk.cone, -g, tol):
            raise InfeasiblePointError(f"{problem.block_label('ineq', i)} violated: -g not in K")
    for j in range(len(problem.equalities)):
        h, _ = problem.eval_equality(j, x)
        if np.max(np.abs(h)) > tol:
            raise InfeasiblePointError(f"{problem.block_label('eq', j)} violated: |h| = {np.max(np.abs(h)):.3e}")


def active_set(problem: NlpProblem, x) -> list[int]:
    """Indices i with g_i(x) on the boundary of -K_i, within the activity band."""
    out = []
    for i, blk in enumerate(problem.inequalities):
        g, _ = problem.eval_inequality(i, x)
        if boundary_distance(blk.cone, -g) < _activity_band(g):
            out.append(i)
    return out


def _active_dual_generators(cone: ConeSpec, g: np.ndarray) -> np.ndarray:
    """Dual generators d with <-g, d> ~ 0; multipliers built from them satisfy slackness."""
    D = cone.dual_generators()
    if D.shape[1] == 0:
        return D
    norms = np.linalg.norm(D, axis=0)
    keep = (D.T @ -g) <= _activity_band(g) * norms
    D = D[:, keep]
    # 1-norm scaling keeps the weight sum equal to |lambda|_1 when no cancellation
    return D / np.maximum(np.abs(D).sum(axis=0), 1e-300)


# residuals ------------------------------------------------------------------


def stationarity_vector(problem: NlpProblem, x, cert: FjCertificate) -> np.ndarray:
    _, grad = problem.eval_objective(x)
    v = cert.r0 * grad + np.asarray(cert.xi, dtype=float)
    for i, lam in enumerate(cert.lambdas):
        _, jac = problem.eval_inequality(i, x)
        v = v + jac.T @ lam
    for j, mu in enumerate(cert.mus):
        _, jac = problem.eval_equality(j, x)
        v = v - jac.T @ mu
    return v


def evaluate_fj_residual(problem: NlpProblem, x_hat, cert: FjCertificate, tol: float = 1e-8) -> FjResidualReport:
    """Residuals of the Fritz-John system at ``x_hat`` for ``cert``."""
    x_hat = np.asarray(x_hat, dtype=float)
    check_feasible(problem, x_hat, tol)
    stat = float(np.linalg.norm(stationarity_vector(problem, x_hat, cert)))
    slack = []
    dual_viol = 0.0 if cert.r0 >= 0 else -cert.r0
    for i, (blk, lam) in enumerate(zip(problem.inequalities, cert.lambdas)):
        g, _ = problem.eval_inequality(i, x_hat)
        lam = np.asarray(lam, dtype=float)
        slack.append(abs(float(g @ lam)))
        G = blk.cone.primal_generators()
        if G.shape[1]:
            dual_viol = max(dual_viol, float(max(0.0, -np.min(G.T @ lam))))
        elif not dual_contains(blk.cone, lam):
            dual_viol = max(dual_viol, float(np.max(np.abs(lam))))
    ncr = normal_cone_residual(problem.box, x_hat, cert.xi, tol)
    return FjResidualReport(
        stationarity_residual=stat,
        slackness_residuals=slack,
        dual_feasibility=dual_viol,
        normal_cone_residual=ncr,
        normalization_error=abs(cert.total() - 1.0),
    )


# multiplier recovery --------------------------------------------------------


@dataclass
class _Layout:
    """Column layout of the linear map (w, mu, nu) -> stationarity vector."""

    ineq_gens: list[np.ndarray]
    ineq_cols: list[slice]
    eq_cols: list[slice]
    nc_gens: np.ndarray
    nc_cols: slice
    matrix: np.ndarray
    grad: np.ndarray

    @property
    def ncols(self) -> int:
        return self.matrix.shape[1]


def _layout(problem: NlpProblem, x: np.ndarray) -> _Layout:
    _, grad = problem.eval_objective(x)
    blocks, gens, icols, ecols = [], [], [], []
    col = 0
    for i, blk in enumerate(problem.inequalities):
        g, jac = problem.eval_inequality(i, x)
        D = _active_dual_generators(blk.cone, g)
        gens.append(D)
        blocks.append(jac.T @ D)
        icols.append(slice(col, col + D.shape[1]))
        col += D.shape[1]
    for j in range(len(problem.equalities)):
        _, jac = problem.eval_equality(j, x)
        blocks.append(-jac.T)
        ecols.append(slice(col, col + jac.shape[0]))
        col += jac.shape[0]
    N = normal_cone_generators(problem.box, x)
    blocks.append(N)
    ncols = slice(col, col + N.shape[1])
    mat = np.hstack(blocks) if blocks else np.zeros((problem.dim, 0))
    return _Layout(gens, icols, ecols, N, ncols, mat, grad)


def _bounds(lay: _Layout) -> tuple[np.ndarray, np.ndarray]:
    lo = np.zeros(lay.ncols)
    hi = np.full(lay.ncols, np.inf)
    for sl in lay.eq_cols:
        lo[sl] = -np.inf
    return lo, hi


def _certificate_from(lay: _Layout, r0: float, v: np.ndarray) -> FjCertificate:
    lambdas = [D @ v[sl] for D, sl in zip(lay.ineq_gens, lay.ineq_cols)]
    mus = [v[sl].copy() for sl in lay.eq_cols]
    xi = lay.nc_gens @ v[lay.nc_cols] if lay.nc_gens.shape[1] else np.zeros(lay.matrix.shape[0])
    return FjCertificate(float(r0), lambdas, mus, xi)


def recover_multipliers(problem: NlpProblem, x_hat, tol: float = 1e-9) -> FjCertificate:
    """Normalized multiplier bundle minimizing the stationarity residual at ``x_hat``.

    Normal multipliers (r0 = 1 before normalization) are tried first by a
    bound-constrained linear least-squares solve; when that leaves a residual,
    abnormal bundles (r0 = 0) are searched by LP feasibility, one
    normalization face at a time so the first active block wins.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    check_feasible(problem, x_hat, 1e-8)
    lay = _layout(problem, x_hat)
    scale = 1.0 + float(np.linalg.norm(lay.grad))

    if lay.ncols == 0:
        v = np.zeros(0)
        resid = float(np.linalg.norm(lay.grad))
    else:
        lo, hi = _bounds(lay)
        sol = lsq_linear(lay.matrix, -lay.grad, bounds=(lo, hi), method="bvls", tol=1e-14)
        v = sol.x
        resid = float(np.linalg.norm(lay.matrix @ v + lay.grad))
    best = _certificate_from(lay, 1.0, v)
    if resid <= tol * scale:
        cert = best.normalized()
        cert.residual = float(np.linalg.norm(stationarity_vector(problem, x_hat, cert)))
        return cert

    abnormal = _abnormal_search(lay)
    if abnormal is not None:
        cert = _certificate_from(lay, 0.0, abnormal).normalized()
        cert.residual = float(np.linalg.norm(stationarity_vector(problem, x_hat, cert)))
        return cert
    best = best.normalized()
    raise MultiplierRecoveryError("no Fritz-John certificate found", best, resid / (1.0 + best.total()))


def _abnormal_search(lay: _Layout) -> np.ndarray | None:
    A = lay.matrix
    n, m = A.shape
    if m == 0:
        return None
    lo, hi = _bounds(lay)
    faces: list[np.ndarray] = []
    for sl in lay.ineq_cols:
        if sl.stop > sl.start:
            row = np.zeros(m)
            row[sl] = 1.0
            faces.append(row)
    for sl in lay.eq_cols:
        for c in range(sl.start, sl.stop):
            for sign in (1.0, -1.0):
                row = np.zeros(m)
                row[c] = sign
                faces.append(row)
    for row in faces:
        res = linprog(
            c=np.zeros(m),
            A_eq=np.vstack([A, row]),
            b_eq=np.concatenate([np.zeros(n), [1.0]]),
            bounds=[(None if np.isinf(a) else a, None if np.isinf(b) else b) for a, b in zip(lo, hi)],
            method="highs",
        )
        if res.status == 0:
            v = res.x
            if np.linalg.norm(A @ v) <= 1e-9 * (1.0 + np.abs(v).sum()):
                return v
    return None


# constraint qualifications --------------------------------------------------


def _numeric_rank(M: np.ndarray, rtol: float = 1e-8) -> int:
    if M.size == 0:
        return 0
    _, R, _ = qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return 0
    smax = np.linalg.norm(M, 2)
    return int(np.sum(diag > rtol * smax))


def _split_cols(problem: NlpProblem) -> slice:
    return slice(0, problem.split_index or problem.dim)


def check_licq(problem: NlpProblem, x_hat) -> CqReport:
    """Surjectivity of the stacked active-inequality and equality Jacobians on X1."""
    x_hat = np.asarray(x_hat, dtype=float)
    act = active_set(problem, x_hat)
    cols = _split_cols(problem)
    rows = [problem.eval_inequality(i, x_hat)[1][:, cols] for i in act]
    rows += [problem.eval_equality(j, x_hat)[1][:, cols] for j in range(len(problem.equalities))]
    if not rows:
        return CqReport(licq=True, rank=0, rows=0, active_set=act)
    M = np.vstack(rows)
    rank = _numeric_rank(M)
    return CqReport(licq=rank == M.shape[0], rank=rank, rows=M.shape[0], active_set=act)


def check_mfcq(problem: NlpProblem, x_hat, margin: float = 1e-9) -> CqReport:
    """Equality surjectivity on X1 plus a strictly decreasing feasible direction.

    Maximizes s subject to <-Dg_i d, xi> >= s |xi| over dual generators of the
    active cones, Dh d = 0 and x_hat + d in C (|d_k| <= 1 along unbounded
    coordinates). MFCQ holds when the optimal s exceeds ``margin``.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    n = problem.dim
    act = active_set(problem, x_hat)
    cols = _split_cols(problem)
    eq_jacs = [problem.eval_equality(j, x_hat)[1] for j in range(len(problem.equalities))]
    report = CqReport(active_set=act)
    if eq_jacs:
        E1 = np.vstack(eq_jacs)[:, cols]
        if _numeric_rank(E1) < E1.shape[0]:
            report.mfcq = False
            return report
    A_ub, b_ub = [], []
    for i in act:
        blk = problem.inequalities[i]
        _, jac = problem.eval_inequality(i, x_hat)
        D = blk.cone.dual_generators()
        D = D[:, np.linalg.norm(D, axis=0) > 0]
        if D.shape[1] == 0:
            continue
        for d in D.T:
            # s |d| - <-jac h, d> <= 0
            A_ub.append(np.concatenate([d @ jac, [np.linalg.norm(d)]]))
            b_ub.append(0.0)
    lo = np.where(np.isfinite(problem.box.lower), problem.box.lower - x_hat, -1.0)
    hi = np.where(np.isfinite(problem.box.upper), problem.box.upper - x_hat, 1.0)
    lo, hi = np.minimum(lo, 0.0), np.maximum(hi, 0.0)
    bounds = list(zip(lo, hi)) + [(None, 1.0)]
    A_eq = np.hstack([np.vstack(eq_jacs), np.zeros((sum(j.shape[0] for j in eq_jacs), 1))]) if eq_jacs else None
    b_eq = np.zeros(A_eq.shape[0]) if A_eq is not None else None
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = linprog(
        c,
        A_ub=np.array(A_ub) if A_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        A_eq=A_eq,
        b_eq=b_eq,
        bounds=bounds,
        method="highs",
    )
    if res.status != 0:
        report.mfcq = False
        return report
    s = float(res.x[-1])
    report.margin = s
    report.mfcq = s > margin
    report.witness = x_hat + res.x[:n] if report.mfcq else None
    return report


@dataclass
class KktVerdict:
    ok: bool
    certificate: FjCertificate | None = None
    report: FjResidualReport | None = None

    def __bool__(self) -> bool:
        return self.ok


def check_kkt(problem: NlpProblem, x_hat, cert: FjCertificate, tol: float = 1e-8) -> KktVerdict:
    """KKT holds when the certificate verifies and is normal (r0 > 0).

    The returned certificate is rescaled to the r0 = 1 form.
    """
    rep = evaluate_fj_residual(problem, x_hat, cert, tol)
    if not rep.passes() or cert.r0 <= 0.0:
        return KktVerdict(False, None, rep)
    return KktVerdict(True, cert.scaled(1.0 / cert.r0), rep)


# brute force oracle -----------------------------------------------------------


def brute_force_minimize(problem: NlpProblem, grid: int | Sequence[int], eq_tol: float = 1e-9, tol: float = 1e-12) -> np.ndarray:
    """Feasible grid point of least objective over the (bounded) box."""
    if problem.dim > 4:
        raise ValueError("brute force is limited to dim <= 4")
    if not problem.box.bounded:
        raise ValueError("brute force needs a bounded box")
    sizes = [grid] * problem.dim if isinstance(grid, int) else list(grid)
    axes = [np.linspace(lo, hi, k) for lo, hi, k in zip(problem.box.lower, problem.box.upper, sizes)]
    best, best_x = np.inf, None
    for point in itertools.product(*axes):
        x = np.array(point)
        feasible = True
        for i, blk in enumerate(problem.inequalities):
            g, _ = problem.eval_inequality(i, x)
            if not contains(blk.cone, -g, tol):
                feasible = False
                break
        if feasible:
            for j in range(len(problem.equalities)):
                h, _ = problem.eval_equality(j, x)
                if np.max(np.abs(h)) > eq_tol:
                    feasible = False
                    break
        if not feasible:
            continue
        f, _ = problem.eval_objective(x)
        if f < best:
            best, best_x = f, x
    if best_x is None:
        raise ValueError("no feasible grid point")
    return best_x
