"""Deterministic control problems as finite-dimensional programs.

A deterministic instance (no noise, point-mass start) becomes

    minimize   sum_k dt f(t_k, x_k, u_k) + g(x_M)
    subject to x_0 - x_init = 0
               x_{k+1} - x_k - dt b(t_k, x_k, u_k) = 0        k = 0..M-1
               -psi_j(t_k, x_k, u_k) <= 0                     k = 0..M-1
               -phi_i(t_k, x_k) <= 0                          k = 0..M

over z = (x_0, ..., x_M, u_0, ..., u_{M-1}). Stationarity in x_{k+1} turns the
multiplier of dynamics row k into the discrete adjoint p_{k+1}, which is why
it tracks the continuous adjoint Y.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cones import BoxSet, ConeSpec
from .fj_solver import EqualityBlock, FjCertificate, InequalityBlock, NlpProblem, recover_multipliers
from .lq_mfc import LqModel
from .mvsde import TimeGrid

Fn = Callable[..., np.ndarray]


class PreconditionError(ValueError):
    """The scenario is stochastic or otherwise outside the deterministic reduction."""


class AbnormalCertificateError(ValueError):
    def __init__(self):
        super().__init__("abnormal certificate, comparison undefined")


@dataclass
class PathConstraint:
    """psi(t, x, u) >= 0 with gradients; scalar valued."""

    psi: Fn
    grad_x: Fn
    grad_u: Fn


@dataclass
class StateConstraint:
    """phi(t, x) >= 0 at every node."""

    phi: Fn
    grad_x: Fn


@dataclass
class DeterministicScenario:
    """Callbacks take (t, x (n,), u (l,)) and return b (n,), b_x (n, n), b_u (n, l), f, f_x (n,), f_u (l,)."""

    n: int
    l: int
    T: float
    x0: np.ndarray
    b: Fn
    b_x: Fn
    b_u: Fn
    f: Fn
    f_x: Fn
    f_u: Fn
    g: Fn
    g_x: Fn
    path_constraints: list[PathConstraint] = field(default_factory=list)
    state_constraints: list[StateConstraint] = field(default_factory=list)

    @classmethod
    def from_lq(cls, model: LqModel) -> DeterministicScenario:
        """Deterministic reduction: X = E[X], so b = (b1+b2) x + (b3+b4) u.

        The terminal cost is ell x^2 / 2 (the centred form vanishes on a point mass).
        """
        if any(abs(s) > 0 for s in (model.s1, model.s2, model.s3, model.s4)) or model.v0 > 0:
            raise PreconditionError("bridge needs zero diffusion and a point-mass initial law")
        B, C = model.b1 + model.b2, model.b3 + model.b4
        q, v, ell = model.q, model.v, model.ell
        paths = []
        if model.h is not None:
            hgrid = np.asarray(model.h, dtype=float)

            def h_at(t):
                if hgrid.ndim == 0:
                    return float(hgrid)
                return float(np.interp(t, np.linspace(0, model.T, hgrid.shape[0]), hgrid))

            paths.append(
                PathConstraint(
                    lambda t, x, u: h_at(t) * x[0] - u[0],
                    lambda t, x, u: np.array([h_at(t)]),
                    lambda t, x, u: np.array([-1.0]),
                )
            )
        return cls(
            1, 1, model.T, np.array([model.m0]),
            b=lambda t, x, u: B * x + C * u,
            b_x=lambda t, x, u: np.array([[B]]),
            b_u=lambda t, x, u: np.array([[C]]),
            f=lambda t, x, u: 0.5 * (q * x[0] ** 2 + v * u[0] ** 2),
            f_x=lambda t, x, u: q * x,
            f_u=lambda t, x, u: v * u,
            g=lambda x: 0.5 * ell * x[0] ** 2,
            g_x=lambda x: ell * x,
            path_constraints=paths,
        )


@dataclass
class DiscreteControlProblem:
    scenario: DeterministicScenario
    grid: TimeGrid
    nlp: NlpProblem

    @property
    def dim(self) -> int:
        return self.nlp.dim

    def split(self, z) -> tuple[np.ndarray, np.ndarray]:
        """Decision vector to states (M+1, n) and controls (M, l)."""
        z = np.asarray(z, dtype=float)
        n, l, M = self.scenario.n, self.scenario.l, self.grid.M
        return z[: (M + 1) * n].reshape(M + 1, n), z[(M + 1) * n :].reshape(M, l)


def discretize(scenario: DeterministicScenario, grid: TimeGrid, box: BoxSet | None = None) -> DiscreteControlProblem:
    """Lower a deterministic scenario to an NlpProblem with analytic derivatives."""
    sc = scenario
    n, l, M, dt = sc.n, sc.l, grid.M, grid.dt
    nx = (M + 1) * n
    dim = nx + M * l

    def parts(z):
        return z[:nx].reshape(M + 1, n), z[nx:].reshape(M, l)

    def xcol(k):
        return slice(k * n, (k + 1) * n)

    def ucol(k):
        return slice(nx + k * l, nx + (k + 1) * l)

    def objective(z):
        X, U = parts(z)
        val = float(sc.g(X[M]))
        grad = np.zeros(dim)
        grad[xcol(M)] += sc.g_x(X[M])
        for k in range(M):
            t = k * dt
            val += dt * float(sc.f(t, X[k], U[k]))
            grad[xcol(k)] += dt * np.asarray(sc.f_x(t, X[k], U[k]))
            grad[ucol(k)] += dt * np.asarray(sc.f_u(t, X[k], U[k]))
        return val, grad

    def pin(z):
        jac = np.zeros((n, dim))
        jac[:, xcol(0)] = np.eye(n)
        return z[xcol(0)] - sc.x0, jac

    def dynamics(z):
        X, U = parts(z)
        val = np.empty(M * n)
        jac = np.zeros((M * n, dim))
        for k in range(M):
            t = k * dt
            rows = slice(k * n, (k + 1) * n)
            val[rows] = X[k + 1] - X[k] - dt * np.asarray(sc.b(t, X[k], U[k]))
            jac[rows, xcol(k + 1)] = np.eye(n)
            jac[rows, xcol(k)] = -np.eye(n) - dt * np.asarray(sc.b_x(t, X[k], U[k]))
            jac[rows, ucol(k)] = -dt * np.asarray(sc.b_u(t, X[k], U[k]))
        return val, jac

    ineqs = []
    for j, pc in enumerate(sc.path_constraints):
        def fn(z, pc=pc):
            X, U = parts(z)
            val = np.empty(M)
            jac = np.zeros((M, dim))
            for k in range(M):
                t = k * dt
                val[k] = -float(pc.psi(t, X[k], U[k]))
                jac[k, xcol(k)] = -np.asarray(pc.grad_x(t, X[k], U[k]))
                jac[k, ucol(k)] = -np.asarray(pc.grad_u(t, X[k], U[k]))
            return val, jac

        ineqs.append(InequalityBlock(fn, ConeSpec.orthant(M), f"path[{j}]"))
    for i, sc_ in enumerate(sc.state_constraints):
        def fn(z, sc_=sc_):
            X, _ = parts(z)
            val = np.empty(M + 1)
            jac = np.zeros((M + 1, dim))
            for k in range(M + 1):
                val[k] = -float(sc_.phi(k * dt, X[k]))
                jac[k, xcol(k)] = -np.asarray(sc_.grad_x(k * dt, X[k]))
            return val, jac

        ineqs.append(InequalityBlock(fn, ConeSpec.orthant(M + 1), f"state[{i}]"))
    nlp = NlpProblem(
        dim,
        objective,
        ineqs,
        [EqualityBlock(pin, "pin"), EqualityBlock(dynamics, "dynamics")],
        box or BoxSet.whole_space(dim),
        name=f"transcription M={M}",
    )
    return DiscreteControlProblem(sc, grid, nlp)


# --- exact QP solve ---------------------------------------------------------


def _quadratic_model(nlp: NlpProblem, z0: np.ndarray):
    """Gradient, Hessian (central differences of the gradient, exact for quadratics) and linearized constraints."""
    dim = nlp.dim
    _, c = nlp.eval_objective(z0)
    H = np.empty((dim, dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        H[:, i] = 0.5 * (nlp.eval_objective(z0 + e)[1] - nlp.eval_objective(z0 - e)[1])
    H = 0.5 * (H + H.T)
    eq_rows = [nlp.eval_equality(j, z0) for j in range(len(nlp.equalities))]
    A = np.vstack([jac for _, jac in eq_rows])
    a = np.concatenate([val for val, _ in eq_rows])
    in_rows = [nlp.eval_inequality(i, z0) for i in range(len(nlp.inequalities))]
    if in_rows:
        G = np.vstack([jac for _, jac in in_rows])
        gv = np.concatenate([val for val, _ in in_rows])
    else:
        G, gv = np.zeros((0, dim)), np.zeros(0)
    return c, H, A, a, G, gv


def _kkt_solve(H, c, A, a):
    """min 1/2 d'Hd + c'd subject to A d + a = 0; returns (d, multipliers of the rows)."""
    dim, m = H.shape[0], A.shape[0]
    K = np.zeros((dim + m, dim + m))
    K[:dim, :dim] = H
    K[:dim, dim:] = A.T
    K[dim:, :dim] = A
    sol = np.linalg.solve(K, np.concatenate([-c, -a]))
    return sol[:dim], sol[dim:]


def solve_qp(problem: DiscreteControlProblem, enumeration_limit: int = 10, tol: float = 1e-10) -> np.ndarray:
    """Exact minimizer of a transcription whose objective is quadratic and constraints affine.

    Without inequalities this is one symmetric KKT solve. With inequalities
    the active set is enumerated when there are at most ``enumeration_limit``
    rows; otherwise projected gradient ascent on the dual picks the active
    set, which is then polished by an exact KKT solve.
    """
    nlp = problem.nlp
    z0 = np.zeros(nlp.dim)
    c, H, A, a, G, gv = _quadratic_model(nlp, z0)
    if G.shape[0] == 0:
        return _kkt_solve(H, c, A, a)[0]

    def solve_with(active):
        act = np.asarray(active, dtype=int)
        d, mult = _kkt_solve(H, c, np.vstack([A, G[act]]), np.concatenate([a, gv[act]]))
        lam = mult[A.shape[0] :]
        return d, lam

    def admissible(d, lam, active):
        scale = 1.0 + np.max(np.abs(d))
        primal = np.all(G @ d + gv <= tol * scale)
        # KKT row multipliers enter as +A'y; Fritz-John inequality multipliers are y >= 0 here
        return primal and np.all(lam >= -tol * scale)

    rows = G.shape[0]
    if rows <= enumeration_limit:
        best, best_val = None, np.inf
        for r in range(rows + 1):
            for active in itertools.combinations(range(rows), r):
                try:
                    d, lam = solve_with(active)
                except np.linalg.LinAlgError:
                    continue
                if admissible(d, lam, active):
                    val = 0.5 * d @ H @ d + c @ d
                    if val < best_val - 1e-14:
                        best, best_val = d, val
        if best is None:
            raise ValueError("no admissible active set")
        return best
    return _dual_projected_gradient(H, c, A, a, G, gv, solve_with, admissible)


def _dual_projected_gradient(H, c, A, a, G, gv, solve_with, admissible, iters: int = 20000):
    dim, m = H.shape[0], A.shape[0]
    K = np.zeros((dim + m, dim + m))
    K[:dim, :dim] = H
    K[:dim, dim:] = A.T
    K[dim:, :dim] = A
    # z(lam) = argmin of the Lagrangian restricted to the equalities
    S = np.linalg.solve(K, np.vstack([-G.T, np.zeros((m, G.shape[0]))]))[:dim]
    z0 = np.linalg.solve(K, np.concatenate([-c, -a]))[:dim]
    Q = -G @ S  # dual Hessian, positive semidefinite
    L = max(np.linalg.eigvalsh(0.5 * (Q + Q.T))[-1], 1e-12)
    lam = np.zeros(G.shape[0])
    for _ in range(iters):
        z = z0 + S @ lam
        new = np.maximum(0.0, lam + (G @ z + gv) / L)
        if np.max(np.abs(new - lam)) < 1e-13 * (1 + np.max(np.abs(lam))):
            lam = new
            break
        lam = new
    z = z0 + S @ lam
    active = np.where((lam > 1e-10) | (np.abs(G @ z + gv) < 1e-9))[0]
    d, mult = solve_with(active)
    if not admissible(d, mult, active):
        # fall back to the strictly positive multipliers only
        active = np.where(lam > 1e-10)[0]
        d, mult = solve_with(active)
    return d


# --- multiplier comparison -----------------------------------------------------


@dataclass
class MultiplierComparison:
    multipliers: np.ndarray  # (M, n) rescaled dynamics-row multipliers
    adjoint: np.ndarray  # (M+1, n) reference values on the grid
    sup_error: float  # left-node matching: row k vs node k
    sup_error_right: float  # row k vs node k+1
    scaling_factor: float
    transversality: float  # final-row multiplier minus g_x(x_M), sup norm
    terminal_gradient: float  # sup norm of g_x(x_M)
    inequality_densities: list[np.ndarray] = field(default_factory=list)  # lambda / dt per path constraint


def compare_multipliers(
    cert: FjCertificate, adjoint, problem: DiscreteControlProblem, z: np.ndarray | None = None
) -> MultiplierComparison:
    """Rescale a certificate to r0 = 1 and align dynamics-row multipliers with the adjoint.

    ``adjoint`` is an (M+1, n) array or any object with a ``Y`` array of shape
    (N, M+1, n), in which case the particle mean is used.
    """
    if cert.r0 <= 0.0:
        raise AbnormalCertificateError()
    n, M, dt = problem.scenario.n, problem.grid.M, problem.grid.dt
    ref = np.asarray(adjoint.Y.mean(axis=0) if hasattr(adjoint, "Y") else adjoint, dtype=float).reshape(M + 1, n)
    scale = 1.0 / cert.r0
    mu = cert.mus[1].reshape(M, n) * scale
    left = float(np.max(np.abs(mu - ref[:M])))
    right = float(np.max(np.abs(mu - ref[1:])))
    trans = gnorm = float("nan")
    if z is not None:
        X, _ = problem.split(z)
        gx = np.asarray(problem.scenario.g_x(X[M]), dtype=float)
        trans = float(np.max(np.abs(mu[-1] - gx)))
        gnorm = float(np.max(np.abs(gx)))
    dens = [lam * scale / dt for lam in cert.lambdas[: len(problem.scenario.path_constraints)]]
    return MultiplierComparison(mu, ref, left, right, scale, trans, gnorm, dens)


# --- continuous references for the deterministic LQ case ----------------------------


def _rk4(rhs, y, t0, t1, steps):
    h = (t1 - t0) / steps
    t = t0
    for _ in range(steps):
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y


def lq_adjoint_reference(model: LqModel, grid: TimeGrid, substeps: int = 50) -> dict[str, np.ndarray]:
    """Y(t_k) = P(t_k) x*(t_k) for the deterministic LQ problem with terminal ell x^2 / 2."""
    B, C = model.b1 + model.b2, model.b3 + model.b4
    M, dt = grid.M, grid.dt
    P = np.empty(M + 1)
    P[M] = model.ell
    rhs_p = lambda t, p: -(2 * B * p + model.q - p * p * C * C / model.v)
    for k in range(M, 0, -1):
        P[k - 1] = _rk4(rhs_p, P[k], k * dt, (k - 1) * dt, substeps)

    # state under the optimal feedback; integrate P alongside for exact gains
    def rhs_joint(t, y):
        x, p = y
        return np.array([(B - C * C * p / model.v) * x, rhs_p(t, p)])

    x = np.empty(M + 1)
    x[0] = model.m0
    y = np.array([model.m0, P[0]])
    for k in range(M):
        y = _rk4(rhs_joint, y, k * dt, (k + 1) * dt, substeps)
        x[k + 1] = y[0]
    return {"t": grid.nodes, "P": P, "x": x, "Y": P * x, "u": -C * P * x / model.v}


def lq_eta_reference_all_active(model: LqModel, grid: TimeGrid) -> dict[str, np.ndarray]:
    """Closed form when h = 0 binds on the whole horizon (u = 0, x0 < 0).

    x(t) = x0 e^{Bt}, Y solves Y' = -(B Y + q x) with Y(T) = ell x(T), and
    eta = -(b3 + b4) Y. Valid while eta stays nonnegative.
    """
    B, C = model.b1 + model.b2, model.b3 + model.b4
    t, T, x0 = grid.nodes, model.T, model.m0
    x = x0 * np.exp(B * t)
    if abs(B) > 1e-14:
        integral = (np.exp(2 * B * T) - np.exp(2 * B * t)) / (2 * B)
    else:
        integral = T - t
    Y = x0 * (model.ell * np.exp(B * (2 * T - t)) + model.q * np.exp(-B * t) * integral)
    return {"t": t, "x": x, "Y": Y, "eta": -C * Y}


# --- convergence study --------------------------------------------------------------


@dataclass
class ConvergenceTable:
    dt: list[float]
    sup_error: list[float]
    order_estimate: list[float | None]
    slope: float | None
    transversality: list[float] = field(default_factory=list)  # relative to |g_x(x_M)|
    sup_error_right: list[float] = field(default_factory=list)

    def rows(self) -> list[tuple[float, float, float | None]]:
        return list(zip(self.dt, self.sup_error, self.order_estimate))


ROUNDING_LEVEL = 1e-11


def bridge_run(model: LqModel, M: int) -> tuple[DiscreteControlProblem, np.ndarray, FjCertificate, MultiplierComparison]:
    grid = TimeGrid(model.T, M)
    prob = discretize(DeterministicScenario.from_lq(model), grid)
    z = solve_qp(prob)
    cert = recover_multipliers(prob.nlp, z)
    ref = lq_adjoint_reference(model, grid)["Y"][:, None]
    return prob, z, cert, compare_multipliers(cert, ref, prob, z)


def convergence_study(model: LqModel, dt_list: Sequence[float]) -> ConvergenceTable:
    """Sup-node multiplier error per dt, pairwise orders and the log-log slope."""
    dts = [float(d) for d in dt_list]
    if any(b >= a for a, b in zip(dts, dts[1:])):
        raise ValueError("dt_list must be decreasing")
    errs, trans, right = [], [], []
    for dt in dts:
        M = int(round(model.T / dt))
        _, _, _, cmp = bridge_run(model, M)
        errs.append(cmp.sup_error)
        right.append(cmp.sup_error_right)
        trans.append(cmp.transversality / max(cmp.terminal_gradient, 1e-300) if cmp.transversality else 0.0)
    exact = all(e < ROUNDING_LEVEL for e in errs)
    orders: list[float | None] = [None]
    for i in range(1, len(dts)):
        if exact or errs[i] <= 0 or errs[i - 1] <= 0:
            orders.append(None)
        else:
            orders.append(float(np.log(errs[i - 1] / errs[i]) / np.log(dts[i - 1] / dts[i])))
    slope = None
    if len(dts) > 1 and not exact:
        slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    return ConvergenceTable(dts, errs, orders, slope, trans, right)


def control_only_problem(scenario: DeterministicScenario, grid: TimeGrid, box: BoxSet) -> NlpProblem:
    """Eliminate the states by forward rollout; the controls are the only variables."""
    M, dt, l = grid.M, grid.dt, scenario.l

    def rollout(u):
        U = u.reshape(M, l)
        X = [np.asarray(scenario.x0, dtype=float)]
        for k in range(M):
            X.append(X[-1] + dt * np.asarray(scenario.b(k * dt, X[-1], U[k])))
        return np.array(X), U

    def objective(u):
        X, U = rollout(u)
        val = float(scenario.g(X[M])) + sum(dt * float(scenario.f(k * dt, X[k], U[k])) for k in range(M))
        # adjoint sweep for the gradient
        p = np.asarray(scenario.g_x(X[M]), dtype=float)
        grad = np.zeros((M, l))
        for k in range(M - 1, -1, -1):
            t = k * dt
            grad[k] = dt * np.asarray(scenario.f_u(t, X[k], U[k])) + dt * np.asarray(scenario.b_u(t, X[k], U[k])).T @ p
            p = p + dt * np.asarray(scenario.f_x(t, X[k], U[k])) + dt * np.asarray(scenario.b_x(t, X[k], U[k])).T @ p
        return val, grad.reshape(-1)

    return NlpProblem(M * l, objective, [], [], box, name="control-only")
