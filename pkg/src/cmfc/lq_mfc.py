"""Scalar linear-quadratic mean-field control with a state-control constraint.

Dynamics and cost::

    dX = (b1 X + b2 E[X] + b3 a + b4 E[a]) dt + (s1 X + s2 E[X] + s3 a + s4 E[a]) dW
    J  = E[ int (q X^2 + v a^2)/2 dt + ell (X_T - E[X_T])^2 / 2 ]

optionally subject to h(t) X_t - a_t >= 0. The adjoint solves

    dY = -(b1 Y + b2 E[Y] + s1 Z + s2 E[Z] + q X) dt + h eta dt + Z dW,
    Y_T = ell (X_T - E[X_T]),

and the control satisfies v a + b3 Y + b4 E[Y] + s3 Z + s4 E[Z] + eta = 0.
The Riccati system behind ``riccati_solve`` is derived in docs/riccati.md.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .mf_bsde import AdjointSolution, DriverSpec, RegressionBasis, least_squares, solve_backward
from .mvsde import (
    ControlPolicy,
    CostEstimate,
    CostSpec,
    InitialLaw,
    MeanFieldDynamics,
    ParticleEnsemble,
    TimeGrid,
    brownian_increments,
    cost_samples,
    simulate_forward,
)
from .smp_check import (
    ConstraintSpec,
    MultiplierSet,
    PathwiseConstraint,
    SmpReport,
    normalize,
    smp_report,
)

BLOWUP = 1e8


class RiccatiBlowup(ArithmeticError):
    def __init__(self, t: float):
        super().__init__(f"Riccati solution exceeds {BLOWUP:g} at t = {t:.6g}")
        self.t = t


@dataclass
class LqModel:
    b1: float = 0.0
    b2: float = 0.0
    b3: float = 1.0
    b4: float = 0.0
    s1: float = 0.0
    s2: float = 0.0
    s3: float = 0.0
    s4: float = 0.0
    q: float = 1.0
    v: float = 1.0
    ell: float = 0.0
    T: float = 1.0
    m0: float = 1.0
    v0: float = 0.0
    h: float | np.ndarray | None = None  # constant or table on [0, T]; None = unconstrained

    def __post_init__(self):
        if not self.v > 0:
            raise ValueError("v must be strictly positive")
        if self.q < 0 or self.ell < 0:
            raise ValueError("q and ell must be nonnegative")
        if self.v0 < 0 or self.T <= 0:
            raise ValueError("need v0 >= 0 and T > 0")

    @classmethod
    def benchmark(cls, **overrides) -> LqModel:
        base = dict(b1=-0.5, b2=0.2, b3=1.0, b4=0.0, s1=0.2, s2=0.0, s3=0.0, s4=0.0,
                    q=1.0, v=1.0, ell=1.0, T=1.0, m0=1.0, v0=0.04)
        base.update(overrides)
        return cls(**base)

    @property
    def constrained(self) -> bool:
        return self.h is not None

    def h_values(self, grid: TimeGrid) -> np.ndarray:
        """(M+1,) constraint slope on the grid; tables are interpolated linearly."""
        if self.h is None:
            raise ValueError("model is unconstrained")
        h = np.asarray(self.h, dtype=float)
        if h.ndim == 0:
            return np.full(grid.M + 1, float(h))
        if h.shape[0] == grid.M + 1:
            return h.copy()
        return np.interp(grid.nodes, np.linspace(0.0, self.T, h.shape[0]), h)

    def initial_law(self) -> InitialLaw:
        return InitialLaw.gaussian(self.m0, self.v0)

    def dynamics(self, flow: tuple[np.ndarray, np.ndarray] | None = None, dt: float | None = None) -> MeanFieldDynamics:
        """Particle dynamics; with ``flow = (mean_x path, mean_a path)`` the means are frozen."""
        b1, b2, b3, b4, s1, s2, s3, s4 = self.b1, self.b2, self.b3, self.b4, self.s1, self.s2, self.s3, self.s4

        if flow is None:
            def means(t, mx, ma):
                return mx[0], ma[0]
        else:
            fm, fa = flow

            def means(t, mx, ma):
                k = int(round(t / dt))
                return fm[k], fa[k]

        def drift(t, x, mx, ma, u):
            m, a = means(t, mx, ma)
            return b1 * x + b2 * m + b3 * u + b4 * a

        def diffusion(t, x, mx, ma, u):
            m, a = means(t, mx, ma)
            return (s1 * x + s2 * m + s3 * u + s4 * a)[:, :, None]

        def const(val, shape):
            return lambda t, x, mx, ma, u: np.full((x.shape[0],) + shape, val)

        frozen = flow is not None
        return MeanFieldDynamics(
            1, 1, 1, drift, diffusion, self.initial_law(),
            drift_x=const(b1, (1, 1)), drift_mx=const(0.0 if frozen else b2, (1, 1)),
            drift_u=const(b3, (1, 1)), drift_ma=const(0.0 if frozen else b4, (1, 1)),
            diffusion_x=const(s1, (1, 1, 1)), diffusion_mx=const(0.0 if frozen else s2, (1, 1, 1)),
            diffusion_u=const(s3, (1, 1, 1)), diffusion_ma=const(0.0 if frozen else s4, (1, 1, 1)),
            lipschitz={"drift": abs(b1) + abs(b2) + abs(b3) + abs(b4), "diffusion": abs(s1) + abs(s2) + abs(s3) + abs(s4)},
        )

    def cost(self, terminal_mean: float | None = None) -> CostSpec:
        """Running (q x^2 + v u^2)/2 and terminal ell (x - m)^2 / 2.

        With ``terminal_mean`` the centring is frozen at that value.
        """
        q, v, ell = self.q, self.v, self.ell
        frozen = terminal_mean is not None

        def centre(mx):
            return terminal_mean if frozen else mx[0]

        return CostSpec(
            running=lambda t, x, mx, ma, u: 0.5 * (q * x[:, 0] ** 2 + v * u[:, 0] ** 2),
            terminal=lambda x, mx: 0.5 * ell * (x[:, 0] - centre(mx)) ** 2,
            running_x=lambda t, x, mx, ma, u: q * x,
            running_mx=lambda t, x, mx, ma, u: np.zeros_like(x),
            running_u=lambda t, x, mx, ma, u: v * u,
            running_ma=lambda t, x, mx, ma, u: np.zeros_like(u),
            terminal_x=lambda x, mx: ell * (x - centre(mx)),
            terminal_mx=lambda x, mx: np.zeros_like(x) if frozen else -ell * (x - mx[0]),
        )

    def driver_spec(self, terminal_mean: float | None = None) -> DriverSpec:
        """Adjoint driver; with ``terminal_mean`` the mean-field terms are dropped (frozen flow)."""
        b1, b2, s1, s2, q, ell = self.b1, self.b2, self.s1, self.s2, self.q, self.ell
        if terminal_mean is None:
            def driver(t, x, mx, ma, u, y, my, z, mz):
                return b1 * y + b2 * my + s1 * z[:, :, 0] + s2 * mz[:, 0] + q * x

            def terminal(x, mx):
                return ell * (x - mx)
        else:
            def driver(t, x, mx, ma, u, y, my, z, mz):
                return b1 * y + s1 * z[:, :, 0] + q * x

            def terminal(x, mx):
                return ell * (x - terminal_mean)

        return DriverSpec(driver, terminal, affine=True)

    def constraint_spec(self, grid: TimeGrid) -> ConstraintSpec:
        h = self.h_values(grid)
        dt = grid.dt

        def idx(t):
            return int(round(t / dt))

        return ConstraintSpec(
            pathwise=[
                PathwiseConstraint(
                    psi=lambda t, x, u: h[idx(t)] * x[:, 0] - u[:, 0],
                    grad_x=lambda t, x, u: np.full_like(x, h[idx(t)]),
                    grad_u=lambda t, x, u: -np.ones_like(u),
                    name="h x - a",
                )
            ]
        )


# --- Riccati system ------------------------------------------------------


def _riccati_rhs(m: LqModel, beta: float, gamma: float) -> tuple[float, float]:
    B, Bm = m.b3, m.b3 + m.b4
    S, Sm = m.s1, m.s1 + m.s2
    D, Dm = m.s3, m.s3 + m.s4
    k1 = -beta * (B + D * S) / (m.v + D * D * beta)
    k2 = -(Bm * gamma + Dm * Sm * beta) / (m.v + Dm * Dm * beta)
    dbeta = -2 * m.b1 * beta - B * k1 * beta - S * beta * (S + D * k1) - m.q
    dgamma = -2 * (m.b1 + m.b2) * gamma - Bm * k2 * gamma - Sm * beta * (Sm + Dm * k2) - m.q
    return dbeta, dgamma


def _gains(m: LqModel, beta, gamma):
    k1 = -beta * (m.b3 + m.s3 * m.s1) / (m.v + m.s3**2 * beta)
    Dm = m.s3 + m.s4
    k2 = -((m.b3 + m.b4) * gamma + Dm * (m.s1 + m.s2) * beta) / (m.v + Dm**2 * beta)
    return k1, k2


@dataclass
class RiccatiSolution:
    """Y = beta X + zeta E[X]; optimal a = K1 (X - E[X]) + K2 E[X]."""

    t: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    value: float
    variance_part: float
    mean_part: float

    @property
    def gamma(self) -> np.ndarray:
        return self.beta + self.zeta


def riccati_solve(model: LqModel, grid: TimeGrid) -> RiccatiSolution:
    """Backward RK4 for (beta, gamma = beta + zeta) with beta(T) = ell, gamma(T) = 0."""
    if model.constrained:
        raise ValueError("Riccati solution only covers the unconstrained model")
    M, dt = grid.M, grid.dt
    beta = np.empty(M + 1)
    gamma = np.empty(M + 1)
    beta[M], gamma[M] = model.ell, 0.0
    f = lambda b, g: np.array(_riccati_rhs(model, b, g))
    for k in range(M, 0, -1):
        y = np.array([beta[k], gamma[k]])
        h = -dt
        a1 = f(*y)
        a2 = f(*(y + 0.5 * h * a1))
        a3 = f(*(y + 0.5 * h * a2))
        a4 = f(*(y + h * a3))
        y = y + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > BLOWUP:
            raise RiccatiBlowup((k - 1) * dt)
        beta[k - 1], gamma[k - 1] = y
    K1, K2 = _gains(model, beta, gamma)
    vp, mp = 0.5 * beta[0] * model.v0, 0.5 * gamma[0] * model.m0**2
    return RiccatiSolution(grid.nodes, beta, gamma - beta, K1, K2, vp + mp, vp, mp)


def riccati_moments(model: LqModel, sol: RiccatiSolution, substeps: int = 4) -> dict[str, np.ndarray | float]:
    """Mean/variance ODEs under the Riccati feedback and the resulting cost.

    Integrated with RK4 on the Riccati grid (gains interpolated linearly between
    nodes); an independent check of ``sol.value``.
    """
    t = sol.t
    M = t.shape[0] - 1
    dt = t[1] - t[0]
    Sm, Dm = model.s1 + model.s2, model.s3 + model.s4

    def rhs(s, y):
        k1 = np.interp(s, t, sol.K1)
        k2 = np.interp(s, t, sol.K2)
        m, var, c = y
        dm = (model.b1 + model.b2 + (model.b3 + model.b4) * k2) * m
        dvar = 2 * (model.b1 + model.b3 * k1) * var + (model.s1 + model.s3 * k1) ** 2 * var + (Sm + Dm * k2) ** 2 * m**2
        dc = 0.5 * (model.q * (var + m * m) + model.v * (k1 * k1 * var + k2 * k2 * m * m))
        return np.array([dm, dvar, dc])

    y = np.array([model.m0, model.v0, 0.0])
    mean, var = [y[0]], [y[1]]
    h = dt / substeps
    for k in range(M):
        for j in range(substeps):
            s = t[k] + j * h
            a1 = rhs(s, y)
            a2 = rhs(s + h / 2, y + h / 2 * a1)
            a3 = rhs(s + h / 2, y + h / 2 * a2)
            a4 = rhs(s + h, y + h * a3)
            y = y + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        mean.append(y[0])
        var.append(y[1])
    return {"mean": np.array(mean), "var": np.array(var), "cost": float(y[2] + 0.5 * model.ell * y[1])}


@dataclass
class DiscreteOracle:
    value: float
    P: np.ndarray  # (M+1,) variance coefficient
    Pi: np.ndarray  # (M+1,) mean coefficient
    K1: np.ndarray  # (M,) gain on X - E[X]
    K2: np.ndarray  # (M,) gain on E[X]


def lq_oracle_discrete(model: LqModel, dt: float) -> DiscreteOracle:
    """Exact dynamic programming for the Euler-discretized problem.

    Splits X_k = (X_k - m_k) + m_k; the value is (P_k Var_k + Pi_k m_k^2)/2 with
    one scalar quadratic minimization per component and step.
    """
    if model.constrained:
        raise ValueError("oracle only covers the unconstrained model")
    M = int(round(model.T / dt))
    if M < 1 or abs(M * dt - model.T) > 1e-9 * model.T:
        raise ValueError("dt must divide T")
    a, c = 1 + model.b1 * dt, model.b3 * dt
    A, C = 1 + (model.b1 + model.b2) * dt, (model.b3 + model.b4) * dt
    Sm, Dm = model.s1 + model.s2, model.s3 + model.s4
    P = np.empty(M + 1)
    Pi = np.empty(M + 1)
    K1 = np.empty(M)
    K2 = np.empty(M)
    P[M], Pi[M] = model.ell, 0.0
    for k in range(M - 1, -1, -1):
        p, pi = P[k + 1], Pi[k + 1]
        # centred part: quadratic in (xt, ut)
        xx = model.q * dt + p * (a * a + dt * model.s1**2)
        xu = p * (a * c + dt * model.s1 * model.s3)
        uu = model.v * dt + p * (c * c + dt * model.s3**2)
        K1[k] = -xu / uu
        P[k] = xx - xu * xu / uu
        # mean part: quadratic in (m, ubar)
        mm = model.q * dt + pi * A * A + p * dt * Sm * Sm
        mu = pi * A * C + p * dt * Sm * Dm
        nn = model.v * dt + pi * C * C + p * dt * Dm * Dm
        K2[k] = -mu / nn
        Pi[k] = mm - mu * mu / nn
    value = 0.5 * (P[0] * model.v0 + Pi[0] * model.m0**2)
    return DiscreteOracle(float(value), P, Pi, K1, K2)


# --- pointwise KKT ----------------------------------------------------------


def pointwise_kkt_control(u_star, hx, v: float):
    """Solve v a - v u* + eta = 0, eta >= 0, hx - a >= 0, eta (hx - a) = 0."""
    if not v > 0:
        raise ValueError("v must be positive")
    u_star = np.asarray(u_star, dtype=float)
    hx = np.asarray(hx, dtype=float)
    alpha = np.minimum(u_star, hx)
    eta = v * np.maximum(u_star - hx, 0.0)
    if alpha.ndim == 0:
        return float(alpha), float(eta)
    return alpha, eta


# --- forward-backward fixed point -----------------------------------------


@dataclass
class FeedbackTable:
    """Per-node regression coefficients of Y and Z on the state basis."""

    cY: np.ndarray  # (M+1, p)
    cZ: np.ndarray  # (M+1, p)
    degree: int

    @classmethod
    def zeros(cls, M: int, degree: int) -> FeedbackTable:
        return cls(np.zeros((M + 1, degree + 1)), np.zeros((M + 1, degree + 1)), degree)

    def blend(self, other: FeedbackTable, damping: float) -> FeedbackTable:
        return FeedbackTable(self.cY + damping * (other.cY - self.cY), self.cZ + damping * (other.cZ - self.cZ), self.degree)


def _scalar_design(x: np.ndarray, degree: int) -> np.ndarray:
    return RegressionBasis(degree).design(x[:, :1])


def _fit_table(ens: ParticleEnsemble, adj: AdjointSolution, degree: int) -> FeedbackTable:
    M = ens.grid.M
    p = degree + 1
    cY = np.zeros((M + 1, p))
    cZ = np.zeros((M + 1, p))
    for k in range(M + 1):
        B = _scalar_design(ens.states[:, k], degree)
        target = adj.Y[:, k, :1] if k == M else np.column_stack([adj.Y[:, k, 0], adj.Z[:, k, 0, 0]])
        coef = least_squares(B, target)
        if coef is None:
            coef = np.linalg.lstsq(B, target, rcond=None)[0]
        cY[k] = coef[:, 0]
        if k < M:
            cZ[k] = coef[:, 1]
    return FeedbackTable(cY, cZ, degree)


@dataclass
class _Problem:
    """One forward-backward fixed point: MFC (mean terms live) or frozen-flow agent problem."""

    model: LqModel
    grid: TimeGrid
    dyn: MeanFieldDynamics
    driver: DriverSpec
    mean_field: bool
    h: np.ndarray | None
    eta_fixed: np.ndarray | None = None  # open-loop eta for dual ascent; no clipping then

    def u_star(self, k: int, x: np.ndarray, table: FeedbackTable) -> np.ndarray:
        m = self.model
        B = _scalar_design(x, table.degree)
        Yh = B @ table.cY[k]
        Zh = B @ table.cZ[k]
        lin = m.b3 * Yh + m.s3 * Zh
        if self.mean_field:
            lin = lin + m.b4 * Yh.mean() + m.s4 * Zh.mean()
        return -lin / m.v

    def policy(self, table: FeedbackTable) -> ControlPolicy:
        dt = self.grid.dt

        def fb(t, x, mx):
            k = int(round(t / dt))
            us = self.u_star(k, x, table)
            if self.eta_fixed is not None:
                us = us - self.eta_fixed[:, k] / self.model.v
            elif self.h is not None:
                us = np.minimum(us, self.h[k] * x[:, 0])
            return us[:, None]

        return ControlPolicy.from_feedback(fb)

    def eta_field(self, ens: ParticleEnsemble, table: FeedbackTable) -> np.ndarray | None:
        if self.eta_fixed is not None:
            return self.eta_fixed
        if self.h is None:
            return None
        eta = np.empty((ens.N, self.grid.M + 1))
        for k in range(self.grid.M + 1):
            x = ens.states[:, k]
            _, eta[:, k] = pointwise_kkt_control(self.u_star(k, x, table), self.h[k] * x[:, 0], self.model.v)
        return eta

    def constraint_spec(self) -> ConstraintSpec | None:
        if self.h is None:
            return None
        return replace(self.model, h=self.h).constraint_spec(self.grid)


@dataclass
class FixedPointResult:
    ensemble: ParticleEnsemble
    adjoint: AdjointSolution
    table: FeedbackTable
    eta: np.ndarray | None
    iterations: int
    converged: bool
    history: list[float]


def _fixed_point(
    prob: _Problem,
    N: int,
    seed: int,
    table: FeedbackTable,
    max_iter: int,
    damping: float,
    tol: float,
    basis: RegressionBasis,
) -> FixedPointResult:
    history: list[float] = []
    grid = prob.grid
    cons = prob.constraint_spec()
    dW = brownian_increments(seed, N, grid, 1)
    x0 = prob.dyn.initial.sample(N, seed)
    for it in range(1, max_iter + 1):
        ens = simulate_forward(prob.dyn, prob.policy(table), grid, N, seed, dW, x0)
        eta = prob.eta_field(ens, table)
        mult = None if eta is None else MultiplierSet(1.0, [], [eta], grid.dt)
        adj = solve_backward(ens, prob.driver, mult, cons, basis)
        fitted = _fit_table(ens, adj, table.degree)
        proposed = prob.policy(fitted)
        dist = 0.0
        for k in range(grid.M):
            x = ens.states[:, k]
            u_new = proposed.evaluate(k, k * grid.dt, x, x.mean(axis=0))
            dist += float(np.mean((u_new - ens.controls[:, k]) ** 2))
        dist = float(np.sqrt(dist / grid.M))
        history.append(dist)
        if dist < tol:
            return FixedPointResult(ens, adj, table, eta, it, True, history)
        table = table.blend(fitted, damping)
    return FixedPointResult(ens, adj, table, eta, max_iter, False, history)


@dataclass
class LqSolveReport:
    cost: CostEstimate
    smp: SmpReport
    iterations: int
    converged: bool
    history: list[float]
    ensemble: ParticleEnsemble
    adjoint: AdjointSolution
    eta: np.ndarray | None = None
    feasibility_quantiles: dict[str, float] = field(default_factory=dict)
    table: FeedbackTable | None = None


def _report(model: LqModel, grid: TimeGrid, res: FixedPointResult, prob: _Problem, cost_spec: CostSpec) -> LqSolveReport:
    ens, adj = res.ensemble, res.adjoint
    samples = cost_samples(ens, cost_spec.running, cost_spec.terminal)
    cons = prob.constraint_spec()
    if res.eta is None:
        mult = MultiplierSet(1.0, [], [], grid.dt)
    else:
        mult = MultiplierSet(1.0, [], [res.eta], grid.dt)
    scale = 1.0 / mult.total_mass()
    nm = normalize(mult)
    scaled_adj = replace(adj, Y=adj.Y * scale, Z=adj.Z * scale)
    # a frozen-flow agent ignores the mean-field derivative terms
    report = smp_report(ens, scaled_adj, nm, cons, prob.dyn, cost_spec)
    quant = {}
    if prob.h is not None:
        slack = prob.h[None, :] * ens.states[:, :, 0] - ens.controls[:, :, 0]
        quant = {f"q{int(p * 100):02d}": float(np.quantile(slack, p)) for p in (0.0, 0.01, 0.5)}
        quant["min"] = float(slack.min())
    return LqSolveReport(
        CostEstimate.from_samples(samples), report, res.iterations, res.converged, res.history,
        ens, adj, res.eta, quant, res.table,
    )


def _mfc_problem(model: LqModel, grid: TimeGrid, constrained: bool) -> _Problem:
    h = model.h_values(grid) if constrained else None
    return _Problem(model, grid, model.dynamics(), model.driver_spec(), True, h)


def solve_unconstrained(
    model: LqModel,
    grid: TimeGrid,
    N: int,
    seed: int,
    max_iter: int = 100,
    damping: float = 0.5,
    tol: float = 1e-4,
    degree: int = 1,
) -> LqSolveReport:
    """Damped forward-backward iteration on the feedback table, started at zero control."""
    prob = _mfc_problem(model, grid, constrained=False)
    res = _fixed_point(prob, N, seed, FeedbackTable.zeros(grid.M, degree), max_iter, damping, tol, RegressionBasis(degree))
    return _report(model, grid, res, prob, model.cost())


def solve_constrained(
    model: LqModel,
    grid: TimeGrid,
    N: int,
    seed: int,
    max_iter: int = 100,
    damping: float = 0.5,
    tol: float = 1e-4,
    degree: int = 1,
    warm_start: LqSolveReport | None = None,
) -> LqSolveReport:
    """Warm start from the unconstrained fixed point, then iterate with the pointwise KKT control."""
    if not model.constrained:
        raise ValueError("model has no constraint slope h")
    if warm_start is None or warm_start.table is None or warm_start.table.degree != degree:
        warm_start = solve_unconstrained(replace(model, h=None), grid, N, seed, max_iter, damping, tol, degree)
    prob = _mfc_problem(model, grid, constrained=True)
    res = _fixed_point(prob, N, seed, warm_start.table, max_iter, damping, tol, RegressionBasis(degree))
    return _report(model, grid, res, prob, model.cost())


def solve_with_fixed_eta(
    model: LqModel,
    grid: TimeGrid,
    N: int,
    seed: int,
    eta: np.ndarray,
    table: FeedbackTable | None = None,
    max_iter: int = 100,
    damping: float = 0.5,
    tol: float = 1e-4,
    degree: int = 1,
) -> FixedPointResult:
    """Primal solve for a given multiplier density eta (N, M+1), used inside dual ascent."""
    prob = _Problem(model, grid, model.dynamics(), model.driver_spec(), True, model.h_values(grid), eta_fixed=eta)
    table = table or FeedbackTable.zeros(grid.M, degree)
    return _fixed_point(prob, N, seed, table, max_iter, damping, tol, RegressionBasis(degree))


# --- mean-field game --------------------------------------------------------


@dataclass
class MfgReport:
    flow_mean_x: np.ndarray
    flow_mean_a: np.ndarray
    residuals: list[float]
    outer_iterations: int
    converged: bool
    converged_by_tolerance: bool
    inner: LqSolveReport


def _agent_problem(model, grid, flow, constrained):
    h = model.h_values(grid) if constrained else None
    dyn = model.dynamics(flow=flow, dt=grid.dt)
    return _Problem(model, grid, dyn, model.driver_spec(terminal_mean=float(flow[0][-1])), False, h)


def mfg_solve(
    model: LqModel,
    grid: TimeGrid,
    N: int,
    seed: int,
    outer_iter: int = 20,
    tol: float = 1e-3,
    damping: float = 0.5,
    inner_iter: int = 100,
    inner_tol: float = 1e-6,
    degree: int = 1,
) -> MfgReport:
    """Outer loop on the frozen flow (E[X_t], E[a_t]).

    A predictor pass solves the agent problem against the uncontrolled flow;
    each outer iteration then solves against the current flow, measures the
    sup-node distance to the flow it induces and relaxes with ``damping``.
    """
    constrained = model.constrained
    zero = ControlPolicy.from_feedback(lambda t, x, mx: np.zeros((x.shape[0], 1)))
    ens0 = simulate_forward(model.dynamics(), zero, grid, N, seed)
    flow = (ens0.mean_x()[:, 0], ens0.mean_a()[:, 0])
    table = FeedbackTable.zeros(grid.M, degree)
    basis = RegressionBasis(degree)

    def agent(flow, table):
        prob = _agent_problem(model, grid, flow, constrained)
        res = _fixed_point(prob, N, seed, table, inner_iter, damping, inner_tol, basis)
        return prob, res

    # predictor
    _, res = agent(flow, table)
    table = res.table
    flow = (res.ensemble.mean_x()[:, 0].copy(), res.ensemble.mean_a()[:, 0].copy())
    residuals: list[float] = []
    for it in range(1, outer_iter + 1):
        prob, res = agent(flow, table)
        table = res.table
        out = (res.ensemble.mean_x()[:, 0], res.ensemble.mean_a()[:, 0])
        r = float(max(np.max(np.abs(out[0] - flow[0])), np.max(np.abs(out[1] - flow[1]))))
        residuals.append(r)
        if r < tol:
            rep = _report(model, grid, res, prob, model.cost(terminal_mean=float(flow[0][-1])))
            return MfgReport(flow[0], flow[1], residuals, it, True, r > 0.0, rep)
        flow = (flow[0] + damping * (out[0] - flow[0]), flow[1] + damping * (out[1] - flow[1]))
    rep = _report(model, grid, res, prob, model.cost(terminal_mean=float(flow[0][-1])))
    return MfgReport(flow[0], flow[1], residuals, outer_iter, False, False, rep)
