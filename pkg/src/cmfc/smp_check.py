"""Multipliers, constraint families and checks of the stochastic minimum principle.

Constraint conventions: expectation constraints E[phi^i(t, X_t, .)] >= 0 for
every t with atom weights w^i_k >= 0, pathwise constraints psi^j(t, X_t, a_t) >= 0
with densities eta^j >= 0. The Hamiltonian is
H = <b, y> + tr(sigma z^T) + r0 f.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cones import BoxSet
from .mvsde import CostSpec, MeanFieldDynamics, ParticleEnsemble


@dataclass
class ExpectationConstraint:
    """phi(t, x, path) = phi_x(t, x) + Phi(int_0^t k(s) . a_s ds).

    ``phi_x`` and ``grad_x`` map (t, x (N, n)) to (N,) and (N, n). The path part
    is optional; ``kernel(t)`` returns (l,), ``outer`` and ``outer_prime`` act
    elementwise on the running integral.
    """

    phi_x: Callable[[float, np.ndarray], np.ndarray]
    grad_x: Callable[[float, np.ndarray], np.ndarray]
    kernel: Callable[[float], np.ndarray] | None = None
    outer: Callable[[np.ndarray], np.ndarray] | None = None
    outer_prime: Callable[[np.ndarray], np.ndarray] | None = None
    name: str = ""

    def path_integral(self, ens: ParticleEnsemble) -> np.ndarray:
        """(N, M+1) left-endpoint integral of k . a up to each node."""
        N, M, dt = ens.N, ens.grid.M, ens.grid.dt
        out = np.zeros((N, M + 1))
        if self.kernel is None:
            return out
        incr = np.stack([ens.controls[:, k] @ np.asarray(self.kernel(k * dt)) for k in range(M)], axis=1)
        out[:, 1:] = np.cumsum(dt * incr, axis=1)
        return out

    def values(self, ens: ParticleEnsemble) -> np.ndarray:
        """(N, M+1) per-particle integrand; the constraint is its mean >= 0."""
        dt = ens.grid.dt
        vals = np.stack([self.phi_x(k * dt, ens.states[:, k]) for k in range(ens.grid.M + 1)], axis=1)
        if self.kernel is not None:
            vals = vals + self.outer(self.path_integral(ens))
        return vals


@dataclass
class PathwiseConstraint:
    """psi(t, x, u) >= 0 per particle and step; callbacks are vectorized over particles."""

    psi: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    grad_x: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    grad_u: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    name: str = ""

    def values(self, ens: ParticleEnsemble) -> np.ndarray:
        dt = ens.grid.dt
        return np.stack(
            [self.psi(k * dt, ens.states[:, k], ens.controls[:, k]) for k in range(ens.grid.M + 1)], axis=1
        )


@dataclass
class ConstraintSpec:
    expectation: list[ExpectationConstraint] = field(default_factory=list)
    pathwise: list[PathwiseConstraint] = field(default_factory=list)

    def evaluate(self, ens: ParticleEnsemble) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Ensemble means of each phi^i per node (M+1,) and raw psi^j values (N, M+1)."""
        return [c.values(ens).mean(axis=0) for c in self.expectation], [c.values(ens) for c in self.pathwise]


@dataclass
class MultiplierSet:
    r0: float
    atoms: list[np.ndarray] = field(default_factory=list)  # each (M+1,)
    eta: list[np.ndarray] = field(default_factory=list)  # each (N, M+1)
    dt: float = 1.0

    def __post_init__(self):
        self.atoms = [np.asarray(w, dtype=float) for w in self.atoms]
        self.eta = [np.asarray(e, dtype=float) for e in self.eta]
        if self.r0 < 0 or any(np.any(w < 0) for w in self.atoms) or any(np.any(e < 0) for e in self.eta):
            raise ValueError("multipliers must be nonnegative")

    @classmethod
    def zeros(cls, constraints: ConstraintSpec, N: int, M: int, dt: float, r0: float = 1.0) -> MultiplierSet:
        return cls(
            r0,
            [np.zeros(M + 1) for _ in constraints.expectation],
            [np.zeros((N, M + 1)) for _ in constraints.pathwise],
            dt,
        )

    def eta_norm(self, j: int) -> float:
        """L2(dt x dP) norm over the M Euler intervals (left endpoints)."""
        e = self.eta[j][:, :-1]
        return float(np.sqrt(np.mean(np.sum(e**2, axis=1) * self.dt)))

    def total_mass(self) -> float:
        return self.r0 + sum(float(w.sum()) for w in self.atoms) + sum(self.eta_norm(j) for j in range(len(self.eta)))

    def scaled(self, c: float) -> MultiplierSet:
        return MultiplierSet(self.r0 * c, [w * c for w in self.atoms], [e * c for e in self.eta], self.dt)

    def divided(self, d: float) -> MultiplierSet:
        """Like ``scaled(1 / d)`` but safe when ``1 / d`` overflows (subnormal d)."""
        return MultiplierSet(self.r0 / d, [w / d for w in self.atoms], [e / d for e in self.eta], self.dt)


def normalize(mult: MultiplierSet) -> MultiplierSet:
    """Rescale so that r0 + sum of atom masses + sum of eta norms equals 1."""
    total = mult.total_mass()
    if total <= 0.0:
        raise ValueError("all multipliers vanish; the bundle is trivial")
    return mult.divided(total)


def hamiltonian(t, x, mean_x, mean_a, u, y, z, r0: float, dyn: MeanFieldDynamics, running_cost):
    """<b, y> + tr(sigma z^T) + r0 f, per particle; scalar inputs give a scalar."""
    single = np.ndim(x) <= 1
    x2 = np.atleast_2d(np.asarray(x, dtype=float))
    u2 = np.atleast_2d(np.asarray(u, dtype=float))
    y2 = np.atleast_2d(np.asarray(y, dtype=float))
    N = x2.shape[0]
    z3 = np.asarray(z, dtype=float).reshape(N, dyn.n, dyn.r)
    mx = np.atleast_1d(np.asarray(mean_x, dtype=float))
    ma = np.atleast_1d(np.asarray(mean_a, dtype=float))
    b = dyn.drift(t, x2, mx, ma, u2)
    s = dyn.diffusion(t, x2, mx, ma, u2)
    f = np.asarray(running_cost(t, x2, mx, ma, u2), dtype=float).reshape(N)
    out = np.sum(b * y2, axis=1) + np.einsum("inr,inr->i", s, z3) + r0 * f
    return float(out[0]) if single else out


def control_gradient(
    ens: ParticleEnsemble,
    Y: np.ndarray,
    Z: np.ndarray,
    mult: MultiplierSet,
    dyn: MeanFieldDynamics,
    cost: CostSpec,
    constraints: ConstraintSpec | None = None,
) -> np.ndarray:
    """G of shape (N, M, l): grad_u H + E'[d_{mean_a} H] minus the multiplier terms."""
    N, M, dt = ens.N, ens.grid.M, ens.grid.dt
    X, U = ens.states, ens.controls
    mx, ma = ens.mean_x(), ens.mean_a()
    G = np.empty((N, M, dyn.l))
    for k in range(M):
        args = (k * dt, X[:, k], mx[k], ma[k], U[:, k])
        y, z = Y[:, k], Z[:, k]
        own = (
            np.einsum("ial,ia->il", dyn.drift_u(*args), y)
            + np.einsum("iarl,iar->il", dyn.diffusion_u(*args), z)
            + mult.r0 * cost.running_u(*args)
        )
        mean_part = (
            np.einsum("ial,ia->il", dyn.drift_ma(*args), y)
            + np.einsum("iarl,iar->il", dyn.diffusion_ma(*args), z)
            + mult.r0 * cost.running_ma(*args)
        ).mean(axis=0)
        G[:, k] = own + mean_part
    if constraints is not None:
        for c, w in zip(constraints.expectation, mult.atoms):
            if c.kernel is None or not np.any(w):
                continue
            weighted = c.outer_prime(c.path_integral(ens)) * w  # (N, M+1)
            # atoms at s >= t, the atom at t itself included
            tail = np.cumsum(weighted[:, ::-1], axis=1)[:, ::-1]
            for k in range(M):
                G[:, k] -= tail[:, k, None] * np.asarray(c.kernel(k * dt))[None, :]
        for c, eta in zip(constraints.pathwise, mult.eta):
            for k in range(M):
                G[:, k] -= c.grad_u(k * dt, X[:, k], U[:, k]) * eta[:, k, None]
    return G


def min_condition_residual(
    ens: ParticleEnsemble,
    adjoint,
    mult: MultiplierSet,
    constraints: ConstraintSpec | None,
    dyn: MeanFieldDynamics,
    cost: CostSpec,
    control_box: BoxSet | None = None,
) -> float:
    """RMS over (particle, step < M) of |a - Proj_U(a - G)|."""
    G = control_gradient(ens, adjoint.Y, adjoint.Z, mult, dyn, cost, constraints)
    a = ens.controls[:, :-1]
    box = control_box or BoxSet.whole_space(dyn.l)
    r = a - box.project(a - G)
    return float(np.sqrt(np.mean(np.sum(r**2, axis=2))))


def support_check(
    mult: MultiplierSet, ens: ParticleEnsemble, constraints: ConstraintSpec, tol: float = 1e-3
) -> tuple[list[float], list[float]]:
    """Per-i support violation sum_k w_k max(0, |E phi^i(t_k)| - tol) and per-j E int psi eta dt."""
    phi_means, psi_vals = constraints.evaluate(ens)
    support = [float(np.sum(w * np.maximum(0.0, np.abs(m) - tol))) for w, m in zip(mult.atoms, phi_means)]
    slack = [
        float(np.mean(np.sum(psi[:, :-1] * eta[:, :-1], axis=1) * mult.dt)) for psi, eta in zip(psi_vals, mult.eta)
    ]
    return support, slack


def primal_feasibility(ens: ParticleEnsemble, constraints: ConstraintSpec) -> list[float]:
    """Worst violation per constraint: expectation constraints first, then pathwise."""
    phi_means, psi_vals = constraints.evaluate(ens)
    return [float(max(0.0, -np.min(m))) for m in phi_means] + [float(max(0.0, -np.min(p))) for p in psi_vals]


@dataclass
class SmpReport:
    min_condition_residual: float
    support_violation: list[float]
    slackness_integral: list[float]
    normalization_error: float
    primal_feasibility: list[float]
    r0: float

    def __post_init__(self):
        vals = [self.min_condition_residual, self.normalization_error, self.r0]
        vals += self.support_violation + self.primal_feasibility + [abs(s) for s in self.slackness_integral]
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("report fields must be finite and nonnegative")
        # slackness integrals are >= 0 at feasible points; rounding can leave tiny negatives
        self.slackness_integral = [abs(s) for s in self.slackness_integral]

    def to_dict(self) -> dict:
        return {
            "min_condition_residual": self.min_condition_residual,
            "support_violation": list(self.support_violation),
            "slackness_integral": list(self.slackness_integral),
            "normalization_error": self.normalization_error,
            "primal_feasibility": list(self.primal_feasibility),
            "r0": self.r0,
        }


def smp_report(
    ens, adjoint, mult, constraints, dyn, cost, control_box=None, support_tol: float = 1e-3
) -> SmpReport:
    constraints = constraints or ConstraintSpec()
    support, slack = support_check(mult, ens, constraints, support_tol)
    return SmpReport(
        min_condition_residual(ens, adjoint, mult, constraints, dyn, cost, control_box),
        support,
        slack,
        abs(mult.total_mass() - 1.0),
        primal_feasibility(ens, constraints),
        mult.r0,
    )


def dual_ascent_update(
    mult: MultiplierSet,
    constraint_evals: tuple[Sequence[np.ndarray], Sequence[np.ndarray]],
    step_size: float,
) -> MultiplierSet:
    """Projected step w <- max(0, w - s E[phi]), eta <- max(0, eta - s psi)."""
    if step_size <= 0:
        raise ValueError("step size must be positive")
    phi_means, psi_vals = constraint_evals
    atoms = [np.maximum(0.0, w - step_size * np.asarray(m)) for w, m in zip(mult.atoms, phi_means)]
    eta = [np.maximum(0.0, e - step_size * np.asarray(p)) for e, p in zip(mult.eta, psi_vals)]
    return MultiplierSet(mult.r0, atoms, eta, mult.dt)


@dataclass
class UzawaLog:
    violations: list[float]
    step_sizes: list[float]
    converged: bool


def uzawa(
    primal_solve: Callable[[MultiplierSet], tuple[ParticleEnsemble, object]],
    constraints: ConstraintSpec,
    mult0: MultiplierSet,
    step_size: float = 0.1,
    max_iter: int = 200,
    tol: float = 1e-6,
    damping: float = 1.0,
) -> tuple[MultiplierSet, ParticleEnsemble, object, UzawaLog]:
    """Dual ascent around a primal solver; the step halves when the worst violation grows.

    ``damping`` blends each projected update with the previous multipliers.
    """
    mult = mult0
    ens, extra = primal_solve(mult)
    worst = max(primal_feasibility(ens, constraints), default=0.0)
    violations, steps = [worst], []
    for _ in range(max_iter):
        if worst < tol:
            return mult, ens, extra, UzawaLog(violations, steps, True)
        proposal = dual_ascent_update(mult, constraints.evaluate(ens), step_size)
        if damping != 1.0:
            proposal = MultiplierSet(
                mult.r0,
                [damping * p + (1 - damping) * w for p, w in zip(proposal.atoms, mult.atoms)],
                [damping * p + (1 - damping) * e for p, e in zip(proposal.eta, mult.eta)],
                mult.dt,
            )
        new_ens, new_extra = primal_solve(proposal)
        new_worst = max(primal_feasibility(new_ens, constraints), default=0.0)
        if new_worst > worst:
            step_size *= 0.5
        mult, ens, extra, worst = proposal, new_ens, new_extra, new_worst
        violations.append(worst)
        steps.append(step_size)
    return mult, ens, extra, UzawaLog(violations, steps, worst < tol)
