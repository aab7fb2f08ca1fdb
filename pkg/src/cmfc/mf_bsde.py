"""Backward Euler solver for mean-field adjoint BSDEs with multiplier terms.

Recursion on the particle ensemble, for k = M-1, ..., 0::

    Yt_{k+1} = Y_{k+1} - sum_i grad_x phi^i(t_{k+1}, X_{k+1}) w^i_{k+1}
    (E_k, Z_k) = least squares of Yt_{k+1} on [B(X_k), B(X_k) dW_k]
    Y_k = E_k + dt * (driver(t_k, ..., E_k, mean E_k, Z_k, mean Z_k)
                      - sum_j grad_x psi^j(t_k, X_k, u_k) eta^j_k)

so dY = -driver dt + (constraint terms) + Z dW. An atom at node k enters
Y at nodes before k only; ``Y[:, k]`` is the right limit at t_k.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .mvsde import ParticleEnsemble, step_major
from .smp_check import ConstraintSpec, MultiplierSet


class RegressionError(np.linalg.LinAlgError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class DriverSpec:
    """driver(t, x, mean_x, mean_a, u, y, mean_y, z, mean_z) -> (N, n); terminal(x, mean_x) -> (N, n).

    Shapes: y (N, n), mean_y (n,), z (N, n, r), mean_z (n, r).
    """

    driver: Callable[..., np.ndarray]
    terminal: Callable[..., np.ndarray]
    affine: bool = True


@dataclass(frozen=True)
class RegressionBasis:
    """Monomials of the state up to total degree ``degree``, constant included."""

    degree: int = 1

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")

    def design(self, x: np.ndarray, degree: int | None = None) -> np.ndarray:
        d = self.degree if degree is None else degree
        N, n = x.shape
        cols = [np.ones(N)]
        if n == 1:
            for _ in range(d):
                cols.append(cols[-1] * x[:, 0])
            return np.column_stack(cols)
        for deg in range(1, d + 1):
            for combo in itertools.combinations_with_replacement(range(n), deg):
                cols.append(np.prod(x[:, combo], axis=1))
        return np.column_stack(cols)


@dataclass
class AdjointSolution:
    Y: np.ndarray  # (N, M+1, n)
    Z: np.ndarray  # (N, M, n, r)
    regression_residuals: np.ndarray  # (M,)
    degrees: np.ndarray  # (M,) basis degree used per step
    atoms: dict[int, np.ndarray] = field(default_factory=dict)


def _joint_design(B: np.ndarray, dW: np.ndarray) -> np.ndarray:
    return np.hstack([B] + [B * dW[:, j : j + 1] for j in range(dW.shape[1])])


def least_squares(D: np.ndarray, target: np.ndarray, cond_limit: float = 1e13):
    """Column-scaled normal equations with one refinement sweep.

    Returns None when the scaled Gram matrix is numerically singular.
    """
    scale = np.sqrt(np.einsum("ij,ij->j", D, D))
    scale[scale == 0] = 1.0
    Ds = D / scale
    G = Ds.T @ Ds
    w = np.linalg.eigvalsh(G)
    if w[0] <= w[-1] / cond_limit:
        return None
    coef = np.linalg.solve(G, Ds.T @ target)
    coef += np.linalg.solve(G, Ds.T @ (target - Ds @ coef))
    return coef / scale.reshape((-1,) + (1,) * (coef.ndim - 1))


def _fit(B: np.ndarray, dW: np.ndarray, target: np.ndarray, step: int):
    """Joint regression; returns (conditional mean (N, n), Z (N, n, r), fitted values)."""
    D = _joint_design(B, dW)
    coef = least_squares(D, target)
    if coef is None:
        return None
    p = B.shape[1]
    cond = B @ coef[:p]
    Z = np.stack([B @ coef[p * (j + 1) : p * (j + 2)] for j in range(dW.shape[1])], axis=2)
    return cond, Z, D @ coef


def _regress(basis: RegressionBasis, x, dW, target, step):
    for deg in range(basis.degree, -1, -1):
        out = _fit(basis.design(x, deg), dW, target, step)
        if out is not None:
            return (*out, deg)
    raise RegressionError("rank-deficient regression design", step)


def _psi_term(k, ens, mult, constraints) -> np.ndarray:
    out = np.zeros((ens.N, ens.states.shape[2]))
    if mult is None or constraints is None:
        return out
    t = k * ens.grid.dt
    for c, eta in zip(constraints.pathwise, mult.eta):
        out += c.grad_x(t, ens.states[:, k], ens.controls[:, k]) * eta[:, k, None]
    return out


def _atom_term(k, ens, mult, constraints) -> np.ndarray:
    out = np.zeros((ens.N, ens.states.shape[2]))
    if mult is None or constraints is None:
        return out
    t = k * ens.grid.dt
    for c, w in zip(constraints.expectation, mult.atoms):
        if w[k] != 0.0:
            out += c.grad_x(t, ens.states[:, k]) * w[k]
    return out


def solve_backward(
    ens: ParticleEnsemble,
    spec: DriverSpec,
    mult: MultiplierSet | None = None,
    constraints: ConstraintSpec | None = None,
    basis: RegressionBasis | None = None,
) -> AdjointSolution:
    """Explicit backward recursion with regression conditional expectations."""
    basis = basis or RegressionBasis()
    if mult is not None and mult.atoms and len(mult.atoms[0]) != ens.grid.M + 1:
        raise ValueError("multipliers and ensemble live on different grids")
    N, M, dt = ens.N, ens.grid.M, ens.grid.dt
    n, r = ens.states.shape[2], ens.increments.shape[2]
    X, U, dW = ens.states, ens.controls, ens.increments
    mx, ma = ens.mean_x(), ens.mean_a()
    Y = step_major(N, M + 1, n)
    Z = step_major(N, M, n, r)
    resid = np.empty(M)
    degrees = np.empty(M, dtype=int)
    Y[:, M] = spec.terminal(X[:, M], mx[M])
    for k in range(M - 1, -1, -1):
        t = k * dt
        target = Y[:, k + 1] - _atom_term(k + 1, ens, mult, constraints)
        cond, Zk, fitted, deg = _regress(basis, X[:, k], dW[:, k], target, k)
        drv = spec.driver(t, X[:, k], mx[k], ma[k], U[:, k], cond, cond.mean(axis=0), Zk, Zk.mean(axis=0))
        Y[:, k] = cond + dt * (drv - _psi_term(k, ens, mult, constraints))
        if not np.all(np.isfinite(Y[:, k])):
            raise FloatingPointError(f"non-finite adjoint at step {k}")
        Z[:, k] = Zk
        resid[k] = np.sqrt(np.mean((target - fitted) ** 2))
        degrees[k] = deg
    return AdjointSolution(Y, Z, resid, degrees)


def _atom_effect(atoms: dict[int, np.ndarray], shape) -> np.ndarray:
    N, M1, n = shape
    jumps = np.zeros(shape)
    for k, v in atoms.items():
        jumps[:, k] += np.broadcast_to(v, (N, n))
    # node j collects atoms strictly after j
    tail = np.cumsum(jumps[:, ::-1], axis=1)[:, ::-1]
    out = np.zeros(shape)
    out[:, :-1] = tail[:, 1:]
    return out


def apply_measure_atoms(solution: AdjointSolution, atoms) -> AdjointSolution:
    """Add jump contributions of atoms ``[(step, vector), ...]`` to Y.

    Node j receives the sum of vectors at steps > j, so Y jumps by the atom
    vector when crossing the atom node backward. Atoms at the same step are
    merged. The result records its atoms, and a second call replaces the
    previous set rather than stacking on it, so repeated application of the
    same list is a no-op. Exact when the driver does not depend on y.
    """
    M = solution.Y.shape[1] - 1
    n = solution.Y.shape[2]
    merged: dict[int, np.ndarray] = {}
    for step, vec in atoms:
        if not 0 <= step <= M:
            raise IndexError(f"atom step {step} outside 0..{M}")
        vec = np.asarray(vec, dtype=float)
        vec = np.broadcast_to(vec, vec.shape[:-1] + (n,)) if vec.ndim else np.full(n, float(vec))
        merged[step] = merged.get(step, 0.0) + vec
    base = solution.Y - _atom_effect(solution.atoms, solution.Y.shape)
    Y = base + _atom_effect(merged, solution.Y.shape)
    return replace(solution, Y=Y, atoms=merged)


def bsde_residual(
    ens: ParticleEnsemble,
    spec: DriverSpec,
    solution: AdjointSolution,
    mult: MultiplierSet | None = None,
    constraints: ConstraintSpec | None = None,
    basis: RegressionBasis | None = None,
    per_step: bool = False,
):
    """RMS of the projected one-step residual divided by dt.

    The residual Y_k - Yt_{k+1} + Z_k dW_k - dt (driver(Y_k, Z_k) - psi terms)
    is projected onto the span of [B(X_k), B(X_k) dW_k] before averaging, which
    removes the martingale noise of Yt_{k+1} and keeps the consistency error.
    """
    basis = basis or RegressionBasis()
    M, dt = ens.grid.M, ens.grid.dt
    X, U, dW = ens.states, ens.controls, ens.increments
    mx, ma = ens.mean_x(), ens.mean_a()
    Y, Z = solution.Y, solution.Z
    out = np.empty(M)
    for k in range(M):
        t = k * dt
        target = Y[:, k + 1] - _atom_term(k + 1, ens, mult, constraints)
        noise = np.einsum("inr,ir->in", Z[:, k], dW[:, k])
        drv = spec.driver(t, X[:, k], mx[k], ma[k], U[:, k], Y[:, k], Y[:, k].mean(axis=0), Z[:, k], Z[:, k].mean(axis=0))
        R = (Y[:, k] - target + noise - dt * (drv - _psi_term(k, ens, mult, constraints))) / dt
        deg = int(solution.degrees[k]) if k < len(solution.degrees) else basis.degree
        D = _joint_design(basis.design(X[:, k], deg), dW[:, k])
        coef = least_squares(D, R)
        if coef is None:
            coef = np.linalg.lstsq(D, R, rcond=None)[0]
        out[k] = np.mean(np.sum((D @ coef) ** 2, axis=1))
    total = float(np.sqrt(out.mean()))
    return (total, np.sqrt(out)) if per_step else total


def superposition_gap(spec: DriverSpec, n: int, r: int, l: int, samples: int = 16, seed: int = 0) -> float:
    """Largest deviation from affinity of the driver in (y, mean_y, z, mean_z) on random inputs."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(samples, n))
    u = rng.normal(size=(samples, l))
    mx, ma = rng.normal(size=n), rng.normal(size=l)

    def call(y, z):
        return spec.driver(0.3, x, mx, ma, u, y, y.mean(axis=0), z, z.mean(axis=0))

    y1, y2 = rng.normal(size=(2, samples, n))
    z1, z2 = rng.normal(size=(2, samples, n, r))
    lam = 0.37
    mix = call(lam * y1 + (1 - lam) * y2, lam * z1 + (1 - lam) * z2)
    return float(np.max(np.abs(mix - lam * call(y1, z1) - (1 - lam) * call(y2, z2))))
