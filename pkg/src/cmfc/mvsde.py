"""Particle approximation of controlled McKean-Vlasov SDEs with mean coupling.

Coefficients see the law of (X_t, alpha_t) only through the first moments
(E[X_t], E[alpha_t]). All callbacks are vectorized over particles:

    x: (N, n)   u: (N, l)   mean_x: (n,)   mean_a: (l,)

and return ``(N, n)`` for the drift and ``(N, n, r)`` for the diffusion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtri

# stream tags for counter-based substreams
_INIT_STREAM = 0
_STEP_STREAM = 1


class SimulationError(FloatingPointError):
    """A particle left the finite range during time stepping."""

    def __init__(self, step: int, particle: int):
        super().__init__(f"non-finite state at step {step}, particle {particle}")
        self.step = step
        self.particle = particle


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if self.T <= 0 or self.M < 1:
            raise ValueError("need T > 0 and M >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt

    def step_of(self, t: float) -> int:
        return int(round(t / self.dt))


@dataclass(frozen=True)
class InitialLaw:
    """Gaussian (mean, variance per coordinate) or point mass (variance zero)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def gaussian(cls, mean, var) -> InitialLaw:
        return cls(np.atleast_1d(np.asarray(mean, float)), np.atleast_1d(np.asarray(var, float)))

    @classmethod
    def point(cls, value) -> InitialLaw:
        value = np.atleast_1d(np.asarray(value, float))
        return cls(value, np.zeros_like(value))

    @property
    def is_point_mass(self) -> bool:
        return bool(np.all(self.var == 0.0))

    def sample(self, N: int, seed: int) -> np.ndarray:
        n = self.mean.shape[0]
        if self.is_point_mass:
            return np.broadcast_to(self.mean, (N, n)).copy()
        z = standard_normals(seed, (_INIT_STREAM,), (N, n))
        return self.mean + np.sqrt(self.var) * z


def standard_normals(seed: int, key: tuple[int, ...], shape: tuple[int, int]) -> np.ndarray:
    """Inverse-CDF normals from a Philox substream keyed by (seed, *key).

    Each entry consumes exactly one 64-bit draw, so the value for a given
    (particle, component) is the same whatever N is.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *key])
    raw = np.random.Philox(ss).random_raw(int(np.prod(shape)))
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u).reshape(shape)


def brownian_increments(seed: int, N: int, grid: TimeGrid, r: int) -> np.ndarray:
    """(N, M, r) increments with N(0, dt I) law, substream per step."""
    dW = step_major(N, grid.M, r)
    sd = np.sqrt(grid.dt)
    for k in range(grid.M):
        dW[:, k, :] = sd * standard_normals(seed, (_STEP_STREAM, k), (N, r))
    return dW


Field = Callable[..., np.ndarray]


@dataclass
class MeanFieldDynamics:
    """Drift b(t, x, mean_x, mean_a, u) and diffusion sigma(...) with optional Jacobians.

    Jacobian callbacks share the coefficient signature. Drift Jacobians
    return (N, n, n) for x / mean_x and (N, n, l) for u / mean_a; diffusion
    Jacobians return (N, n, r, n) and (N, n, r, l).
    """

    n: int
    l: int
    r: int
    drift: Field
    diffusion: Field
    initial: InitialLaw
    drift_x: Field | None = None
    drift_mx: Field | None = None
    drift_u: Field | None = None
    drift_ma: Field | None = None
    diffusion_x: Field | None = None
    diffusion_mx: Field | None = None
    diffusion_u: Field | None = None
    diffusion_ma: Field | None = None
    lipschitz: dict[str, float] = field(default_factory=dict)

    @property
    def has_jacobians(self) -> bool:
        return all(
            f is not None
            for f in (
                self.drift_x,
                self.drift_mx,
                self.drift_u,
                self.drift_ma,
                self.diffusion_x,
                self.diffusion_mx,
                self.diffusion_u,
                self.diffusion_ma,
            )
        )


@dataclass
class ControlPolicy:
    """Open-loop control array (N, M+1, l) or a deterministic feedback (t, x, mean_x) -> (N, l)."""

    controls: np.ndarray | None = None
    feedback: Callable[[float, np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if (self.controls is None) == (self.feedback is None):
            raise ValueError("give exactly one of controls or feedback")

    @classmethod
    def open_loop(cls, controls) -> ControlPolicy:
        return cls(controls=np.asarray(controls, dtype=float))

    @classmethod
    def from_feedback(cls, fn) -> ControlPolicy:
        return cls(feedback=fn)

    @property
    def is_open_loop(self) -> bool:
        return self.controls is not None

    def evaluate(self, k: int, t: float, x: np.ndarray, mean_x: np.ndarray) -> np.ndarray:
        if self.controls is not None:
            return self.controls[:, k, :]
        return np.asarray(self.feedback(t, x, mean_x), dtype=float).reshape(x.shape[0], -1)


@dataclass
class ParticleEnsemble:
    states: np.ndarray  # (N, M+1, n)
    controls: np.ndarray  # (N, M+1, l)
    increments: np.ndarray  # (N, M, r)
    grid: TimeGrid
    seed: int

    @property
    def N(self) -> int:
        return self.states.shape[0]

    def mean_x(self) -> np.ndarray:
        """(M+1, n) empirical mean path."""
        return self.states.mean(axis=0)

    def mean_a(self) -> np.ndarray:
        return self.controls.mean(axis=0)


def step_major(N: int, steps: int, *tail: int) -> np.ndarray:
    """Array of shape (N, steps, *tail) stored step-major so that a[:, k] is contiguous."""
    return np.moveaxis(np.empty((steps, N) + tail), 0, 1)


def _step(dyn, t, x, mx, ma, u, dW, dt):
    b = dyn.drift(t, x, mx, ma, u)
    s = dyn.diffusion(t, x, mx, ma, u)
    return x + b * dt + np.einsum("inr,ir->in", s, dW)


def simulate_forward(
    dyn: MeanFieldDynamics,
    policy: ControlPolicy,
    grid: TimeGrid,
    N: int,
    seed: int,
    increments: np.ndarray | None = None,
    initial_states: np.ndarray | None = None,
) -> ParticleEnsemble:
    """Euler-Maruyama with same-step empirical means (explicit coupling)."""
    if N < 2:
        raise ValueError("need at least two particles")
    dW = brownian_increments(seed, N, grid, dyn.r) if increments is None else increments
    x0 = dyn.initial.sample(N, seed) if initial_states is None else initial_states
    X = step_major(N, grid.M + 1, dyn.n)
    U = step_major(N, grid.M + 1, dyn.l)
    X[:, 0] = x0
    dt = grid.dt
    for k in range(grid.M + 1):
        t = k * dt
        x = X[:, k]
        mx = x.mean(axis=0)
        u = policy.evaluate(k, t, x, mx)
        U[:, k] = u
        if k == grid.M:
            break
        X[:, k + 1] = _step(dyn, t, x, mx, u.mean(axis=0), u, dW[:, k], dt)
        _check_finite(X[:, k + 1], k + 1)
    return ParticleEnsemble(X, U, dW, grid, seed)


def _check_finite(x: np.ndarray, k: int) -> None:
    bad = ~np.isfinite(x).all(axis=1)
    if bad.any():
        raise SimulationError(k, int(np.argmax(bad)))


@dataclass
class PicardLog:
    distances: list[float]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.distances)


def picard_iterate(
    dyn: MeanFieldDynamics,
    policy: ControlPolicy,
    grid: TimeGrid,
    N: int,
    seed: int,
    max_iter: int = 200,
    tol: float = 1e-13,
    increments: np.ndarray | None = None,
) -> tuple[ParticleEnsemble, PicardLog]:
    """Law-freezing fixed-point iteration on shared Brownian increments.

    Iterate n runs the particle system with the means taken from iterate
    n-1; iterate 0 is constant in time at the initial state. ``distances[n-1]``
    is max_k RMS |Y^n_k - Y^{n-1}_k|.
    """
    dW = brownian_increments(seed, N, grid, dyn.r) if increments is None else increments
    x0 = dyn.initial.sample(N, seed)
    dt = grid.dt
    prev_X = np.repeat(x0[:, None, :], grid.M + 1, axis=1)
    prev_U = np.stack(
        [policy.evaluate(k, k * dt, x0, x0.mean(axis=0)) for k in range(grid.M + 1)], axis=1
    )
    log: list[float] = []
    for _ in range(max_iter):
        frozen_mx = prev_X.mean(axis=0)
        frozen_ma = prev_U.mean(axis=0)
        X = step_major(N, grid.M + 1, dyn.n)
        U = step_major(N, grid.M + 1, dyn.l)
        X[:, 0] = x0
        for k in range(grid.M + 1):
            t = k * dt
            u = policy.evaluate(k, t, X[:, k], frozen_mx[k])
            U[:, k] = u
            if k == grid.M:
                break
            X[:, k + 1] = _step(dyn, t, X[:, k], frozen_mx[k], frozen_ma[k], u, dW[:, k], dt)
            _check_finite(X[:, k + 1], k + 1)
        dist = float(np.max(np.sqrt(np.mean(np.sum((X - prev_X) ** 2, axis=2), axis=0))))
        log.append(dist)
        prev_X, prev_U = X, U
        if dist < tol:
            return ParticleEnsemble(X, U, dW, grid, seed), PicardLog(log, True)
    return ParticleEnsemble(prev_X, prev_U, dW, grid, seed), PicardLog(log, False)


def empirical_moments(ens: ParticleEnsemble, k: int) -> dict[str, np.ndarray]:
    """Sample moments at step k (population covariance, divisor N)."""
    if not 0 <= k <= ens.grid.M:
        raise IndexError(f"step {k} outside 0..{ens.grid.M}")
    x = ens.states[:, k]
    mx = x.mean(axis=0)
    c = x - mx
    return {"mean_x": mx, "mean_a": ens.controls[:, k].mean(axis=0), "cov_x": c.T @ c / x.shape[0]}


@dataclass
class CostSpec:
    """Running cost f(t, x, mean_x, mean_a, u) -> (N,) and terminal g(x, mean_x) -> (N,).

    Gradient callbacks (``*_x``, ``*_mx`` -> (N, n); ``*_u``, ``*_ma`` -> (N, l))
    are only needed for derivative checks.
    """

    running: Field
    terminal: Field
    running_x: Field | None = None
    running_mx: Field | None = None
    running_u: Field | None = None
    running_ma: Field | None = None
    terminal_x: Field | None = None
    terminal_mx: Field | None = None


def cost_samples(ens: ParticleEnsemble, running, terminal) -> np.ndarray:
    """Per-particle left-endpoint cost; the mean over particles is the cost estimate."""
    dt = ens.grid.dt
    total = np.zeros(ens.N)
    mx, ma = ens.mean_x(), ens.mean_a()
    for k in range(ens.grid.M):
        total += dt * np.asarray(running(k * dt, ens.states[:, k], mx[k], ma[k], ens.controls[:, k]), float).reshape(-1)
    total += np.asarray(terminal(ens.states[:, -1], mx[-1]), float).reshape(-1)
    return total


def cost_evaluate(ens: ParticleEnsemble, running, terminal) -> float:
    return float(cost_samples(ens, running, terminal).mean())


@dataclass
class CostEstimate:
    mean: float
    halfwidth: float  # 95% normal CI

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> CostEstimate:
        return cls(float(samples.mean()), float(1.96 * samples.std(ddof=1) / np.sqrt(samples.shape[0])))


def cost_gradient(dyn: MeanFieldDynamics, cost: CostSpec, ens: ParticleEnsemble) -> np.ndarray:
    """Exact gradient of the particle cost w.r.t. an open-loop control array.

    Backward sweep of the discrete adjoint of the Euler scheme including the
    mean-field couplings. Returns G of shape (N, M, l) with
    dJ = (1/N) sum_{i,k} <G[i,k], dU[i,k]>.
    """
    if not dyn.has_jacobians:
        raise ValueError("dynamics lack Jacobian callbacks")
    N, M, dt = ens.N, ens.grid.M, ens.grid.dt
    X, U, dW = ens.states, ens.controls, ens.increments
    mx, ma = ens.mean_x(), ens.mean_a()
    p = cost.terminal_x(X[:, M], mx[M]) + cost.terminal_mx(X[:, M], mx[M]).mean(axis=0)
    G = np.zeros((N, M, dyn.l))
    eye = np.eye(dyn.n)
    for k in range(M - 1, -1, -1):
        t, x, u = k * dt, X[:, k], U[:, k]
        args = (t, x, mx[k], ma[k], u)
        w = dW[:, k]
        Jx = eye + dt * dyn.drift_x(*args) + np.einsum("iarc,ir->iac", dyn.diffusion_x(*args), w)
        Jm = dt * dyn.drift_mx(*args) + np.einsum("iarc,ir->iac", dyn.diffusion_mx(*args), w)
        Ju = dt * dyn.drift_u(*args) + np.einsum("iarc,ir->iac", dyn.diffusion_u(*args), w)
        Ja = dt * dyn.drift_ma(*args) + np.einsum("iarc,ir->iac", dyn.diffusion_ma(*args), w)
        G[:, k] = (
            np.einsum("iac,ia->ic", Ju, p)
            + dt * cost.running_u(*args)
            + (np.einsum("iac,ia->ic", Ja, p) + dt * cost.running_ma(*args)).mean(axis=0)
        )
        p = (
            np.einsum("iac,ia->ic", Jx, p)
            + dt * cost.running_x(*args)
            + (np.einsum("iac,ia->ic", Jm, p) + dt * cost.running_mx(*args)).mean(axis=0)
        )
    return G


@dataclass
class DerivativeReport:
    analytic: float
    finite_differences: list[float]
    eps: list[float]
    relative_errors: list[float]


def directional_derivative_check(
    dyn: MeanFieldDynamics,
    policy: ControlPolicy,
    grid: TimeGrid,
    N: int,
    seed: int,
    cost: CostSpec,
    direction: np.ndarray,
    eps_list=(1e-4,),
) -> DerivativeReport:
    """Central differences of J along ``direction`` against the adjoint pairing.

    Both evaluations at +eps and -eps reuse the same increments and initial
    states (common random numbers).
    """
    if not policy.is_open_loop:
        raise ValueError("derivative check needs an open-loop policy")
    dW = brownian_increments(seed, N, grid, dyn.r)
    x0 = dyn.initial.sample(N, seed)
    base = simulate_forward(dyn, policy, grid, N, seed, dW, x0)
    G = cost_gradient(dyn, cost, base)
    K = np.asarray(direction, dtype=float)
    analytic = float(np.sum(G * K[:, : grid.M]) / N)
    fds, rel = [], []
    for eps in eps_list:
        plus = simulate_forward(dyn, ControlPolicy.open_loop(policy.controls + eps * K), grid, N, seed, dW, x0)
        minus = simulate_forward(dyn, ControlPolicy.open_loop(policy.controls - eps * K), grid, N, seed, dW, x0)
        fd = (cost_evaluate(plus, cost.running, cost.terminal) - cost_evaluate(minus, cost.running, cost.terminal)) / (
            2 * eps
        )
        fds.append(float(fd))
        rel.append(abs(fd - analytic) / max(abs(analytic), 1e-300) if analytic != 0 else abs(fd))
    return DerivativeReport(analytic, fds, list(eps_list), rel)


def spot_check_lipschitz(
    dyn: MeanFieldDynamics, grid: TimeGrid, samples: int = 256, seed: int = 0, scale: float = 2.0
) -> dict[str, float]:
    """Largest sampled difference quotient of b and sigma in (x, mean_x, mean_a, u).

    Compare against ``dyn.lipschitz`` (declared moduli); only a sampled lower
    bound on the true modulus.
    """
    rng = np.random.default_rng(seed)
    n, l = dyn.n, dyn.l
    worst = {"drift": 0.0, "diffusion": 0.0}
    for _ in range(samples):
        t = rng.uniform(0, grid.T)
        a = [rng.normal(0, scale, (1, n)), rng.normal(0, scale, n), rng.normal(0, scale, l), rng.normal(0, scale, (1, l))]
        b = [rng.normal(0, scale, (1, n)), rng.normal(0, scale, n), rng.normal(0, scale, l), rng.normal(0, scale, (1, l))]
        dist = sum(float(np.linalg.norm(p - q)) for p, q in zip(a, b))
        if dist == 0:
            continue
        for name, fn in (("drift", dyn.drift), ("diffusion", dyn.diffusion)):
            fa = fn(t, a[0], a[1], a[2], a[3])
            fb = fn(t, b[0], b[1], b[2], b[3])
            worst[name] = max(worst[name], float(np.linalg.norm(fa - fb)) / dist)
    return worst
