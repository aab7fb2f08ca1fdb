from __future__ import annotations

import numpy as np
import pytest

from cmfc.mvsde import (
    ControlPolicy,
    CostEstimate,
    CostSpec,
    InitialLaw,
    MeanFieldDynamics,
    SimulationError,
    TimeGrid,
    brownian_increments,
    cost_evaluate,
    cost_samples,
    directional_derivative_check,
    empirical_moments,
    picard_iterate,
    simulate_forward,
    spot_check_lipschitz,
)


def linear_dynamics(c, initial, r=1):
    """Scalar b = c0 x + c1 mean_x + c2 u + c3 mean_a, sigma = c4 x + c5 mean_x + c6 u + c7 mean_a."""
    b1, b2, b3, b4, s1, s2, s3, s4 = c

    def drift(t, x, mx, ma, u):
        return b1 * x + b2 * mx + b3 * u + b4 * ma

    def diffusion(t, x, mx, ma, u):
        return (s1 * x + s2 * mx + s3 * u + s4 * ma)[:, :, None]

    def const(v, shape):
        return lambda t, x, mx, ma, u: np.full((x.shape[0],) + shape, v)

    return MeanFieldDynamics(
        1, 1, r, drift, diffusion, initial,
        drift_x=const(b1, (1, 1)), drift_mx=const(b2, (1, 1)),
        drift_u=const(b3, (1, 1)), drift_ma=const(b4, (1, 1)),
        diffusion_x=const(s1, (1, 1, 1)), diffusion_mx=const(s2, (1, 1, 1)),
        diffusion_u=const(s3, (1, 1, 1)), diffusion_ma=const(s4, (1, 1, 1)),
    )


def zero_controls(N, grid):
    return ControlPolicy.open_loop(np.zeros((N, grid.M + 1, 1)))


class TestTimeGrid:
    def test_nodes(self):
        g = TimeGrid(2.0, 4)
        assert g.dt == 0.5
        assert np.array_equal(g.nodes, [0, 0.5, 1, 1.5, 2])

    @pytest.mark.parametrize("T,M", [(0.0, 3), (1.0, 0), (-1.0, 2)])
    def test_invalid(self, T, M):
        with pytest.raises(ValueError):
            TimeGrid(T, M)


class TestIncrements:
    def test_reproducible_and_prefix_stable(self):
        g = TimeGrid(1.0, 5)
        a = brownian_increments(7, 10, g, 2)
        b = brownian_increments(7, 20, g, 2)
        # increment of particle i at step k does not depend on N
        assert np.array_equal(a, b[:10])
        assert not np.array_equal(a, brownian_increments(8, 10, g, 2))

    def test_variance(self):
        g = TimeGrid(1.0, 4)
        dW = brownian_increments(3, 40000, g, 1)
        assert abs(dW.mean()) < 4 * np.sqrt(g.dt / dW.size)
        assert dW.var() == pytest.approx(g.dt, rel=0.02)


class TestSimulateForward:
    def test_zero_dynamics_constant(self):
        g = TimeGrid(1.0, 10)
        dyn = linear_dynamics([0] * 8, InitialLaw.gaussian(0.0, 1.0))
        ens = simulate_forward(dyn, zero_controls(50, g), g, 50, seed=1)
        assert np.array_equal(ens.states, np.repeat(ens.states[:, :1], g.M + 1, axis=1))

    def test_unit_control_gives_time(self):
        g = TimeGrid(1.0, 8)
        dyn = linear_dynamics([0, 0, 1, 0, 0, 0, 0, 0], InitialLaw.point(0.0))
        ens = simulate_forward(dyn, ControlPolicy.open_loop(np.ones((3, 9, 1))), g, 3, seed=0)
        # dt = 1/8 is a dyadic fraction so the sums are exact
        assert np.array_equal(ens.states[0, :, 0], g.nodes)

    def test_mean_ode_every_node(self):
        g = TimeGrid(1.0, 50)
        N = 20000
        dyn = linear_dynamics([0.1, 0.2, 0, 0, 0.3, 0, 0, 0], InitialLaw.gaussian(1.0, 0.04))
        ens = simulate_forward(dyn, zero_controls(N, g), g, N, seed=11)
        x = ens.states[:, :, 0]
        se = x.std(axis=0) / np.sqrt(N)
        # discrete mean recursion m_{k+1} = (1 + 0.3 dt) m_k; its bias vs e^{0.3 t} is far below 1 se here
        exact = np.exp(0.3 * g.nodes)
        assert np.all(np.abs(x.mean(axis=0) - exact) < 3 * se + 1e-12)
        assert x[:, -1].mean() == pytest.approx(1.34986, abs=3 * se[-1] + 2e-3)

    def test_same_step_means_used(self):
        g = TimeGrid(1.0, 1)
        dyn = linear_dynamics([0, 1, 0, 0, 0, 0, 0, 0], InitialLaw.point(0.0))
        x0 = np.array([[1.0], [3.0]])
        ens = simulate_forward(dyn, zero_controls(2, g), g, 2, 0, initial_states=x0)
        assert np.array_equal(ens.states[:, 1, 0], [3.0, 5.0])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_overflow_reports_step(self):
        g = TimeGrid(1.0, 20)
        dyn = MeanFieldDynamics(
            1, 1, 1, lambda t, x, mx, ma, u: 1e200 * x**2, lambda t, x, mx, ma, u: np.zeros((x.shape[0], 1, 1)),
            InitialLaw.point(1.0),
        )
        with pytest.raises(SimulationError) as info:
            simulate_forward(dyn, zero_controls(2, g), g, 2, 0)
        assert info.value.step >= 1
        assert info.value.particle == 0

    def test_needs_two_particles(self):
        g = TimeGrid(1.0, 2)
        dyn = linear_dynamics([0] * 8, InitialLaw.point(0.0))
        with pytest.raises(ValueError):
            simulate_forward(dyn, zero_controls(1, g), g, 1, 0)

    def test_seed_determinism(self):
        g = TimeGrid(1.0, 10)
        dyn = linear_dynamics([0.1, 0.2, 0, 0, 0.3, 0.1, 0, 0], InitialLaw.gaussian(1.0, 0.5))
        a = simulate_forward(dyn, zero_controls(64, g), g, 64, seed=5)
        b = simulate_forward(dyn, zero_controls(64, g), g, 64, seed=5)
        assert np.array_equal(a.states, b.states)

    def test_feedback_policy(self):
        g = TimeGrid(1.0, 4)
        dyn = linear_dynamics([0, 0, 1, 0, 0, 0, 0, 0], InitialLaw.point(1.0))
        pol = ControlPolicy.from_feedback(lambda t, x, mx: -x)
        ens = simulate_forward(dyn, pol, g, 2, 0)
        assert ens.states[0, -1, 0] == pytest.approx(0.75**4)
        assert np.allclose(ens.controls[:, :, 0], -ens.states[:, :, 0])


class TestPicard:
    def test_law_independent_one_iteration(self):
        g = TimeGrid(1.0, 20)
        dyn = linear_dynamics([0.3, 0, 0, 0, 0.2, 0, 0, 0], InitialLaw.gaussian(1.0, 0.1))
        _, log = picard_iterate(dyn, zero_controls(100, g), g, 100, 3)
        assert log.converged
        assert log.distances[1] == 0.0

    def test_matches_direct_scheme(self):
        g = TimeGrid(1.0, 20)
        N = 500
        dyn = linear_dynamics([0.1, 0.2, 0, 0, 0.3, 0, 0, 0], InitialLaw.gaussian(1.0, 0.04))
        ens_p, log = picard_iterate(dyn, zero_controls(N, g), g, N, 9)
        ens_d = simulate_forward(dyn, zero_controls(N, g), g, N, 9)
        assert log.converged
        assert np.sqrt(np.mean((ens_p.states - ens_d.states) ** 2)) < 1e-10
        assert abs(ens_p.states[:, -1].mean() - ens_d.states[:, -1].mean()) < 1e-10

    def test_contraction_monotone(self):
        g = TimeGrid(1.0, 30)
        N = 300
        dyn = linear_dynamics([-0.5, 0.8, 1.0, 0.5, 0.2, 0.3, 0, 0], InitialLaw.gaussian(1.0, 0.04))
        pol = ControlPolicy.from_feedback(lambda t, x, mx: -0.5 * x + 0.2 * mx)
        ens_p, log = picard_iterate(dyn, pol, g, N, 4)
        d = np.array(log.distances)
        assert log.converged
        assert np.all(np.diff(d[1:][d[1:] > 0]) < 0)
        ens_d = simulate_forward(dyn, pol, g, N, 4)
        assert np.sqrt(np.mean((ens_p.states - ens_d.states) ** 2)) < 1e-10

    def test_max_iter_flags(self):
        g = TimeGrid(1.0, 30)
        dyn = linear_dynamics([0, 2.0, 0, 0, 0, 0, 0, 0], InitialLaw.point(1.0))
        _, log = picard_iterate(dyn, zero_controls(4, g), g, 4, 0, max_iter=2)
        assert not log.converged
        assert log.iterations == 2


class TestMoments:
    def _ens(self, x):
        g = TimeGrid(1.0, 1)
        x = np.asarray(x, float).reshape(-1, 1)
        dyn = linear_dynamics([0] * 8, InitialLaw.point(0.0))
        return simulate_forward(dyn, zero_controls(x.shape[0], g), g, x.shape[0], 0, initial_states=x)

    def test_constant(self):
        m = empirical_moments(self._ens([2.5] * 4), 0)
        assert m["mean_x"][0] == 2.5
        assert m["cov_x"][0, 0] == 0.0

    def test_population_variance(self):
        m = empirical_moments(self._ens([-1.0, 1.0]), 1)
        assert m["mean_x"][0] == 0.0
        assert m["cov_x"][0, 0] == 1.0

    def test_normal_mean(self):
        g = TimeGrid(1.0, 1)
        N = 100000
        dyn = linear_dynamics([0] * 8, InitialLaw.gaussian(0.0, 1.0))
        ens = simulate_forward(dyn, zero_controls(N, g), g, N, 21)
        assert abs(empirical_moments(ens, 0)["mean_x"][0]) < 0.02

    def test_step_range(self):
        with pytest.raises(IndexError):
            empirical_moments(self._ens([0.0, 1.0]), 2)


class TestCost:
    def test_unit_running(self):
        g = TimeGrid(1.0, 7)
        dyn = linear_dynamics([0] * 8, InitialLaw.point(0.0))
        ens = simulate_forward(dyn, zero_controls(3, g), g, 3, 0)
        one = lambda t, x, mx, ma, u: np.ones(x.shape[0])
        zero = lambda x, mx: np.zeros(x.shape[0])
        assert cost_evaluate(ens, one, zero) == pytest.approx(1.0, abs=1e-15)

    def test_terminal_only(self):
        g = TimeGrid(1.0, 2)
        dyn = linear_dynamics([0] * 8, InitialLaw.point(2.0))
        ens = simulate_forward(dyn, zero_controls(4, g), g, 4, 0)
        zero = lambda t, x, mx, ma, u: np.zeros(x.shape[0])
        assert cost_evaluate(ens, zero, lambda x, mx: x[:, 0]) == 2.0

    def test_ci_halfwidth(self):
        s = np.array([0.0, 2.0, 0.0, 2.0])
        est = CostEstimate.from_samples(s)
        assert est.mean == 1.0
        assert est.halfwidth == pytest.approx(1.96 * np.std(s, ddof=1) / 2)


def lq_cost(q=1.0, v=1.0, ell=1.0, kappa=0.3):
    """f = (q x^2 + v u^2)/2 + kappa * mean_x * u, g = ell (x - mean_x)^2 / 2."""
    return CostSpec(
        running=lambda t, x, mx, ma, u: 0.5 * (q * x[:, 0] ** 2 + v * u[:, 0] ** 2) + kappa * mx[0] * u[:, 0],
        terminal=lambda x, mx: 0.5 * ell * (x[:, 0] - mx[0]) ** 2,
        running_x=lambda t, x, mx, ma, u: q * x,
        running_mx=lambda t, x, mx, ma, u: kappa * u,
        running_u=lambda t, x, mx, ma, u: v * u + kappa * mx,
        running_ma=lambda t, x, mx, ma, u: np.zeros_like(u),
        terminal_x=lambda x, mx: ell * (x - mx),
        terminal_mx=lambda x, mx: -ell * (x - mx),
    )


class TestDerivative:
    def test_deterministic_quadratic(self):
        g = TimeGrid(1.0, 10)
        N = 2
        dyn = linear_dynamics([0, 0, 1, 0, 0, 0, 0, 0], InitialLaw.point(0.0))
        cost = CostSpec(
            running=lambda t, x, mx, ma, u: u[:, 0] ** 2,
            terminal=lambda x, mx: np.zeros(x.shape[0]),
            running_x=lambda t, x, mx, ma, u: np.zeros_like(x),
            running_mx=lambda t, x, mx, ma, u: np.zeros_like(x),
            running_u=lambda t, x, mx, ma, u: 2 * u,
            running_ma=lambda t, x, mx, ma, u: np.zeros_like(u),
            terminal_x=lambda x, mx: np.zeros_like(x),
            terminal_mx=lambda x, mx: np.zeros_like(x),
        )
        alpha = np.sin(np.arange(11.0))[None, :, None].repeat(N, axis=0)
        rep = directional_derivative_check(
            dyn, ControlPolicy.open_loop(alpha), g, N, 0, cost, np.ones_like(alpha), eps_list=(1e-3,)
        )
        expected = 2 * g.dt * alpha[0, :10, 0].sum()
        assert rep.analytic == pytest.approx(expected, abs=1e-12)
        assert abs(rep.finite_differences[0] - expected) < 1e-8

    def test_zero_direction(self):
        g = TimeGrid(1.0, 5)
        dyn = linear_dynamics([0.1, 0.2, 1, 0.3, 0.2, 0.1, 0.1, 0.05], InitialLaw.gaussian(1.0, 0.04))
        alpha = np.zeros((10, 6, 1))
        rep = directional_derivative_check(
            dyn, ControlPolicy.open_loop(alpha), g, 10, 1, lq_cost(), np.zeros_like(alpha)
        )
        assert rep.analytic == 0.0
        assert rep.finite_differences[0] == 0.0

    def test_mean_field_random_directions(self):
        g = TimeGrid(1.0, 20)
        N = 200
        dyn = linear_dynamics([-0.5, 0.2, 1.0, 0.3, 0.2, 0.1, 0.15, 0.05], InitialLaw.gaussian(1.0, 0.04))
        rng = np.random.default_rng(0)
        alpha = rng.normal(0, 0.5, (N, g.M + 1, 1))
        for _ in range(3):
            K = rng.normal(size=alpha.shape)
            rep = directional_derivative_check(dyn, ControlPolicy.open_loop(alpha), g, N, 2, lq_cost(), K)
            assert rep.relative_errors[0] < 1e-6

    def test_needs_open_loop(self):
        g = TimeGrid(1.0, 2)
        dyn = linear_dynamics([0] * 8, InitialLaw.point(0.0))
        with pytest.raises(ValueError):
            directional_derivative_check(
                dyn, ControlPolicy.from_feedback(lambda t, x, m: x), g, 2, 0, lq_cost(), np.zeros((2, 3, 1))
            )


def test_cost_samples_shape():
    g = TimeGrid(1.0, 3)
    dyn = linear_dynamics([0] * 8, InitialLaw.point(1.0))
    ens = simulate_forward(dyn, zero_controls(5, g), g, 5, 0)
    c = lq_cost()
    assert cost_samples(ens, c.running, c.terminal).shape == (5,)


def test_lipschitz_spot_check():
    g = TimeGrid(1.0, 2)
    dyn = linear_dynamics([0.5, 0.2, 1.0, 0.0, 0.2, 0, 0, 0], InitialLaw.point(0.0))
    est = spot_check_lipschitz(dyn, g)
    # sum of coefficient magnitudes bounds the l1-type quotient
    assert 0 < est["drift"] <= 1.7 + 1e-12
    assert 0 < est["diffusion"] <= 0.2 + 1e-12
