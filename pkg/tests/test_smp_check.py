from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmfc.cones import BoxSet
from cmfc.lq_mfc import LqModel, solve_constrained, solve_unconstrained, solve_with_fixed_eta
from cmfc.mf_bsde import AdjointSolution
from cmfc.mvsde import ControlPolicy, CostSpec, InitialLaw, MeanFieldDynamics, TimeGrid, simulate_forward
from cmfc.smp_check import (
    ConstraintSpec,
    ExpectationConstraint,
    MultiplierSet,
    PathwiseConstraint,
    SmpReport,
    dual_ascent_update,
    hamiltonian,
    min_condition_residual,
    normalize,
    support_check,
    uzawa,
)


def scalar_lq_dyn(b1=1.0, b2=1.0, b3=1.0, s1=1.0):
    return LqModel(b1=b1, b2=b2, b3=b3, s1=s1).dynamics()


class TestHamiltonian:
    def test_constant_cost(self):
        dyn = MeanFieldDynamics(
            1, 1, 1, lambda t, x, mx, ma, u: np.zeros_like(x),
            lambda t, x, mx, ma, u: np.zeros((x.shape[0], 1, 1)), InitialLaw.point(0.0),
        )
        f = lambda t, x, mx, ma, u: np.ones(x.shape[0])
        assert hamiltonian(0.0, [0.3], [0.0], [0.0], [0.2], [5.0], [[7.0]], 1.0, dyn, f) == 1.0

    def test_inner_product(self):
        dyn = MeanFieldDynamics(
            2, 1, 1, lambda t, x, mx, ma, u: np.tile([1.0, 0.0], (x.shape[0], 1)),
            lambda t, x, mx, ma, u: np.zeros((x.shape[0], 2, 1)), InitialLaw.point([0.0, 0.0]),
        )
        f = lambda t, x, mx, ma, u: np.zeros(x.shape[0])
        assert hamiltonian(0.0, [0.0, 0.0], [0.0, 0.0], [0.0], [0.0], [2.0, 3.0], np.zeros((2, 1)), 1.0, dyn, f) == 2.0

    def test_lq_hand_value(self):
        dyn = scalar_lq_dyn()
        f = lambda t, x, mx, ma, u: 0.5 * (x[:, 0] ** 2 + u[:, 0] ** 2)
        assert hamiltonian(0.0, [1.0], [1.0], [1.0], [1.0], [1.0], [[1.0]], 1.0, dyn, f) == 5.0

    def test_vectorized(self):
        dyn = scalar_lq_dyn()
        f = lambda t, x, mx, ma, u: 0.5 * (x[:, 0] ** 2 + u[:, 0] ** 2)
        x = np.array([[1.0], [2.0]])
        out = hamiltonian(0.0, x, [1.0], [0.0], x, x, x[:, :, None], 0.0, dyn, f)
        # b = 2x + 1 with u = x and mean 1, sigma = x, y = z = x, r0 = 0
        assert np.allclose(out, (2 * x[:, 0] + 1) * x[:, 0] + x[:, 0] ** 2)


class TestNormalize:
    def test_r0_only(self):
        assert normalize(MultiplierSet(2.0)).r0 == 1.0

    def test_atom_split(self):
        nm = normalize(MultiplierSet(1.0, [np.array([0.0, 1.0, 0.0])]))
        assert nm.r0 == 0.5
        assert nm.atoms[0][1] == 0.5

    def test_abnormal_preserved(self):
        eta = np.full((4, 3), 1.0)
        m = MultiplierSet(0.0, [], [eta], dt=0.5)
        # norm over the two Euler intervals: sqrt(2 * 0.5) = 1, so scale to 4 first
        m = m.scaled(4.0)
        assert m.eta_norm(0) == pytest.approx(4.0)
        nm = normalize(m)
        assert nm.r0 == 0.0
        assert nm.eta_norm(0) == pytest.approx(1.0)

    def test_trivial_bundle(self):
        with pytest.raises(ValueError):
            normalize(MultiplierSet(0.0, [np.zeros(3)]))

    def test_subnormal_r0(self):
        # 1 / r0 overflows here, so normalization must divide rather than scale
        nm = normalize(MultiplierSet(2.2e-311, [np.zeros(4)], [np.zeros((2, 4))], dt=0.2))
        assert nm.r0 == 1.0 and not np.any(np.isnan(nm.eta[0]))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            MultiplierSet(1.0, [np.array([0.0, -1.0])])

    @settings(max_examples=50, deadline=None)
    @given(
        st.floats(0.0, 10.0),
        arrays(float, 6, elements=st.one_of(st.just(0.0), st.floats(1e-6, 5.0))),
        arrays(float, (3, 6), elements=st.one_of(st.just(0.0), st.floats(1e-6, 5.0))),
    )
    def test_support_and_mass(self, r0, w, eta):
        m = MultiplierSet(r0, [w], [eta], dt=0.2)
        if m.total_mass() == 0.0:
            return
        nm = normalize(m)
        assert nm.total_mass() == pytest.approx(1.0, abs=1e-12)
        assert np.array_equal(nm.atoms[0] > 0, w > 0)
        assert np.array_equal(nm.eta[0] > 0, eta > 0)
        assert (nm.r0 > 0) == (r0 > 0)


class TestDualAscent:
    def test_strictly_feasible_stays_zero(self):
        m = MultiplierSet(1.0, [np.zeros(4)], [np.zeros((2, 4))])
        out = dual_ascent_update(m, ([np.ones(4)], [np.ones((2, 4))]), 0.3)
        assert not out.atoms[0].any() and not out.eta[0].any()

    def test_violation_raises_eta(self):
        m = MultiplierSet(1.0, [], [np.zeros((1, 2))])
        out = dual_ascent_update(m, ([], [np.array([[-1.0, 2.0]])]), 0.5)
        assert np.array_equal(out.eta[0], [[0.5, 0.0]])

    def test_step_positive(self):
        with pytest.raises(ValueError):
            dual_ascent_update(MultiplierSet(1.0), ([], []), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(float, 5, elements=st.floats(0.0, 3.0)),
        arrays(float, 5, elements=st.floats(-3.0, 3.0)),
        st.floats(1e-3, 2.0),
    )
    def test_nonnegative(self, w, phi, step):
        out = dual_ascent_update(MultiplierSet(1.0, [w]), ([phi], []), step)
        assert np.all(out.atoms[0] >= 0)

    def test_lq_violation_decreases(self):
        model = LqModel.benchmark(m0=0.0, v0=1.0, h=0.0)
        grid = TimeGrid(1.0, 20)
        N = 2000
        cons = model.constraint_spec(grid)
        state = {"table": None}

        def primal(mult):
            res = solve_with_fixed_eta(model, grid, N, 7, mult.eta[0], table=state["table"])
            state["table"] = res.table
            return res.ensemble, res

        _, _, _, log = uzawa(primal, cons, MultiplierSet.zeros(cons, N, grid.M, grid.dt), max_iter=10, damping=0.5)
        v = np.array(log.violations)
        assert len(v) == 11
        assert np.all(np.diff(v) < 0)


def tiny_ensemble(N=3, M=4, x0=0.0):
    g = TimeGrid(1.0, M)
    dyn = MeanFieldDynamics(
        1, 1, 1, lambda t, x, mx, ma, u: np.zeros_like(x),
        lambda t, x, mx, ma, u: np.zeros((x.shape[0], 1, 1)), InitialLaw.point(x0),
    )
    return dyn, simulate_forward(dyn, ControlPolicy.open_loop(np.zeros((N, M + 1, 1))), g, N, 0)


class TestSupport:
    def test_zero_multipliers(self):
        _, ens = tiny_ensemble()
        cons = ConstraintSpec(
            [ExpectationConstraint(lambda t, x: x[:, 0] + 1, lambda t, x: np.ones_like(x))],
            [PathwiseConstraint(lambda t, x, u: x[:, 0] - u[:, 0] + 2, lambda t, x, u: np.ones_like(x), lambda t, x, u: -np.ones_like(u))],
        )
        support, slack = support_check(MultiplierSet.zeros(cons, 3, 4, 0.25), ens, cons)
        assert support == [0.0] and slack == [0.0]

    def test_inactive_atom(self):
        _, ens = tiny_ensemble(x0=0.5)
        cons = ConstraintSpec([ExpectationConstraint(lambda t, x: x[:, 0], lambda t, x: np.ones_like(x))])
        w = np.zeros(5)
        w[2] = 1.0
        support, _ = support_check(MultiplierSet(1.0, [w], [], 0.25), ens, cons, tol=1e-3)
        assert support[0] == pytest.approx(0.499)


def quadratic_cost():
    return CostSpec(
        running=lambda t, x, mx, ma, u: u[:, 0] ** 2,
        terminal=lambda x, mx: np.zeros(x.shape[0]),
        running_u=lambda t, x, mx, ma, u: 2 * u,
        running_ma=lambda t, x, mx, ma, u: np.zeros_like(u),
    )


class TestMinCondition:
    def _zero_dyn(self):
        z = lambda shape: (lambda t, x, mx, ma, u: np.zeros((x.shape[0],) + shape))
        return MeanFieldDynamics(
            1, 1, 1, z((1,)), z((1, 1)), InitialLaw.point(0.0),
            drift_u=z((1, 1)), drift_ma=z((1, 1)), diffusion_u=z((1, 1, 1)), diffusion_ma=z((1, 1, 1)),
        )

    def test_zero_dynamics_box(self):
        dyn = self._zero_dyn()
        g = TimeGrid(1.0, 4)
        ens = simulate_forward(dyn, ControlPolicy.open_loop(np.zeros((3, 5, 1))), g, 3, 0)
        adj = AdjointSolution(np.zeros((3, 5, 1)), np.zeros((3, 4, 1, 1)), np.zeros(4), np.ones(4, dtype=int))
        r = min_condition_residual(ens, adj, MultiplierSet(1.0), None, dyn, quadratic_cost(), BoxSet.uniform(1, -1, 1))
        assert r == 0.0

    def test_box_projection_zeroes_boundary_push(self):
        dyn = self._zero_dyn()
        g = TimeGrid(1.0, 2)
        # f = -u pushes past the upper bound u = 1; projection absorbs it
        cost = CostSpec(
            running=lambda t, x, mx, ma, u: -u[:, 0],
            terminal=lambda x, mx: np.zeros(x.shape[0]),
            running_u=lambda t, x, mx, ma, u: -np.ones_like(u),
            running_ma=lambda t, x, mx, ma, u: np.zeros_like(u),
        )
        ens = simulate_forward(dyn, ControlPolicy.open_loop(np.ones((2, 3, 1))), g, 2, 0)
        adj = AdjointSolution(np.zeros((2, 3, 1)), np.zeros((2, 2, 1, 1)), np.zeros(2), np.ones(2, dtype=int))
        assert min_condition_residual(ens, adj, MultiplierSet(1.0), None, dyn, cost, BoxSet.uniform(1, -1, 1)) == 0.0
        assert min_condition_residual(ens, adj, MultiplierSet(1.0), None, dyn, cost) == 1.0

    def test_path_kernel_term(self):
        dyn = self._zero_dyn()
        g = TimeGrid(1.0, 4)
        ens = simulate_forward(dyn, ControlPolicy.open_loop(np.zeros((2, 5, 1))), g, 2, 0)
        adj = AdjointSolution(np.zeros((2, 5, 1)), np.zeros((2, 4, 1, 1)), np.zeros(4), np.ones(4, dtype=int))
        cons = ConstraintSpec([ExpectationConstraint(
            lambda t, x: np.ones(x.shape[0]), lambda t, x: np.zeros_like(x),
            kernel=lambda t: np.array([1.0]), outer=lambda s: s, outer_prime=lambda s: np.ones_like(s),
        )])
        w = np.zeros(5)
        w[2] = 0.5
        zero_cost = CostSpec(
            running=lambda t, x, mx, ma, u: np.zeros(x.shape[0]), terminal=lambda x, mx: np.zeros(x.shape[0]),
            running_u=lambda t, x, mx, ma, u: np.zeros_like(u), running_ma=lambda t, x, mx, ma, u: np.zeros_like(u),
        )
        from cmfc.smp_check import control_gradient

        G = control_gradient(ens, adj.Y, adj.Z, MultiplierSet(1.0, [w], [], g.dt), dyn, zero_cost, cons)
        # atoms at s >= t contribute, the atom at t itself included
        assert np.allclose(G[:, :3, 0], -0.5)
        assert np.allclose(G[:, 3, 0], 0.0)


@pytest.fixture(scope="module")
def lq_solution():
    model = LqModel.benchmark()
    grid = TimeGrid(1.0, 50)
    return model, grid, solve_unconstrained(model, grid, 10000, 5)


class TestLqResidual:
    def test_converged_small(self, lq_solution):
        _, _, rep = lq_solution
        assert rep.smp.min_condition_residual < 5e-3
        assert rep.smp.r0 == 1.0

    def test_strong_convexity_detector(self, lq_solution):
        model, grid, rep = lq_solution
        ens = rep.ensemble
        base = rep.smp.min_condition_residual
        for delta in (0.1, -0.05):
            shifted = replace(ens, controls=ens.controls + delta)
            r = min_condition_residual(shifted, rep.adjoint, MultiplierSet(1.0), None, model.dynamics(), model.cost())
            assert r >= model.v * abs(delta) - base

    def test_report_json(self, lq_solution):
        _, _, rep = lq_solution
        d = json.loads(json.dumps(rep.smp.to_dict()))
        assert set(d) == {
            "min_condition_residual", "support_violation", "slackness_integral",
            "normalization_error", "primal_feasibility", "r0",
        }

    def test_report_rejects_negative(self):
        with pytest.raises(ValueError):
            SmpReport(-1.0, [], [], 0.0, [], 1.0)


def test_constrained_slackness():
    model = LqModel.benchmark(m0=0.0, v0=1.0, h=0.0)
    grid = TimeGrid(1.0, 20)
    rep = solve_constrained(model, grid, 3000, 2)
    eta_norm = MultiplierSet(1.0, [], [rep.eta], grid.dt).eta_norm(0)
    assert rep.smp.slackness_integral[0] < 1e-3 * (1 + eta_norm)
    assert (rep.eta > 0).mean() > 0.1
