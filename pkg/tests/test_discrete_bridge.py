from __future__ import annotations

import numpy as np
import pytest

from cmfc.cones import BoxSet
from cmfc.discrete_bridge import (
    AbnormalCertificateError,
    DeterministicScenario,
    PreconditionError,
    compare_multipliers,
    control_only_problem,
    convergence_study,
    discretize,
    lq_adjoint_reference,
    lq_eta_reference_all_active,
    solve_qp,
)
from cmfc.fj_solver import FjCertificate, brute_force_minimize, evaluate_fj_residual, recover_multipliers
from cmfc.lq_mfc import LqModel
from cmfc.mvsde import TimeGrid

DET = dict(s1=0.0, s2=0.0, s3=0.0, s4=0.0, v0=0.0)


def det_model(**over):
    return LqModel.benchmark(**{**DET, **over})


def single_step_scenario():
    return DeterministicScenario(
        1, 1, 1.0, np.array([0.0]),
        b=lambda t, x, u: u.copy(),
        b_x=lambda t, x, u: np.zeros((1, 1)),
        b_u=lambda t, x, u: np.ones((1, 1)),
        f=lambda t, x, u: u[0] ** 2,
        f_x=lambda t, x, u: np.zeros(1),
        f_u=lambda t, x, u: 2 * u,
        g=lambda x: x[0] ** 2,
        g_x=lambda x: 2 * x,
    )


def solve(model, M):
    grid = TimeGrid(model.T, M)
    prob = discretize(DeterministicScenario.from_lq(model), grid)
    z = solve_qp(prob)
    return grid, prob, z, recover_multipliers(prob.nlp, z)


class TestDiscretize:
    def test_single_step_shape(self):
        prob = discretize(single_step_scenario(), TimeGrid(1.0, 1))
        assert prob.dim == 3
        assert [prob.nlp.eval_equality(j, np.zeros(3))[0].size for j in range(2)] == [1, 1]
        assert not prob.nlp.inequalities

    def test_single_step_optimum(self):
        # objective u^2 dt + (dt u)^2 with x_0 = 0: minimum at u = 0
        prob = discretize(single_step_scenario(), TimeGrid(1.0, 1))
        z = solve_qp(prob)
        assert np.allclose(z, 0.0, atol=1e-12)
        val, grad = prob.nlp.eval_objective(np.array([0.0, 2.0, 2.0]))
        assert val == pytest.approx(4.0 + 4.0)
        assert np.allclose(grad, [0.0, 4.0, 4.0])

    def test_analytic_jacobians(self):
        prob = discretize(DeterministicScenario.from_lq(det_model(h=0.4)), TimeGrid(1.0, 4))
        rng = np.random.default_rng(0)
        z = rng.normal(size=prob.dim)
        e = 1e-6
        for fn in [lambda w: prob.nlp.eval_equality(1, w), lambda w: prob.nlp.eval_inequality(0, w)]:
            _, jac = fn(z)
            fd = np.column_stack([(fn(z + e * d)[0] - fn(z - e * d)[0]) / (2 * e) for d in np.eye(prob.dim)])
            assert np.allclose(jac, fd, atol=1e-8)
        _, grad = prob.nlp.eval_objective(z)
        fd = [(prob.nlp.eval_objective(z + e * d)[0] - prob.nlp.eval_objective(z - e * d)[0]) / (2 * e) for d in np.eye(prob.dim)]
        assert np.allclose(grad, fd, atol=1e-7)

    def test_path_constraint_rows(self):
        M = 6
        prob = discretize(DeterministicScenario.from_lq(det_model(h=0.5)), TimeGrid(1.0, M))
        assert len(prob.nlp.inequalities) == 1
        blk = prob.nlp.inequalities[0]
        assert blk.cone.dim == M
        val, _ = prob.nlp.eval_inequality(0, np.zeros(prob.dim))
        assert val.shape == (M,)

    @pytest.mark.parametrize("over", [{"s1": 0.2}, {"v0": 0.1}, {"s4": 0.3}])
    def test_stochastic_rejected(self, over):
        with pytest.raises(PreconditionError):
            DeterministicScenario.from_lq(det_model(**over))


class TestSolveQp:
    def test_two_steps_vs_brute_force(self):
        model = det_model()
        grid = TimeGrid(1.0, 2)
        sc = DeterministicScenario.from_lq(model)
        prob = discretize(sc, grid)
        _, U = prob.split(solve_qp(prob))
        box = BoxSet(np.full(2, -1.5), np.full(2, 0.5))
        u_bf = brute_force_minimize(control_only_problem(sc, grid, box), 201)
        assert np.max(np.abs(U.ravel() - u_bf)) <= 2.0 / 200

    def test_control_only_objective_agrees(self):
        sc = DeterministicScenario.from_lq(det_model())
        grid = TimeGrid(1.0, 5)
        prob = discretize(sc, grid)
        z = solve_qp(prob)
        _, U = prob.split(z)
        red = control_only_problem(sc, grid, BoxSet.whole_space(5))
        val, grad = red.eval_objective(U.ravel())
        assert val == pytest.approx(prob.nlp.eval_objective(z)[0], rel=1e-12)
        assert np.max(np.abs(grad)) < 1e-12

    def test_dynamics_satisfied(self):
        _, prob, z, _ = solve(det_model(), 12)
        assert np.max(np.abs(prob.nlp.eval_equality(1, z)[0])) < 1e-13

    def test_dual_route_matches_enumeration(self):
        model = det_model(m0=-1.0, h=-0.8)
        prob = discretize(DeterministicScenario.from_lq(model), TimeGrid(1.0, 10))
        z_enum = solve_qp(prob)
        z_dual = solve_qp(prob, enumeration_limit=0)
        assert np.max(np.abs(z_enum - z_dual)) < 1e-10

    def test_constraint_partially_active(self):
        model = det_model(m0=-1.0, h=-0.8)
        _, prob, z, cert = solve(model, 20)
        slack = -prob.nlp.eval_inequality(0, z)[0]
        lam = cert.lambdas[0]
        assert slack.min() > -1e-12
        assert np.max(np.abs(lam * slack)) < 1e-12
        assert (lam > 0).any() and (slack > 1e-3).any()

    @pytest.mark.parametrize("M", [1, 2, 5, 10, 17, 25])
    @pytest.mark.parametrize("over", [{}, {"m0": -1.0, "h": 0.0}, {"m0": -1.0, "h": -0.8}])
    def test_stationarity(self, M, over):
        _, prob, z, cert = solve(det_model(**over), M)
        rep = evaluate_fj_residual(prob.nlp, z, cert)
        assert rep.stationarity_residual < 1e-8
        assert cert.r0 > 0


class TestCompare:
    def test_adjoint_order_one(self):
        model = det_model()
        errs = []
        for M in (25, 50):
            grid, prob, z, cert = solve(model, M)
            ref = lq_adjoint_reference(model, grid)["Y"][:, None]
            errs.append(compare_multipliers(cert, ref, prob, z).sup_error)
        assert 0.35 <= errs[1] / errs[0] <= 0.65

    def test_zero_cost(self):
        model = det_model(q=0.0, ell=0.0)
        grid, prob, z, cert = solve(model, 10)
        cmp = compare_multipliers(cert, lq_adjoint_reference(model, grid)["Y"][:, None], prob, z)
        assert not cmp.multipliers.any()
        assert cmp.sup_error == 0.0

    def test_rescaling_undoes_normalization(self):
        grid, prob, z, cert = solve(det_model(), 10)
        cmp = compare_multipliers(cert, np.zeros((11, 1)), prob, z)
        assert cmp.scaling_factor == pytest.approx(1.0 / cert.r0)
        # r0 = 1 after rescaling, so the final row is g_x(x_M) = ell x_M exactly
        X, _ = prob.split(z)
        assert cmp.multipliers[-1, 0] == pytest.approx(X[-1, 0], rel=1e-10)

    def test_abnormal(self):
        cert = FjCertificate(0.0, [], [np.zeros(1), np.ones(3)], np.zeros(7))
        prob = discretize(DeterministicScenario.from_lq(det_model()), TimeGrid(1.0, 3))
        with pytest.raises(AbnormalCertificateError, match="abnormal certificate"):
            compare_multipliers(cert, np.zeros((4, 1)), prob)

    def test_accepts_adjoint_solution(self):
        class Sol:
            Y = np.ones((3, 6, 1))

        grid, prob, z, cert = solve(det_model(q=0.0, ell=0.0), 5)
        assert compare_multipliers(cert, Sol(), prob).sup_error == pytest.approx(1.0)

    def test_eta_on_active_arc(self):
        model = det_model(m0=-1.0, h=0.0)
        errs = []
        for M in (20, 40, 80):
            grid, prob, z, cert = solve(model, M)
            ref = lq_eta_reference_all_active(model, grid)
            assert np.all(ref["eta"] > 0)
            _, U = prob.split(z)
            assert np.max(np.abs(U)) < 1e-12
            cmp = compare_multipliers(cert, ref["Y"][:, None], prob, z)
            errs.append(np.max(np.abs(cmp.inequality_densities[0] - ref["eta"][:M])))
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 0.01


class TestConvergenceStudy:
    def test_benchmark_slope(self):
        tab = convergence_study(det_model(), [1 / 10, 1 / 20, 1 / 40, 1 / 80])
        assert 0.8 <= tab.slope <= 1.2
        assert all(a > b for a, b in zip(tab.sup_error, tab.sup_error[1:]))
        assert max(tab.transversality) < 1e-12

    def test_transversality_vs_terminal_gradient(self):
        model = det_model()
        grid, prob, z, cert = solve(model, 80)
        cmp = compare_multipliers(cert, lq_adjoint_reference(model, grid)["Y"][:, None], prob, z)
        X, _ = prob.split(z)
        gx = model.ell * X[-1, 0]
        assert abs(cmp.multipliers[-1, 0] - gx) <= 0.05 * abs(gx)
        # also close to the continuous terminal gradient
        xT = lq_adjoint_reference(model, grid)["x"][-1]
        assert abs(cmp.multipliers[-1, 0] - model.ell * xT) <= 0.05 * abs(model.ell * xT)

    def test_single_dt(self):
        tab = convergence_study(det_model(), [0.1])
        assert len(tab.rows()) == 1 and tab.slope is None

    def test_exact_problem_has_no_slope(self):
        tab = convergence_study(det_model(q=0.0, ell=0.0), [0.1, 0.05])
        assert max(tab.sup_error) < 1e-11
        assert tab.slope is None and tab.order_estimate == [None, None]

    def test_increasing_rejected(self):
        with pytest.raises(ValueError):
            convergence_study(det_model(), [0.05, 0.1])
