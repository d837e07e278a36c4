import itertools
import math

import numpy as np
import pytest

from nmpc_forge import expr as ex
from nmpc_forge import model_io as mio
from nmpc_forge.ocp import Ocp, equal, integral
from nmpc_forge.solver import (
    FlatNlp,
    Qp,
    SolverError,
    SqpOptions,
    kkt_residual,
    solve_qp,
    sqp_solve,
)
from nmpc_forge.transcription import MultipleShooting, transcribe

from conftest import PENDULUM_VALUES, build_pendulum_ocp


def brute_force_qp(qp: Qp):
    """Independent oracle: enumerate candidate active sets of one-sided
    constraints, solve the KKT system of each, keep the best feasible
    point with nonnegative multipliers."""
    n, m = qp.n, qp.m
    rows = []
    for i in range(m):
        if qp.lbA[i] == qp.ubA[i]:
            continue
        if np.isfinite(qp.lbA[i]):
            rows.append((qp.A[i], qp.lbA[i]))
        if np.isfinite(qp.ubA[i]):
            rows.append((-qp.A[i], -qp.ubA[i]))
    eq = [(qp.A[i], qp.lbA[i]) for i in range(m) if qp.lbA[i] == qp.ubA[i]]
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        if np.isfinite(qp.lbx[j]):
            rows.append((e.copy(), qp.lbx[j]))
        if np.isfinite(qp.ubx[j]):
            rows.append((-e.copy(), -qp.ubx[j]))

    def feasible(x):
        return all(c @ x >= b - 1e-8 for c, b in rows)

    best = None
    best_val = np.inf
    K = len(rows)
    n_eq = len(eq)
    for size in range(0, n - n_eq + 1):
        for combo in itertools.combinations(range(K), size):
            C = [r[0] for r in eq] + [rows[i][0] for i in combo]
            dvals = [r[1] for r in eq] + [rows[i][1] for i in combo]
            q = len(C)
            C = np.array(C).reshape(q, n)
            KKT = np.zeros((n + q, n + q))
            KKT[:n, :n] = qp.H
            KKT[:n, n:] = -C.T
            KKT[n:, :n] = C
            rhs = np.concatenate([-qp.c, dvals])
            try:
                sol = np.linalg.solve(KKT, rhs)
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n + n_eq:]
            if np.any(lam < -1e-9) or not feasible(x):
                continue
            val = 0.5 * x @ qp.H @ x + qp.c @ x
            if val < best_val - 1e-12:
                best_val = val
                best = x
    return best


def random_qp(rng, n=None, m=None):
    n = n or int(rng.integers(2, 7))
    m = m or int(rng.integers(1, 9))
    L = rng.standard_normal((n, n))
    H = L @ L.T + 0.1 * np.eye(n)
    c = rng.standard_normal(n)
    A = rng.standard_normal((m, n))
    mid = rng.standard_normal(m)
    half = np.abs(rng.standard_normal(m)) + 0.1
    lbA, ubA = mid - half, mid + half
    for i in range(m):
        if rng.random() < 0.2:
            lbA[i] = ubA[i] = mid[i]
    lbx = np.where(rng.random(n) < 0.4,
                   -np.abs(rng.standard_normal(n)) * 2 - 0.1, -np.inf)
    ubx = np.where(rng.random(n) < 0.4,
                   np.abs(rng.standard_normal(n)) * 2 + 0.1, np.inf)
    return Qp(H, c, A, lbA, ubA, lbx, ubx)


class TestSolveQp:
    def test_bound_hand_case(self):
        qp = Qp(H=2 * np.eye(2), c=np.zeros(2), A=np.zeros((0, 2)), lbA=[],
                ubA=[], lbx=[1.0, -np.inf], ubx=[np.inf, np.inf])
        res = solve_qp(qp)
        assert res.status == "optimal"
        np.testing.assert_allclose(res.x, [1.0, 0.0], atol=1e-12)
        # Active at the lower bound: lam_x balances the gradient Hx = 2.
        assert res.lam_x[0] == pytest.approx(-2.0, abs=1e-10)
        assert res.active_set == [2 * 0 + 2 * 0]  # lower bound of x_0

    def test_unconstrained_minimum(self):
        qp = Qp(np.eye(3), np.zeros(3), np.zeros((0, 3)), [], [],
                [-np.inf] * 3, [np.inf] * 3)
        res = solve_qp(qp)
        assert res.status == "optimal"
        assert np.all(res.x == 0.0)
        assert res.iterations == 0

    def test_equality_only(self):
        qp = Qp(2 * np.eye(2), np.zeros(2), [[1.0, 1.0]], [1.0], [1.0],
                [-np.inf] * 2, [np.inf] * 2)
        res = solve_qp(qp)
        np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-12)
        assert res.lam_A[0] == pytest.approx(-1.0, abs=1e-12)

    def test_inconsistent_bounds_infeasible(self):
        qp = Qp(np.eye(1), np.zeros(1), np.zeros((0, 1)), [], [], [1.0], [0.0])
        assert solve_qp(qp).status == "infeasible"

    def test_inconsistent_rows_infeasible(self):
        qp = Qp(np.eye(1), np.zeros(1), [[1.0], [1.0]], [0.0, 2.0], [0.0, 2.0],
                [-np.inf], [np.inf])
        assert solve_qp(qp).status == "infeasible"

    def test_kkt_conditions_hold(self):
        rng = np.random.default_rng(99)
        for _ in range(25):
            qp = random_qp(rng)
            res = solve_qp(qp)
            if res.status != "optimal":
                continue
            r = qp.H @ res.x + qp.c + qp.A.T @ res.lam_A + res.lam_x
            assert np.abs(r).max() <= 1e-9 * (1.0 + np.abs(qp.c).max())
            assert np.all(qp.A @ res.x >= qp.lbA - 1e-9)
            assert np.all(qp.A @ res.x <= qp.ubA + 1e-9)
            # Complementarity: multipliers only on active sides.
            for i in range(qp.m):
                if qp.lbA[i] == qp.ubA[i]:
                    continue
                ax = qp.A[i] @ res.x
                if res.lam_A[i] > 1e-9:
                    assert ax == pytest.approx(qp.ubA[i], abs=1e-7)
                elif res.lam_A[i] < -1e-9:
                    assert ax == pytest.approx(qp.lbA[i], abs=1e-7)

    def test_matches_brute_force_oracle_subset(self):
        rng = np.random.default_rng(1234)
        checked = 0
        for _ in range(25):
            qp = random_qp(rng)
            res = solve_qp(qp)
            ref = brute_force_qp(qp)
            if ref is None:
                assert res.status == "infeasible"
            else:
                assert res.status == "optimal"
                assert np.abs(res.x - ref).max() <= 1e-6
                checked += 1
        assert checked >= 10

    def test_warm_start_returns_same_solution(self):
        rng = np.random.default_rng(5)
        qp = random_qp(rng, n=6, m=6)
        cold = solve_qp(qp)
        assert cold.status == "optimal"
        warm = solve_qp(qp, active_set=cold.active_set)
        assert warm.status == "optimal"
        np.testing.assert_allclose(warm.x, cold.x, atol=1e-9)
        assert warm.iterations <= cold.iterations


def double_integrator_nlp():
    """min sum u_k^2  s.t.  x_{k+1} = x_k + u_k, x_0 = 1, x_2 = 0."""
    doc = """\
equations:
  inline:
    ode:
      y: w
differential_states:
  - name: y
controls:
  - name: w
"""
    mpc = Ocp(T=2.0)
    mdl = mpc.add_model("integ", mio.bind(mio.parse_model(doc)))
    a = mpc.parameter("x_begin", 1)
    b = mpc.parameter("x_end", 1)
    mpc.add_objective(integral(mdl.w ** 2))
    mpc.subject_to(equal(mpc.at_t0(mdl.x), a))
    mpc.subject_to(equal(mpc.at_tf(mdl.x), b))
    nlp = transcribe(mpc.to_canonical(), MultipleShooting(N=2, intg="rk"))
    p = nlp.pack_parameters({"x_begin": [1.0], "x_end": [0.0]})
    return nlp, p


class TestSqp:
    def test_double_integrator_hand_case(self):
        nlp, p = double_integrator_nlp()
        sol = sqp_solve(nlp, p)
        assert sol.stats.status == "solved"
        u = [sol.w[nlp.u_index(0)][0], sol.w[nlp.u_index(1)][0]]
        np.testing.assert_allclose(u, [-0.5, -0.5], atol=1e-10)
        assert sol.objective == pytest.approx(0.5, abs=1e-10)

    def test_convex_qp_converges_in_one_iteration(self):
        w = ex.sym("w", 3)
        f = ex.FunctionDef("f", [w], [
            w[0] ** 2 + 2 * w[1] ** 2 + 0.5 * w[2] ** 2
            + w[0] * w[1] - w[0] + 3 * w[2]])
        g = ex.FunctionDef("g", [w], [w[0] + w[1] + w[2] - 1.0])
        h = ex.FunctionDef("h", [w], [w[2] - 10.0])
        nlp = FlatNlp(f, g, h)
        rng = np.random.default_rng(0)
        for _ in range(5):
            start = rng.uniform(-5, 5, 3)
            sol = sqp_solve(nlp, np.zeros(0), init=start,
                            opts=SqpOptions(hessian="exact"))
            assert sol.stats.status == "solved"
            assert sol.stats.iterations == 1

    def test_pendulum_workflow_solved(self, pendulum_nlp):
        p = pendulum_nlp.pack_parameters(PENDULUM_VALUES)
        sol = sqp_solve(pendulum_nlp, p)
        assert sol.stats.status == "solved"
        ev = pendulum_nlp.evaluator(p)
        X, U, _ = ev.split(sol.w)
        assert np.abs(U).max() <= 2.0 + 1e-8
        assert np.abs(X[:, 0] - [0.5, 0.0]).max() <= 1e-8
        assert np.abs(X[:, -1]).max() <= 1e-8

    def test_warm_start_efficacy(self, pendulum_nlp):
        # The stored solution must sit at the KKT point to near machine
        # precision for the re-solve step to vanish, hence tight tolerances
        # and a tiny regularization floor here.
        p = pendulum_nlp.pack_parameters(PENDULUM_VALUES)
        tight = SqpOptions(hessian="exact", tol_dual=1e-13, tol_primal=1e-11,
                           reg_floor=1e-12, max_iterations=100)
        sol = sqp_solve(pendulum_nlp, p, opts=tight)
        assert sol.stats.status == "solved"
        re = sqp_solve(pendulum_nlp, p, init=sol, opts=tight)
        assert re.stats.status == "solved"
        assert re.stats.iterations == 1
        assert np.abs(re.w - sol.w).max() <= 1e-12

    def test_merit_never_increases_beyond_armijo(self, pendulum_nlp):
        p = pendulum_nlp.pack_parameters(PENDULUM_VALUES)
        sol = sqp_solve(pendulum_nlp, p)
        assert sol.trace
        for phi0, phi_t, alpha, D, rho in sol.trace:
            assert phi_t <= phi0 + 1e-4 * alpha * D + 1e-12 * (1 + abs(phi0))

    def test_gauss_newton_hessian_is_psd(self, pendulum_nlp):
        p = pendulum_nlp.pack_parameters(PENDULUM_VALUES)
        ev = pendulum_nlp.evaluator(p)
        assert ev.has_gn
        rng = np.random.default_rng(8)
        for _ in range(5):
            w = rng.uniform(-1, 1, pendulum_nlp.n_w)
            H = ev.gn_hess(w)
            np.linalg.cholesky(H + 1e-8 * np.eye(pendulum_nlp.n_w))

    def test_infeasible_bounds_reported(self):
        w = ex.sym("w", 2)
        f = ex.FunctionDef("f", [w], [w[0] ** 2 + w[1] ** 2])
        nlp = FlatNlp(f, lbw=[1.0, 0.0], ubw=[-1.0, 1.0])
        sol = sqp_solve(nlp, np.zeros(0))
        assert sol.stats.status == "infeasible_qp"

    def test_nan_at_initial_point_is_numerical_error(self):
        w = ex.sym("w", 1)
        f = ex.FunctionDef("f", [w], [ex.log(w)])
        nlp = FlatNlp(f)
        sol = sqp_solve(nlp, np.zeros(0), init=np.array([0.0]))
        assert sol.stats.status == "numerical_error"

    def test_bad_options_rejected(self):
        with pytest.raises(SolverError):
            SqpOptions(max_iterations=0)
        with pytest.raises(SolverError):
            SqpOptions(hessian="something")


class TestKktResidual:
    def test_hand_solution_has_tiny_residuals(self):
        nlp, p = double_integrator_nlp()
        sol = sqp_solve(nlp, p, opts=SqpOptions(tol_dual=1e-12, hessian="exact"))
        primal, dual, comp = kkt_residual(
            nlp, sol.w, (sol.lam_g, sol.lam_h, sol.lam_bounds), p)
        assert primal <= 1e-12
        assert dual <= 1e-9
        assert comp <= 1e-12

    def test_violated_point_reports_primal_infeasibility(self):
        nlp, p = double_integrator_nlp()
        w = np.zeros(nlp.n_w)
        primal, dual, comp = kkt_residual(nlp, w, (None, None, None), p)
        assert primal == pytest.approx(1.0)  # x_0 = 1 is violated at w = 0

    def test_trivial_problem_all_zero(self):
        w = ex.sym("w", 2)
        f = ex.FunctionDef("f", [w], [ex.const(0.0)])
        nlp = FlatNlp(f)
        primal, dual, comp = kkt_residual(nlp, np.array([0.3, -0.7]),
                                          (None, None, None), np.zeros(0))
        assert primal == 0.0 and dual == 0.0 and comp == 0.0
