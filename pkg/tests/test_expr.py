import math

import numpy as np
import pytest

from nmpc_forge import expr as ex


def pendulum_rhs():
    """Damped pendulum with torque input; the stock nonlinear test function."""
    x = ex.sym("x", 2)
    u = ex.sym("u", 1)
    phi, dphi = x[0], x[1]
    g, m, c, length = 9.81, 0.2, 0.1, 2.0
    ddphi = -(g / length) * ex.sin(phi) - c * dphi + u[0] / (m * length**2)
    return ex.FunctionDef("pendulum_rhs", [x, u], [ex.concat(dphi, ddphi)])


def central_fd(f, inputs, output_index, input_index, h=1e-6):
    """Independent derivative oracle: central differences on feval."""
    base = [np.asarray(v, dtype=float).copy() for v in inputs]
    n_in = base[input_index].size
    n_out = f.outputs[output_index].n
    jac = np.zeros((n_out, n_in))
    for j in range(n_in):
        hi = [v.copy() for v in base]
        lo = [v.copy() for v in base]
        hi[input_index][j] += h
        lo[input_index][j] -= h
        fp = ex.feval(f, hi)[output_index]
        fm = ex.feval(f, lo)[output_index]
        jac[:, j] = (fp - fm) / (2 * h)
    return jac


class TestSym:
    def test_basic(self):
        s = ex.sym("phi", 1)
        assert s.kind == "sym" and s.n == 1 and s.name == "phi"

    def test_concat_length(self):
        e = ex.concat(ex.sym("x", 2), ex.sym("u", 1))
        assert e.n == 3

    def test_empty_name_rejected(self):
        with pytest.raises(ex.ExprError):
            ex.sym("", 1)

    def test_bad_identifier_rejected(self):
        with pytest.raises(ex.ExprError):
            ex.sym("a b", 1)
        with pytest.raises(ex.ExprError):
            ex.sym("1x", 1)

    def test_nonpositive_length_rejected(self):
        with pytest.raises(ex.ExprError):
            ex.sym("x", 0)

    def test_same_name_distinct_nodes(self):
        assert ex.sym("x", 1) is not ex.sym("x", 1)


class TestEval:
    def test_double_angle_identity(self):
        # 2 cos(phi) sin(phi) == sin(2 phi); oracle value from math.sin.
        phi = ex.sym("phi", 1)
        f = ex.FunctionDef("f", [phi], [2 * ex.cos(phi) * ex.sin(phi)])
        (val,) = ex.feval(f, [[0.3]])
        assert val[0] == pytest.approx(math.sin(0.6), abs=1e-15)

    def test_identity_function(self):
        x = ex.sym("x", 2)
        f = ex.FunctionDef("id", [x], [x])
        (val,) = ex.feval(f, [[1.0, 2.0]])
        assert val.tolist() == [1.0, 2.0]

    def test_division_by_zero_gives_inf(self):
        x = ex.sym("x", 1)
        f = ex.FunctionDef("f", [x], [x / ex.const(0.0)])
        (val,) = ex.feval(f, [[1.0]])
        assert val[0] == math.inf

    def test_log_of_negative_gives_nan(self):
        x = ex.sym("x", 1)
        f = ex.FunctionDef("f", [x], [ex.log(x)])
        (val,) = ex.feval(f, [[-1.0]])
        assert math.isnan(val[0])

    def test_length_mismatch_rejected(self):
        x = ex.sym("x", 2)
        f = ex.FunctionDef("f", [x], [x])
        with pytest.raises(ex.ExprError):
            ex.feval(f, [[1.0, 2.0, 3.0]])

    def test_eval_is_pure(self):
        f = pendulum_rhs()
        a = ex.feval(f, [[0.5, 0.1], [1.0]])[0]
        b = ex.feval(f, [[0.5, 0.1], [1.0]])[0]
        assert a.tobytes() == b.tobytes()

    def test_batched_eval_matches_pointwise(self):
        f = pendulum_rhs()
        rng = np.random.default_rng(7)
        xs = rng.uniform(-2, 2, size=(2, 11))
        us = rng.uniform(-2, 2, size=(1, 11))
        batch = f(xs, us)[0]
        for k in range(11):
            single = ex.feval(f, [xs[:, k], us[:, k]])[0]
            assert np.array_equal(batch[:, k], single)

    def test_free_symbol_rejected(self):
        x = ex.sym("x", 1)
        y = ex.sym("y", 1)
        with pytest.raises(ex.ExprError):
            ex.FunctionDef("f", [x], [x + y])


class TestJacobian:
    def test_double_angle_derivative_at_zero(self):
        phi = ex.sym("phi", 1)
        f = ex.FunctionDef("f", [phi], [2 * ex.cos(phi) * ex.sin(phi)])
        j = ex.jacobian(f, 0, 0)
        (val,) = ex.feval(j, [[0.0]])
        assert val[0] == pytest.approx(2.0, abs=1e-14)
        fd = central_fd(f, [[0.0]], 0, 0)
        assert val[0] == pytest.approx(fd[0, 0], abs=1e-8)

    def test_identity_jacobian(self):
        x = ex.sym("x", 2)
        f = ex.FunctionDef("id", [x], [x])
        j = ex.jacobian(f, 0, 0)
        (val,) = ex.feval(j, [[3.0, -4.0]])
        assert val.tolist() == [1.0, 0.0, 0.0, 1.0]

    def test_product_rule_partial(self):
        x = ex.sym("x", 1)
        y = ex.sym("y", 1)
        f = ex.FunctionDef("f", [x, y], [x * y])
        j = ex.jacobian(f, 0, 0)
        (val,) = ex.feval(j, [[3.0], [5.0]])
        assert val[0] == 5.0

    def test_forward_and_reverse_agree(self):
        f = pendulum_rhs()
        point = [[0.4, -0.3], [0.7]]
        jf = ex.feval(ex.jacobian(f, 0, 0, mode="forward"), point)[0]
        jr = ex.feval(ex.jacobian(f, 0, 0, mode="reverse"), point)[0]
        np.testing.assert_allclose(jf, jr, rtol=1e-14, atol=1e-15)

    def test_matches_fd_on_seeded_corpus(self):
        # Scalar-output corpus checked against central differences.
        x = ex.sym("x", 3)
        corpus = [
            ex.FunctionDef("q", [x], [x[0] ** 2 + 3 * x[1] ** 2 + x[2] ** 2]),
            ex.FunctionDef(
                "trig", [x], [ex.sin(x[0]) * ex.cos(x[1]) + ex.exp(0.3 * x[2])]
            ),
            ex.FunctionDef(
                "mix", [x], [x[0] * x[1] / (2 + ex.cos(x[2])) + ex.sqrt(x[0] ** 2 + 4)]
            ),
        ]
        rng = np.random.default_rng(42)
        for f in corpus:
            j = ex.jacobian(f, 0, 0)
            for _ in range(100):
                pt = rng.uniform(-2.0, 2.0, size=3)
                jv = ex.feval(j, [pt])[0]
                fd = central_fd(f, [pt], 0, 0)[0]
                assert np.all(np.abs(jv - fd) <= 1e-6 * (1.0 + np.abs(jv)))

    def test_slice_and_concat_derivatives(self):
        x = ex.sym("x", 3)
        f = ex.FunctionDef("f", [x], [ex.concat(x[2] * 2.0, x[0] + x[1])])
        j = ex.feval(ex.jacobian(f, 0, 0), [[1.0, 2.0, 3.0]])[0].reshape(2, 3)
        np.testing.assert_array_equal(j, [[0, 0, 2], [1, 1, 0]])


class TestHessian:
    def test_diagonal_quadratic(self):
        x = ex.sym("x", 2)
        f = ex.FunctionDef("f", [x], [x[0] ** 2 + 3 * x[1] ** 2])
        h = ex.feval(ex.hessian(f), [[0.7, -1.1]])[0].reshape(2, 2)
        np.testing.assert_array_equal(h, [[2.0, 0.0], [0.0, 6.0]])

    def test_linear_has_zero_hessian(self):
        x = ex.sym("x", 3)
        f = ex.FunctionDef("f", [x], [x[0] - 2 * x[1] + 0.5 * x[2]])
        h = ex.feval(ex.hessian(f), [[1.0, 2.0, 3.0]])[0]
        assert np.all(h == 0.0)

    def test_bilinear(self):
        x = ex.sym("x", 2)
        f = ex.FunctionDef("f", [x], [x[0] * x[1]])
        h = ex.feval(ex.hessian(f), [[2.0, 5.0]])[0].reshape(2, 2)
        np.testing.assert_array_equal(h, [[0.0, 1.0], [1.0, 0.0]])

    def test_bitwise_symmetry(self):
        x = ex.sym("x", 3)
        f = ex.FunctionDef(
            "f", [x], [ex.sin(x[0] * x[1]) * ex.exp(x[2]) + x[0] ** 3 * x[2]]
        )
        hf = ex.hessian(f)
        rng = np.random.default_rng(3)
        for _ in range(20):
            h = ex.feval(hf, [rng.uniform(-2, 2, size=3)])[0].reshape(3, 3)
            assert h.tobytes() == h.T.copy().tobytes()

    def test_jacobian_of_jacobian_matches_hessian(self):
        x = ex.sym("x", 2)
        f = ex.FunctionDef("f", [x], [ex.sin(x[0]) * x[1] + x[0] * x[1] ** 2])
        grad = ex.jacobian(f, 0, 0)
        jj = ex.jacobian(grad, 0, 0)
        hf = ex.hessian(f)
        rng = np.random.default_rng(11)
        for _ in range(25):
            pt = rng.uniform(-2, 2, size=2)
            a = ex.feval(jj, [pt])[0]
            b = ex.feval(hf, [pt])[0]
            np.testing.assert_allclose(a, b, atol=1e-10)

    def test_non_scalar_output_rejected(self):
        x = ex.sym("x", 2)
        f = ex.FunctionDef("f", [x], [x])
        with pytest.raises(ex.ExprError):
            ex.hessian(f)


class TestSubstitute:
    def test_constant_binding(self):
        phi = ex.sym("phi", 1)
        e = ex.substitute(phi + 1, {phi: 2.0})
        f = ex.FunctionDef("f", [], [e])
        assert ex.feval(f, [])[0][0] == 3.0

    def test_empty_binding_is_identity(self):
        x = ex.sym("x", 2)
        assert ex.substitute(x, {}) is x

    def test_composition(self):
        phi = ex.sym("phi", 1)
        u = ex.sym("u", 1)
        e = ex.substitute(ex.sin(phi), {phi: u * u})
        f = ex.FunctionDef("f", [u], [e])
        assert ex.feval(f, [[2.0]])[0][0] == pytest.approx(math.sin(4.0), abs=1e-15)

    def test_length_mismatch_rejected(self):
        x = ex.sym("x", 2)
        with pytest.raises(ex.ExprError):
            ex.substitute(x, {x: 1.0})

    def test_binding_by_name(self):
        x = ex.sym("x", 1)
        e = ex.substitute(x * 3, {"x": 2.0})
        f = ex.FunctionDef("f", [], [e])
        assert ex.feval(f, [])[0][0] == 6.0


class TestSerialization:
    def test_round_trip_sin(self):
        phi = ex.sym("phi", 1)
        f = ex.FunctionDef("f", [phi], [ex.sin(phi)])
        g = ex.deserialize(ex.serialize(f))
        a = ex.feval(f, [[0.3]])[0]
        b = ex.feval(g, [[0.3]])[0]
        assert a.tobytes() == b.tobytes()

    def test_empty_text_rejected(self):
        with pytest.raises(ex.SerializationError):
            ex.deserialize("")

    def test_round_trip_pendulum_bitwise(self):
        f = pendulum_rhs()
        g = ex.deserialize(ex.serialize(f))
        a = ex.feval(f, [[0.5, 0.1], [1.0]])[0]
        b = ex.feval(g, [[0.5, 0.1], [1.0]])[0]
        assert a.tobytes() == b.tobytes()

    def test_serialize_is_stable_fixed_point(self):
        f = pendulum_rhs()
        text = ex.serialize(f)
        assert ex.serialize(ex.deserialize(text)) == text

    def test_unknown_opcode_reports_line(self):
        text = "fnser v1 f\nin x 1\nn0 input 0\nn1 frob n0\nout n1\n"
        with pytest.raises(ex.SerializationError) as err:
            ex.deserialize(text)
        assert "line 4" in str(err.value)
        assert "frob" in str(err.value)

    def test_bad_header_rejected(self):
        with pytest.raises(ex.SerializationError):
            ex.deserialize("fnser v2 f\n")

    def test_round_trip_preserves_constants_exactly(self):
        x = ex.sym("x", 1)
        vals = [0.1, 1 / 3, 1e-300, 12345.6789e20, -2.5e-17]
        f = ex.FunctionDef(
            "c", [x], [ex.concat(*[x * ex.const(v) for v in vals])]
        )
        g = ex.deserialize(ex.serialize(f))
        a = ex.feval(f, [[1.0]])[0]
        b = ex.feval(g, [[1.0]])[0]
        assert a.tobytes() == b.tobytes()

    def test_duplicate_input_name_rejected(self):
        with pytest.raises(ex.SerializationError):
            ex.deserialize("fnser v1 f\nin x 1\nin x 2\nn0 input 0\nout n0\n")


class TestModeSelection:
    def test_reverse_chosen_for_scalar_output(self):
        # Same values either way; the mode switch is a cost property, so we
        # just pin the dispatch rule through the internal entry point.
        x = ex.sym("x", 4)
        scalar = ex.sum_entries(x)
        jac_auto = ex.jacobian_expr(scalar, x)
        jac_rev = ex.jacobian_expr(scalar, x, mode="reverse")
        fa = ex.FunctionDef("a", [x], [jac_auto])
        fb = ex.FunctionDef("a", [x], [jac_rev])
        assert ex.serialize(fa) == ex.serialize(fb)

    def test_forward_chosen_for_tall_jacobian(self):
        x = ex.sym("x", 1)
        tall = ex.concat(x * 1.0, x * 2.0, x * 3.0)
        jac_auto = ex.jacobian_expr(tall, x)
        jac_fwd = ex.jacobian_expr(tall, x, mode="forward")
        fa = ex.FunctionDef("a", [x], [jac_auto])
        fb = ex.FunctionDef("a", [x], [jac_fwd])
        assert ex.serialize(fa) == ex.serialize(fb)
