import numpy as np
import pytest

from nmpc_forge import expr as ex
from nmpc_forge.ocp import FreeTime, Ocp, OcpError, at_t0, at_tf, equal, integral
from nmpc_forge.transcription import MultipleShooting, transcribe

from conftest import EXAMPLES, build_pendulum_ocp


def test_add_model_handle_dimensions():
    mpc = Ocp(T=2.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    assert pend.nx == 2 and pend.nu == 1 and pend.nz == 0
    assert pend.x.n == 2


def test_duplicate_model_name_rejected():
    mpc = Ocp(T=2.0)
    mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    with pytest.raises(OcpError, match="collision"):
        mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")


def test_component_lookup_order():
    mpc = Ocp(T=2.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    dphi = pend.dphi
    assert dphi.kind == "slice" and dphi.lo == 1 and dphi.n == 1


def test_parameter_contract():
    mpc = Ocp(T=2.0)
    mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    x0 = mpc.parameter("x_0", 2)
    assert x0.kind == "sym" and x0.n == 2
    wt = mpc.parameter("Wt", 2)
    assert wt.n == 2
    with pytest.raises(OcpError):
        mpc.parameter("bad", 0)
    with pytest.raises(OcpError):
        mpc.parameter("Wt", 1)


def test_objective_defaults_to_zero():
    mpc = Ocp(T=1.0)
    mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    canon = mpc.to_canonical()
    assert canon.lagrange.kind == "const" and canon.lagrange.value == 0.0
    assert canon.slot_counts()["lagrange"] == 0


def test_terminal_objective_rejects_controls():
    mpc = Ocp(T=1.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    with pytest.raises(OcpError, match="controls"):
        mpc.add_objective(mpc.at_tf(pend.F ** 2))


def test_non_scalar_objective_rejected():
    mpc = Ocp(T=1.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    with pytest.raises(OcpError, match="scalar"):
        mpc.add_objective(integral(pend.x))


def test_classification_counts_for_workflow_problem():
    mpc = build_pendulum_ocp()
    canon = mpc.to_canonical()
    counts = canon.slot_counts()
    assert counts == {
        "lagrange": 1,
        "mayer": 0,
        "cost_t0": 0,
        "path_ineq": 0,
        "path_eq": 0,
        "boundary_eq": 2,
        "boundary_ineq": 0,
        "bounds": 1,
    }
    # Boundary rows carry two entries each (whole state vector).
    assert sum(r.expr.n for r in canon.boundary_eq) == 4


def test_two_sided_bound_on_variable_becomes_simple_bound():
    mpc = Ocp(T=1.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    mpc.subject_to(-2 <= (pend.F <= 2))
    canon = mpc.to_canonical()
    assert len(canon.var_bounds) == 1
    vb = canon.var_bounds[0]
    assert vb.kind == "u" and vb.lower == -2 and vb.upper == 2


def test_general_two_sided_expression_splits():
    mpc = Ocp(T=1.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    mpc.subject_to(-1 <= (pend.phi + pend.dphi <= 1))
    canon = mpc.to_canonical()
    assert len(canon.path_ineq) == 1
    row = canon.path_ineq[0]
    assert row.lower == -1 and row.upper == 1


def test_boundary_anchoring():
    mpc = Ocp(T=1.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    x0 = mpc.parameter("x_0", 2)
    mpc.subject_to(equal(at_t0(pend.x), x0))
    mpc.subject_to(at_tf(pend.phi) <= 0.5)
    canon = mpc.to_canonical()
    assert len(canon.boundary_eq) == 1 and canon.boundary_eq[0].anchor == "t0"
    assert len(canon.boundary_ineq) == 1 and canon.boundary_ineq[0].anchor == "tf"


def test_boundary_with_controls_rejected():
    mpc = Ocp(T=1.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    with pytest.raises(OcpError, match="states and parameters"):
        mpc.subject_to(equal(at_t0(pend.F), 1.0))


def test_mixed_anchors_rejected():
    mpc = Ocp(T=1.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    with pytest.raises(OcpError, match="mix"):
        mpc.subject_to(equal(at_t0(pend.phi), at_tf(pend.phi)))


def test_algebraic_states_rejected_in_path_rows():
    doc = """\
equations:
  inline:
    ode:
      x1: -x1 + zv
    alg:
      - zv - x1*x1
differential_states:
  - name: x1
algebraic_states:
  - name: zv
controls:
  - name: w
"""
    from nmpc_forge import model_io as mio
    mpc = Ocp(T=1.0)
    mdl = mpc.add_model("dae", mio.bind(mio.parse_model(doc)))
    with pytest.raises(OcpError, match="algebraic"):
        mpc.subject_to(mdl.zv + mdl.x1 <= 1.0)


def test_objective_term_order_is_canonical():
    def build(order):
        mpc = Ocp(T=1.0)
        pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
        terms = {
            "a": integral(pend.F ** 2),
            "b": integral(ex.sin(pend.phi) * 0.25),
            "c": integral(pend.dphi ** 2 * 3.0),
        }
        for key in order:
            mpc.add_objective(terms[key])
        return mpc.to_canonical()

    canon1 = build("abc")
    canon2 = build("cba")
    f1 = ex.FunctionDef("f1", list(_syms(canon1)), [canon1.lagrange])
    f2 = ex.FunctionDef("f2", list(_syms(canon2)), [canon2.lagrange])
    rng = np.random.default_rng(0)
    for _ in range(20):
        xv = rng.uniform(-2, 2, 2)
        uv = rng.uniform(-2, 2, 1)
        a = ex.feval(f1, [xv, uv])[0]
        b = ex.feval(f2, [xv, uv])[0]
        assert a.tobytes() == b.tobytes()


def _syms(canon):
    m = canon.models[0]
    return [m.x, m.u]


def test_symbol_closure_enforced():
    mpc = Ocp(T=1.0)
    mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    stray = ex.sym("stray", 1)
    with pytest.raises(OcpError, match="stray"):
        mpc.add_objective(integral(stray * stray))


def test_objective_term_cannot_be_constraint():
    mpc = Ocp(T=1.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    with pytest.raises(OcpError):
        mpc.subject_to(integral(pend.F ** 2))


def test_free_time_horizon():
    mpc = Ocp(T=FreeTime(2.0))
    mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    canon = mpc.to_canonical()
    assert canon.horizon_kind == "free" and canon.horizon_value == 2.0
    assert canon.T_expr.kind == "sym"
    with pytest.raises(OcpError):
        FreeTime(-1.0)


def test_set_value_validation():
    mpc = build_pendulum_ocp()
    mpc.set_value("x_0", [0.5, 0.0])
    with pytest.raises(OcpError):
        mpc.set_value("x_0", [1.0])
    with pytest.raises(OcpError):
        mpc.set_value("nope", [1.0])


def test_initial_state_parameter_detected():
    mpc = build_pendulum_ocp()
    canon = mpc.to_canonical()
    assert canon.initial_state_params == {0: "x_0"}
    assert canon.terminal_state_params == {0: "x_f"}
