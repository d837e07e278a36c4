import numpy as np
import pytest

from nmpc_forge import model_io as mio
from nmpc_forge import runtime as rt
from nmpc_forge.ocp import Ocp, equal, integral
from nmpc_forge.transcription import MultipleShooting, transcribe

from conftest import PENDULUM_VALUES, build_motor_ocp, build_pendulum_ocp


@pytest.fixture(scope="module")
def pendulum_bundle():
    mpc = build_pendulum_ocp()
    mpc.method(MultipleShooting(N=40, intg="rk"))
    return rt.export_bundle(mpc, name="pendulum")


@pytest.fixture(scope="module")
def motor_bundle():
    return rt.export_bundle(build_motor_ocp(), name="motor")


class TestBundle:
    def test_pendulum_export_metadata(self, pendulum_bundle):
        nlp = pendulum_bundle.nlp
        assert nlp.N == 40
        assert nlp.n_w == 122
        assert nlp.parameter_table() == {
            "x_0": (2, False), "x_f": (2, False), "Wt": (2, False)}

    def test_motor_export_parameter_table(self, motor_bundle):
        assert motor_bundle.nlp.parameter_table() == {
            "x_meas": (2, False), "x_s": (2, False), "u_s": (1, False),
            "Q": (4, False), "R": (1, False), "Qf": (4, False)}

    def test_export_load_export_byte_identical(self, pendulum_bundle, tmp_path):
        path = tmp_path / "pendulum.impb"
        pendulum_bundle.save(path)
        loaded = rt.Bundle.load(path)
        assert loaded.to_text() == pendulum_bundle.to_text()

    def test_export_is_deterministic(self):
        def fresh():
            mpc = build_pendulum_ocp()
            mpc.method(MultipleShooting(N=40, intg="rk"))
            return rt.export_bundle(mpc, name="pendulum").to_text()

        assert fresh() == fresh()

    def test_version_mismatch(self):
        with pytest.raises(rt.RuntimeApiError) as err:
            rt.Bundle.from_text("bundlev9\n[meta]\n")
        assert err.value.code == "version"

    def test_truncated_bundle_is_corrupt(self, pendulum_bundle):
        text = pendulum_bundle.to_text()
        with pytest.raises(rt.RuntimeApiError) as err:
            rt.Bundle.from_text(text[: len(text) // 3])
        assert err.value.code == "corrupt"

    def test_loaded_bundle_solves_identically(self, pendulum_bundle, tmp_path):
        path = tmp_path / "p.impb"
        pendulum_bundle.save(path)
        a = rt.initialize(pendulum_bundle)
        b = rt.initialize(path)
        for inst in (a, b):
            inst.set("x_0", [0.5, 0.0])
            inst.set("x_f", [0.0, 0.0])
            inst.set("Wt", [1.0, 1.0])
            assert inst.solve() == "solved"
        assert a.solution.w.tobytes() == b.solution.w.tobytes()


class TestInstance:
    def test_fresh_instance_reports_zero_solves(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        assert inst.n_solves == 0
        assert inst.stats().iterations == 0

    def test_instances_are_independent(self, pendulum_bundle):
        a = rt.initialize(pendulum_bundle)
        b = rt.initialize(pendulum_bundle)
        a.set("x_0", [0.7, 0.1])
        assert np.all(b.get("x_0") == 0.0)

    def test_get_before_solve_errors(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        with pytest.raises(rt.RuntimeApiError) as err:
            inst.get("u_opt")
        assert err.value.code == "no_solution"

    def test_set_readonly_identifier(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        with pytest.raises(rt.RuntimeApiError) as err:
            inst.set("u_opt", [0.0] * 40)
        assert err.value.code == "read_only"

    def test_unknown_identifier(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        with pytest.raises(rt.RuntimeApiError) as err:
            inst.set("not_a_thing", [1.0])
        assert err.value.code == "unknown_id"

    def test_length_mismatch(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        with pytest.raises(rt.RuntimeApiError) as err:
            inst.set("x_0", [1.0, 2.0, 3.0])
        assert err.value.code == "length_mismatch"


class TestSelectors:
    def build_varying(self):
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
        mpc = Ocp(T=1.0)
        mdl = mpc.add_model("point", mio.bind(mio.parse_model(doc)))
        ref = mpc.parameter("ref", 2, stage_varying=True)
        mpc.add_objective(integral((mdl.y - ref[0]) ** 2 + 0.1 * mdl.w ** 2))
        mpc.method(MultipleShooting(N=3, intg="rk"))
        return rt.initialize(rt.export_bundle(mpc, name="point"))

    def test_roundtrip_full_row_major(self):
        inst = self.build_varying()
        data = np.arange(6.0)  # 3 stages x 2 rows, stage-major
        inst.set("ref", data, stage=rt.EVERYWHERE, flags=rt.FULL | rt.ROW_MAJOR)
        out = inst.get("ref", stage=rt.EVERYWHERE, flags=rt.FULL | rt.ROW_MAJOR)
        assert out.tobytes() == data.tobytes()
        assert inst.get("ref", stage=1).tolist() == [2.0, 3.0]

    def test_roundtrip_full_column_major(self):
        inst = self.build_varying()
        data = np.array([1.0, 2.0, 3.0, 10.0, 20.0, 30.0])  # component-major
        inst.set("ref", data, stage=rt.EVERYWHERE, flags=rt.FULL | rt.COLUMN_MAJOR)
        assert inst.get("ref", stage=0).tolist() == [1.0, 10.0]
        assert inst.get("ref", stage=2).tolist() == [3.0, 30.0]
        out = inst.get("ref", stage=rt.EVERYWHERE, flags=rt.FULL | rt.COLUMN_MAJOR)
        assert out.tobytes() == data.tobytes()

    def test_orderings_are_transposes(self):
        inst = self.build_varying()
        data = np.arange(6.0)
        inst.set("ref", data, flags=rt.FULL | rt.ROW_MAJOR)
        row = inst.get("ref", flags=rt.FULL | rt.ROW_MAJOR).reshape(3, 2)
        col = inst.get("ref", flags=rt.FULL | rt.COLUMN_MAJOR).reshape(2, 3)
        assert np.array_equal(row.T, col)

    def test_hrep_equals_full_replication(self):
        a = self.build_varying()
        b = self.build_varying()
        vec = np.array([-3.0, 0.5])
        a.set("ref", vec, stage=rt.EVERYWHERE, flags=rt.HREP | rt.ROW_MAJOR)
        b.set("ref", np.tile(vec, 3), stage=rt.EVERYWHERE,
              flags=rt.FULL | rt.ROW_MAJOR)
        for k in range(3):
            assert a.get("ref", stage=k).tobytes() == b.get("ref", stage=k).tobytes()

    def test_single_stage_write(self):
        inst = self.build_varying()
        inst.set("ref", [5.0, 6.0], stage=2)
        assert inst.get("ref", stage=2).tolist() == [5.0, 6.0]
        assert inst.get("ref", stage=0).tolist() == [0.0, 0.0]

    def test_bad_stage(self):
        inst = self.build_varying()
        with pytest.raises(rt.RuntimeApiError) as err:
            inst.set("ref", [1.0, 2.0], stage=3)
        assert err.value.code == "bad_stage"

    def test_bad_flags(self):
        with pytest.raises(rt.RuntimeApiError) as err:
            rt.Selector("x", flags=rt.FULL | rt.HREP)
        assert err.value.code == "bad_flags"

    def test_hrep_wrong_length(self):
        inst = self.build_varying()
        with pytest.raises(rt.RuntimeApiError) as err:
            inst.set("ref", [1.0, 2.0, 3.0], flags=rt.HREP | rt.ROW_MAJOR)
        assert err.value.code == "length_mismatch"


class TestSolve:
    def test_pendulum_workflow(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        inst.set("x_0", [0.5, 0.0])
        inst.set("x_f", [0.0, 0.0])
        inst.set("Wt", [1.0, 1.0])
        assert inst.solve() == "solved"
        u0 = inst.get("u_opt", stage=0)
        assert abs(u0[0]) <= 2.0 + 1e-8
        x_all = inst.get("x_opt", stage=rt.EVERYWHERE)
        assert x_all.size == 41 * 2
        phi_traj = inst.get("pendulum.phi", stage=rt.EVERYWHERE)
        assert phi_traj.size == 41
        assert phi_traj[0] == pytest.approx(0.5, abs=1e-8)
        f_opt = inst.get("f_opt")
        assert f_opt[0] == pytest.approx(inst.solution.objective)

    def test_hand_solvable_control_target(self):
        doc = """\
equations:
  inline:
    ode:
      y: 0
differential_states:
  - name: y
controls:
  - name: w
"""
        mpc = Ocp(T=1.0)
        mdl = mpc.add_model("still", mio.bind(mio.parse_model(doc)))
        mpc.add_objective(integral((mdl.w - 1.0) ** 2))
        mpc.method(MultipleShooting(N=1, intg="rk"))
        mpc.solver("sqpmethod", {"tol_dual": 1e-11})
        inst = rt.initialize(rt.export_bundle(mpc, name="still"))
        assert inst.solve() == "solved"
        assert inst.get("u_opt", stage=0)[0] == pytest.approx(1.0, abs=1e-9)

    def test_warm_started_resolve_is_one_iteration(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        inst.set("x_0", [0.5, 0.0])
        inst.set("x_f", [0.0, 0.0])
        inst.set("Wt", [1.0, 1.0])
        assert inst.solve() == "solved"
        assert inst.solve() == "solved"
        assert inst.stats().iterations == 1

    def test_get_parameter_roundtrip_bitwise(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        vals = np.array([0.1234567890123456, -2.7182818284590451])
        inst.set("x_0", vals)
        assert inst.get("x_0").tobytes() == vals.tobytes()


class TestStateBlobs:
    def prepared(self, bundle):
        inst = rt.initialize(bundle)
        inst.set("x_0", [0.5, 0.0])
        inst.set("x_f", [0.0, 0.0])
        inst.set("Wt", [1.0, 1.0])
        return inst

    def test_save_load_solve_is_bitwise_identical(self, pendulum_bundle):
        a = self.prepared(pendulum_bundle)
        assert a.solve() == "solved"
        blob = a.save_state()

        b = rt.initialize(pendulum_bundle)
        b.load_state(blob)
        a.set("x_0", [0.4, 0.0])
        b.set("x_0", [0.4, 0.0])
        assert a.solve() == "solved"
        assert b.solve() == "solved"
        assert a.solution.w.tobytes() == b.solution.w.tobytes()

    def test_blob_from_other_bundle_rejected(self, pendulum_bundle, motor_bundle):
        a = self.prepared(pendulum_bundle)
        blob = a.save_state()
        b = rt.initialize(motor_bundle)
        with pytest.raises(rt.RuntimeApiError) as err:
            b.load_state(blob)
        assert err.value.code == "state_mismatch"

    def test_save_before_any_set_is_defaults(self, pendulum_bundle):
        inst = rt.initialize(pendulum_bundle)
        blob = inst.save_state()
        other = rt.initialize(pendulum_bundle)
        other.load_state(blob)
        assert np.all(other.get("x_0") == 0.0)

    def test_failure_isolation(self, pendulum_bundle):
        inst = self.prepared(pendulum_bundle)
        # An unreachable terminal state within the force bound fails...
        inst.set("x_f", [200.0, 0.0])
        status = inst.solve()
        assert status != "solved"
        # ... and a subsequent well-posed solve still succeeds.
        inst.set("x_f", [0.0, 0.0])
        assert inst.solve() == "solved"
