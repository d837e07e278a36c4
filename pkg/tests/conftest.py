from pathlib import Path

import pytest

from nmpc_forge.ocp import Ocp, equal
from nmpc_forge.transcription import MultipleShooting, SingleShooting, transcribe

EXAMPLES = Path(__file__).resolve().parents[1] / "src" / "nmpc_forge" / "examples"

PENDULUM_VALUES = {"x_0": [0.5, 0.0], "x_f": [0.0, 0.0], "Wt": [1.0, 1.0]}


def build_pendulum_ocp():
    """The documented workflow problem: swing to rest under a force bound."""
    mpc = Ocp(T=2.0)
    pend = mpc.add_model("pendulum", EXAMPLES / "pendulum.yaml")
    x_0 = mpc.parameter("x_0", pend.nx)
    x_f = mpc.parameter("x_f", pend.nx)
    Wt = mpc.parameter("Wt", 2)
    mpc.add_objective(mpc.integral(Wt[0] * pend.F**2 + Wt[1] * pend.dphi**2))
    mpc.subject_to(equal(mpc.at_t0(pend.x), x_0))
    mpc.subject_to(equal(mpc.at_tf(pend.x), x_f))
    mpc.subject_to(-2 <= (pend.F <= 2))
    return mpc


def build_motor_ocp(N=50, T=1.0 / 6.0):
    """Tracking problem for the DC motor with voltage limits."""
    mpc = Ocp(T=T)
    motor = mpc.add_model("motor", EXAMPLES / "motor.yaml")
    x_meas = mpc.parameter("x_meas", 2)
    x_s = mpc.parameter("x_s", 2)
    u_s = mpc.parameter("u_s", 1)
    Q = mpc.parameter("Q", 4)
    R = mpc.parameter("R", 1)
    Qf = mpc.parameter("Qf", 4)
    ex_ = motor.theta - x_s[0]
    ev_ = motor.dtheta - x_s[1]
    eu = motor.v - u_s[0]
    mpc.add_objective(mpc.integral(
        Q[0] * ex_ * ex_ + Q[1] * ex_ * ev_ + Q[2] * ev_ * ex_ + Q[3] * ev_ * ev_
        + R[0] * eu * eu))
    mpc.add_objective(mpc.at_tf(
        Qf[0] * ex_ * ex_ + Qf[1] * ex_ * ev_ + Qf[2] * ev_ * ex_
        + Qf[3] * ev_ * ev_))
    mpc.subject_to(equal(mpc.at_t0(motor.x), x_meas))
    mpc.subject_to(-10 <= (motor.v <= 10))
    mpc.method(MultipleShooting(N=N, intg="rk"))
    return mpc


@pytest.fixture(scope="session")
def pendulum_nlp():
    mpc = build_pendulum_ocp()
    return transcribe(mpc.to_canonical(), MultipleShooting(N=40, intg="rk"))


@pytest.fixture(scope="session")
def pendulum_nlp_ss():
    mpc = build_pendulum_ocp()
    return transcribe(mpc.to_canonical(), SingleShooting(N=40, intg="rk"))
