"""Offset-free positioning of a DC motor: plant simulator, disturbance
observer, steady-state target selector, and the closed-loop runner.

The plant is the second-order motor model (one integrator, one real pole)
with input saturation, an optional constant input disturbance, and optional
unmodeled effects (gain mismatch, Coulomb friction) for traditional-vs-
offset-free comparisons.  A Kalman filter over the disturbance-augmented
discrete model estimates state and disturbance; the target selector turns a
position reference and the disturbance estimate into consistent state/input
set-points for the tracking controller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .runtime import EVERYWHERE, FULL, HREP, ROW_MAJOR, Instance, RuntimeApiError


class OffsetFreeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Plant
# ---------------------------------------------------------------------------


def _zoh(a: float, b: float, h: float):
    """Exact zero-order-hold discretization of
    xdot = [[0, 1], [0, -a]] x + [0, b] u  (matrix exponential in closed form)."""
    if a == 0.0:
        Ad = np.array([[1.0, h], [0.0, 1.0]])
        Bd = np.array([b * h * h / 2.0, b * h])
        return Ad, Bd
    ea = math.exp(-a * h)
    s = (1.0 - ea) / a
    Ad = np.array([[1.0, s], [0.0, ea]])
    Bd = np.array([b * (h - s) / a, b * s])
    return Ad, Bd


@dataclass
class LinearPlant:
    """Motor plant x = [theta, dtheta]; y measures theta."""

    a: float = 10.0
    b: float = 20.0
    b_scale: float = 1.0  # actuator gain mismatch vs. the nominal model
    coulomb_v: float = 0.0  # static friction, input-equivalent volts
    u_min: float = -10.0
    u_max: float = 10.0
    sub_steps: int = 1
    encoder_counts: int = 0  # >0 quantizes y to 2*pi/counts
    _zoh_cache: dict = field(default_factory=dict, repr=False)

    def output(self, x) -> float:
        y = float(x[0])
        if self.encoder_counts > 0:
            step = 2.0 * math.pi / self.encoder_counts
            y = round(y / step) * step
        return y

    def step(self, x, u_cmd: float, d: float, dt: float):
        """Saturate the command, inject the disturbance after saturation,
        integrate exactly over `dt`, and return (x_next, y_next).

        Static friction follows the Karnopp model: inside a small velocity
        band the load sticks whenever the drive cannot exceed the friction
        level, otherwise a Coulomb term opposes the motion.
        """
        if dt <= 0:
            raise OffsetFreeError("dt must be positive")
        u_applied = min(max(float(u_cmd), self.u_min), self.u_max)
        n = max(1, int(self.sub_steps))
        h = dt / n
        key = (h, self.b_scale)
        if key not in self._zoh_cache:
            self._zoh_cache[key] = _zoh(self.a, self.b * self.b_scale, h)
        Ad, Bd = self._zoh_cache[key]
        x = np.asarray(x, dtype=float).copy()
        mu = self.coulomb_v
        # Velocity band matching one step of friction-induced decceleration.
        v_band = mu * self.b * self.b_scale * h
        for _ in range(n):
            drive = u_applied + d
            if mu != 0.0:
                if abs(x[1]) <= v_band and abs(drive) <= mu:
                    x[1] = 0.0  # stuck: friction balances the drive
                    continue
                if abs(x[1]) > v_band:
                    drive -= mu * math.copysign(1.0, x[1])
                else:
                    drive -= mu * math.copysign(1.0, drive)
            x = Ad @ x + Bd * drive
        return x, self.output(x)


def plant_step(plant: LinearPlant, x, u_cmd: float, d: float, dt: float):
    return plant.step(x, u_cmd, d, dt)


# ---------------------------------------------------------------------------
# Disturbance-augmented Kalman filter
# ---------------------------------------------------------------------------


@dataclass
class AugmentedModel:
    """Discrete model over [x; d] with a constant-disturbance row."""

    A_bar: np.ndarray
    B_bar: np.ndarray
    C_bar: np.ndarray
    dt: float

    @classmethod
    def from_motor(cls, a: float, b: float, dt: float) -> "AugmentedModel":
        Ad, Bd = _zoh(a, b, dt)
        A_bar = np.zeros((3, 3))
        A_bar[:2, :2] = Ad
        A_bar[:2, 2] = Bd
        A_bar[2, 2] = 1.0
        B_bar = np.concatenate([Bd, [0.0]])
        C_bar = np.array([1.0, 0.0, 0.0])
        return cls(A_bar, B_bar, C_bar, dt)


@dataclass
class KalmanCfg:
    q_diag: Sequence[float] = (1e-6, 1e-4, 1e-3)
    r: float = 1e-6
    p0: float = 1e-2
    x0: Sequence[float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.r <= 0:
            raise OffsetFreeError("measurement noise covariance must be positive")
        if any(q < 0 for q in self.q_diag):
            raise OffsetFreeError("process noise covariance must be PSD")


@dataclass
class KalmanState:
    x_hat: np.ndarray
    P: np.ndarray

    @classmethod
    def from_cfg(cls, cfg: KalmanCfg) -> "KalmanState":
        return cls(np.asarray(cfg.x0, dtype=float).copy(),
                   np.eye(3) * cfg.p0)


def kf_step(state: KalmanState, model: AugmentedModel, cfg: KalmanCfg,
            u_applied: float, y_meas: float) -> KalmanState:
    """Predict with the applied input, then measurement-update; the
    covariance is symmetrized after the update."""
    Q = np.diag(cfg.q_diag)
    x_pred = model.A_bar @ state.x_hat + model.B_bar * u_applied
    P_pred = model.A_bar @ state.P @ model.A_bar.T + Q
    c = model.C_bar
    S = float(c @ P_pred @ c) + cfg.r
    if S <= 0:
        raise OffsetFreeError("innovation covariance is not positive")
    K = (P_pred @ c) / S
    innov = y_meas - float(c @ x_pred)
    x_new = x_pred + K * innov
    P_new = P_pred - np.outer(K, c @ P_pred)
    P_new = 0.5 * (P_new + P_new.T)
    return KalmanState(x_new, P_new)


# ---------------------------------------------------------------------------
# Steady-state target selector
# ---------------------------------------------------------------------------


def target_select(y_r: float, d_hat: float, a: float = 10.0, b: float = 20.0):
    """Set-points (x_s, u_s) with  0 = A x_s + B (u_s + d_hat), C x_s = y_r."""
    A = np.array([[0.0, 1.0], [0.0, -a]])
    B = np.array([[0.0], [b]])
    C = np.array([[1.0, 0.0]])
    M = np.block([[A, B], [C, np.zeros((1, 1))]])
    rhs = np.concatenate([-B.flatten() * d_hat, [y_r]])
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise OffsetFreeError("steady-state system is singular") from exc
    return sol[:2], float(sol[2])


# ---------------------------------------------------------------------------
# Scenario and closed loop
# ---------------------------------------------------------------------------


def step_signal(segments: Sequence[tuple[float, float]]) -> Callable[[float], float]:
    """Piecewise-constant signal from (start_time, value) pairs."""
    segs = sorted((float(t), float(v)) for t, v in segments)
    if not segs:
        return lambda t: 0.0

    def value(t: float) -> float:
        out = 0.0
        for t0, v in segs:
            if t + 1e-12 >= t0:
                out = v
            else:
                break
        return out

    return value


@dataclass
class ScenarioCfg:
    total_time: float
    reference: Sequence[tuple[float, float]] = ((0.0, 0.0),)
    disturbance: Sequence[tuple[float, float]] = ((0.0, 0.0),)
    mode: str = "offset_free"  # or "traditional"
    N: int = 50
    T: float = 1.0 / 6.0
    Q: Sequence[float] = (100.0, 0.0, 0.0, 1.0)
    R: Sequence[float] = (20.0,)
    Qf: Sequence[float] = (100.0, 0.0, 0.0, 1.0)
    plant: LinearPlant = field(default_factory=lambda: LinearPlant(
        b_scale=1.15, coulomb_v=0.1))
    kalman: KalmanCfg = field(default_factory=KalmanCfg)
    model_a: float = 10.0
    model_b: float = 20.0

    def __post_init__(self):
        if self.mode not in ("offset_free", "traditional"):
            raise OffsetFreeError(f"unknown mode {self.mode!r}")
        if self.total_time < 0:
            raise OffsetFreeError("total_time must be nonnegative")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def n_samples(self) -> int:
        return int(round(self.total_time / self.dt))


LOG_COLUMNS = ("t", "theta", "theta_ref", "theta_hat", "dtheta_hat", "d_hat",
               "u_cmd", "u_applied", "status", "iter", "solve_time_s")


@dataclass
class ClosedLoopLog:
    t: np.ndarray
    theta: np.ndarray
    theta_ref: np.ndarray
    theta_hat: np.ndarray
    dtheta_hat: np.ndarray
    d_hat: np.ndarray
    u_cmd: np.ndarray
    u_applied: np.ndarray
    status: list[str]
    iterations: np.ndarray
    solve_time_s: np.ndarray

    def __len__(self):
        return self.t.size

    def tracking_error(self) -> np.ndarray:
        return np.abs(self.theta - self.theta_ref)

    def mean_error_over(self, t_lo: float, t_hi: float) -> float:
        mask = (self.t >= t_lo) & (self.t < t_hi)
        if not mask.any():
            return float("nan")
        return float(self.tracking_error()[mask].mean())

    def to_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for i in range(len(self)):
            vals = [format(v, ".17g") for v in (
                self.t[i], self.theta[i], self.theta_ref[i], self.theta_hat[i],
                self.dtheta_hat[i], self.d_hat[i], self.u_cmd[i],
                self.u_applied[i])]
            vals.append(self.status[i])
            vals.append(str(int(self.iterations[i])))
            vals.append(format(self.solve_time_s[i], ".17g"))
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        hist: dict[int, int] = {}
        for it in self.iterations:
            hist[int(it)] = hist.get(int(it), 0) + 1
        end = float(self.t[-1] + (self.t[1] - self.t[0])) if len(self) > 1 else 0.0
        return {
            "samples": len(self),
            "final_second_mean_error": self.mean_error_over(end - 1.0, end),
            "max_solve_time_s": float(self.solve_time_s.max(initial=0.0)),
            "iteration_histogram": dict(sorted(hist.items())),
            "failed_solves": sum(1 for s in self.status if s != "solved"),
        }


def run_closed_loop(scenario: ScenarioCfg, controller: Instance) -> ClosedLoopLog:
    """Sampled loop: measure, estimate, select targets, solve, apply the
    first control, advance the plant.  Solver failures hold the previous
    input and the loop continues."""
    nlp = controller.nlp
    if nlp.n_x != 2 or nlp.n_u != 1:
        raise OffsetFreeError(
            f"controller dimensions ({nlp.n_x} states, {nlp.n_u} controls) "
            "do not match the 2-state, 1-input motor plant")
    table = nlp.parameter_table()
    for name, length in (("x_meas", 2), ("x_s", 2), ("u_s", 1),
                         ("Q", 4), ("R", 1), ("Qf", 4)):
        if table.get(name, (None,))[0] != length:
            raise OffsetFreeError(
                f"controller bundle lacks parameter {name!r} of length {length}")

    dt = scenario.dt
    n = scenario.n_samples
    ref = step_signal(scenario.reference)
    dist = step_signal(scenario.disturbance)
    model = AugmentedModel.from_motor(scenario.model_a, scenario.model_b, dt)
    kf = KalmanState.from_cfg(scenario.kalman)

    controller.set("Q", scenario.Q)
    controller.set("R", scenario.R)
    controller.set("Qf", scenario.Qf)

    log = {k: np.zeros(n) for k in
           ("t", "theta", "theta_ref", "theta_hat", "dtheta_hat", "d_hat",
            "u_cmd", "u_applied", "solve_time_s")}
    iters = np.zeros(n, dtype=int)
    statuses: list[str] = []

    x_plant = np.zeros(2)
    plant = scenario.plant
    u_cmd = 0.0
    u_applied_prev = 0.0
    for k in range(n):
        t = k * dt
        y = plant.output(x_plant)
        kf = kf_step(kf, model, scenario.kalman, u_applied_prev, y)
        y_r = ref(t)
        d_true = dist(t)
        if scenario.mode == "offset_free":
            d_hat = float(kf.x_hat[2])
            x_s, u_s = target_select(y_r, d_hat,
                                     scenario.model_a, scenario.model_b)
            # The controller predicts in the disturbance-compensated input
            # v + d_hat, which turns the nominal model into the disturbed
            # one; the commanded voltage shifts back by d_hat below.
            u_s_param = u_s + d_hat
        else:
            d_hat = 0.0
            x_s, u_s = np.array([y_r, 0.0]), 0.0
            u_s_param = 0.0
        controller.set("x_meas", kf.x_hat[:2])
        controller.set("x_s", x_s)
        controller.set("u_s", [u_s_param])
        status = controller.solve()
        if status == "solved":
            u_cmd = float(controller.get("u_opt", stage=0)[0]) - d_hat
        u_applied = min(max(u_cmd, plant.u_min), plant.u_max)

        log["t"][k] = t
        log["theta"][k] = x_plant[0]
        log["theta_ref"][k] = y_r
        log["theta_hat"][k] = kf.x_hat[0]
        log["dtheta_hat"][k] = kf.x_hat[1]
        log["d_hat"][k] = kf.x_hat[2]
        log["u_cmd"][k] = u_cmd
        log["u_applied"][k] = u_applied
        log["solve_time_s"][k] = controller.stats().solve_time_s
        iters[k] = controller.stats().iterations
        statuses.append(status)

        x_plant, _ = plant.step(x_plant, u_cmd, d_true, dt)
        u_applied_prev = u_applied

    return ClosedLoopLog(
        t=log["t"], theta=log["theta"], theta_ref=log["theta_ref"],
        theta_hat=log["theta_hat"], dtheta_hat=log["dtheta_hat"],
        d_hat=log["d_hat"], u_cmd=log["u_cmd"], u_applied=log["u_applied"],
        status=statuses, iterations=iters, solve_time_s=log["solve_time_s"])
