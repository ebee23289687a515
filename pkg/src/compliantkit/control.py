"""Wrist admittance, grasp-force regulation and safety enforcement.

Sign conventions
----------------
Each finger sensor has its local +z pointing from the finger pad into the
grasped object, so a compressive grasp reads positive.  Sensor wrenches are
the wrench the finger applies *to* the object.  The wrist admittance loop
takes the opposite quantity, the external wrench acting on the tool:
``w_ext = -combine_finger_wrenches(...)``.

A positive grasp velocity closes the gripper (width decreases).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (FrameMismatchError, Pose, Wrench, rot_x,
                       transform_wrench)

log = logging.getLogger(__name__)

OFFSET_EPS = 1e-4  # m; below this the stiffness direction is undefined
GRASP_AXIS = 2     # sensor-frame z
AXIS_NAMES = ("x", "y", "z")


class ControllerFault(RuntimeError):
    pass


# --------------------------------------------------------------------------
# wrench fusion

def finger_poses(width: float, tcp_frame: str = "tcp",
                 sensor_frames=("s1", "s2")) -> tuple[Pose, Pose]:
    """Sensor-in-TCP poses for two parallel fingers ``width`` apart.

    The TCP sits midway between the fingertips with its y axis along the
    grasp direction.  Finger 1 is at -y and pushes towards +y; finger 2 is
    its mirror image.
    """
    half = 0.5 * width
    s1 = Pose(rot_x(-np.pi / 2), [0.0, -half, 0.0], sensor_frames[0], tcp_frame)
    s2 = Pose(rot_x(np.pi / 2), [0.0, half, 0.0], sensor_frames[1], tcp_frame)
    return s1, s2


def combine_finger_wrenches(w1: Wrench, w2: Wrench, s1_in_tcp: Pose,
                            s2_in_tcp: Pose) -> Wrench:
    """Sum of both finger wrenches expressed at the TCP."""
    if s1_in_tcp.to_frame != s2_in_tcp.to_frame:
        raise FrameMismatchError("finger poses target different frames")
    return transform_wrench(w1, s1_in_tcp) + transform_wrench(w2, s2_in_tcp)


def measure_grasp_force(w1: Wrench, w2: Wrench) -> float:
    """Mean of the two sensors' grasp-axis (compressive) force."""
    f = 0.5 * (w1.force[GRASP_AXIS] + w2.force[GRASP_AXIS])
    if not np.isfinite(f):
        raise ValueError("non-finite grasp force")
    return float(f)


# --------------------------------------------------------------------------
# stiffness encoding

@dataclass(frozen=True, eq=False)
class StiffnessSpec:
    """Scalar stiffness plus reference / virtual-target poses.

    The scalar applies along the reference -> virtual target direction;
    the two orthogonal directions get ``k_max``.
    """
    k: float
    k_max: float
    reference_pose: Pose
    virtual_target_pose: Pose

    def __post_init__(self):
        if not (0.0 < self.k <= self.k_max) or not np.isfinite(self.k_max):
            raise ValueError(f"stiffness {self.k} outside (0, {self.k_max}]")

    @property
    def offset(self) -> np.ndarray:
        return (self.virtual_target_pose.translation
                - self.reference_pose.translation)

    @classmethod
    def hold(cls, pose: Pose, k_max: float) -> "StiffnessSpec":
        return cls(k_max, k_max, pose, pose)


def reconstruct_stiffness(spec: StiffnessSpec) -> np.ndarray:
    offset = spec.offset
    n = np.linalg.norm(offset)
    if n < OFFSET_EPS:
        return spec.k_max * np.eye(3)
    d = offset / n
    # R diag(k, kmax, kmax) R^T with R e_x = d, written as a rank-one update
    return spec.k_max * np.eye(3) + (spec.k - spec.k_max) * np.outer(d, d)


# --------------------------------------------------------------------------
# wrist admittance

@dataclass(frozen=True)
class AdmittanceParams:
    mass: tuple = (2.0, 2.0, 2.0)
    damping_ratio: float = 1.0
    rate: float = 500.0
    k_max: float = 3000.0
    v_max: float = 0.5
    integrator: str = "trapezoidal"

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        if m.shape != (3,) or np.any(m <= 0):
            raise ValueError("virtual mass must be three positive values")
        if self.damping_ratio <= 0 or self.rate <= 0 or self.v_max <= 0:
            raise ValueError("damping_ratio, rate and v_max must be positive")
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {self.integrator!r}")
        object.__setattr__(self, "mass", tuple(float(x) for x in m))

    @property
    def dt(self) -> float:
        return 1.0 / self.rate


@dataclass(frozen=True, eq=False)
class AdmittanceState:
    position: np.ndarray
    velocity: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        for name in ("position", "velocity"):
            v = np.array(getattr(self, name), dtype=float).reshape(3)
            v.flags.writeable = False
            object.__setattr__(self, name, v)
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        r.flags.writeable = False
        object.__setattr__(self, "rotation", r)

    @classmethod
    def at(cls, pose: Pose) -> "AdmittanceState":
        return cls(pose.translation, np.zeros(3), pose.rotation)

    def pose(self, frame="tcp", base="base") -> Pose:
        return Pose(self.rotation, self.position, frame, base)


def damping_matrix(stiffness, mass, damping_ratio) -> np.ndarray:
    """Modal damping giving every mode of (M, K) the same damping ratio.

    ``D = 2 zeta M^1/2 (M^-1/2 K M^-1/2)^1/2 M^1/2``; for diagonal M and K
    this is ``2 zeta sqrt(k_i m_i)`` per axis.
    """
    ms = np.sqrt(np.asarray(mass, dtype=float))
    a = stiffness / np.outer(ms, ms)
    lam, u = np.linalg.eigh(0.5 * (a + a.T))
    root = (u * np.sqrt(np.clip(lam, 0.0, None))) @ u.T
    return 2.0 * damping_ratio * root * np.outer(ms, ms)


def _step_trapezoidal(e, v, f, mass, k, d, dt):
    minv = 1.0 / np.asarray(mass)
    a = np.zeros((6, 6))
    a[:3, 3:] = np.eye(3)
    a[3:, :3] = -minv[:, None] * k
    a[3:, 3:] = -minv[:, None] * d
    b = np.concatenate([np.zeros(3), minv * f])
    s = np.concatenate([e, v])
    lhs = np.eye(6) - 0.5 * dt * a
    rhs = s + 0.5 * dt * (a @ s) + dt * b
    s1 = np.linalg.solve(lhs, rhs)
    return s1[:3], s1[3:]


def _step_semi_implicit(e, v, f, mass, k, d, dt):
    acc = (f - d @ v - k @ e) / np.asarray(mass)
    v1 = v + dt * acc
    return e + dt * v1, v1


INTEGRATORS = {
    "trapezoidal": _step_trapezoidal,
    "semi_implicit_euler": _step_semi_implicit,
}


def admittance_step(state: AdmittanceState, spec: StiffnessSpec,
                    params: AdmittanceParams, w_ext: Wrench,
                    dt: float | None = None) -> AdmittanceState:
    """Advance ``M a + D v + K (x - x_vt) = f_ext`` by one control period.

    Translation only; the commanded rotation is set to the virtual target's.
    ``w_ext`` is the external wrench on the tool, in the TCP frame.
    """
    dt = params.dt if dt is None else dt
    tcp = spec.virtual_target_pose.from_frame
    if w_ext.frame != tcp:
        raise FrameMismatchError(f"external wrench must be in {tcp!r}")
    f = state.rotation @ w_ext.force
    k = reconstruct_stiffness(spec)
    d = damping_matrix(k, params.mass, params.damping_ratio)
    x_vt = spec.virtual_target_pose.translation
    e0 = state.position - x_vt
    e1, v1 = INTEGRATORS[params.integrator](e0, state.velocity, f,
                                            params.mass, k, d, dt)
    speed = np.linalg.norm(v1)
    if speed > params.v_max:
        v1 = v1 * (params.v_max / speed)
        if params.integrator == "trapezoidal":
            e1 = e0 + 0.5 * dt * (state.velocity + v1)
        else:
            e1 = e0 + dt * v1
    if not (np.all(np.isfinite(e1)) and np.all(np.isfinite(v1))):
        raise ControllerFault("admittance integration produced non-finite state")
    return AdmittanceState(x_vt + e1, v1, spec.virtual_target_pose.rotation)


def virtual_energy(state: AdmittanceState, spec: StiffnessSpec,
                   params: AdmittanceParams) -> float:
    e = state.position - spec.virtual_target_pose.translation
    k = reconstruct_stiffness(spec)
    v = state.velocity
    return 0.5 * float(v @ (np.asarray(params.mass) * v)) + 0.5 * float(e @ k @ e)


class WristController:
    """Stateful wrapper around :func:`admittance_step`.

    Targets arrive as whole :class:`StiffnessSpec` snapshots (latest wins).
    A non-finite wrench faults the controller and freezes its state.
    """

    def __init__(self, params: AdmittanceParams, start: Pose):
        self.params = params
        self.state = AdmittanceState.at(start)
        self.spec = StiffnessSpec.hold(start, params.k_max)
        self.fault: str | None = None

    def set_target(self, spec: StiffnessSpec):
        self.spec = spec

    def step(self, w_ext, hold: bool = False) -> AdmittanceState:
        if self.fault is not None:
            return self.state
        if hold:
            # motion frozen: keep the commanded pose, drop velocity
            self.state = replace(self.state, velocity=np.zeros(3))
            return self.state
        if not isinstance(w_ext, Wrench):
            vec = np.asarray(w_ext, dtype=float).reshape(6)
            if not np.all(np.isfinite(vec)):
                self.fault = "non-finite external wrench"
                log.error("wrist controller fault: %s", self.fault)
                return self.state
            w_ext = Wrench.from_vector(vec, self.spec.virtual_target_pose.from_frame)
        try:
            self.state = admittance_step(self.state, self.spec, self.params, w_ext)
        except ControllerFault as exc:
            self.fault = str(exc)
            log.error("wrist controller fault: %s", exc)
        return self.state


# --------------------------------------------------------------------------
# grasp force

@dataclass(frozen=True)
class GraspControllerParams:
    k_p: float = 0.0
    k_f: float = 0.002
    width_limits: tuple = (0.0, 0.11)
    v_max: float = 0.05
    rate: float = 30.0

    def __post_init__(self):
        lo, hi = self.width_limits
        if self.k_p < 0 or self.k_f < 0:
            raise ValueError("gains must be non-negative")
        if not lo < hi:
            raise ValueError("width limits must satisfy min < max")
        if self.v_max <= 0 or self.rate <= 0:
            raise ValueError("v_max and rate must be positive")
        object.__setattr__(self, "width_limits", (float(lo), float(hi)))


@dataclass(frozen=True)
class GraspState:
    width: float
    force: float
    target_width: float
    target_force: float


def grasp_control_step(gs: GraspState, params: GraspControllerParams) -> float:
    """Velocity-resolved grasp admittance, positive = closing.

    Position error is taken in the closing direction (current width minus
    target width) so that a larger-than-target width also closes.
    """
    v = (params.k_p * (gs.width - gs.target_width)
         + params.k_f * (gs.target_force - gs.force))
    return float(np.clip(v, -params.v_max, params.v_max))


class GripperController:
    def __init__(self, params: GraspControllerParams, width: float):
        self.params = params
        self.target_width = width
        self.target_force = 0.0
        self.velocity = 0.0

    def set_target(self, width: float, force: float):
        self.target_width = float(width)
        self.target_force = float(force)

    def step(self, width: float, force: float, hold: bool = False) -> float:
        if hold:
            self.velocity = 0.0
        else:
            gs = GraspState(width, force, self.target_width, self.target_force)
            self.velocity = grasp_control_step(gs, self.params)
        return self.velocity


# --------------------------------------------------------------------------
# safety

@dataclass(frozen=True)
class SafetyLimits:
    grasp_axis_limit: float = 25.0
    other_axes_limit: float = 20.0

    def __post_init__(self):
        if self.grasp_axis_limit <= 0 or self.other_axes_limit <= 0:
            raise ValueError("safety limits must be positive")


@dataclass(frozen=True)
class Violation:
    sensor: str
    axis: str
    value: float
    limit: float

    @property
    def is_grasp_axis(self) -> bool:
        return self.axis == AXIS_NAMES[GRASP_AXIS]


@dataclass(frozen=True)
class SafetyVerdict:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "OK"
        return "VIOLATION(" + ", ".join(
            f"{v.sensor}.f{v.axis}={v.value:.2f}" for v in self.violations) + ")"


def check_safety(w1: Wrench, w2: Wrench, limits: SafetyLimits) -> SafetyVerdict:
    found = []
    for name, w in (("s1", w1), ("s2", w2)):
        for i, axis in enumerate(AXIS_NAMES):
            lim = limits.grasp_axis_limit if i == GRASP_AXIS else limits.other_axes_limit
            val = float(w.force[i])
            if abs(val) > lim:
                found.append(Violation(name, axis, val, lim))
    return SafetyVerdict(tuple(found))


@dataclass
class SafetyMonitor:
    """Latching wrapper over :func:`check_safety`; stays tripped until reset."""
    limits: SafetyLimits
    latched: bool = False
    first_violation: SafetyVerdict | None = field(default=None)

    def update(self, w1: Wrench, w2: Wrench) -> SafetyVerdict:
        verdict = check_safety(w1, w2, self.limits)
        if not verdict.ok and not self.latched:
            self.latched = True
            self.first_violation = verdict
            log.warning("safety latched: %s", verdict)
        return verdict

    def reset(self):
        self.latched = False
        self.first_violation = None
