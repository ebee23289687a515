"""Deterministic desk-scale contact simulator with scripted policies.

Three loops share one simulated clock: the wrist admittance at 500 Hz, the
gripper at 30 Hz and the policy at 10 Hz.  Within a wrist tick the order is
sense -> safety -> wrist -> gripper -> policy; policy targets take effect on
the following tick.  The robot tracks the commanded TCP pose ideally; the
environment is a set of contact models evaluated at the tool tip.

Everything a run produces goes into a :class:`SessionLog` trace, and
:func:`metrics_report` recomputes all metrics from that trace alone.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from typing import ClassVar

import numpy as np

from .calibration import NOISE_LEVER
from .config import Config, load_config
from .control import (GRASP_AXIS, AdmittanceParams, GraspControllerParams,
                      GripperController, SafetyLimits, SafetyMonitor,
                      StiffnessSpec, WristController, combine_finger_wrenches,
                      finger_poses, measure_grasp_force)
from .geometry import Pose, Wrench, cross3, invert, rot_z, transform_wrench
from .policy_io import (ACTION_DIM, Action, ActionDecoder, ActionLimits,
                        encode_action)
from .stream_sync import SessionLog, log_to_bytes

log = logging.getLogger(__name__)

GRAVITY = 9.81
FRICTION_VEL_EPS = 1e-3  # m/s, regularizes Coulomb friction around v = 0


class ScenarioError(ValueError):
    pass


class IncompleteTraceError(ValueError):
    pass


def _vec3(v, name) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ScenarioError(f"{name} must be three finite numbers")
    return a


def _unit(v, name) -> np.ndarray:
    a = _vec3(v, name)
    n = np.linalg.norm(a)
    if n == 0:
        raise ScenarioError(f"{name} must be non-zero")
    return a / n


def _check_mu(mu, name="mu"):
    if not 0.0 <= mu <= 2.0:
        raise ScenarioError(f"{name} must lie in [0, 2], got {mu}")


# --------------------------------------------------------------------------
# contact models

@dataclass(frozen=True, eq=False)
class CompliantPlane:
    """Penalty half-space with regularized Coulomb friction."""
    kind: ClassVar[str] = "compliant_plane"
    normal: np.ndarray
    origin: np.ndarray
    k_env: float
    mu: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "normal", _unit(self.normal, "plane normal"))
        object.__setattr__(self, "origin", _vec3(self.origin, "plane origin"))
        if not self.k_env > 0:
            raise ScenarioError("plane stiffness must be positive")
        _check_mu(self.mu)

    def penetration(self, tip) -> float:
        return float((self.origin - tip) @ self.normal)

    def force(self, tip, tip_velocity) -> tuple[np.ndarray, float, float]:
        """(force on the tool, normal magnitude, friction magnitude)."""
        fn = self.k_env * max(0.0, self.penetration(tip))
        if fn == 0.0:
            return np.zeros(3), 0.0, 0.0
        vt = tip_velocity - (tip_velocity @ self.normal) * self.normal
        friction = -self.mu * fn * vt / np.sqrt(vt @ vt + FRICTION_VEL_EPS ** 2)
        return fn * self.normal + friction, fn, float(np.linalg.norm(friction))


@dataclass(frozen=True, eq=False)
class SpringSocket:
    """Spring-loaded receptacle along ``axis`` (the insertion direction)."""
    kind: ClassVar[str] = "spring_socket"
    axis: np.ndarray
    origin: np.ndarray
    preload: float
    k_spring: float
    engage_force: float

    def __post_init__(self):
        object.__setattr__(self, "axis", _unit(self.axis, "socket axis"))
        object.__setattr__(self, "origin", _vec3(self.origin, "socket origin"))
        if not self.k_spring > 0:
            raise ScenarioError("socket spring stiffness must be positive")
        if not self.engage_force > 0:
            raise ScenarioError("engage force must be positive")
        if self.preload < 0:
            raise ScenarioError("preload must be non-negative")

    def compression(self, tip) -> float:
        return float((tip - self.origin) @ self.axis)

    def force(self, tip) -> tuple[np.ndarray, float, float]:
        """(force on the tool, axial magnitude, compression >= 0)."""
        c = self.compression(tip)
        if c <= 0:
            return np.zeros(3), 0.0, 0.0
        axial = self.preload + self.k_spring * c
        return -axial * self.axis, axial, c


@dataclass(frozen=True, eq=False)
class GraspSlip:
    """A compliant object held between the fingers, with friction-limited grip.

    ``load_profile`` is a table of (x, N) pairs interpolated over time
    (``profile_mode="time"``) or over penetration depth of the tool tip past
    ``origin`` against ``load_direction`` (``"depth"``).  The load pushes the
    object along ``load_direction``.  Gravity and the profile load only act
    after ``support_release`` seconds.
    """
    kind: ClassVar[str] = "grasp_slip"
    mass: float
    mu_grasp: float
    object_width: float
    object_stiffness: float
    load_profile: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    profile_mode: str = "time"
    load_direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -1.0]))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    support_release: float = 0.0

    def __post_init__(self):
        if self.mass < 0 or not self.object_width > 0 or not self.object_stiffness > 0:
            raise ScenarioError("object needs mass >= 0, width > 0, stiffness > 0")
        _check_mu(self.mu_grasp, "mu_grasp")
        if self.profile_mode not in ("time", "depth"):
            raise ScenarioError(f"unknown profile mode {self.profile_mode!r}")
        prof = np.asarray(self.load_profile, dtype=float).reshape(-1, 2)
        if len(prof) > 1 and np.any(np.diff(prof[:, 0]) <= 0):
            raise ScenarioError("load profile abscissae must increase")
        object.__setattr__(self, "load_profile", prof)
        object.__setattr__(self, "load_direction", _unit(self.load_direction, "load direction"))
        object.__setattr__(self, "origin", _vec3(self.origin, "load origin"))

    def grasp_force(self, width) -> float:
        return self.object_stiffness * max(0.0, self.object_width - width)

    def depth(self, tip) -> float:
        return max(0.0, float(-(tip - self.origin) @ self.load_direction))

    def external_load(self, t, tip) -> np.ndarray:
        if t < self.support_release:
            return np.zeros(3)
        x = t if self.profile_mode == "time" else self.depth(tip)
        if self.profile_mode == "depth" and x <= 0:
            mag = 0.0
        else:
            mag = float(np.interp(x, self.load_profile[:, 0], self.load_profile[:, 1]))
        return mag * self.load_direction + np.array([0.0, 0.0, -self.mass * GRAVITY])


CONTACT_KINDS = {c.kind: c for c in (CompliantPlane, SpringSocket, GraspSlip)}
ContactModel = CompliantPlane | SpringSocket | GraspSlip


def contact_from_dict(d: dict) -> ContactModel:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in CONTACT_KINDS:
        raise ScenarioError(f"unknown contact kind {kind!r}")
    try:
        return CONTACT_KINDS[kind](**d)
    except TypeError as exc:
        raise ScenarioError(f"bad {kind} parameters: {exc}") from exc


# --------------------------------------------------------------------------
# scenario

POLICY_IDS = ("wipe", "insert", "skewer", "grasp")


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    policy: str
    duration: float
    contacts: tuple
    start_position: np.ndarray
    start_width: float
    tool_offset: np.ndarray
    limits: SafetyLimits
    seed: int = 0
    script: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    sensor_noise: float = 0.0
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.duration > 0:
            raise ScenarioError("duration must be positive")
        if self.policy not in POLICY_IDS:
            raise ScenarioError(f"unknown policy {self.policy!r}")
        if sum(isinstance(c, GraspSlip) for c in self.contacts) > 1:
            raise ScenarioError("at most one grasped object per scenario")
        if self.sensor_noise < 0:
            raise ScenarioError("sensor noise must be non-negative")
        object.__setattr__(self, "start_position", _vec3(self.start_position, "start_position"))
        object.__setattr__(self, "tool_offset", _vec3(self.tool_offset, "tool_offset"))

    @classmethod
    def from_dict(cls, name: str, d: dict) -> "Scenario":
        known = {"policy", "duration", "seed", "start_position", "start_width",
                 "tool_offset", "safety", "contacts", "script", "thresholds",
                 "sensor_noise"}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown scenario keys {sorted(extra)}")
        try:
            limits = SafetyLimits(**d.get("safety", {}))
            return cls(
                name=name,
                policy=d.get("policy", name),
                duration=float(d["duration"]),
                contacts=tuple(contact_from_dict(c) for c in d.get("contacts", [])),
                start_position=d["start_position"],
                start_width=float(d["start_width"]),
                tool_offset=d.get("tool_offset", [0.0, 0.0, 0.0]),
                limits=limits,
                seed=int(d.get("seed", 0)),
                script=dict(d.get("script", {})),
                thresholds=dict(d.get("thresholds", {})),
                sensor_noise=float(d.get("sensor_noise", 0.0)),
                source=json.loads(json.dumps(d)),
            )
        except KeyError as exc:
            raise ScenarioError(f"scenario {name!r} lacks {exc}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ScenarioError):
                raise
            raise ScenarioError(f"scenario {name!r}: {exc}") from exc

    def to_dict(self) -> dict:
        return {**self.source, "seed": self.seed}

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=int(seed))

    def first(self, kind):
        return next((c for c in self.contacts if isinstance(c, kind)), None)


def load_scenario(name: str, config: Config | None = None, seed=None) -> Scenario:
    config = config or load_config()
    if name not in config.scenarios:
        raise ScenarioError(f"no scenario named {name!r}; have {sorted(config.scenarios)}")
    scn = Scenario.from_dict(name, config.scenarios[name])
    return scn if seed is None else scn.with_seed(seed)


# --------------------------------------------------------------------------
# simulator state and physics

@dataclass(frozen=True, eq=False)
class SimState:
    t: float
    position: np.ndarray
    rotation: np.ndarray
    velocity: np.ndarray
    width: float
    w1: Wrench
    w2: Wrench
    grasp_force: float = 0.0          # true object squeeze
    shift: np.ndarray = field(default_factory=lambda: np.zeros(3))  # object slip offset
    slip_speed: float = 0.0
    slipping: bool = False
    slip_events: int = 0
    tangential_load: float = 0.0
    capacity: float = 0.0
    normal_force: float = 0.0
    friction_force: float = 0.0
    axial_force: float = 0.0
    insertion_depth: float = 0.0
    object_depth: float = 0.0
    max_object_depth: float = 0.0
    engaged: bool = False
    engaged_time: float | None = None
    contact_time: float | None = None
    contact_position: np.ndarray | None = None

    def __post_init__(self):
        if self.insertion_depth < 0:
            raise ValueError("insertion depth must be non-negative")

    def pose(self) -> Pose:
        return Pose(self.rotation, self.position, "tcp", "base")

    @property
    def in_contact(self) -> bool:
        return self.normal_force > 0 or self.axial_force > 0 or self.object_depth > 0


def _finger_wrenches(scn: Scenario, rotation, width, force, torque, grasp_force, rng):
    """Per-sensor wrenches from the external load carried by the tool.

    ``force``/``torque`` are the environment's load on the tool about the TCP
    (base frame).  The fingers share it equally and additionally squeeze the
    object with ``grasp_force`` along their own +z.
    """
    applied = -np.concatenate([rotation.T @ force, rotation.T @ torque])
    half = Wrench.from_vector(0.5 * applied, "tcp")
    out = []
    for pose in finger_poses(width):
        w = transform_wrench(half, invert(pose))
        v = w.vector()
        v[GRASP_AXIS] += grasp_force
        if scn.sensor_noise > 0 and rng is not None:
            sd = scn.sensor_noise * np.r_[np.ones(3), np.full(3, NOISE_LEVER)]
            v = v + rng.normal(0.0, 1.0, 6) * sd
        out.append(Wrench.from_vector(v, pose.from_frame))
    return out


def _evaluate(scn: Scenario, prev: SimState | None, t, position, rotation,
              velocity, width, dt, rng) -> SimState:
    obj = scn.first(GraspSlip)
    shift = prev.shift.copy() if prev is not None else np.zeros(3)
    tip = position + rotation @ scn.tool_offset + shift
    env = np.zeros(3)
    normal = friction = axial = insertion = 0.0
    engaged = prev.engaged if prev is not None else False
    for c in scn.contacts:
        if isinstance(c, CompliantPlane):
            f, fn, ff = c.force(tip, velocity)
            env += f
            normal += fn
            friction += ff
        elif isinstance(c, SpringSocket):
            f, fa, comp = c.force(tip)
            env += f
            axial += fa
            insertion = max(insertion, comp)
            engaged = engaged or fa >= c.engage_force

    grasp_force = obj.grasp_force(width) if obj else 0.0
    slip_speed, slipping, events = 0.0, False, prev.slip_events if prev else 0
    tangential = capacity = depth = 0.0
    total = env
    if obj is not None:
        depth = obj.depth(tip) if obj.profile_mode == "depth" else 0.0
        total = env + obj.external_load(t, tip)
        g = rotation[:, 1]  # grasp axis in base
        tan = total - (total @ g) * g
        tangential = float(np.linalg.norm(tan))
        capacity = obj.mu_grasp * grasp_force
        slipping = tangential > capacity
        if slipping:
            u = tan / tangential
            total = total - tan + capacity * u
            if obj.mass > 0 and prev is not None:
                slip_speed = prev.slip_speed + dt * (tangential - capacity) / obj.mass
                shift = shift + dt * slip_speed * u
            if prev is None or not prev.slipping:
                events += 1
    torque = cross3(tip - position, total)
    w1, w2 = _finger_wrenches(scn, rotation, width, total, torque, grasp_force, rng)

    contact_time = prev.contact_time if prev else None
    contact_position = prev.contact_position if prev else None
    if contact_time is None and (normal > 0 or axial > 0 or depth > 0):
        contact_time, contact_position = t, position.copy()
    engaged_time = prev.engaged_time if prev else None
    if engaged and engaged_time is None:
        engaged_time = t
    return SimState(
        t=t, position=position, rotation=rotation, velocity=velocity,
        width=width, w1=w1, w2=w2, grasp_force=grasp_force, shift=shift,
        slip_speed=slip_speed, slipping=slipping, slip_events=events,
        tangential_load=tangential, capacity=capacity, normal_force=normal,
        friction_force=friction, axial_force=axial, insertion_depth=insertion,
        object_depth=depth,
        max_object_depth=max(depth, prev.max_object_depth if prev else 0.0),
        engaged=engaged, engaged_time=engaged_time, contact_time=contact_time,
        contact_position=contact_position)


def initial_state(scn: Scenario, rng=None) -> SimState:
    return _evaluate(scn, None, 0.0, scn.start_position.copy(), np.eye(3),
                     np.zeros(3), scn.start_width, 0.0, rng)


def sim_step(state: SimState, scn: Scenario, commanded: Pose, grasp_velocity: float,
             dt: float, width_limits=(0.0, 0.11), rng=None) -> SimState:
    """Advance the plant by ``dt``: track the commanded pose, move the
    fingers at ``grasp_velocity`` (positive closes), then resolve contacts,
    slip and sensor wrenches at the new configuration."""
    pos = commanded.translation.copy()
    vel = (pos - state.position) / dt
    width = float(np.clip(state.width - grasp_velocity * dt, *width_limits))
    return _evaluate(scn, state, state.t + dt, pos, commanded.rotation.copy(),
                     vel, width, dt, rng)


# --------------------------------------------------------------------------
# scripted policies

APPROACH, PRESS, WIPE, ROTATE, ADVANCE, HOLD = range(6)
PHASE_NAMES = ("approach", "press", "wipe", "rotate", "advance", "hold")


@dataclass(frozen=True, eq=False)
class PolicyCommand:
    phase: int
    reference: np.ndarray
    target: np.ndarray
    rotation: np.ndarray
    stiffness: float
    width: float
    grasp_force: float
    angle: float = 0.0

    def action(self, limits: ActionLimits = ActionLimits()) -> np.ndarray:
        ref = Pose(self.rotation, self.reference, limits.tcp_frame, limits.base_frame)
        vt = Pose(self.rotation, self.target, limits.tcp_frame, limits.base_frame)
        return encode_action(Action(ref, vt, self.stiffness, self.width,
                                    self.grasp_force), limits)


def _approach(state, direction, speed, rate):
    return state.position, state.position + direction * (speed / rate)


def plan(state: SimState, scn: Scenario, k_max: float = 3000.0,
         policy_rate: float = 10.0) -> PolicyCommand:
    """Script step for ``scn.policy``; a pure function of (state, scenario).

    Force phases re-anchor the reference at the current position and put
    the virtual target ``F/k`` ahead, so the contact force settles where the
    environment pushes back with exactly ``F``.
    """
    s = scn.script
    grip = float(s.get("grasp_force", 0.0))
    rot = np.eye(3)
    keep = dict(width=state.width, grasp_force=grip)

    if scn.policy == "wipe":
        plane = scn.first(CompliantPlane)
        n = plane.normal
        if state.contact_time is None:
            ref, vt = _approach(state, -n, s["approach_speed"], policy_rate)
            return PolicyCommand(APPROACH, ref, vt, rot, k_max, **keep)
        since = state.t - state.contact_time - s.get("settle", 0.0)
        phase = PRESS if since < 0 else WIPE
        along = _unit(s.get("wipe_direction", [1.0, 0.0, 0.0]), "wipe direction")
        path = 0.0 if since < 0 else s["wipe_amplitude"] * np.sin(2 * np.pi * since / s["wipe_period"])
        anchor = state.contact_position + path * along
        ref = anchor + n * ((state.position - anchor) @ n)
        vt = ref - n * (s["target_force"] / s["k_press"])
        return PolicyCommand(phase, ref, vt, rot, s["k_press"], **keep)

    if scn.policy == "insert":
        a = scn.first(SpringSocket).axis
        if state.contact_time is None:
            ref, vt = _approach(state, a, s["approach_speed"], policy_rate)
            return PolicyCommand(APPROACH, ref, vt, rot, k_max, **keep)
        ref = state.position
        vt = ref + a * (s["press_force"] / s["k_press"])
        angle, phase = 0.0, PRESS
        if state.engaged_time is not None:
            since = state.t - state.engaged_time - s.get("settle", 0.0)
            if since >= 0:
                phase = ROTATE
                angle = min(np.radians(s["rotate_angle"]),
                            np.radians(s["rotate_speed"]) * since)
        return PolicyCommand(phase, ref, vt, rot_z(angle), s["k_press"],
                             angle=angle, **keep)

    if scn.policy == "skewer":
        obj = scn.first(GraspSlip)
        d = -obj.load_direction
        target = s["target_depth"]
        if state.contact_time is None:
            ref, vt = _approach(state, d, s["approach_speed"], policy_rate)
            return PolicyCommand(APPROACH, ref, vt, rot, k_max, **keep)
        if state.max_object_depth >= target:
            ref = state.position + d * (target - state.object_depth)
            return PolicyCommand(HOLD, ref, ref, rot, k_max, **keep)
        # never aim further than a small overtravel past the target depth
        reach = min(s["push_force"] / s["k_push"],
                    target - state.object_depth + s.get("overtravel", 0.004))
        ref = state.position
        return PolicyCommand(ADVANCE, ref, ref + d * reach, rot, s["k_push"], **keep)

    # grasp: hold the start pose, regulate the grasp force
    ref = scn.start_position
    return PolicyCommand(HOLD, ref, ref, rot, k_max, **keep)


def scripted_policy(state: SimState, scn: Scenario, k_max: float = 3000.0,
                    policy_rate: float = 10.0) -> np.ndarray:
    """21-D action for the current policy tick."""
    return plan(state, scn, k_max, policy_rate).action()


# --------------------------------------------------------------------------
# closed loop

STREAMS = {
    # name: (rate key, columns)
    "tcp": ("wrist", ("x", "y", "z", "vx", "vy", "vz", "vt_x", "vt_y", "vt_z",
                      "k", "yaw", "hold")),
    "wrench_s1": ("wrist", ("fx", "fy", "fz", "tx", "ty", "tz")),
    "wrench_s2": ("wrist", ("fx", "fy", "fz", "tx", "ty", "tz")),
    "f_ext": ("wrist", ("fx", "fy", "fz", "tx", "ty", "tz")),
    "contact": ("wrist", ("normal", "friction", "axial", "insertion_depth",
                          "engaged", "slipping", "tangential_load", "capacity",
                          "object_depth", "slip_events", "grasp_force")),
    "safety": ("wrist", ("ok", "latched")),
    "grasp": ("gripper", ("width", "force", "velocity", "force_target", "width_target")),
    "action": ("policy", tuple(f"a{i}" for i in range(ACTION_DIM))),
    "policy": ("policy", ("phase", "held", "clamped", "angle")),
}


@dataclass
class ScenarioRun:
    scenario: Scenario
    trace: SessionLog
    report: "MetricsReport"
    final_state: SimState

    def trace_bytes(self) -> bytes:
        return log_to_bytes(self.trace)


def _rates(cfg: Config):
    wrist = cfg.admittance.rate
    ratio = wrist / cfg.policy_rate
    tick_ns = 1e9 / wrist
    if abs(ratio - round(ratio)) > 1e-9 or abs(tick_ns - round(tick_ns)) > 1e-9:
        raise ScenarioError("wrist rate must be an integer multiple of the policy "
                            "rate and divide 1e9 ns evenly")
    return {"wrist": wrist, "gripper": cfg.gripper.rate, "policy": cfg.policy_rate}, \
        int(round(ratio)), int(round(tick_ns))


def gripper_tick(i: int, wrist_rate: float, gripper_rate: float) -> bool:
    """Tick ``i`` of the wrist loop also runs the gripper loop."""
    return i == 0 or int(i * gripper_rate // wrist_rate) != int((i - 1) * gripper_rate // wrist_rate)


def new_trace(scn: Scenario, rates: dict) -> SessionLog:
    trace = SessionLog(f"{scn.name}-seed{scn.seed}", 0,
                       {"scenario": scn.name, "seed": scn.seed,
                        "definition": scn.to_dict(),
                        "rates": rates})
    for name, (rate_key, cols) in STREAMS.items():
        trace.add_stream(name, rates[rate_key], len(cols), 0, cols)
    return trace


def run_scenario(scn: Scenario, config: Config | None = None) -> ScenarioRun:
    cfg = config or load_config()
    rates, per_policy, tick_ns = _rates(cfg)
    adm: AdmittanceParams = cfg.admittance
    grip: GraspControllerParams = cfg.gripper
    dt = 1.0 / adm.rate
    rng = np.random.default_rng(scn.seed)
    limits = ActionLimits(k_max=adm.k_max, width_limits=grip.width_limits)

    state = initial_state(scn, rng)
    wrist = WristController(adm, state.pose())
    gripper = GripperController(grip, state.width)
    gripper.set_target(state.width, measure_grasp_force(state.w1, state.w2))
    monitor = SafetyMonitor(scn.limits)
    hold = Action(state.pose(), state.pose(), adm.k_max, state.width,
                  gripper.target_force)
    decoder = ActionDecoder(limits, hold)
    trace = new_trace(scn, rates)
    v_grasp = 0.0

    n_ticks = int(round(scn.duration * adm.rate))
    for i in range(n_ticks):
        t_ns = i * tick_ns
        # sense
        w1, w2 = state.w1, state.w2
        s1, s2 = finger_poses(state.width)
        w_ext = -combine_finger_wrenches(w1, w2, s1, s2)
        # safety
        verdict = monitor.update(w1, w2)
        frozen = monitor.latched or wrist.fault is not None
        # wrist
        ws = wrist.step(w_ext, hold=frozen)
        # gripper
        if gripper_tick(i, rates["wrist"], rates["gripper"]):
            f_meas = measure_grasp_force(w1, w2)
            v_grasp = gripper.step(state.width, f_meas, hold=frozen)
            trace.append("grasp", t_ns, (state.width, f_meas, v_grasp,
                                         gripper.target_force, gripper.target_width))
        if frozen:
            v_grasp = 0.0
        # policy
        if i % per_policy == 0:
            cmd = plan(state, scn, adm.k_max, rates["policy"])
            a = cmd.action(limits)
            act = decoder(a)
            wrist.set_target(act.stiffness_spec(adm.k_max))
            gripper.set_target(act.width, act.grasp_force)
            trace.append("action", t_ns, a)
            trace.append("policy", t_ns, (cmd.phase, decoder.held,
                                          act.stiffness_clamped, cmd.angle))

        spec: StiffnessSpec = wrist.spec
        yaw = np.arctan2(ws.rotation[1, 0], ws.rotation[0, 0])
        trace.append("tcp", t_ns, (*ws.position, *ws.velocity,
                                   *spec.virtual_target_pose.translation,
                                   spec.k, yaw, float(frozen)))
        trace.append("wrench_s1", t_ns, w1.vector())
        trace.append("wrench_s2", t_ns, w2.vector())
        trace.append("f_ext", t_ns, w_ext.vector())
        trace.append("contact", t_ns, (
            state.normal_force, state.friction_force, state.axial_force,
            state.insertion_depth, state.engaged, state.slipping,
            state.tangential_load, state.capacity, state.object_depth,
            state.slip_events, state.grasp_force))
        trace.append("safety", t_ns, (verdict.ok, monitor.latched))

        state = sim_step(state, scn, ws.pose(), v_grasp, dt, grip.width_limits, rng)

    return ScenarioRun(scn, trace, metrics_report(trace), state)


# --------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    comparison: str = "<="

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"  [{tag}] {self.name}: {self.value:.6g} {self.comparison} {self.threshold:.6g}"


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    metrics: dict
    checks: list
    violations: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "seed": self.seed,
                "passed": self.passed, "metrics": self.metrics,
                "checks": [vars(c) for c in self.checks],
                "violations": self.violations}

    def to_json(self) -> str:
        return json.dumps(_plain(self.to_dict()), sort_keys=True, indent=2)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def text(self) -> str:
        lines = [f"scenario {self.scenario} (seed {self.seed}): "
                 + ("PASS" if self.passed else "FAIL")]
        for k in sorted(self.metrics):
            v = self.metrics[k]
            lines.append(f"  {k} = {v:.6g}" if isinstance(v, float) else f"  {k} = {v}")
        lines += [c.line() for c in self.checks]
        for v in self.violations:
            lines.append(f"  violation {v['sensor']}.f{v['axis']} first at "
                         f"t={v['first_time']:.3f}s peak {v['peak']:.3f} N "
                         f"(limit {v['limit']:.1f} N, {v['count']} samples)")
        return "\n".join(lines)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return round(float(x), 12)
    if isinstance(x, (np.integer, np.bool_)):
        return x.item()
    return x


def _need(trace: SessionLog, names):
    missing = [n for n in names if n not in trace.streams]
    if missing:
        raise IncompleteTraceError(f"trace lacks streams {missing}")
    empty = [n for n in names if trace.count(n) == 0]
    if empty:
        raise IncompleteTraceError(f"trace streams {empty} are empty")


def metrics_report(trace: SessionLog) -> MetricsReport:
    """Recompute scenario metrics and pass/fail checks from a trace."""
    meta = trace.meta
    if "definition" not in meta:
        raise IncompleteTraceError("trace metadata lacks the scenario definition")
    _need(trace, ["tcp", "wrench_s1", "wrench_s2", "contact", "safety", "grasp", "policy"])
    scn = Scenario.from_dict(meta["scenario"], meta["definition"])
    lim = scn.limits
    sec = lambda s: trace.times(s).astype(np.float64) * 1e-9  # noqa: E731
    col = trace.column
    t = sec("tcp")
    m: dict = {}
    checks: list = []

    # safety scan
    violations = []
    peak = {"grasp_axis": 0.0, "other_axes": 0.0}
    for sensor in ("s1", "s2"):
        x = trace.values(f"wrench_{sensor}")
        ts = sec(f"wrench_{sensor}")
        for i, axis in enumerate("xyz"):
            limit = lim.grasp_axis_limit if i == GRASP_AXIS else lim.other_axes_limit
            mag = np.abs(x[:, i])
            key = "grasp_axis" if i == GRASP_AXIS else "other_axes"
            peak[key] = max(peak[key], float(mag.max(initial=0.0)))
            bad = np.flatnonzero(mag > limit)
            if len(bad):
                violations.append({"sensor": sensor, "axis": axis,
                                   "first_time": float(ts[bad[0]]),
                                   "peak": float(mag[bad].max()),
                                   "limit": limit, "count": int(len(bad))})
    violations.sort(key=lambda v: (v["first_time"], v["sensor"], v["axis"]))
    m["peak_grasp_axis_force"] = peak["grasp_axis"]
    m["peak_other_axes_force"] = peak["other_axes"]
    m["safety_violations"] = len(violations)
    checks.append(Check("forces_within_limits", float(len(violations)), 0.0, not violations))

    # safety supremacy: nothing moves after the latch
    latched = col("safety", "latched") > 0
    pos = np.stack([col("tcp", c) for c in ("x", "y", "z")], axis=1)
    motion = 0.0
    if latched.any():
        k0 = int(np.argmax(latched))
        m["latch_time"] = float(sec("safety")[k0])
        motion = float(np.abs(np.diff(pos[k0:], axis=0)).max(initial=0.0))
        gt = sec("grasp")
        after = gt >= m["latch_time"]
        motion = max(motion, float(np.abs(col("grasp", "velocity")[after]).max(initial=0.0)))
    m["motion_after_latch"] = motion
    checks.append(Check("no_motion_after_latch", motion, 0.0, motion == 0.0))

    # rate fidelity: whole policy windows hold exactly 50 wrist / 3 gripper ticks
    pt = trace.times("policy")
    edges = np.append(pt, np.iinfo(np.uint64).max)
    wrist_counts = np.diff(np.searchsorted(trace.times("tcp"), edges))[:-1]
    grip_counts = np.diff(np.searchsorted(trace.times("grasp"), edges))[:-1]
    rates = meta.get("rates", {"wrist": 500.0, "gripper": 30.0, "policy": 10.0})
    want_w = rates["wrist"] / rates["policy"]
    want_g = rates["gripper"] / rates["policy"]
    rate_ok = bool(len(pt) > 0 and np.all(wrist_counts == want_w) and np.all(grip_counts == want_g))
    m["policy_ticks"] = int(len(pt))
    checks.append(Check("rate_fidelity", float(rate_ok), 1.0, rate_ok, "=="))

    # slip model consistency: slipping only when the load beats the grip
    slipping = col("contact", "slipping") > 0
    load = col("contact", "tangential_load")
    cap = col("contact", "capacity")
    inconsistent = int(np.sum(slipping & (cap >= load)))
    events = int(np.sum(slipping[1:] & ~slipping[:-1]) + (slipping[0] if len(slipping) else 0))
    m["slip_events"] = events
    m["slip_inconsistent_rows"] = inconsistent
    checks.append(Check("slip_consistency", float(inconsistent), 0.0, inconsistent == 0))

    # grasp-force tracking
    gt = sec("grasp")
    gf = col("grasp", "force")
    target = col("grasp", "force_target")
    window = scn.thresholds.get("grasp_window")
    sel = (gt >= window[0]) & (gt <= window[1]) if window else gt >= 0.5 * gt.max(initial=0.0)
    denom = np.where(target[sel] > 0, target[sel], 1.0)
    gap = np.abs(gf[sel] - target[sel])
    err = float(gap.max()) if sel.any() else np.inf
    rel = float((gap / denom).max()) if sel.any() else np.inf
    m["grasp_tracking_abs_error"] = err
    m["grasp_tracking_rel_error"] = rel
    if "max_tracking_error" in scn.thresholds:
        th = scn.thresholds["max_tracking_error"]
        checks.append(Check("grasp_tracking", rel, th, rel < th, "<"))

    normal = col("contact", "normal")
    in_contact = normal > 0
    touching = in_contact | (col("contact", "axial") > 0) | (col("contact", "object_depth") > 0)
    m["contact_time"] = float(touching.sum()) / rates["wrist"]

    if scn.policy == "wipe":
        f_target = scn.script["target_force"]
        band = scn.thresholds.get("band", 0.2)
        inside = in_contact & (np.abs(normal - f_target) <= band * f_target)
        occ = float(inside.sum() / in_contact.sum()) if in_contact.any() else 0.0
        m["band_occupancy"] = occ
        m["mean_contact_normal_force"] = float(normal[in_contact].mean()) if in_contact.any() else 0.0
        th = scn.thresholds.get("occupancy", 0.8)
        checks.append(Check("band_occupancy", occ, th, occ >= th, ">="))

    if scn.policy == "insert":
        axial = col("contact", "axial")
        engaged = col("contact", "engaged") > 0
        phase = col("policy", "phase")
        rot_rows = np.flatnonzero(phase == ROTATE)
        rot_start = float(sec("policy")[rot_rows[0]]) if len(rot_rows) else np.inf
        before = axial[t < rot_start]
        axial_before = float(before.max(initial=0.0))
        final_angle = float(np.degrees(abs(col("tcp", "yaw")[-1]))) if len(t) else 0.0
        want_angle = float(scn.script.get("rotate_angle", 0.0))
        m["engaged"] = bool(engaged.any())
        m["engaged_monotone"] = bool(np.all(np.diff(engaged.astype(int)) >= 0))
        m["axial_force_before_rotation"] = axial_before
        m["rotation_start"] = rot_start if np.isfinite(rot_start) else -1.0
        m["final_rotation_deg"] = final_angle
        success = (m["engaged"] and np.isfinite(rot_start)
                   and abs(final_angle - want_angle) < 1.0)
        m["insertion_success"] = bool(success)
        checks.append(Check("axial_before_rotation", axial_before,
                            scn.thresholds.get("min_axial", 15.0),
                            axial_before >= scn.thresholds.get("min_axial", 15.0), ">="))
        mg = scn.thresholds.get("max_grasp", lim.grasp_axis_limit)
        checks.append(Check("peak_grasp_force", peak["grasp_axis"], mg, peak["grasp_axis"] <= mg))
        checks.append(Check("insertion_success", float(success), 1.0, bool(success), "=="))

    if scn.policy == "skewer":
        depth = float(col("contact", "object_depth").max(initial=0.0))
        want = scn.script["target_depth"]
        m["max_object_depth"] = depth
        m["skewer_complete"] = bool(depth >= want)
        checks.append(Check("skewer_depth", depth, want, depth >= want, ">="))
        mx = scn.thresholds.get("max_slip_events", 0)
        checks.append(Check("slip_events", float(events), float(mx), events <= mx))

    return MetricsReport(scn.name, int(meta.get("seed", scn.seed)), _plain(m), checks, violations)
