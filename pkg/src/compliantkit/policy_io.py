"""Policy-side contracts: the 21-D action, wrench windows and label extraction.

Action layout (indices)::

    [0:3]   reference position        [3:9]   reference rotation (2 rows)
    [9:12]  virtual target position   [12:18] virtual target rotation
    [18]    stiffness (N/m)           [19]    gripper width (m)
    [20]    grasp force (N)
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .control import OFFSET_EPS, StiffnessSpec
from .geometry import Pose, RotationDecodeError, Wrench, decode_rot6d, encode_rot6d

log = logging.getLogger(__name__)

ACTION_DIM = 21
WINDOW_LEN = 32


class ActionRejected(ValueError):
    pass


@dataclass(frozen=True)
class ActionLimits:
    k_min: float = 100.0
    k_max: float = 3000.0
    width_limits: tuple = (0.0, 0.11)
    tcp_frame: str = "tcp"
    base_frame: str = "base"


@dataclass(frozen=True, eq=False)
class Action:
    reference: Pose
    virtual_target: Pose
    stiffness: float
    width: float
    grasp_force: float
    stiffness_clamped: bool = False

    def stiffness_spec(self, k_max: float) -> StiffnessSpec:
        return StiffnessSpec(self.stiffness, k_max, self.reference,
                             self.virtual_target)


def _pose_from_9d(v, limits: ActionLimits) -> Pose:
    return Pose(decode_rot6d(v[3:9]), v[:3], limits.tcp_frame, limits.base_frame)


def decode_action(a, limits: ActionLimits = ActionLimits()) -> Action:
    a = np.asarray(a, dtype=float)
    if a.shape != (ACTION_DIM,):
        raise ActionRejected(f"expected {ACTION_DIM} values, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ActionRejected("non-finite action entries")
    try:
        ref = _pose_from_9d(a[0:9], limits)
        vt = _pose_from_9d(a[9:18], limits)
    except RotationDecodeError as exc:
        raise ActionRejected(str(exc)) from exc
    k = float(a[18])
    clamped = not (limits.k_min < k <= limits.k_max)
    if clamped:
        k = float(np.clip(k, limits.k_min, limits.k_max))
        log.warning("stiffness %.4g clamped to %.4g", a[18], k)
    width = float(a[19])
    lo, hi = limits.width_limits
    if not lo <= width <= hi:
        raise ActionRejected(f"width {width} outside [{lo}, {hi}]")
    if a[20] < 0:
        raise ActionRejected("negative grasp force")
    return Action(ref, vt, k, width, float(a[20]), clamped)


def encode_action(action: Action, limits: ActionLimits = ActionLimits()) -> np.ndarray:
    lo, hi = limits.width_limits
    if not lo <= action.width <= hi:
        raise ValueError(f"width {action.width} outside [{lo}, {hi}]")
    if action.grasp_force < 0:
        raise ValueError("grasp force must be non-negative")
    if not action.stiffness > 0:
        raise ValueError("stiffness must be positive")
    out = np.empty(ACTION_DIM)
    for i, pose in ((0, action.reference), (9, action.virtual_target)):
        out[i:i + 3] = pose.translation
        out[i + 3:i + 9] = encode_rot6d(pose.rotation)
    out[18:] = action.stiffness, action.width, action.grasp_force
    return out


class ActionDecoder:
    """Decodes a stream of actions; a rejected action repeats the last good one."""

    def __init__(self, limits: ActionLimits, initial: Action):
        self.limits = limits
        self.current = initial
        self.held = False

    def __call__(self, a) -> Action:
        try:
            self.current = decode_action(a, self.limits)
            self.held = False
        except ActionRejected as exc:
            log.warning("action rejected, holding previous: %s", exc)
            self.held = True
        return self.current


# --------------------------------------------------------------------------
# observation window

class WrenchWindow:
    """Ring buffer of the most recent timestamped wrench samples."""

    def __init__(self, capacity: int = WINDOW_LEN):
        self.capacity = capacity
        self._buf: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self._buf)

    def push(self, w: Wrench, t: float) -> "WrenchWindow":
        if self._buf and not t > self._buf[-1][0]:
            raise ValueError(f"timestamp {t} not after {self._buf[-1][0]}")
        self._buf.append((float(t), w))
        return self

    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self._buf])

    def samples(self) -> list:
        return [w for _, w in self._buf]

    def array(self) -> np.ndarray:
        """(n, 6) array, oldest first."""
        if not self._buf:
            return np.zeros((0, 6))
        return np.stack([w.vector() for _, w in self._buf])


def push_wrench(win: WrenchWindow, w: Wrench, t: float) -> WrenchWindow:
    return win.push(w, t)


# --------------------------------------------------------------------------
# compliance labels

@dataclass(frozen=True)
class LabelingConfig:
    k_min: float = 100.0
    k_max: float = 3000.0
    f_ref: float = 30.0
    smoothing_window: float = 0.1

    def __post_init__(self):
        if not 0 < self.k_min < self.k_max:
            raise ValueError("need 0 < k_min < k_max")
        if self.f_ref <= 0 or self.smoothing_window < 0:
            raise ValueError("f_ref must be positive, window non-negative")

    def stiffness(self, force_mag):
        """Monotone non-increasing force -> stiffness map.

        Forces too small to produce an offset of ``OFFSET_EPS`` at ``k_max``
        map to ``k_max`` so the reconstructed (isotropic) spring still
        reproduces them exactly.
        """
        f = np.asarray(force_mag, dtype=float)
        k = np.clip(self.k_max * (1.0 - f / self.f_ref), self.k_min, self.k_max)
        return np.where(f < self.k_max * OFFSET_EPS, self.k_max, k)


@dataclass(frozen=True, eq=False)
class DemoTrajectory:
    times: np.ndarray
    tcp_poses: tuple
    tcp_wrenches: tuple
    gripper_widths: np.ndarray
    grasp_forces: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        n = len(t)
        if n < 2:
            raise ValueError("trajectory needs at least two samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if not (len(self.tcp_poses) == len(self.tcp_wrenches) == n
                and len(self.gripper_widths) == len(self.grasp_forces) == n):
            raise ValueError("trajectory fields have different lengths")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "tcp_poses", tuple(self.tcp_poses))
        object.__setattr__(self, "tcp_wrenches", tuple(self.tcp_wrenches))
        object.__setattr__(self, "gripper_widths", np.asarray(self.gripper_widths, dtype=float))
        object.__setattr__(self, "grasp_forces", np.asarray(self.grasp_forces, dtype=float))

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True, eq=False)
class ComplianceLabel:
    spec: StiffnessSpec
    grasp_force: float
    force: np.ndarray  # smoothed applied force, base frame


def centered_moving_average(times, values, window):
    """Mean of samples within +-window/2 of each timestamp."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    lo = np.searchsorted(times, times - 0.5 * window, side="left")
    hi = np.searchsorted(times, times + 0.5 * window, side="right")
    csum = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])
    return (csum[hi] - csum[lo]) / (hi - lo).reshape((-1,) + (1,) * (values.ndim - 1))


def extract_compliance_labels(demo: DemoTrajectory,
                              cfg: LabelingConfig = LabelingConfig()) -> list:
    """Stiffness and virtual-target labels from a force-motion demonstration.

    Wrenches are what the tool applies to the environment, in the TCP frame.
    The virtual target is placed so that a spring of the labelled stiffness
    reproduces the smoothed force exactly: ``k (x_vt - x) = f``.
    """
    forces = []
    for pose, w in zip(demo.tcp_poses, demo.tcp_wrenches):
        if w.frame != pose.from_frame:
            raise ValueError(f"wrench frame {w.frame!r} is not the TCP frame")
        forces.append(pose.rotation @ w.force)
    forces = centered_moving_average(demo.times, np.array(forces), cfg.smoothing_window)
    ks = cfg.stiffness(np.linalg.norm(forces, axis=1))
    labels = []
    for pose, f, k, fg in zip(demo.tcp_poses, forces, ks, demo.grasp_forces):
        vt = Pose(pose.rotation, pose.translation + f / k, pose.from_frame, pose.to_frame)
        spec = StiffnessSpec(float(k), cfg.k_max, pose, vt)
        labels.append(ComplianceLabel(spec, float(fg), f))
    return labels
