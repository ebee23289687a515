"""Compliant manipulation toolkit: frame-consistent wrench geometry, wrist
admittance and grasp-force control, the 21-D policy action contract,
capacitive F/T sensor calibration, multi-rate session logs and a
deterministic contact simulator."""

from .geometry import (FrameMismatchError, Pose, RotationDecodeError, Wrench,
                       compose, decode_rot6d, encode_rot6d, invert,
                       transform_wrench)
from .control import (AdmittanceParams, AdmittanceState, GraspControllerParams,
                      SafetyLimits, SafetyMonitor, StiffnessSpec,
                      admittance_step, check_safety, combine_finger_wrenches,
                      grasp_control_step, reconstruct_stiffness)
from .policy_io import (Action, ActionRejected, DemoTrajectory, LabelingConfig,
                        WrenchWindow, decode_action, encode_action,
                        extract_compliance_labels)
from .stream_sync import (SessionLog, TruncatedLogError, align_resample,
                          read_log, write_log)
from .config import load_config

__version__ = "0.1.0"
