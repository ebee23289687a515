"""Two fingertip sensors, one wrench, one compliant wrist.

Squeeze an object with equal force on both fingertips and the internal
grasp force cancels out of the fused TCP wrench.  Add a push from outside
and it shows up.  That external wrench then drives the admittance
controller, which settles on the displacement the commanded spring
stiffness predicts.

    python demos/fingertip_admittance.py
"""

import numpy as np

from compliantkit.control import (AdmittanceParams, AdmittanceState, StiffnessSpec,
                                  admittance_step, combine_finger_wrenches,
                                  finger_poses, reconstruct_stiffness)
from compliantkit.geometry import Pose, Wrench

width = 0.04
s1, s2 = finger_poses(width)
squeeze = combine_finger_wrenches(Wrench([0, 0, 12.0], [0, 0, 0], "s1"),
                                  Wrench([0, 0, 12.0], [0, 0, 0], "s2"), s1, s2)
print("pure squeeze, fused TCP wrench:", np.round(squeeze.vector(), 12))

# A 4 N push along tcp -x, shared by both pads (sensor axes are rotated, so
# express it per sensor frame first).
push_tcp = np.array([-2.0, 0.0, 0.0])
w1 = Wrench(s1.rotation.T @ push_tcp + [0, 0, 12.0], [0, 0, 0], "s1")
w2 = Wrench(s2.rotation.T @ push_tcp + [0, 0, 12.0], [0, 0, 0], "s2")
fused = combine_finger_wrenches(w1, w2, s1, s2)
print("squeeze + push, fused TCP wrench:", np.round(fused.vector(), 6))

# Soft along x (200 N/m), stiff elsewhere: the push becomes motion on x only.
ident = Pose.identity("tcp", "base")
target = Pose(np.eye(3), [0.01, 0, 0], "tcp", "base")
spec = StiffnessSpec(200.0, 3000.0, ident, target)
print("stiffness eigenvalues:", np.round(np.linalg.eigvalsh(reconstruct_stiffness(spec)), 6))

params = AdmittanceParams(mass=(2.0, 2.0, 2.0), damping_ratio=1.0, rate=500.0, k_max=3000.0)
ext = Wrench(-fused.force, -fused.torque, "tcp")   # force the environment applies to the tool
state = AdmittanceState(np.zeros(3), np.zeros(3), np.eye(3))
for i in range(1500):
    state = admittance_step(state, spec, params, ext)
    if i % 300 == 299:
        print(f"t={0.002 * (i + 1):.1f}s  position={np.round(state.position, 5)}")
print("spring prediction x =", 0.01 + ext.force[0] / 200.0)
