import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from compliantkit.control import (OFFSET_EPS, AdmittanceParams, AdmittanceState,
                                  ControllerFault, GraspControllerParams,
                                  GraspState, GripperController, SafetyLimits,
                                  SafetyMonitor, StiffnessSpec, WristController,
                                  admittance_step, check_safety,
                                  combine_finger_wrenches, damping_matrix,
                                  finger_poses, grasp_control_step,
                                  measure_grasp_force, reconstruct_stiffness,
                                  virtual_energy)
from compliantkit.geometry import FrameMismatchError, Pose, Wrench
from oracles import critically_damped_step, random_rotation, wrench_via_point_forces

seeds = st.integers(0, 2**32 - 1)


def spec_at(k, k_max, ref, vt, rot=np.eye(3)):
    return StiffnessSpec(k, k_max, Pose(rot, ref, "tcp", "base"), Pose(rot, vt, "tcp", "base"))


# -- wrench fusion ----------------------------------------------------------

def test_finger_geometry():
    s1, s2 = finger_poses(0.08)
    np.testing.assert_allclose(s1.translation, [0, -0.04, 0])
    np.testing.assert_allclose(s2.translation, [0, 0.04, 0])
    # each sensor's +z points across the gap towards the other finger
    np.testing.assert_allclose(s1.rotation[:, 2], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(s2.rotation[:, 2], [0, -1, 0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_combine_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    poses = [Pose(random_rotation(rng), rng.uniform(-0.1, 0.1, 3), s, "tcp") for s in ("s1", "s2")]
    ws = [Wrench(rng.normal(size=3) * 10, rng.normal(size=3), s) for s in ("s1", "s2")]
    got = combine_finger_wrenches(ws[0], ws[1], *poses).vector()
    want = sum(wrench_via_point_forces(w.force, w.torque, p.rotation, p.translation)
               for w, p in zip(ws, poses))
    np.testing.assert_allclose(got, want, atol=1e-10)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.11), st.floats(0.0, 100.0))
def test_squeeze_cancels_at_tcp(width, f):
    s1, s2 = finger_poses(width)
    w = combine_finger_wrenches(Wrench([0, 0, f], [0, 0, 0], "s1"),
                                Wrench([0, 0, f], [0, 0, 0], "s2"), s1, s2)
    assert np.abs(w.vector()).max() < 1e-10


def test_combine_rejects_wrong_frames():
    s1, s2 = finger_poses(0.05)
    with pytest.raises(FrameMismatchError):
        combine_finger_wrenches(Wrench.zero("s2"), Wrench.zero("s2"), s1, s2)
    with pytest.raises(FrameMismatchError):
        combine_finger_wrenches(Wrench.zero("s1"), Wrench.zero("s2"), s1,
                                s2.with_frames("s2", "flange"))


def test_grasp_force_measurement():
    assert measure_grasp_force(Wrench([1, 2, 9], [0, 0, 0], "s1"),
                               Wrench([0, 0, 11], [0, 0, 0], "s2")) == 10.0


# -- stiffness --------------------------------------------------------------

@settings(max_examples=300, deadline=None)
@given(seeds)
def test_stiffness_spectrum(seed):
    rng = np.random.default_rng(seed)
    k_max = rng.uniform(500, 5000)
    k = rng.uniform(1, k_max)
    ref = rng.normal(size=3)
    off = rng.normal(size=3)
    off *= rng.uniform(2 * OFFSET_EPS, 0.1) / np.linalg.norm(off)
    K = reconstruct_stiffness(spec_at(k, k_max, ref, ref + off))
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    np.testing.assert_allclose(np.linalg.eigvalsh(K), sorted([k, k_max, k_max]), atol=1e-9)
    d = off / np.linalg.norm(off)
    np.testing.assert_allclose(K @ d, k * d, atol=1e-9)


def test_degenerate_offset_is_isotropic():
    K = reconstruct_stiffness(spec_at(200.0, 3000.0, [0, 0, 0], [0, 0, 0.5 * OFFSET_EPS]))
    assert np.array_equal(K, 3000.0 * np.eye(3))


@pytest.mark.parametrize("k", [0.0, -1.0, 3000.1, np.nan])
def test_stiffness_bounds(k):
    with pytest.raises(ValueError):
        spec_at(k, 3000.0, [0, 0, 0], [0, 0, 0.01])


def test_modal_damping_diagonal_case():
    K = np.diag([100.0, 400.0, 900.0])
    D = damping_matrix(K, (1.0, 2.0, 4.0), 0.7)
    np.testing.assert_allclose(D, np.diag(2 * 0.7 * np.sqrt([100, 800, 3600])), atol=1e-12)


def test_modal_damping_equalizes_modes():
    rng = np.random.default_rng(3)
    r = random_rotation(rng)
    K = r @ np.diag([300.0, 1500.0, 3000.0]) @ r.T
    m = np.array([1.0, 2.0, 3.0])
    D = damping_matrix(K, m, 1.0)
    # with mass-normalised coordinates every mode has damping ratio 1
    mi = 1 / np.sqrt(m)
    kt = mi[:, None] * K * mi[None, :]
    dt = mi[:, None] * D * mi[None, :]
    lam, u = np.linalg.eigh(kt)
    zeta = np.diag(u.T @ dt @ u) / (2 * np.sqrt(lam))
    np.testing.assert_allclose(zeta, 1.0, atol=1e-9)


# -- admittance -------------------------------------------------------------

def step_response(params, k, force, seconds):
    spec = spec_at(k, params.k_max, [0, 0, 0], [0, 0, 0])
    state = AdmittanceState(np.zeros(3), np.zeros(3), np.eye(3))
    w = Wrench([force, 0, 0], [0, 0, 0], "tcp")
    xs = []
    for _ in range(int(round(seconds * params.rate))):
        state = admittance_step(state, spec, params, w)
        xs.append(state.position[0])
    t = np.arange(1, len(xs) + 1) / params.rate
    return t, np.array(xs)


def test_step_response_matches_closed_form():
    params = AdmittanceParams(mass=(1, 1, 1), damping_ratio=1.0, rate=500,
                              k_max=1000.0, v_max=10.0)
    t0 = time.perf_counter()
    t, x = step_response(params, 1000.0, 10.0, 4.0)
    elapsed = time.perf_counter() - t0
    ref = critically_damped_step(t, 10.0, 1000.0, 1.0)
    assert np.abs(x - ref).max() / 0.01 < 0.01
    assert elapsed < 1.0


def test_semi_implicit_option_is_stable_but_coarser():
    params = AdmittanceParams(mass=(1, 1, 1), rate=500, k_max=1000.0, v_max=10.0,
                              integrator="semi_implicit_euler")
    t, x = step_response(params, 1000.0, 10.0, 4.0)
    err = np.abs(x - critically_damped_step(t, 10.0, 1000.0, 1.0)).max() / 0.01
    assert err < 0.05
    assert abs(x[-1] - 0.01) < 1e-6


def test_unknown_integrator_rejected():
    with pytest.raises(ValueError):
        AdmittanceParams(integrator="rk4")


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_energy_never_increases_without_input(seed):
    rng = np.random.default_rng(seed)
    params = AdmittanceParams(mass=tuple(rng.uniform(0.5, 3, 3)), k_max=3000.0)
    vt = rng.normal(size=3) * 0.05
    spec = spec_at(rng.uniform(50, 3000), 3000.0, np.zeros(3), vt)
    state = AdmittanceState(rng.normal(size=3) * 0.02, rng.normal(size=3) * 0.05, np.eye(3))
    zero = Wrench.zero("tcp")
    e = virtual_energy(state, spec, params)
    for _ in range(300):
        state = admittance_step(state, spec, params, zero)
        e1 = virtual_energy(state, spec, params)
        assert e1 <= e + 1e-12
        e = e1


def test_velocity_clamp():
    params = AdmittanceParams(v_max=0.1)
    spec = spec_at(3000.0, 3000.0, [0, 0, 0], [0, 0, 0])
    state = AdmittanceState(np.zeros(3), np.zeros(3), np.eye(3))
    for _ in range(50):
        state = admittance_step(state, spec, params, Wrench([500, 0, 0], [0, 0, 0], "tcp"))
        assert np.linalg.norm(state.velocity) <= 0.1 + 1e-12


def test_external_force_is_rotated_into_base():
    rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    params = AdmittanceParams()
    spec = spec_at(3000.0, 3000.0, [0, 0, 0], [0, 0, 0], rz)
    state = AdmittanceState(np.zeros(3), np.zeros(3), rz)
    for _ in range(2000):
        state = admittance_step(state, spec, params, Wrench([30, 0, 0], [0, 0, 0], "tcp"))
    # +x in the TCP frame is +y in base
    np.testing.assert_allclose(state.position, [0, 0.01, 0], atol=1e-6)


def test_admittance_rejects_foreign_frame():
    spec = spec_at(3000.0, 3000.0, [0, 0, 0], [0, 0, 0])
    state = AdmittanceState(np.zeros(3), np.zeros(3), np.eye(3))
    with pytest.raises(FrameMismatchError):
        admittance_step(state, spec, AdmittanceParams(), Wrench.zero("base"))


def test_wrist_controller_faults_on_nan_and_freezes():
    wc = WristController(AdmittanceParams(), Pose.identity("tcp", "base"))
    wc.step(np.array([1.0, 0, 0, 0, 0, 0]))
    before = wc.state.position.copy()
    wc.step(np.array([np.nan, 0, 0, 0, 0, 0]))
    assert wc.fault
    wc.step(np.array([100.0, 0, 0, 0, 0, 0]))
    np.testing.assert_array_equal(wc.state.position, before)


def test_wrist_hold_freezes_pose():
    wc = WristController(AdmittanceParams(), Pose.identity("tcp", "base"))
    for _ in range(10):
        wc.step(Wrench([10.0, 0, 0], [0, 0, 0], "tcp"))
    p = wc.state.position.copy()
    for _ in range(10):
        s = wc.step(Wrench([10.0, 0, 0], [0, 0, 0], "tcp"), hold=True)
        np.testing.assert_array_equal(s.position, p)
        assert not s.velocity.any()


def test_controller_fault_on_overflow():
    params = AdmittanceParams(v_max=np.inf)
    spec = spec_at(3000.0, 3000.0, [0, 0, 0], [0, 0, 0])
    state = AdmittanceState([1e306, 0, 0], np.zeros(3), np.eye(3))
    with np.errstate(all="ignore"), pytest.raises(ControllerFault):
        admittance_step(state, spec, params, Wrench.zero("tcp"))


# -- grasp ------------------------------------------------------------------

def test_grasp_law_signs():
    p = GraspControllerParams(k_p=0.0, k_f=0.002, v_max=0.05)
    # too little force -> close (positive)
    assert grasp_control_step(GraspState(0.05, 5.0, 0.05, 10.0), p) == pytest.approx(0.01)
    assert grasp_control_step(GraspState(0.05, 15.0, 0.05, 10.0), p) == pytest.approx(-0.01)
    p2 = GraspControllerParams(k_p=1.0, k_f=0.0)
    # wider than wanted -> close
    assert grasp_control_step(GraspState(0.06, 0.0, 0.05, 0.0), p2) == pytest.approx(0.01)
    assert grasp_control_step(GraspState(0.05, 0.0, 0.05, 1e6), p) == 0.05


def test_grasp_regulates_on_stiff_object():
    p = GraspControllerParams()
    gc = GripperController(p, 0.06)
    gc.set_target(0.06, 10.0)
    width, k_obj, w_obj = 0.06, 5000.0, 0.05
    for i in range(300):  # 10 s at 30 Hz
        f = k_obj * max(0.0, w_obj - width)
        v = gc.step(width, f)
        width -= v / p.rate
    assert abs(k_obj * max(0.0, w_obj - width) - 10.0) < 0.2


def test_gripper_hold():
    gc = GripperController(GraspControllerParams(), 0.05)
    gc.set_target(0.05, 10.0)
    assert gc.step(0.05, 0.0, hold=True) == 0.0


@pytest.mark.parametrize("kw", [dict(k_p=-1), dict(width_limits=(0.1, 0.0)), dict(v_max=0)])
def test_grasp_params_validation(kw):
    with pytest.raises(ValueError):
        GraspControllerParams(**kw)


# -- safety -----------------------------------------------------------------

def test_safety_verdicts():
    lim = SafetyLimits(25.0, 20.0)
    ok = Wrench([19.9, -19.9, 25.0], [5, 5, 5], "s1")
    assert check_safety(ok, Wrench.zero("s2"), lim).ok
    v = check_safety(ok, Wrench([0, 0, 26.0], [0, 0, 0], "s2"), lim)
    assert not v.ok
    (viol,) = v.violations
    assert (viol.sensor, viol.axis, viol.value) == ("s2", "z", 26.0) and viol.is_grasp_axis
    v = check_safety(Wrench([-20.5, 0, 0], [0, 0, 0], "s1"), Wrench.zero("s2"), lim)
    assert v.violations[0].axis == "x" and "VIOLATION" in str(v)


def test_monitor_latches_until_reset():
    mon = SafetyMonitor(SafetyLimits())
    bad = Wrench([0, 0, 30.0], [0, 0, 0], "s1")
    good = Wrench.zero("s1")
    mon.update(good, Wrench.zero("s2"))
    assert not mon.latched
    mon.update(bad, Wrench.zero("s2"))
    assert mon.latched
    assert mon.update(good, Wrench.zero("s2")).ok and mon.latched
    mon.reset()
    assert not mon.latched and mon.first_violation is None
