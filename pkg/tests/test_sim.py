import numpy as np
import pytest

from compliantkit.config import load_config
from compliantkit.control import combine_finger_wrenches, finger_poses
from compliantkit.geometry import Pose, rot_z
from compliantkit.policy_io import decode_action
from compliantkit.sim import (ADVANCE, APPROACH, PRESS, STREAMS, CompliantPlane,
                              GraspSlip, IncompleteTraceError, Scenario,
                              ScenarioError, SpringSocket, contact_from_dict,
                              gripper_tick, initial_state, load_scenario,
                              metrics_report, new_trace, plan, run_scenario,
                              scripted_policy, sim_step)
from compliantkit.stream_sync import read_log, write_log

DT = 1 / 500


def bare(contacts=(), **kw):
    d = dict(policy="grasp", duration=1.0, start_position=[0, 0, 0.1],
             start_width=0.05, tool_offset=[0, 0, -0.05], contacts=list(contacts))
    d.update(kw)
    return Scenario.from_dict("test", d)


def move(state, scn, pos, rot=np.eye(3), v_grasp=0.0):
    return sim_step(state, scn, Pose(rot, pos, "tcp", "base"), v_grasp, DT)


# -- contact models ------------------------------------------------------------

def test_free_motion_reads_zero():
    scn = bare()
    s = initial_state(scn)
    s = move(s, scn, [0.01, 0.02, 0.03])
    np.testing.assert_array_equal(s.position, [0.01, 0.02, 0.03])
    assert not s.w1.vector().any() and not s.w2.vector().any()


def test_plane_spring_law():
    plane = dict(kind="compliant_plane", normal=[0, 0, 1], origin=[0, 0, 0], k_env=1e4, mu=0.5)
    scn = bare([plane])
    s = initial_state(scn)
    s = move(s, scn, [0, 0, 0.049])  # tip 1 mm below the surface
    assert s.normal_force == pytest.approx(10.0)
    s = move(s, scn, [0, 0, 0.0501])
    assert s.normal_force == 0.0


def test_plane_friction_bounded_and_opposes_sliding():
    plane = CompliantPlane([0, 0, 1], [0, 0, 0], 1e4, 0.5)
    f, fn, ff = plane.force(np.array([0, 0, -0.001]), np.array([0.1, 0.0, 0.0]))
    assert ff <= 0.5 * fn + 1e-12 and f[0] < 0
    np.testing.assert_allclose(plane.force(np.zeros(3), np.ones(3))[0], 0.0)


def test_plane_sensor_wrenches_sum_to_contact_load():
    plane = dict(kind="compliant_plane", normal=[0, 0, 1], origin=[0, 0, 0], k_env=1e4)
    scn = bare([plane])
    s = move(initial_state(scn), scn, [0, 0, 0.048], rot_z(0.3))
    w_tcp = combine_finger_wrenches(s.w1, s.w2, *finger_poses(s.width))
    # fingers push the tool into the plane: applied force is -20 N along base z
    np.testing.assert_allclose(rot_z(0.3) @ w_tcp.force, [0, 0, -20.0], atol=1e-9)


def test_socket_engages_at_threshold_and_stays():
    sock = dict(kind="spring_socket", axis=[0, 0, -1], origin=[0, 0, 0],
                preload=5.0, k_spring=2000.0, engage_force=15.0)
    scn = bare([sock])
    s = initial_state(scn)
    rows = []
    for z in np.linspace(0.05, 0.043, 300):  # tip from 0 down to 7 mm
        s = move(s, scn, [0, 0, z])
        rows.append((s.axial_force, s.engaged))
    axial = np.array([r[0] for r in rows])
    engaged = np.array([r[1] for r in rows])
    first = np.argmax(axial >= 15.0)
    assert not engaged[:first].any() and engaged[first:].all()
    for z in np.linspace(0.043, 0.06, 50):  # back out: stays engaged
        s = move(s, scn, [0, 0, z])
        assert s.engaged
    assert s.axial_force == 0.0 and s.insertion_depth == 0.0


def test_grasp_slip_threshold():
    obj = dict(kind="grasp_slip", mass=0.0, mu_grasp=0.5, object_width=0.05,
               object_stiffness=5000.0, profile_mode="time",
               load_direction=[0, 0, -1], load_profile=[[0, 0], [1, 10]])
    scn = bare([obj], start_width=0.048)  # squeeze 10 N -> capacity 5 N
    s = initial_state(scn)
    for _ in range(500):
        s = move(s, scn, [0, 0, 0.1])
        assert s.slipping == (s.tangential_load > s.capacity)
    assert s.slip_events == 1 and s.capacity == pytest.approx(5.0)


def test_contact_validation():
    with pytest.raises(ScenarioError):
        contact_from_dict(dict(kind="compliant_plane", normal=[0, 0, 1], origin=[0, 0, 0], k_env=0))
    with pytest.raises(ScenarioError):
        contact_from_dict(dict(kind="compliant_plane", normal=[0, 0, 1], origin=[0, 0, 0],
                               k_env=1, mu=2.5))
    with pytest.raises(ScenarioError):
        SpringSocket([0, 0, 1], [0, 0, 0], 1.0, 10.0, 0.0)
    with pytest.raises(ScenarioError):
        GraspSlip(0.1, 0.5, 0.05, 1000.0, load_profile=[[1, 0], [0, 1]])
    with pytest.raises(ScenarioError):
        contact_from_dict(dict(kind="magnet"))
    with pytest.raises(ScenarioError):
        bare(duration=0)
    with pytest.raises(ScenarioError):
        bare(policy="juggle")
    with pytest.raises(ScenarioError):
        bare(colour="red")


# -- scripted policies ------------------------------------------------------

def test_free_space_uses_k_max():
    scn = load_scenario("wipe")
    cmd = plan(initial_state(scn), scn)
    assert cmd.phase == APPROACH and cmd.stiffness == 3000.0


def test_wipe_press_spring_inversion():
    scn = load_scenario("wipe")
    s = initial_state(scn)
    z = 0.05 - 0.0005  # tip half a millimetre into the table
    s = move(s, scn, [0, 0, z])
    cmd = plan(s, scn)
    assert cmd.phase == PRESS
    assert cmd.target[2] < cmd.reference[2]
    assert cmd.stiffness * np.linalg.norm(cmd.target - cmd.reference) == pytest.approx(8.0)


def test_skewer_grasp_target_constant():
    scn = load_scenario("skewer")
    run = run_scenario(scn)
    a = run.trace.values("action")
    assert np.all(a[:, 20] == scn.script["grasp_force"])
    assert ADVANCE in run.trace.column("policy", "phase")


def test_actions_always_decode():
    for name in ("wipe", "insert", "skewer", "grasp"):
        run = run_scenario(load_scenario(name))
        for a in run.trace.values("action"):
            decode_action(a)
        assert not run.trace.column("policy", "held").any()


def test_scripted_policy_vector():
    scn = load_scenario("insert")
    a = scripted_policy(initial_state(scn), scn)
    assert a.shape == (21,)


# -- closed loop ------------------------------------------------------------

def test_gripper_schedule_three_per_policy_tick():
    ticks = [i for i in range(5000) if gripper_tick(i, 500.0, 30.0)]
    counts = np.bincount(np.array(ticks) // 50)
    assert np.all(counts == 3)


def test_determinism_and_seed_dependence():
    scn = load_scenario("grasp")
    a = run_scenario(scn).trace_bytes()
    b = run_scenario(scn).trace_bytes()
    assert a == b
    noisy = Scenario.from_dict("grasp", {**scn.source, "sensor_noise": 0.05})
    n1 = run_scenario(noisy.with_seed(1))
    n2 = run_scenario(noisy.with_seed(1))
    n3 = run_scenario(noisy.with_seed(2))
    assert n1.trace_bytes() == n2.trace_bytes() != n3.trace_bytes()
    assert n1.report.digest() == n2.report.digest()


def test_safety_latch_freezes_motion():
    cfg = load_config()
    d = dict(cfg.scenarios["wipe"])
    d["safety"] = {"grasp_axis_limit": 25.0, "other_axes_limit": 2.0}
    d["duration"] = 3.0
    run = run_scenario(Scenario.from_dict("wipe", d), cfg)
    rep = run.report
    assert rep.metrics["safety_violations"] > 0
    assert "latch_time" in rep.metrics
    assert rep.metrics["motion_after_latch"] == 0.0
    latch = rep.metrics["latch_time"]
    t = run.trace.times("tcp") * 1e-9
    assert run.trace.column("tcp", "hold")[t >= latch].all()
    assert not [c for c in rep.checks if c.name == "no_motion_after_latch" and not c.passed]


def test_report_survives_reparse(tmp_path):
    run = run_scenario(load_scenario("skewer"))
    write_log(run.trace, tmp_path / "s.log")
    again = metrics_report(read_log(tmp_path / "s.log"))
    assert again.to_json() == run.report.to_json()
    assert again.to_json() == metrics_report(read_log(tmp_path / "s.log")).to_json()


def zero_trace(name="wipe"):
    scn = load_scenario(name)
    rates = {"wrist": 500.0, "gripper": 30.0, "policy": 10.0}
    trace = new_trace(scn, rates)
    for i in range(500):
        t = i * 2_000_000
        for stream, (rk, cols) in STREAMS.items():
            if rk == "wrist" or (rk == "policy" and i % 50 == 0) or \
                    (rk == "gripper" and gripper_tick(i, 500.0, 30.0)):
                trace.append(stream, t, np.zeros(len(cols)))
    return trace


def test_all_zero_trace_fails_task():
    rep = metrics_report(zero_trace("wipe"))
    assert rep.metrics["peak_grasp_axis_force"] == 0.0
    assert rep.metrics["band_occupancy"] == 0.0
    assert not rep.passed
    rep = metrics_report(zero_trace("insert"))
    assert not rep.metrics["insertion_success"] and not rep.passed


def test_single_overload_reported_with_timestamp():
    trace = zero_trace("skewer")
    # rebuild with one 26 N grasp-axis sample at t = 0.5 s on s2
    x = trace.values("wrench_s2")
    x[250, 2] = 26.0
    rep = metrics_report(trace)
    (v,) = rep.violations
    assert (v["sensor"], v["axis"], v["count"]) == ("s2", "z", 1)
    assert v["first_time"] == pytest.approx(0.5)
    assert "t=0.500s" in rep.text()
    assert not rep.passed


def test_incomplete_trace():
    trace = zero_trace()
    del trace.streams["contact"]
    with pytest.raises(IncompleteTraceError):
        metrics_report(trace)
    trace = zero_trace()
    trace.meta.clear()
    with pytest.raises(IncompleteTraceError):
        metrics_report(trace)


def test_trace_rates_and_streams():
    run = run_scenario(load_scenario("grasp"))
    tr = run.trace
    assert tr.count("tcp") == 2000 and tr.count("policy") == 40 and tr.count("grasp") == 120
    assert set(tr.streams) == set(STREAMS)
