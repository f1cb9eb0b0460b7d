import json

import numpy as np
import pytest

from kinediff.data import (
    Conditions,
    Demonstration,
    augment_endpoints,
    build_dataset,
    chunk_and_relabel,
    compute_rank,
    demo_from_json,
    demo_to_json,
    discover_keyframes,
    load_demos,
    resample_trajectory,
    save_demos,
)
from kinediff.env import make_planar_chain
from kinediff.kinematics import forward_kinematics

RNG = np.random.default_rng(5)
CHAIN = make_planar_chain()


def make_demo(joints, gripper, task_id=1):
    joints = np.asarray(joints, dtype=np.float32)
    poses = forward_kinematics(CHAIN, joints.astype(np.float64)).astype(np.float32)
    grip = np.asarray(gripper, dtype=np.int64)
    return Demonstration(
        joints=joints,
        poses=poses,
        gripper=grip,
        point_cloud=RNG.standard_normal((16, 3)).astype(np.float32),
        robot_state=np.concatenate([joints, grip[:, None]], axis=1).astype(np.float32),
        task_id=task_id,
    )


def brute_force_keyframes(joints, gripper, eps_v):
    """Literal reference: qualifying frames, runs collapsed to their last
    index, terminal frame appended."""
    t_total = len(joints)
    qualifying = []
    for t in range(1, t_total):
        still = np.max(np.abs(joints[t] - joints[t - 1])) < eps_v
        if still and gripper[t] == gripper[t - 1]:
            qualifying.append(t)
    collapsed = [t for t in qualifying if t + 1 not in qualifying]
    if not collapsed or collapsed[-1] != t_total - 1:
        collapsed.append(t_total - 1)
    return collapsed


def random_synthetic_demo(rng):
    t_total = int(rng.integers(6, 40))
    joints = np.zeros((t_total, 4), np.float32)
    v = rng.uniform(0.01, 0.1)
    for t in range(1, t_total):
        if rng.random() < 0.3:
            joints[t] = joints[t - 1]  # dwell frame
        else:
            joints[t] = joints[t - 1] + rng.uniform(-v, v, 4).astype(np.float32)
    gripper = np.zeros(t_total, np.int64)
    toggles = rng.integers(1, t_total, size=rng.integers(0, 3))
    state = 0
    for t in range(t_total):
        if t in toggles:
            state = 1 - state
        gripper[t] = state
    return make_demo(joints, gripper)


# -- keyframes ----------------------------------------------------------------


def test_keyframes_trapezoid_profile():
    # motion, one-frame dwell at t=10, motion, stop at t=29
    joints = np.zeros((30, 4), np.float32)
    for t in range(1, 30):
        if t == 10 or t >= 29:
            joints[t] = joints[t - 1]
        else:
            joints[t] = joints[t - 1] + 0.05
    demo = make_demo(joints, np.zeros(30))
    assert list(discover_keyframes(demo)) == [10, 29]


def test_keyframes_everywhere_moving():
    joints = np.cumsum(np.full((20, 4), 0.05, np.float32), axis=0)
    demo = make_demo(joints, np.zeros(20))
    assert list(discover_keyframes(demo)) == [19]


def test_keyframes_gripper_toggle_excludes_frame():
    joints = np.zeros((12, 4), np.float32)
    for t in range(1, 12):
        joints[t] = joints[t - 1] + (0.05 if t < 6 else 0.0)
    gripper = np.zeros(12, np.int64)
    gripper[8:] = 1  # toggles at t=8, during the dwell
    demo = make_demo(joints, gripper)
    kfs = list(discover_keyframes(demo))
    assert 8 not in kfs
    assert kfs[-1] == 11
    assert 7 in kfs  # the pre-toggle still frame ends its own run


def test_keyframes_match_brute_force_on_random_demos():
    rng = np.random.default_rng(123)
    for _ in range(200):
        demo = random_synthetic_demo(rng)
        expected = brute_force_keyframes(demo.joints, demo.gripper, 1e-3)
        assert list(discover_keyframes(demo, eps_v=1e-3)) == expected


# -- resampling ----------------------------------------------------------------


def test_resample_identity_at_64():
    traj = RNG.standard_normal((64, 5)).astype(np.float32)
    out = resample_trajectory(traj, 64)
    assert np.array_equal(out, traj)


def test_resample_linear_ramp():
    ramp = np.linspace(0.0, 1.0, 10)[:, None] * np.array([[1.0, -2.0, 0.5]])
    out = resample_trajectory(ramp.astype(np.float32), 64)
    expected = np.linspace(0.0, 1.0, 64)[:, None] * np.array([[1.0, -2.0, 0.5]])
    assert np.abs(out - expected).max() < 1e-6


def test_resample_preserves_endpoints_bitwise():
    traj = RNG.standard_normal((17, 7)).astype(np.float32)
    out = resample_trajectory(traj, 64, quat_cols=slice(3, 7))
    assert np.array_equal(out[0], traj[0])
    assert np.array_equal(out[-1], traj[-1])


def test_resample_renormalizes_quaternion_rows():
    traj = np.zeros((5, 7), np.float32)
    traj[:, 3] = 1.0
    traj[2, 3:7] = [0.0, 1.0, 0.0, 0.0]  # interpolation shrinks the norm
    out = resample_trajectory(traj, 64, quat_cols=slice(3, 7))
    norms = np.linalg.norm(out[:, 3:7], axis=1)
    assert np.abs(norms - 1.0).max() < 1e-6


def test_resample_rejects_short_input():
    with pytest.raises(ValueError):
        resample_trajectory(np.zeros((1, 3), np.float32), 64)


# -- rank ----------------------------------------------------------------------


def test_rank_straight_line_exact():
    pts = np.zeros((10, 7))
    pts[:, 0] = np.arange(10)  # integer spacing: arithmetic is exact
    assert compute_rank(pts) == 1.0


def test_rank_semicircle():
    theta = np.linspace(0.0, np.pi, 2001)
    pts = np.zeros((2001, 7))
    pts[:, 0] = 1.0 - np.cos(theta)
    pts[:, 1] = np.sin(theta)
    assert compute_rank(pts) == pytest.approx(2.0 / np.pi, abs=1e-3)


def test_rank_degenerate_is_one():
    pts = np.ones((5, 7))
    assert compute_rank(pts) == 1.0


def test_rank_never_exceeds_one():
    for _ in range(200):
        pts = np.zeros((int(RNG.integers(2, 30)), 7))
        pts[:, :3] = RNG.standard_normal((len(pts), 3))
        assert compute_rank(pts) <= 1.0 + 1e-9


# -- chunking -------------------------------------------------------------------


def lid_like_demo():
    # motion, two-frame dwell at 10-11 (gripper closes on the second frame so
    # frame 10 stays a keyframe), motion, stop at 29
    joints = np.zeros((30, 4), np.float32)
    for t in range(1, 30):
        if t in (10, 11, 29):
            joints[t] = joints[t - 1]
        else:
            joints[t] = joints[t - 1] + 0.03
    gripper = np.zeros(30, np.int64)
    gripper[11:] = 1
    return make_demo(joints, gripper)


def test_chunking_boundaries():
    demo = lid_like_demo()
    kfs = discover_keyframes(demo)
    subs = chunk_and_relabel(demo, kfs)
    assert len(subs) == len(kfs)
    first, second = subs[0], subs[-1]
    assert np.array_equal(first.start_pose, demo.poses[0])
    assert np.array_equal(second.goal_pose, demo.poses[29])
    for sub, k in zip(subs, kfs):
        assert np.array_equal(sub.goal_pose, demo.poses[k])
        assert sub.goal_gripper == demo.gripper[k]
        assert sub.joints.shape == (64, 4)
        assert sub.poses.shape == (64, 7)
        assert np.array_equal(sub.poses[0], sub.start_pose)
        assert np.array_equal(sub.poses[-1], sub.goal_pose)
        assert sub.rank <= 1.0 + 1e-9


def test_single_keyframe_yields_whole_demo_chunk():
    joints = np.cumsum(np.full((25, 4), 0.04, np.float32), axis=0)
    demo = make_demo(joints, np.zeros(25))
    subs = chunk_and_relabel(demo, discover_keyframes(demo))
    assert len(subs) == 1
    assert np.array_equal(subs[0].start_pose, demo.poses[0])
    assert np.array_equal(subs[0].goal_pose, demo.poses[-1])


# -- augmentation ---------------------------------------------------------------


def test_augment_draws_stay_in_support():
    demo = lid_like_demo()
    sub = chunk_and_relabel(demo, discover_keyframes(demo))[1]
    rng = np.random.default_rng(0)
    draws = set()
    length = sub.source_joints.shape[0]
    for _ in range(2000):
        out = augment_endpoints(sub, rng)
        trimmed = length - out.source_joints.shape[0]
        draws.add(trimmed)
        assert 0 <= trimmed <= 10
    assert max(draws) == 10  # both ends trimmed by up to 5 each


def test_augment_zero_draws_identity():
    demo = lid_like_demo()
    sub = chunk_and_relabel(demo, discover_keyframes(demo))[1]

    class ZeroRng:
        def integers(self, lo, hi):
            return 0

    out = augment_endpoints(sub, ZeroRng())
    assert out is sub


def test_augment_goal_pose_from_shifted_frame():
    demo = lid_like_demo()
    sub = chunk_and_relabel(demo, discover_keyframes(demo))[1]

    class FixedRng:
        def __init__(self):
            self.vals = iter([2, 3])

        def integers(self, lo, hi):
            return next(self.vals)

    out = augment_endpoints(sub, FixedRng())
    assert np.array_equal(out.start_pose, sub.source_poses[2])
    assert np.array_equal(out.goal_pose, sub.source_poses[-4])
    assert out.joints.shape == (64, 4)


def test_augment_clamps_short_segments():
    joints = np.cumsum(np.full((5, 4), 0.05, np.float32), axis=0)
    demo = make_demo(joints, np.zeros(5))
    sub = chunk_and_relabel(demo, discover_keyframes(demo))[0]
    rng = np.random.default_rng(1)
    for _ in range(50):
        out = augment_endpoints(sub, rng)
        assert out.source_joints.shape[0] >= 2


# -- file format -----------------------------------------------------------------


def test_jsonl_round_trip(tmp_path):
    demos = [lid_like_demo(), random_synthetic_demo(np.random.default_rng(3))]
    path = tmp_path / "demos.jsonl"
    save_demos(path, demos)
    loaded = load_demos(path, CHAIN)
    assert len(loaded) == 2
    for a, b in zip(demos, loaded):
        assert np.array_equal(a.joints, b.joints)
        assert np.array_equal(a.gripper, b.gripper)
        assert np.array_equal(a.point_cloud, b.point_cloud)
        assert a.task_id == b.task_id
        # poses recomputed through FK at load time
        assert np.abs(b.poses - forward_kinematics(CHAIN, b.joints.astype(np.float64))).max() < 1e-5


def test_json_line_schema():
    demo = lid_like_demo()
    obj = json.loads(json.dumps(demo_to_json(demo)))
    assert set(obj) == {"task_id", "text", "joints", "gripper", "points", "state"}
    back = demo_from_json(obj, CHAIN)
    assert back.length == demo.length


def test_pipeline_deterministic():
    rng1 = np.random.default_rng(77)
    rng2 = np.random.default_rng(77)
    a = [random_synthetic_demo(rng1) for _ in range(5)]
    b = [random_synthetic_demo(rng2) for _ in range(5)]
    subs_a = build_dataset(a)
    subs_b = build_dataset(b)
    assert len(subs_a) == len(subs_b)
    for sa, sb in zip(subs_a, subs_b):
        assert np.array_equal(sa.joints, sb.joints)
        assert np.array_equal(sa.poses, sb.poses)
        assert sa.rank == sb.rank


def test_conditions_from_subtrajectory():
    demo = lid_like_demo()
    sub = chunk_and_relabel(demo, discover_keyframes(demo))[0]
    cond = Conditions.from_subtrajectory(sub)
    assert cond.robot_state.shape == (4 + 7,)
    assert np.array_equal(cond.start_joints, sub.start_joints)
    assert 0 < cond.rank <= 1.0
    assert np.array_equal(cond.goal_pose.as_array(), sub.goal_pose)
