"""Demonstration ingestion and the sub-trajectory pipeline: keyframe
discovery, chunking with hindsight goal relabeling, fixed-length resampling,
straightness ranking, and endpoint augmentation.

Demonstrations are stored one-per-line as JSON; end-effector poses are always
recomputed from joints through FK at load time so files stay independent of
pose conventions.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .kinematics import Pose, forward_kinematics

HORIZON = 64  # every sub-trajectory is resampled to this many rows


@dataclass
class Demonstration:
    joints: np.ndarray        # (T, N) radians
    poses: np.ndarray         # (T, 7), recomputed via FK
    gripper: np.ndarray       # (T,) in {0, 1}
    point_cloud: np.ndarray   # (M, 3), first-frame observation
    robot_state: np.ndarray   # (T, S) auxiliary per-step state
    task_id: int = 0
    variation_text: str = ""

    def __post_init__(self):
        t = self.joints.shape[0]
        for name in ("poses", "gripper", "robot_state"):
            if getattr(self, name).shape[0] != t:
                raise ValueError(f"{name} length != {t}")

    @property
    def length(self):
        return self.joints.shape[0]


@dataclass(frozen=True)
class KeyframeSet:
    indices: np.ndarray  # strictly increasing, each in [1, T-1], last == T-1

    def __iter__(self):
        return iter(self.indices.tolist())

    def __len__(self):
        return len(self.indices)


@dataclass
class SubTrajectory:
    joints: np.ndarray        # (64, N)
    poses: np.ndarray         # (64, 7)
    start_pose: np.ndarray    # (7,)
    goal_pose: np.ndarray     # (7,)
    start_joints: np.ndarray  # (N,)
    start_gripper: float
    goal_gripper: float
    rank: float
    task_id: int = 0
    point_cloud: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.float32))
    # raw frames the chunk was cut from, kept for endpoint augmentation
    source_joints: np.ndarray | None = None
    source_poses: np.ndarray | None = None
    source_gripper: np.ndarray | None = None


@dataclass
class Conditions:
    """Conditioning bundle for trajectory generation."""

    start_pose: Pose
    goal_pose: Pose
    robot_state: np.ndarray
    gripper_amount: float
    point_cloud: np.ndarray
    rank: float
    start_joints: np.ndarray

    @staticmethod
    def from_subtrajectory(sub):
        return Conditions(
            start_pose=Pose.from_array(sub.start_pose),
            goal_pose=Pose.from_array(sub.goal_pose),
            robot_state=np.concatenate([sub.start_joints, sub.start_pose]).astype(
                np.float32
            ),
            gripper_amount=float(sub.start_gripper),
            point_cloud=sub.point_cloud.astype(np.float32),
            rank=float(sub.rank),
            start_joints=sub.start_joints.astype(np.float32),
        )


# -----------------------------------------------------------------------------
# keyframes
# -----------------------------------------------------------------------------


def discover_keyframes(demo, eps_v=1e-3):
    """Frames where the arm has (near) zero joint velocity and the gripper
    state did not just change; runs of such frames collapse to their last
    index, and the terminal frame is always included."""
    joints = demo.joints
    grip = demo.gripper
    t_total = joints.shape[0]
    if t_total < 2:
        raise ValueError("demonstration needs at least 2 frames")
    qualifies = np.zeros(t_total, dtype=bool)
    for t in range(1, t_total):
        still = np.max(np.abs(joints[t] - joints[t - 1])) < eps_v
        same_grip = grip[t] == grip[t - 1]
        qualifies[t] = still and same_grip
    keyframes = []
    for t in range(1, t_total):
        if qualifies[t] and (t == t_total - 1 or not qualifies[t + 1]):
            keyframes.append(t)
    if not keyframes or keyframes[-1] != t_total - 1:
        keyframes.append(t_total - 1)
    return KeyframeSet(np.asarray(keyframes, dtype=np.int64))


# -----------------------------------------------------------------------------
# resampling and ranking
# -----------------------------------------------------------------------------


def resample_trajectory(traj, target_len=HORIZON, quat_cols=None):
    """Piecewise-linear resampling to ``target_len`` rows at uniform
    parameters over the index domain.

    Rows that land exactly on input nodes are copied verbatim (so endpoints
    are preserved bitwise and a length-64 input round-trips); genuinely
    interpolated rows get their quaternion columns re-normalized.
    """
    traj = np.asarray(traj)
    length = traj.shape[0]
    if length < 2:
        raise ValueError(f"cannot resample a trajectory of {length} rows")
    params = np.linspace(0.0, float(length - 1), target_len)
    lo = np.floor(params).astype(np.int64)
    frac = params - lo
    hi = np.minimum(lo + 1, length - 1)
    src = traj.astype(np.float64)
    vals = (1.0 - frac)[:, None] * src[lo] + frac[:, None] * src[hi]
    if quat_cols is not None:
        qn = np.linalg.norm(vals[:, quat_cols], axis=1, keepdims=True)
        vals[:, quat_cols] /= np.where(qn > 0.0, qn, 1.0)
    out = vals.astype(traj.dtype)
    exact = frac == 0.0
    out[exact] = traj[lo[exact]]  # node rows are verbatim copies
    return out


def compute_rank(poses):
    """Straight-line endpoint distance over traveled arc length, in (0, 1];
    a stationary segment counts as 1 (trivially direct)."""
    pts = np.asarray(poses, dtype=np.float64)[:, :3]
    if pts.shape[0] < 2:
        raise ValueError("need at least 2 rows to rank a trajectory")
    travel = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    if travel < 1e-9:
        return 1.0
    direct = float(np.linalg.norm(pts[-1] - pts[0]))
    return min(direct / travel, 1.0)


# -----------------------------------------------------------------------------
# chunking and augmentation
# -----------------------------------------------------------------------------


def _make_sub(demo, seg_joints, seg_poses, seg_gripper, goal_gripper):
    poses64 = resample_trajectory(seg_poses, HORIZON, quat_cols=slice(3, 7))
    joints64 = resample_trajectory(seg_joints, HORIZON)
    return SubTrajectory(
        joints=joints64,
        poses=poses64,
        start_pose=seg_poses[0].copy(),
        goal_pose=seg_poses[-1].copy(),
        start_joints=seg_joints[0].copy(),
        start_gripper=float(seg_gripper[0]),
        goal_gripper=float(goal_gripper),
        rank=compute_rank(seg_poses),
        task_id=demo.task_id,
        point_cloud=demo.point_cloud,
        source_joints=seg_joints.copy(),
        source_poses=seg_poses.copy(),
        source_gripper=seg_gripper.copy(),
    )


def chunk_and_relabel(demo, keyframes):
    """One sub-trajectory per consecutive keyframe pair, each relabeled with
    the pose/gripper at its ending keyframe as the goal."""
    bounds = [0] + list(keyframes)
    subs = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        if b - a < 1:
            warnings.warn(f"skipping degenerate segment [{a}, {b}]")
            continue
        seg = slice(a, b + 1)
        subs.append(
            _make_sub(
                demo,
                demo.joints[seg],
                demo.poses[seg],
                demo.gripper[seg],
                demo.gripper[b],
            )
        )
    return subs


def augment_endpoints(sub, rng, max_shift=5):
    """Re-cut the source segment with the start advanced and the end
    retracted by independent uniform draws in {0..max_shift}, clamped so at
    least two frames remain, then rebuild the sub-trajectory."""
    src_j = sub.source_joints
    if src_j is None:
        raise ValueError("sub-trajectory carries no source segment to augment")
    length = src_j.shape[0]
    k0 = int(rng.integers(0, max_shift + 1))
    k1 = int(rng.integers(0, max_shift + 1))
    while length - k0 - k1 < 2:
        if k0 >= k1:
            k0 -= 1
        else:
            k1 -= 1
    if k0 == 0 and k1 == 0:
        return sub
    seg = slice(k0, length - k1)
    demo_like = Demonstration(
        joints=sub.source_joints,
        poses=sub.source_poses,
        gripper=sub.source_gripper,
        point_cloud=sub.point_cloud,
        robot_state=np.zeros((length, 0), dtype=np.float32),
        task_id=sub.task_id,
    )
    return _make_sub(
        demo_like,
        sub.source_joints[seg],
        sub.source_poses[seg],
        sub.source_gripper[seg],
        sub.goal_gripper,
    )


def build_dataset(demos, eps_v=1e-3):
    """Full pipeline: keyframes, chunking, relabeling for a list of demos."""
    subs = []
    for demo in demos:
        subs.extend(chunk_and_relabel(demo, discover_keyframes(demo, eps_v)))
    return subs


# -----------------------------------------------------------------------------
# file format
# -----------------------------------------------------------------------------


def demo_to_json(demo):
    return {
        "task_id": int(demo.task_id),
        "text": demo.variation_text,
        "joints": demo.joints.tolist(),
        "gripper": [int(g) for g in demo.gripper],
        "points": demo.point_cloud.tolist(),
        "state": demo.robot_state.tolist(),
    }


def demo_from_json(obj, chain):
    joints = np.asarray(obj["joints"], dtype=np.float32)
    poses = forward_kinematics(chain, joints)
    return Demonstration(
        joints=joints,
        poses=poses,
        gripper=np.asarray(obj["gripper"], dtype=np.int64),
        point_cloud=np.asarray(obj["points"], dtype=np.float32).reshape(-1, 3),
        robot_state=np.asarray(obj["state"], dtype=np.float32),
        task_id=int(obj["task_id"]),
        variation_text=obj.get("text", ""),
    )


def save_demos(path, demos):
    with open(path, "w") as fh:
        for demo in demos:
            fh.write(json.dumps(demo_to_json(demo)) + "\n")


def load_demos(path, chain):
    demos = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                demos.append(demo_from_json(json.loads(line), chain))
    return demos
