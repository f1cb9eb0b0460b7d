"""Planar-arm testbed: constraint-bearing manipulation tasks, an expert
demonstration generator emulating a sub-optimal sampling planner, and the
hierarchical rollout/evaluation harness.

Everything lives in the z = 0 plane of a 4-link revolute arm.  Execution is
kinematic (joints teleport along the trajectory); the physics of a hinge or a
drawer rail is replaced by a per-step geometric constraint check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import lowlevel
from .data import Conditions, Demonstration, discover_keyframes
from .highlevel import NULL_TOKEN, KeyframeSample, discretize_pose, predict_goal
from .kinematics import (
    IKError,
    KinematicChain,
    Pose,
    forward_kinematics,
    ik_solve_dls,
    load_chain,
    quat_from_axis_angle,
)

TASK_NAMES = ("reach", "hinged_lid", "drawer")

# token ids per task variation; 0 is the reserved null token
TOKENS = {("reach", 1): 1, ("reach", 2): 2, ("hinged_lid", 1): 3, ("drawer", 1): 4}


class PlanningError(RuntimeError):
    pass


def make_planar_chain(n_links=4, link_length=0.25, limit=2.9):
    doc = {
        "name": f"planar{n_links}",
        "links": [
            {
                "axis": [0.0, 0.0, 1.0],
                "offset": [link_length, 0.0, 0.0],
                "rot_offset": [1.0, 0.0, 0.0, 0.0],
                "limits": [-limit, limit],
            }
            for _ in range(n_links)
        ],
    }
    return load_chain(doc)


HOME_JOINTS = np.array([1.9, -1.4, -0.9, 0.2], dtype=np.float64)


def yaw_pose(xy, yaw):
    return Pose(
        np.array([xy[0], xy[1], 0.0], dtype=np.float32),
        quat_from_axis_angle([0.0, 0.0, 1.0], yaw),
    )


@dataclass
class TaskSpec:
    name: str
    chain: KinematicChain
    variations: tuple = (1,)
    constraint_tol: float = 0.01      # max allowed deviation during the
                                      # constrained phase, meters
    goal_tol_trans: float = 0.02
    goal_tol_rot: float = 0.1
    grasp_tol: float = 0.02
    n_points: int = 256
    params: dict = field(default_factory=dict)

    @staticmethod
    def builtin(name, chain=None):
        chain = chain or make_planar_chain()
        if name == "reach":
            return TaskSpec("reach", chain, variations=(1, 2))
        if name == "hinged_lid":
            return TaskSpec("hinged_lid", chain)
        if name == "drawer":
            return TaskSpec("drawer", chain)
        raise ValueError(f"unknown task {name!r}; expected one of {TASK_NAMES}")

    @staticmethod
    def from_json(path):
        with open(path) as fh:
            doc = json.load(fh)
        allowed = {
            "task", "chain", "constraint_tol", "goal_tol_trans",
            "goal_tol_rot", "grasp_tol", "n_points", "params",
        }
        extra = set(doc) - allowed
        if extra:
            raise ValueError(f"unknown task-config fields: {sorted(extra)}")
        chain_ref = doc.get("chain")
        if chain_ref is None:
            chain = make_planar_chain()
        elif isinstance(chain_ref, str):
            chain = load_chain(chain_ref)
        else:
            chain = load_chain(chain_ref)
        spec = TaskSpec.builtin(doc["task"], chain)
        for key in ("constraint_tol", "goal_tol_trans", "goal_tol_rot",
                    "grasp_tol", "n_points"):
            if key in doc:
                setattr(spec, key, doc[key])
        spec.params.update(doc.get("params", {}))
        return spec


@dataclass
class Stage:
    goal: Pose
    gripper: int
    constrained: bool


@dataclass
class Constraint:
    kind: str                  # "arc" | "line"
    anchor: np.ndarray         # hinge center / handle start, xy
    direction: np.ndarray | None = None  # unit slide direction, xy
    radius: float = 0.0
    extent: float = 0.0

    def deviation(self, xyz):
        p = np.asarray(xyz, dtype=np.float64)[:2]
        if self.kind == "arc":
            return abs(float(np.linalg.norm(p - self.anchor)) - self.radius)
        rel = p - self.anchor
        along = float(rel @ self.direction)
        lateral = abs(float(rel[0] * self.direction[1] - rel[1] * self.direction[0]))
        overshoot = max(0.0, -along, along - self.extent)
        return max(lateral, overshoot)


@dataclass
class Scene:
    """One episode's concrete geometry, derived from (task, seed)."""

    task: TaskSpec
    variation: int
    token: int
    home_joints: np.ndarray
    point_cloud: np.ndarray
    stages: list
    constraint: Constraint | None
    nominal_path: np.ndarray   # (L, 3) ideal end-effector polyline


def _cluster(rng, center, n, spread=0.015, z_jitter=0.002):
    pts = np.zeros((n, 3))
    pts[:, :2] = np.asarray(center)[None, :] + rng.normal(0.0, spread, (n, 2))
    pts[:, 2] = rng.normal(0.0, z_jitter, n)
    return pts


def _segment_points(rng, a, b, n, jitter=0.004):
    ts = rng.random(n)
    pts = np.zeros((n, 3))
    pts[:, :2] = np.outer(1.0 - ts, a) + np.outer(ts, b)
    pts[:, :2] += rng.normal(0.0, jitter, (n, 2))
    pts[:, 2] = rng.normal(0.0, 0.002, n)
    return pts


def sample_scene(task, variation, rng):
    """Instantiate jittered geometry, observation cloud and oracle stages."""
    if task.name == "reach":
        marker_a = np.array([0.45, 0.35]) + rng.uniform(-0.03, 0.03, 2)
        marker_b = np.array([0.45, -0.25]) + rng.uniform(-0.03, 0.03, 2)
        goal_xy = marker_a if variation == 1 else marker_b
        yaw = float(np.arctan2(goal_xy[1], goal_xy[0]))
        stages = [Stage(yaw_pose(goal_xy, yaw), 1, False)]
        n3 = task.n_points - 2 * (task.n_points // 3)
        cloud = np.concatenate([
            _cluster(rng, marker_a, task.n_points // 3),
            _cluster(rng, marker_b, task.n_points // 3),
            _segment_points(rng, np.array([0.25, -0.45]), np.array([0.25, 0.5]), n3),
        ])
        constraint = None
        home_pose = forward_kinematics(task.chain, HOME_JOINTS)
        nominal = np.stack([home_pose[:3], np.array([*goal_xy, 0.0])])
    elif task.name == "hinged_lid":
        hinge = np.array([0.50, 0.05]) + rng.uniform(-0.02, 0.02, 2)
        radius = 0.22
        a0 = np.deg2rad(-50.0) + rng.uniform(-0.14, 0.14)
        a1 = a0 + np.deg2rad(90.0)
        handle0 = hinge + radius * np.array([np.cos(a0), np.sin(a0)])
        handle1 = hinge + radius * np.array([np.cos(a1), np.sin(a1)])
        stages = [
            Stage(yaw_pose(handle0, a0), 1, False),
            Stage(yaw_pose(handle1, a1), 1, True),
        ]
        n3 = task.n_points - 2 * (task.n_points // 4) - task.n_points // 2
        cloud = np.concatenate([
            _cluster(rng, hinge, task.n_points // 4, spread=0.005),
            _segment_points(rng, hinge, handle0, task.n_points // 2, jitter=0.003),
            _cluster(rng, handle0, task.n_points // 4 + n3, spread=0.006),
        ])
        constraint = Constraint("arc", hinge, radius=radius)
        home_pose = forward_kinematics(task.chain, HOME_JOINTS)
        arc = hinge[None, :] + radius * np.stack(
            [np.cos(np.linspace(a0, a1, 32)), np.sin(np.linspace(a0, a1, 32))], axis=1
        )
        nominal = np.concatenate(
            [home_pose[None, :3],
             np.concatenate([arc, np.zeros((32, 1))], axis=1)]
        )
    elif task.name == "drawer":
        handle = np.array([0.42, -0.28]) + rng.uniform(-0.02, 0.02, 2)
        angle = np.deg2rad(-55.0) + rng.uniform(-0.1, 0.1)
        u = np.array([np.cos(angle), np.sin(angle)])
        extent = 0.15
        end = handle + extent * u
        stages = [
            Stage(yaw_pose(handle, angle), 1, False),
            Stage(yaw_pose(end, angle), 1, True),
        ]
        perp = np.array([-u[1], u[0]])
        face_a = handle + 0.12 * perp
        face_b = handle - 0.12 * perp
        quarter = task.n_points // 4
        cloud = np.concatenate([
            _segment_points(rng, face_a, face_b, task.n_points - 3 * quarter),
            _cluster(rng, handle, quarter, spread=0.012),
            _segment_points(rng, handle, handle + 0.05 * u, 2 * quarter),
        ])
        constraint = Constraint("line", handle, direction=u, extent=extent)
        home_pose = forward_kinematics(task.chain, HOME_JOINTS)
        nominal = np.stack([home_pose[:3], np.array([*handle, 0.0]), np.array([*end, 0.0])])
    else:
        raise ValueError(f"unknown task {task.name!r}")
    token = TOKENS.get((task.name, variation), 1)
    return Scene(
        task=task,
        variation=variation,
        token=token,
        home_joints=HOME_JOINTS.copy(),
        point_cloud=cloud.astype(np.float32),
        stages=stages,
        constraint=constraint,
        nominal_path=nominal.astype(np.float32),
    )


# -----------------------------------------------------------------------------
# expert demonstrations
# -----------------------------------------------------------------------------


@dataclass
class PlannerNoise:
    """Sub-optimality of the emulated sampling planner's free-space paths."""

    waypoints: int = 1
    sigma: float = 0.15


def _quat_slerp(q0, q1, t):
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    if np.dot(q0, q1) < 0:
        q1 = -q1
    dot = np.clip(np.dot(q0, q1), -1.0, 1.0)
    if dot > 1.0 - 1e-9:
        out = (1.0 - t) * q0 + t * q1
        return out / np.linalg.norm(out)
    ang = np.arccos(dot)
    return (np.sin((1.0 - t) * ang) * q0 + np.sin(t * ang) * q1) / np.sin(ang)


def _free_pose_targets(start_pose, goal_pose, steps, noise, rng):
    """Dense pose targets along a (possibly bent) polyline with constant
    speed; with zero waypoint noise the path is a straight segment."""
    p0 = np.asarray(start_pose[:3], dtype=np.float64)
    p1 = goal_pose.translation.astype(np.float64)
    knots = [p0]
    direction = p1 - p0
    length = np.linalg.norm(direction)
    perp = np.array([-direction[1], direction[0], 0.0])
    perp = perp / max(np.linalg.norm(perp), 1e-9)
    for w in range(noise.waypoints):
        frac = (w + 1) / (noise.waypoints + 1)
        lateral = rng.normal(0.0, noise.sigma * max(length, 1e-6))
        knots.append(p0 + frac * direction + lateral * perp)
    knots.append(p1)
    knots = np.asarray(knots)
    seg_len = np.linalg.norm(np.diff(knots, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    q0 = np.asarray(start_pose[3:7], dtype=np.float64)
    q1 = goal_pose.rotation.astype(np.float64)
    targets = np.zeros((steps, 7), dtype=np.float64)
    for i in range(steps):
        s = total * (i + 1) / steps
        k = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg_len) - 1)
        frac = (s - cum[k]) / max(seg_len[k], 1e-12)
        targets[i, :3] = knots[k] + frac * (knots[k + 1] - knots[k])
        targets[i, 3:7] = _quat_slerp(q0, q1, s / max(total, 1e-12))
    return targets


def _arc_pose_targets(hinge, radius, a0, a1, steps):
    angles = np.linspace(a0, a1, steps + 1)[1:]
    targets = np.zeros((steps, 7), dtype=np.float64)
    targets[:, 0] = hinge[0] + radius * np.cos(angles)
    targets[:, 1] = hinge[1] + radius * np.sin(angles)
    for i, a in enumerate(angles):
        # radial yaw: the gripper stays aligned with the lid bar
        targets[i, 3:7] = quat_from_axis_angle([0, 0, 1], a)
    return targets


def _line_pose_targets(start_xy, end_xy, yaw, steps):
    targets = np.zeros((steps, 7), dtype=np.float64)
    fr = (np.arange(steps) + 1.0) / steps
    targets[:, 0] = start_xy[0] + fr * (end_xy[0] - start_xy[0])
    targets[:, 1] = start_xy[1] + fr * (end_xy[1] - start_xy[1])
    targets[:, 3:7] = quat_from_axis_angle([0, 0, 1], yaw)[None, :]
    return targets


def _track(chain, q_init, targets, tol=1e-3):
    """Solve IK row by row, warm-started from the previous solution."""
    rows = []
    q = np.asarray(q_init, dtype=np.float64)
    for row in targets:
        res = ik_solve_dls(chain, Pose.from_array(row.astype(np.float32)), q,
                           tol=tol, max_iters=200)
        if not res.ok:
            raise PlanningError(f"expert IK failed: {res.error.value}")
        q = res.joints.astype(np.float64)
        rows.append(q.copy())
    return rows


def gen_expert_demo(task, variation, rng, noise=None, steps_free=48,
                    steps_constrained=56, dwell=3, max_retries=5):
    """Generate one expert episode.

    Free-space legs go through randomized intermediate waypoints (rank < 1
    as soon as noise is nonzero) tracked per step by DLS IK; constrained legs
    follow the constraint curve exactly.  The gripper toggles on the first
    frame of each end-of-leg dwell so keyframe discovery lands on the final
    still frame.
    """
    noise = noise if noise is not None else PlannerNoise()
    scene = sample_scene(task, variation, rng)
    chain = task.chain
    for attempt in range(max_retries):
        try:
            joints = [scene.home_joints.copy()]
            grips = [0]

            def dwell_frames(toggle_to=None):
                for d in range(dwell):
                    joints.append(joints[-1].copy())
                    if toggle_to is not None and d == 0:
                        grips.append(toggle_to)
                    else:
                        grips.append(grips[-1])

            for si, stage in enumerate(scene.stages):
                start_pose = forward_kinematics(chain, joints[-1])
                if stage.constrained and scene.constraint is not None:
                    c = scene.constraint
                    if c.kind == "arc":
                        rel = start_pose[:2] - c.anchor
                        a_start = float(np.arctan2(rel[1], rel[0]))
                        goal_rel = stage.goal.translation[:2] - c.anchor
                        a_goal = float(np.arctan2(goal_rel[1], goal_rel[0]))
                        while a_goal < a_start - np.pi:
                            a_goal += 2 * np.pi
                        while a_goal > a_start + np.pi:
                            a_goal -= 2 * np.pi
                        targets = _arc_pose_targets(
                            c.anchor, c.radius, a_start, a_goal, steps_constrained
                        )
                    else:
                        yaw = float(np.arctan2(c.direction[1], c.direction[0]))
                        targets = _line_pose_targets(
                            start_pose[:2], stage.goal.translation[:2], yaw,
                            steps_constrained,
                        )
                else:
                    targets = _free_pose_targets(
                        start_pose, stage.goal, steps_free, noise, rng
                    )
                for q in _track(chain, joints[-1], targets):
                    joints.append(q)
                    grips.append(grips[-1])
                toggle = stage.gripper if stage.gripper != grips[-1] else None
                dwell_frames(toggle_to=toggle)
            joints = np.asarray(joints, dtype=np.float32)
            grips = np.asarray(grips, dtype=np.int64)
            poses = forward_kinematics(chain, joints.astype(np.float64)).astype(np.float32)
            state = np.concatenate(
                [joints, grips[:, None].astype(np.float32)], axis=1
            )
            demo = Demonstration(
                joints=joints,
                poses=poses,
                gripper=grips,
                point_cloud=scene.point_cloud,
                robot_state=state,
                task_id=scene.token,
                variation_text=f"{task.name}:{variation}",
            )
            _check_demo(task, scene, demo)
            return demo, scene
        except PlanningError:
            if attempt == max_retries - 1:
                raise
    raise PlanningError("unreachable")


def _check_demo(task, scene, demo):
    """Self-consistency: generated demos must satisfy their own task."""
    if scene.constraint is not None:
        closed = demo.gripper.astype(bool)
        devs = np.array(
            [scene.constraint.deviation(p[:3]) for p in demo.poses[closed]]
        )
        if devs.size and devs.max() >= task.constraint_tol / 2:
            raise PlanningError(
                f"demo violates its constraint: max deviation {devs.max():.4f}"
            )
    goal = scene.stages[-1].goal
    err = np.linalg.norm(demo.poses[-1][:3] - goal.translation)
    if err > task.goal_tol_trans / 2:
        raise PlanningError(f"demo misses its goal by {err:.4f}")


def demo_keyframe_samples(demos, grid):
    """Expert keyframe actions for high-level training, one per keyframe."""
    samples = []
    for demo in demos:
        for k in discover_keyframes(demo):
            pose = Pose.from_array(demo.poses[k])
            samples.append(
                KeyframeSample(
                    points=demo.point_cloud,
                    token=demo.task_id,
                    action=discretize_pose(pose, grid, demo.gripper[k]),
                )
            )
    return samples


# -----------------------------------------------------------------------------
# rollout
# -----------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    success: bool
    failure: str | None          # GoalMiss | ConstraintViolation | IKFailure |
                                 # LimitViolation | None
    stages_done: int
    final_trans_err: float
    final_rot_err: float
    max_constraint_dev: float
    executed_joints: np.ndarray
    executed_poses: np.ndarray
    nominal_path: np.ndarray
    ik_detail: str | None = None
    seed: int = 0

    def to_dict(self):
        return {
            "success": bool(self.success),
            "failure": self.failure,
            "stages_done": int(self.stages_done),
            "final_trans_err": float(self.final_trans_err),
            "final_rot_err": float(self.final_rot_err),
            "max_constraint_dev": float(self.max_constraint_dev),
            "executed_joints": np.asarray(self.executed_joints).tolist(),
            "executed_poses": np.asarray(self.executed_poses).tolist(),
            "nominal_path": np.asarray(self.nominal_path).tolist(),
            "ik_detail": self.ik_detail,
            "seed": int(self.seed),
        }

    @staticmethod
    def from_dict(d):
        return EpisodeResult(
            success=d["success"],
            failure=d["failure"],
            stages_done=d["stages_done"],
            final_trans_err=d["final_trans_err"],
            final_rot_err=d["final_rot_err"],
            max_constraint_dev=d["max_constraint_dev"],
            executed_joints=np.asarray(d["executed_joints"], dtype=np.float32),
            executed_poses=np.asarray(d["executed_poses"], dtype=np.float32),
            nominal_path=np.asarray(d["nominal_path"], dtype=np.float32),
            ik_detail=d.get("ik_detail"),
            seed=d.get("seed", 0),
        )


class ControllerFailure(Exception):
    def __init__(self, reason, detail=None):
        super().__init__(detail or reason)
        self.reason = reason
        self.detail = detail


def _ik_rows(chain, pose_rows, q_start):
    """Row-by-row IK used by the pose-space baselines; raises on any failure."""
    q = np.asarray(q_start, dtype=np.float64)
    out = []
    for i, row in enumerate(pose_rows):
        res = ik_solve_dls(chain, Pose.from_array(np.asarray(row, np.float32)), q)
        if not res.ok:
            raise ControllerFailure(
                "IKFailure", f"row {i}: {res.error.value}"
            )
        q = res.joints.astype(np.float64)
        out.append(q.copy())
    return np.asarray(out, dtype=np.float32)


def make_controller(kind, diffuser=None):
    """Controller factory: ``rkd`` (diffuse + refine, no IK), ``pose-ik``
    (pose diffusion handed to the IK solver, raw rows), or ``line``
    (straight-line interpolation + IK)."""

    if kind in ("rkd", "pose-ik") and diffuser is None:
        raise ValueError(f"controller {kind!r} needs a trained diffuser")

    def run(chain, cond, rng):
        if kind == "rkd":
            result = lowlevel.act(diffuser, chain, cond, rng)
            return result.joints
        if kind == "pose-ik":
            rows = lowlevel.sample_trajectory(diffuser, "pose", cond, rng)
            return _ik_rows(chain, rows[1:], cond.start_joints)
        if kind == "line":
            start = cond.start_pose.as_array().astype(np.float64)
            goal = cond.goal_pose.as_array().astype(np.float64)
            rows = np.zeros((lowlevel.HORIZON - 1, 7))
            for i in range(lowlevel.HORIZON - 1):
                t = (i + 1.0) / (lowlevel.HORIZON - 1)
                rows[i, :3] = (1 - t) * start[:3] + t * goal[:3]
                rows[i, 3:7] = _quat_slerp(start[3:7], goal[3:7], t)
            return _ik_rows(chain, rows, cond.start_joints)
        raise ValueError(f"unknown controller {kind!r}")

    return run


def _quat_angle(qa, qb):
    dot = abs(float(np.dot(np.asarray(qa, np.float64), np.asarray(qb, np.float64))))
    return 2.0 * np.arccos(min(dot, 1.0))


def rollout_episode(task, variation, episode_seed, controller, agent=None,
                    use_token=True):
    """One hierarchical episode: per stage, take the goal from the oracle (or
    the trained high-level agent), run the low-level controller, execute the
    joint rows kinematically, and check the constraint while the gripper is
    closed on a constrained stage."""
    rng = np.random.default_rng(np.random.SeedSequence([episode_seed, 7]))
    scene = sample_scene(task, variation, rng)
    chain = task.chain
    joints = scene.home_joints.copy()
    grip = 0
    executed_j = [joints.astype(np.float32).copy()]
    executed_p = [forward_kinematics(chain, joints).astype(np.float32)]
    max_dev = 0.0
    failure = None
    detail = None
    stages_done = 0
    goal_used = scene.stages[-1].goal
    for stage in scene.stages:
        if agent is not None:
            token = scene.token if use_token else NULL_TOKEN
            goal_pose, goal_grip = predict_goal(agent, scene.point_cloud, token)
        else:
            goal_pose, goal_grip = stage.goal, stage.gripper
        if stage is scene.stages[-1]:
            goal_used = goal_pose
        start_pose7 = forward_kinematics(chain, joints)
        cond = Conditions(
            start_pose=Pose.from_array(start_pose7.astype(np.float32)),
            goal_pose=goal_pose,
            robot_state=np.concatenate([joints, start_pose7]).astype(np.float32),
            gripper_amount=float(grip),
            point_cloud=scene.point_cloud,
            rank=1.0,
            start_joints=joints.astype(np.float32),
        )
        try:
            rows = controller(chain, cond, rng)
        except ControllerFailure as cf:
            failure = cf.reason
            detail = cf.detail
            break
        constrained = stage.constrained and scene.constraint is not None
        for q in rows:
            if not chain.within_limits(q, tol=1e-6):
                failure = "LimitViolation"
                break
            joints = np.asarray(q, dtype=np.float64)
            pose = forward_kinematics(chain, joints)
            executed_j.append(np.asarray(q, np.float32))
            executed_p.append(pose.astype(np.float32))
            if constrained and grip:
                dev = scene.constraint.deviation(pose[:3])
                max_dev = max(max_dev, dev)
                if dev > task.constraint_tol:
                    failure = "ConstraintViolation"
                    break
        if failure:
            break
        # a grasping stage must actually arrive at its target
        end_pose = forward_kinematics(chain, joints)
        if stage.gripper and not grip:
            if np.linalg.norm(end_pose[:3] - goal_pose.translation) > task.grasp_tol:
                failure = "GoalMiss"
                detail = "missed grasp"
                break
        grip = goal_grip if agent is not None else stage.gripper
        stages_done += 1
    final_pose = forward_kinematics(chain, joints)
    true_goal = scene.stages[-1].goal
    trans_err = float(np.linalg.norm(final_pose[:3] - true_goal.translation))
    rot_err = _quat_angle(final_pose[3:7], true_goal.rotation)
    success = (
        failure is None
        and stages_done == len(scene.stages)
        and trans_err <= task.goal_tol_trans
        and rot_err <= task.goal_tol_rot
    )
    if not success and failure is None:
        failure = "GoalMiss"
    return EpisodeResult(
        success=success,
        failure=None if success else failure,
        stages_done=stages_done,
        final_trans_err=trans_err,
        final_rot_err=rot_err,
        max_constraint_dev=max_dev,
        executed_joints=np.asarray(executed_j, dtype=np.float32),
        executed_poses=np.asarray(executed_p, dtype=np.float32),
        nominal_path=scene.nominal_path,
        ik_detail=detail,
        seed=episode_seed,
    )


def rollout_many(task, controller, episodes, seed, agent=None, use_token=True):
    """Sequential batch of episodes; variation cycles through the task's
    list, and each episode derives its rng from (seed, index)."""
    results = []
    for i in range(episodes):
        variation = task.variations[i % len(task.variations)]
        results.append(
            rollout_episode(task, variation, seed + i, controller, agent, use_token)
        )
    return results


@dataclass
class EvalSummary:
    episodes: int
    success_rate: float
    ik_error_rate: float
    mean_constraint_dev: float
    failures: dict

    def to_dict(self):
        return {
            "episodes": self.episodes,
            "success_rate": self.success_rate,
            "ik_error_rate": self.ik_error_rate,
            "mean_constraint_dev": self.mean_constraint_dev,
            "failures": self.failures,
        }


def evaluate(results):
    """Success and IK-error rates as fractions, plus failure-mode counts."""
    if not results:
        raise ValueError("no episodes to evaluate")
    n = len(results)
    succ = sum(r.success for r in results)
    ik = sum(r.failure == "IKFailure" for r in results)
    devs = [r.max_constraint_dev for r in results]
    failures = {}
    for r in results:
        if r.failure:
            failures[r.failure] = failures.get(r.failure, 0) + 1
    return EvalSummary(
        episodes=n,
        success_rate=succ / n,
        ik_error_rate=ik / n,
        mean_constraint_dev=float(np.mean(devs)),
        failures=failures,
    )
