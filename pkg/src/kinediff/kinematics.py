"""Serial-chain robot model: differentiable forward kinematics, pose metric,
and a damped-least-squares inverse-kinematics solver.

A chain is a list of revolute links; link i rotates by its joint angle about
a fixed axis, applies a fixed rotation offset, then translates by a fixed
offset expressed in the rotated frame.  Poses are (translation, quaternion)
with wxyz quaternion layout; q and -q denote the same rotation.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import _kernels
from . import autodiff as ad

_CHAIN_LINK_FIELDS = {"axis", "offset", "rot_offset", "limits"}


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    """Rigid pose: translation (meters) and unit quaternion (w, x, y, z)."""

    translation: np.ndarray
    rotation: np.ndarray

    @staticmethod
    def from_array(arr):
        arr = np.asarray(arr, dtype=np.float32)
        return Pose(arr[:3].copy(), arr[3:7].copy())

    def as_array(self):
        return np.concatenate([self.translation, self.rotation]).astype(np.float32)

    def normalized(self):
        n = float(np.linalg.norm(self.rotation))
        if n == 0.0:
            raise ChainError("cannot normalize a zero quaternion")
        return Pose(self.translation.copy(), (self.rotation / n).astype(np.float32))

    def quat_norm_error(self):
        return abs(float(np.linalg.norm(self.rotation)) - 1.0)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis]).astype(np.float32)


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dtype=np.result_type(a, b),
    )


def quat_rotate(q, v):
    w = q[0]
    u = np.asarray(q[1:4])
    uxv = np.cross(u, v)
    return v + 2.0 * w * uxv + 2.0 * np.cross(u, uxv)


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


class KinematicChain:
    """Immutable revolute serial chain."""

    def __init__(self, name, axes, offsets, rot_offsets, limits):
        axes = np.asarray(axes, dtype=np.float64)
        offsets = np.asarray(offsets, dtype=np.float64)
        rot_offsets = np.asarray(rot_offsets, dtype=np.float64)
        limits = np.asarray(limits, dtype=np.float64)
        if axes.ndim != 2 or axes.shape[0] < 1:
            raise ChainError("chain needs at least one link")
        norms = np.linalg.norm(axes, axis=1)
        if np.any(norms < 1e-9):
            raise ChainError("zero-length joint axis")
        qnorms = np.linalg.norm(rot_offsets, axis=1)
        if np.any(qnorms < 1e-9):
            raise ChainError("zero-norm rotation offset")
        if np.any(limits[:, 0] >= limits[:, 1]):
            bad = int(np.argmax(limits[:, 0] >= limits[:, 1]))
            raise ChainError(
                f"link {bad}: joint limits [{limits[bad, 0]}, {limits[bad, 1]}] "
                "need lo < hi"
            )
        self.name = name
        self.axes = np.ascontiguousarray(axes / norms[:, None])
        self.offsets = np.ascontiguousarray(offsets)
        self.rot_offsets = np.ascontiguousarray(rot_offsets / qnorms[:, None])
        self.limits = limits
        self.dof = axes.shape[0]
        # Base sits at the origin, so reach is bounded by total offset length.
        self.max_reach = float(np.sum(np.linalg.norm(offsets, axis=1)))

    def clip_joints(self, joints):
        return np.clip(joints, self.limits[:, 0], self.limits[:, 1])

    def within_limits(self, joints, tol=1e-9):
        return bool(
            np.all(joints >= self.limits[:, 0] - tol)
            and np.all(joints <= self.limits[:, 1] + tol)
        )

    def to_json_dict(self):
        return {
            "name": self.name,
            "links": [
                {
                    "axis": [float(v) for v in self.axes[i]],
                    "offset": [float(v) for v in self.offsets[i]],
                    "rot_offset": [float(v) for v in self.rot_offsets[i]],
                    "limits": [float(self.limits[i, 0]), float(self.limits[i, 1])],
                }
                for i in range(self.dof)
            ],
        }


def load_chain(doc):
    """Build a chain from a parsed JSON document or a path to one.

    Unknown fields are rejected; non-unit axes and rotation offsets are
    normalized (with a warning beyond 1e-6).
    """
    if isinstance(doc, (str, bytes)):
        with open(doc) as fh:
            doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ChainError("chain document must be a JSON object")
    extra = set(doc) - {"name", "links"}
    if extra:
        raise ChainError(f"unknown chain fields: {sorted(extra)}")
    links = doc.get("links")
    if not links:
        raise ChainError("chain document has no links")
    axes, offsets, rot_offsets, limits = [], [], [], []
    for i, link in enumerate(links):
        unknown = set(link) - _CHAIN_LINK_FIELDS
        if unknown:
            raise ChainError(f"link {i}: unknown fields {sorted(unknown)}")
        axis = np.asarray(link["axis"], dtype=np.float64)
        if axis.shape != (3,):
            raise ChainError(f"link {i}: axis must be a 3-vector")
        n = np.linalg.norm(axis)
        if n < 1e-9:
            raise ChainError(f"link {i}: zero axis")
        if abs(n - 1.0) > 1e-6:
            warnings.warn(f"link {i}: axis normalized from norm {n:.6g}")
        rot = np.asarray(link.get("rot_offset", [1.0, 0.0, 0.0, 0.0]), dtype=np.float64)
        if rot.shape != (4,):
            raise ChainError(f"link {i}: rot_offset must be a quaternion")
        qn = np.linalg.norm(rot)
        if qn < 1e-9:
            raise ChainError(f"link {i}: zero rot_offset")
        if abs(qn - 1.0) > 1e-6:
            warnings.warn(f"link {i}: rot_offset normalized from norm {qn:.6g}")
        lim = link.get("limits", [-np.pi, np.pi])
        axes.append(axis)
        offsets.append(np.asarray(link["offset"], dtype=np.float64))
        rot_offsets.append(rot)
        limits.append(lim)
    return KinematicChain(doc.get("name", "chain"), axes, offsets, rot_offsets, limits)


# -----------------------------------------------------------------------------
# forward kinematics
# -----------------------------------------------------------------------------


def _fk_arrays(chain, dtype):
    return (
        chain.axes.astype(dtype),
        chain.offsets.astype(dtype),
        chain.rot_offsets.astype(dtype),
    )


def forward_kinematics(chain, joints):
    """Map joint angles to end-effector poses.

    ``joints`` may be a single (N,) vector or a (T, N) batch; output is the
    matching (7,) pose row or (T, 7) array, layout (px, py, pz, qw, qx, qy, qz).
    """
    joints = np.asarray(joints)
    single = joints.ndim == 1
    j2 = np.ascontiguousarray(np.atleast_2d(joints))
    if j2.shape[1] != chain.dof:
        raise ChainError(f"expected {chain.dof} joint angles, got {j2.shape[1]}")
    dtype = j2.dtype if j2.dtype in (np.float32, np.float64) else np.float32
    j2 = j2.astype(dtype, copy=False)
    poses, _ = _kernels.fk_fwd(j2, *_fk_arrays(chain, dtype))
    return poses[0] if single else poses


def fk_pullback(chain, joints, pose_cotangents):
    """Exact reverse-mode gradient of FK composed with pose cotangents."""
    joints = np.asarray(joints)
    single = joints.ndim == 1
    j2 = np.ascontiguousarray(np.atleast_2d(joints))
    cot = np.ascontiguousarray(np.atleast_2d(np.asarray(pose_cotangents)))
    if j2.shape[1] != chain.dof:
        raise ChainError(f"expected {chain.dof} joint angles, got {j2.shape[1]}")
    if cot.shape != (j2.shape[0], 7):
        raise ChainError(f"cotangent shape {cot.shape} != ({j2.shape[0]}, 7)")
    dtype = j2.dtype if j2.dtype in (np.float32, np.float64) else np.float32
    j2 = j2.astype(dtype, copy=False)
    cot = cot.astype(dtype, copy=False)
    arrs = _fk_arrays(chain, dtype)
    _, link_qs = _kernels.fk_fwd(j2, *arrs)
    gj = _kernels.fk_bwd(j2, link_qs, *arrs, cot)
    return gj[0] if single else gj


def fk_tensor(chain, joints):
    """Forward kinematics as a tape primitive: (M, N) tensor -> (M, 7) tensor."""
    jd = joints.data
    if jd.ndim != 2 or jd.shape[1] != chain.dof:
        raise ChainError(f"fk_tensor expects (M, {chain.dof}) joints, got {jd.shape}")
    j2 = np.ascontiguousarray(jd)
    arrs = _fk_arrays(chain, jd.dtype)
    poses, link_qs = _kernels.fk_fwd(j2, *arrs)

    def vjp(g):
        gj = _kernels.fk_bwd(j2, link_qs, *arrs, np.ascontiguousarray(g))
        ad._accum(joints, gj)

    return ad.custom_op(poses, (joints,), vjp)


# -----------------------------------------------------------------------------
# pose distance
# -----------------------------------------------------------------------------


def pose_distance(a, b, w_rot=0.5):
    """Translation L2 plus ``w_rot * (1 - |<qa, qb>|)``; sign-invariant."""
    qa, qb = a.rotation, b.rotation
    for q, side in ((qa, "a"), (qb, "b")):
        if abs(float(np.linalg.norm(q)) - 1.0) > 1e-3:
            raise ChainError(f"pose_distance: quaternion {side} is not unit-norm")
    t = float(np.linalg.norm(a.translation.astype(np.float64) - b.translation))
    dot = abs(float(np.dot(qa.astype(np.float64), qb.astype(np.float64))))
    return t + w_rot * (1.0 - min(dot, 1.0))


def pose_rows_distance(pose_rows_a, pose_rows_b, w_rot=0.5):
    """Vectorized pose_distance over (T, 7) arrays; returns (T,) distances."""
    a = np.asarray(pose_rows_a, dtype=np.float64)
    b = np.asarray(pose_rows_b, dtype=np.float64)
    t = np.linalg.norm(a[:, :3] - b[:, :3], axis=1)
    dots = np.abs(np.sum(a[:, 3:7] * b[:, 3:7], axis=1))
    return t + w_rot * (1.0 - np.minimum(dots, 1.0))


def pose_rows_distance_tensor(pred_rows, target_rows, w_rot=0.5):
    """Tape version of pose_rows_distance: pred (M, 7) tensor vs constant
    target (M, 7); returns the (M,) per-row distance tensor."""
    target = np.asarray(target_rows, dtype=pred_rows.dtype)
    diff = pred_rows[:, 0:3] - target[:, 0:3]
    trans = ad.rownorm(diff)
    dots = (pred_rows[:, 3:7] * target[:, 3:7]).sum(axis=1)
    rot = (1.0 - ad.absolute(dots)) * w_rot
    return trans + rot


def pose_rows_distance_grad(pose_rows, target_rows, w_rot=0.5, eps=1e-12):
    """d(sum_t pose_distance)/d(pose_rows): the cotangent fed to fk_pullback."""
    a = np.asarray(pose_rows, dtype=np.float64)
    b = np.asarray(target_rows, dtype=np.float64)
    g = np.zeros_like(a)
    diff = a[:, :3] - b[:, :3]
    norms = np.linalg.norm(diff, axis=1, keepdims=True)
    g[:, :3] = diff / np.maximum(norms, eps)
    dots = np.sum(a[:, 3:7] * b[:, 3:7], axis=1, keepdims=True)
    g[:, 3:7] = -w_rot * np.sign(dots) * b[:, 3:7]
    return g.astype(pose_rows.dtype)


# -----------------------------------------------------------------------------
# damped-least-squares IK
# -----------------------------------------------------------------------------


class IKError(Enum):
    UNREACHABLE = "Unreachable"
    LIMIT_VIOLATION = "LimitViolation"
    NO_CONVERGENCE = "NoConvergence"
    INVALID_QUATERNION = "InvalidQuaternion"


@dataclass
class IKResult:
    joints: np.ndarray | None
    error: IKError | None
    residual: float
    iterations: int

    @property
    def ok(self):
        return self.error is None


def _link_origins(chain, joints):
    """World positions of each joint frame origin plus the end effector."""
    q = np.array([1.0, 0.0, 0.0, 0.0])
    p = np.zeros(3)
    origins = [p.copy()]
    axes_world = []
    for i in range(chain.dof):
        axes_world.append(quat_rotate(q, chain.axes[i]))
        q = quat_mul(quat_mul(q, quat_from_axis_angle(chain.axes[i], joints[i])),
                     chain.rot_offsets[i])
        p = p + quat_rotate(q, chain.offsets[i])
        origins.append(p.copy())
    return np.array(origins), np.array(axes_world), q


def jacobian(chain, joints):
    """Geometric Jacobian (6, N): linear velocity rows then angular rows."""
    joints = np.asarray(joints, dtype=np.float64)
    origins, axes_world, _ = _link_origins(chain, joints)
    ee = origins[-1]
    jac = np.zeros((6, chain.dof))
    for i in range(chain.dof):
        jac[:3, i] = np.cross(axes_world[i], ee - origins[i])
        jac[3:, i] = axes_world[i]
    return jac


def _orientation_error(q_target, q_current):
    """Rotation vector taking q_current to q_target (shortest arc)."""
    qc = np.asarray(q_current, dtype=np.float64)
    qt = np.asarray(q_target, dtype=np.float64)
    if np.dot(qc, qt) < 0:
        qt = -qt
    # delta = q_target * conj(q_current)
    delta = quat_mul(qt, qc * np.array([1.0, -1.0, -1.0, -1.0]))
    w = np.clip(delta[0], -1.0, 1.0)
    v = delta[1:4]
    vn = np.linalg.norm(v)
    if vn < 1e-12:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(vn, w)
    return (angle / vn) * v


def ik_solve_dls(chain, target, init, tol=1e-3, max_iters=200, damping=0.05,
                 step_clamp=0.2, quat_tol=0.05):
    """Damped-least-squares IK with per-iteration joint-limit projection.

    Failures come back as IKError variants in the result rather than raised
    exceptions; the ablation harness counts them.
    """
    qn = float(np.linalg.norm(target.rotation))
    if abs(qn - 1.0) > quat_tol:
        return IKResult(None, IKError.INVALID_QUATERNION, np.inf, 0)
    target = target.normalized()
    if float(np.linalg.norm(target.translation)) > chain.max_reach + 1e-9:
        return IKResult(None, IKError.UNREACHABLE, np.inf, 0)
    q = np.asarray(init, dtype=np.float64).copy()
    if q.shape != (chain.dof,):
        raise ChainError(f"init has shape {q.shape}, expected ({chain.dof},)")
    q = chain.clip_joints(q)
    lam2 = damping * damping
    clamped_last = False
    for it in range(1, max_iters + 1):
        pose = forward_kinematics(chain, q)
        err = np.concatenate(
            [
                target.translation - pose[:3],
                _orientation_error(target.rotation, pose[3:7]),
            ]
        )
        resid = float(np.linalg.norm(err[:3]) + 0.5 * np.linalg.norm(err[3:]))
        if resid < tol:
            if clamped_last:
                return IKResult(None, IKError.LIMIT_VIOLATION, resid, it)
            return IKResult(q.astype(np.float32), None, resid, it)
        jac = jacobian(chain, q)
        a = jac @ jac.T + lam2 * np.eye(6)
        dq = jac.T @ np.linalg.solve(a, err)
        step = np.max(np.abs(dq))
        if step > step_clamp:
            dq *= step_clamp / step
        q_raw = q + dq
        q = chain.clip_joints(q_raw)
        clamped_last = bool(np.max(np.abs(q - q_raw)) > 1e-12)
    return IKResult(None, IKError.NO_CONVERGENCE, resid, max_iters)
