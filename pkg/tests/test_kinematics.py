import numpy as np
import pytest

from kinediff import kinematics as km
from kinediff.autodiff import Tensor
from kinediff.gradcheck import finite_diff_check

RNG = np.random.default_rng(7)


def planar2():
    return km.load_chain(
        {
            "name": "planar2",
            "links": [
                {"axis": [0, 0, 1], "offset": [1, 0, 0], "rot_offset": [1, 0, 0, 0], "limits": [-3.1, 3.1]},
                {"axis": [0, 0, 1], "offset": [1, 0, 0], "rot_offset": [1, 0, 0, 0], "limits": [-3.1, 3.1]},
            ],
        }
    )


def random_chain(rng, n=7):
    links = []
    for _ in range(n):
        ax = rng.standard_normal(3)
        ax /= np.linalg.norm(ax)
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        links.append(
            {
                "axis": ax.tolist(),
                "offset": rng.uniform(-0.5, 0.5, 3).tolist(),
                "rot_offset": q.tolist(),
                "limits": [-3.0, 3.0],
            }
        )
    return km.load_chain({"name": "random", "links": links})


def matrix_oracle(chain, joints):
    """Independent FK: chain of 4x4 homogeneous transforms."""
    T = np.eye(4)
    for i in range(chain.dof):
        R = km.quat_to_matrix(
            km.quat_mul(
                km.quat_from_axis_angle(chain.axes[i], joints[i]).astype(np.float64),
                chain.rot_offsets[i],
            )
        )
        A = np.eye(4)
        A[:3, :3] = R
        A[:3, 3] = R @ chain.offsets[i]
        T = T @ A
    return T


# -- load_chain ---------------------------------------------------------------


def test_load_chain_planar():
    chain = planar2()
    assert chain.dof == 2
    assert np.allclose(chain.axes[0], [0, 0, 1])


def test_load_chain_normalizes_axis_with_warning():
    doc = {
        "name": "c",
        "links": [{"axis": [0, 0, 2], "offset": [1, 0, 0], "limits": [-1, 1]}],
    }
    with pytest.warns(UserWarning):
        chain = km.load_chain(doc)
    assert np.allclose(chain.axes[0], [0, 0, 1])


def test_load_chain_rejects_bad_limits():
    doc = {
        "name": "c",
        "links": [{"axis": [0, 0, 1], "offset": [1, 0, 0], "limits": [1, -1]}],
    }
    with pytest.raises(km.ChainError):
        km.load_chain(doc)


def test_load_chain_rejects_unknown_fields():
    doc = {
        "name": "c",
        "links": [{"axis": [0, 0, 1], "offset": [1, 0, 0], "limits": [-1, 1], "mass": 1.0}],
    }
    with pytest.raises(km.ChainError):
        km.load_chain(doc)
    with pytest.raises(km.ChainError):
        km.load_chain({"name": "c", "links": [], "extra": 1})


# -- forward kinematics --------------------------------------------------------


def test_fk_two_link_extended():
    pose = km.forward_kinematics(planar2(), np.array([0.0, 0.0]))
    assert np.allclose(pose, [2, 0, 0, 1, 0, 0, 0], atol=1e-7)


def test_fk_two_link_quarter_turn():
    pose = km.forward_kinematics(planar2(), np.array([np.pi / 2, 0.0]))
    s2 = np.sqrt(2) / 2
    assert np.allclose(pose, [0, 2, 0, s2, 0, 0, s2], atol=1e-6)


def test_fk_matches_matrix_oracle_on_random_chains():
    worst = 0.0
    for _ in range(1000):
        chain = random_chain(RNG, n=int(RNG.integers(2, 8)))
        joints = RNG.uniform(-3, 3, chain.dof)
        pose = km.forward_kinematics(chain, joints.astype(np.float64))
        T = matrix_oracle(chain, joints)
        q = pose[3:7] / np.linalg.norm(pose[3:7])
        worst = max(
            worst,
            float(np.abs(pose[:3] - T[:3, 3]).max()),
            float(np.abs(km.quat_to_matrix(q) - T[:3, :3]).max()),
        )
    assert worst < 1e-5


def test_fk_output_quaternions_unit_norm():
    chain = random_chain(RNG)
    joints = RNG.uniform(-3, 3, (64, 7)).astype(np.float32)
    poses = km.forward_kinematics(chain, joints)
    assert np.abs(np.linalg.norm(poses[:, 3:7], axis=1) - 1).max() < 1e-5


def test_fk_dimension_mismatch():
    with pytest.raises(km.ChainError):
        km.forward_kinematics(planar2(), np.zeros(3))


# -- fk_pullback ---------------------------------------------------------------


def test_fk_pullback_zero_cotangents():
    chain = random_chain(RNG)
    joints = RNG.uniform(-2, 2, (5, 7))
    g = km.fk_pullback(chain, joints, np.zeros((5, 7)))
    assert np.array_equal(g, np.zeros((5, 7)))


def test_fk_pullback_stationary_at_zero_residual():
    chain = random_chain(RNG)
    joints = RNG.uniform(-2, 2, (5, 7))
    rows = km.forward_kinematics(chain, joints)
    cot = km.pose_rows_distance_grad(rows, rows)
    g = km.fk_pullback(chain, joints, cot)
    assert np.abs(g).max() < 1e-6


def test_fk_pullback_matches_finite_differences():
    worst = 0.0
    for _ in range(100):
        chain = random_chain(RNG)
        joints = RNG.uniform(-2, 2, (2, 7))
        cot = RNG.standard_normal((2, 7))
        r = finite_diff_check(
            lambda t: (km.fk_tensor(chain, t) * Tensor(cot.copy())).sum(), joints
        )
        worst = max(worst, r.max_rel_error)
    assert worst < 1e-4


def test_fk_pullback_float32_close_to_float64():
    chain = random_chain(RNG)
    joints = RNG.uniform(-2, 2, (8, 7))
    cot = RNG.standard_normal((8, 7))
    g32 = km.fk_pullback(chain, joints.astype(np.float32), cot.astype(np.float32))
    g64 = km.fk_pullback(chain, joints, cot)
    denom = np.maximum(np.abs(g64), 1e-2)
    assert (np.abs(g32 - g64) / denom).max() < 1e-4


# -- pose distance ---------------------------------------------------------------


def test_pose_distance_identity():
    p = km.Pose(np.array([1, 2, 3], np.float32), np.array([1, 0, 0, 0], np.float32))
    assert km.pose_distance(p, p) == 0.0


def test_pose_distance_quaternion_sign_invariant():
    q = RNG.standard_normal(4)
    q /= np.linalg.norm(q)
    t = np.array([0.5, 0, 0], np.float32)
    a = km.Pose(t, q.astype(np.float32))
    b = km.Pose(t, (-q).astype(np.float32))
    # zero up to the float32 wobble of the stored quaternion's norm
    assert km.pose_distance(a, b) <= 1e-6


def test_pose_distance_unit_translation():
    q = np.array([1, 0, 0, 0], np.float32)
    a = km.Pose(np.zeros(3, np.float32), q)
    b = km.Pose(np.array([1, 0, 0], np.float32), q)
    for w in (0.0, 0.5, 2.0):
        assert km.pose_distance(a, b, w_rot=w) == pytest.approx(1.0)


def test_pose_distance_symmetric_nonnegative():
    for _ in range(50):
        qa = RNG.standard_normal(4)
        qa /= np.linalg.norm(qa)
        qb = RNG.standard_normal(4)
        qb /= np.linalg.norm(qb)
        a = km.Pose(RNG.standard_normal(3).astype(np.float32), qa.astype(np.float32))
        b = km.Pose(RNG.standard_normal(3).astype(np.float32), qb.astype(np.float32))
        dab = km.pose_distance(a, b)
        assert dab >= 0
        assert dab == pytest.approx(km.pose_distance(b, a), rel=1e-6)


def test_pose_distance_rejects_bad_quaternion():
    a = km.Pose(np.zeros(3, np.float32), np.array([0.5, 0, 0, 0], np.float32))
    with pytest.raises(km.ChainError):
        km.pose_distance(a, a)


# -- IK ---------------------------------------------------------------------


def test_ik_on_fk_targets_succeeds():
    chain = km.load_chain(
        {
            "name": "p4",
            "links": [
                {"axis": [0, 0, 1], "offset": [0.25, 0, 0], "limits": [-2.9, 2.9]}
            ]
            * 4,
        }
    )
    ok = 0
    for _ in range(100):
        q_star = RNG.uniform(-2.0, 2.0, 4)
        target = km.Pose.from_array(km.forward_kinematics(chain, q_star))
        res = km.ik_solve_dls(chain, target, q_star + RNG.normal(0, 0.2, 4))
        if res.ok:
            check = km.forward_kinematics(chain, res.joints.astype(np.float64))
            assert km.pose_distance(km.Pose.from_array(check.astype(np.float32)),
                                    target.normalized()) < 5e-3
            assert chain.within_limits(res.joints, tol=1e-6)
            ok += 1
    assert ok >= 99


def test_ik_unreachable_target():
    chain = planar2()
    target = km.Pose(np.array([5, 0, 0], np.float32), np.array([1, 0, 0, 0], np.float32))
    res = km.ik_solve_dls(chain, target, np.zeros(2))
    assert res.error is km.IKError.UNREACHABLE


def test_ik_invalid_quaternion():
    chain = planar2()
    target = km.Pose(np.array([1, 0, 0], np.float32), np.array([0.5, 0, 0, 0], np.float32))
    res = km.ik_solve_dls(chain, target, np.zeros(2))
    assert res.error is km.IKError.INVALID_QUATERNION
