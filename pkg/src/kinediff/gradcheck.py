"""Central finite-difference verification of reverse-mode gradients.

The perturbed evaluations run in float64 (the one sanctioned use of doubles)
while the checked gradient is whatever the graph computes, so the reported
error reflects the autodiff rule plus working-precision roundoff and not the
oracle's own noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    failing_index: tuple | None
    n_checked: int
    failures: list = field(default_factory=list)

    def ok(self, tol):
        return self.max_rel_error < tol


def finite_diff_check(f, x, h=1e-3, coords=None, floor=1e-2, tol=None):
    """Compare the reverse-mode gradient of scalar ``f`` at ``x`` with
    central differences.

    ``coords`` restricts the (expensive) difference quotients to the given
    flat indices; default is every entry.  Relative error uses
    ``|ad - fd| / max(|ad|, |fd|, floor)`` so exact-zero gradients are judged
    on an absolute scale.  With ``tol`` set, entries above it are collected
    in ``failures``.
    """
    x64 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x64.astype(np.float64), requires_grad=True)
    ad = backward(f(xt), [xt])[xt].ravel()

    if coords is None:
        coords = range(x64.size)
    flat = x64.ravel()
    max_rel = 0.0
    worst = None
    failures = []
    n = 0
    for idx in coords:
        base = flat[idx]
        flat[idx] = base + h
        fp = float(f(Tensor(x64.copy())).data)
        flat[idx] = base - h
        fm = float(f(Tensor(x64.copy())).data)
        flat[idx] = base
        fd = (fp - fm) / (2.0 * h)
        rel = abs(float(ad[idx]) - fd) / max(abs(float(ad[idx])), abs(fd), floor)
        if rel > max_rel:
            max_rel = rel
            worst = np.unravel_index(idx, x64.shape)
        if tol is not None and rel > tol:
            failures.append((np.unravel_index(idx, x64.shape), float(ad[idx]), fd, rel))
        n += 1
    return GradCheckReport(max_rel, worst, n, failures)


# -----------------------------------------------------------------------------
# suites (used by the CLI `gradcheck` subcommand and the acceptance tests)
# -----------------------------------------------------------------------------


def _suite_primitives(rng):
    from . import autodiff as ad

    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 6))
    xc = rng.standard_normal((2, 3, 8))
    wc = rng.standard_normal((4, 3, 5))
    cases = {
        "sum": (lambda t: t.sum(), x),
        "mean": (lambda t: t.mean(axis=1).sum(), x),
        "mul": (lambda t: (t * t + t * 2.0).sum(), x),
        "matmul": (lambda t: (ad.matmul(t, Tensor(w)) ** 2.0).sum(), x),
        "gelu": (lambda t: ad.gelu(t).sum(), x),
        "exp_log": (lambda t: ad.log(ad.exp(t) + 3.0).sum(), x),
        "power": (lambda t: ((t * t + 1.0) ** -0.5).sum(), x),
        "max": (lambda t: ad.reduce_max(t, axis=1).sum(), x),
        "gather": (lambda t: ad.gather(t, np.array([2, 0, 1]), axis=0).sum(), x),
        "slice": (lambda t: (t[1:, :2] * t[:2, 2:]).sum(), x),
        "concat": (lambda t: ad.concat([t, t * 2.0], axis=0).sum(), x),
        "rownorm": (lambda t: ad.rownorm(t).sum(), x),
        "abs": (lambda t: ad.absolute(t).sum(), x + 0.3),
        "upsample2": (lambda t: (ad.upsample2(t) ** 2.0).sum(), xc),
        "conv1d_x": (lambda t: (ad.conv1d(t, Tensor(wc), 1, 2) ** 2.0).sum(), xc),
        "conv1d_w": (lambda t: (ad.conv1d(Tensor(xc), t, 2, 1) ** 2.0).sum(), wc),
    }
    out = []
    for name, (f, x0) in cases.items():
        out.append((f"primitive/{name}", finite_diff_check(f, x0.copy()), 1e-4))
    return out


def _suite_kinematics(rng, cases=20):
    from .kinematics import fk_tensor, pose_rows_distance_tensor, forward_kinematics
    from .env import make_planar_chain

    chain = make_planar_chain(7, link_length=0.2)
    out = []
    worst = GradCheckReport(0.0, None, 0)
    for i in range(cases):
        joints = rng.uniform(-2.0, 2.0, (3, 7))
        cot = rng.standard_normal((3, 7))
        r = finite_diff_check(
            lambda t: (fk_tensor(chain, t) * Tensor(cot)).sum(), joints
        )
        if r.max_rel_error > worst.max_rel_error:
            worst = r
    out.append((f"kinematics/fk_pullback[{cases} cases]", worst, 1e-4))
    tgt = forward_kinematics(chain, rng.uniform(-2.0, 2.0, (3, 7)))
    joints = rng.uniform(-2.0, 2.0, (3, 7))
    r = finite_diff_check(
        lambda t: pose_rows_distance_tensor(fk_tensor(chain, t), tgt).sum(), joints
    )
    out.append(("kinematics/pose_distance_fk", r, 1e-4))
    return out


def _tiny_model(rng, channels, state_dim):
    from .denoiser import DenoiserConfig, DenoiserModel

    cfg = DenoiserConfig(
        channels=channels, state_dim=state_dim, horizon=16, context_width=16,
        widths=(8, 8, 8), kernel=3, groups=4, mlp_hidden=(8, 16),
        point_hidden=(8, 8), time_dim=8,
    )
    model = DenoiserModel(cfg, rng)
    # the output head is zero-initialized; randomize it so gradients flow to
    # every upstream group
    model.head.w.data = (rng.standard_normal(model.head.w.shape) * 0.1).astype(
        np.float32
    )
    return model


def _tiny_conditions(rng, state_dim):
    from .data import Conditions
    from .kinematics import Pose

    def unit(v):
        return v / np.linalg.norm(v)

    return Conditions(
        start_pose=Pose(rng.standard_normal(3).astype(np.float32),
                        unit(rng.standard_normal(4)).astype(np.float32)),
        goal_pose=Pose(rng.standard_normal(3).astype(np.float32),
                       unit(rng.standard_normal(4)).astype(np.float32)),
        robot_state=rng.standard_normal(state_dim).astype(np.float32),
        gripper_amount=0.5,
        point_cloud=rng.standard_normal((12, 3)).astype(np.float32),
        rank=0.9,
        start_joints=rng.standard_normal(4).astype(np.float32),
    )


def _set_param(root, dotted, value):
    """Replace the tensor at a dotted named_parameters path (lists included)."""
    parts = dotted.split(".")
    obj = root
    for part in parts[:-1]:
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    last = parts[-1]
    if last.isdigit():
        obj[int(last)] = value
    else:
        setattr(obj, last, value)


def _suite_denoiser(rng, coords_per_group=3):
    """Every parameter group of a downsized model gets a nonzero, correct
    gradient (no dead branches).  The probe tensor is substituted for the
    parameter so it genuinely enters the graph."""
    from . import autodiff as ad

    model = _tiny_model(rng, channels=5, state_dim=11)
    cond = _tiny_conditions(rng, 11)
    x_k = rng.standard_normal((16, 5)).astype(np.float32)
    cot = rng.standard_normal((16, 5))

    out = []
    for name, param in list(model.named_parameters().items()):
        base = param.data.copy()

        def f(t, name=name, shape=base.shape):
            _set_param(model, name, ad.reshape(t, shape))
            ctx = model.encode_conditions(cond)
            pred = model(x_k, 3, ctx)
            return (pred * Tensor(cot)).sum()

        coords = rng.choice(base.size, size=min(coords_per_group, base.size),
                            replace=False)
        r = finite_diff_check(f, base.astype(np.float64).ravel(), coords=coords)
        _set_param(model, name, param)
        param.data = base
        out.append((f"denoiser/{name}", r, 1e-3))
    return out


def _suite_distillation(rng, coords=24):
    """Gradient of the through-FK distillation term w.r.t. joint-denoiser
    parameters on a downsized model."""
    from .env import make_planar_chain
    from .kinematics import fk_tensor, pose_rows_distance_tensor, forward_kinematics
    from . import autodiff as ad

    chain = make_planar_chain(4)
    model = _tiny_model(rng, channels=4, state_dim=11)
    cond = _tiny_conditions(rng, 11)
    x_k = rng.standard_normal((16, 4)).astype(np.float32)
    target = forward_kinematics(chain, rng.uniform(-1.5, 1.5, (16, 4)))

    originals = dict(model.named_parameters())
    names = sorted(originals)
    sizes = np.array([originals[n].size for n in names])
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    flat0 = np.concatenate([originals[n].data.ravel() for n in names])

    def f(t):
        for i, n in enumerate(names):
            piece = t[int(bounds[i]):int(bounds[i + 1])]
            _set_param(model, n, ad.reshape(piece, originals[n].data.shape))
        ctx = model.encode_conditions(cond)
        pred = model(x_k, 2, ctx)
        rows = fk_tensor(chain, ad.reshape(pred, (16, 4)))
        return pose_rows_distance_tensor(rows, target).sum()

    picks = rng.choice(flat0.size, size=coords, replace=False)
    r = finite_diff_check(f, flat0.astype(np.float64), coords=picks)
    for n in names:
        _set_param(model, n, originals[n])
    return [("rkd/distillation_term", r, 1e-3)]


def run_all_suites(seed=0):
    """All finite-difference suites; returns [(name, report, tol)]."""
    rng = np.random.default_rng(seed)
    results = []
    results += _suite_primitives(rng)
    results += _suite_kinematics(rng)
    results += _suite_denoiser(rng)
    results += _suite_distillation(rng)
    return results
