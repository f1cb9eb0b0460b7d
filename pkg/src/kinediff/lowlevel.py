"""Low-level goal-conditioned controller: twin trajectory diffusers (pose and
joint space) trained jointly with a differentiable-kinematics distillation
term, plus the inference-time refinement that pulls the joint trajectory onto
the generated pose trajectory through FK gradients."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import checkpoint, diffusion
from .autodiff import Tensor, backward
from .data import HORIZON, Conditions, augment_endpoints
from .denoiser import DenoiserConfig, DenoiserModel
from .kinematics import (
    fk_pullback,
    fk_tensor,
    forward_kinematics,
    pose_rows_distance,
    pose_rows_distance_grad,
    pose_rows_distance_tensor,
)
from .optim import AdamW


@dataclass
class RefineConfig:
    step_size: float = 0.05   # initial gradient step; later steps adapt
    max_steps: int = 100
    stop_tol: float = 1e-12   # minimum squared-objective improvement
    w_rot: float = 0.5


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 24
    lr: float = 1e-3
    lr_decay: str = "constant"  # or "cosine" (decays to lr/20 over the run)
    weight_decay: float = 1e-4
    # loss weights for the pose MSE, joint MSE and FK-distillation terms
    pose_weight: float = 1.0
    joint_weight: float = 1.0
    distill_weight: float = 1.0
    cond_dropout: float = 0.1
    cfg_weight: float = 1.5
    schedule_kind: str = "cosine"
    schedule_steps: int = 100
    widths: tuple = (64, 128, 256)
    context_width: int = 256
    mlp_hidden: tuple = (128, 512)
    log_every: int = 100


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RefinementTrace:
    residuals: list = field(default_factory=list)
    diverged: bool = False

    @property
    def initial(self):
        return self.residuals[0] if self.residuals else np.nan

    @property
    def final(self):
        return self.residuals[-1] if self.residuals else np.nan


class ChannelStats:
    """Per-channel affine normalization of trajectories; the denoisers work
    in normalized space so every channel carries comparable resolution."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float32)
        self.std = np.asarray(std, dtype=np.float32)

    @staticmethod
    def fit(rows, floor=0.05):
        rows = np.asarray(rows, dtype=np.float64)
        return ChannelStats(rows.mean(axis=0), np.maximum(rows.std(axis=0), floor))

    def normalize(self, x):
        return ((np.asarray(x, np.float32) - self.mean) / self.std).astype(np.float32)

    def denormalize(self, x):
        return (np.asarray(x, np.float32) * self.std + self.mean).astype(np.float32)


class TrajectoryDiffuser:
    """Pose-space and joint-space denoisers sharing one schedule."""

    def __init__(self, pose_denoiser, joint_denoiser, schedule, dof,
                 refine=None, cfg_weight=1.5, loss_weights=(1.0, 1.0, 1.0),
                 pose_stats=None, joint_stats=None):
        self.pose_denoiser = pose_denoiser
        self.joint_denoiser = joint_denoiser
        self.schedule = schedule
        self.dof = dof
        self.refine = refine or RefineConfig()
        self.cfg_weight = cfg_weight
        self.loss_weights = tuple(loss_weights)
        self.pose_stats = pose_stats or ChannelStats(np.zeros(7), np.ones(7))
        self.joint_stats = joint_stats or ChannelStats(np.zeros(dof), np.ones(dof))

    def named_parameters(self):
        out = {}
        out.update(self.pose_denoiser.named_parameters(prefix="pose."))
        out.update(self.joint_denoiser.named_parameters(prefix="joint."))
        return out

    def save(self, path):
        params = {k: v.data for k, v in self.named_parameters().items()}
        checkpoint.save_checkpoint(path, params)
        meta = {
            "dof": self.dof,
            "schedule": {
                "kind": self.schedule.kind,
                "K": self.schedule.K,
                "params": self.schedule.params,
            },
            "loss_weights": list(self.loss_weights),
            "cfg_weight": self.cfg_weight,
            "refine": asdict(self.refine),
            "pose_config": _cfg_dict(self.pose_denoiser.cfg),
            "joint_config": _cfg_dict(self.joint_denoiser.cfg),
            "pose_stats": {"mean": self.pose_stats.mean.tolist(),
                           "std": self.pose_stats.std.tolist()},
            "joint_stats": {"mean": self.joint_stats.mean.tolist(),
                            "std": self.joint_stats.std.tolist()},
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=1)

    @staticmethod
    def load(path):
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        rng = np.random.default_rng(0)  # shapes only; weights overwritten below
        pose = DenoiserModel(_cfg_from_dict(meta["pose_config"]), rng)
        joint = DenoiserModel(_cfg_from_dict(meta["joint_config"]), rng)
        params = checkpoint.load_checkpoint(path)
        state = {k[len("pose."):]: v for k, v in params.items() if k.startswith("pose.")}
        pose.load_state_dict(state)
        state = {k[len("joint."):]: v for k, v in params.items() if k.startswith("joint.")}
        joint.load_state_dict(state)
        sched = diffusion.make_schedule(
            meta["schedule"]["K"], meta["schedule"]["kind"], **meta["schedule"]["params"]
        )
        model = TrajectoryDiffuser(
            pose, joint, sched, meta["dof"],
            refine=RefineConfig(**meta["refine"]),
            cfg_weight=meta["cfg_weight"],
            loss_weights=tuple(meta["loss_weights"]),
            pose_stats=ChannelStats(**meta["pose_stats"]),
            joint_stats=ChannelStats(**meta["joint_stats"]),
        )
        return model


def _cfg_dict(cfg):
    d = asdict(cfg)
    for key in ("widths", "mlp_hidden", "point_hidden"):
        d[key] = list(d[key])
    return d


def _cfg_from_dict(d):
    d = dict(d)
    for key in ("widths", "mlp_hidden", "point_hidden"):
        d[key] = tuple(d[key])
    return DenoiserConfig(**d)


# -----------------------------------------------------------------------------
# training
# -----------------------------------------------------------------------------


def _rng_streams(seed):
    seq = np.random.SeedSequence(seed)
    names = ("init", "batch", "k", "dropout", "noise_pose", "noise_joint", "augment")
    children = seq.spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def train_diffuser(dataset, chain, config=None, seed=0, callback=None):
    """Train the twin diffusers on a list of SubTrajectory.

    Per batch: draw a diffusion step and noise per sample, noise both
    modalities with the closed form, predict the clean trajectories, and take
    the weighted sum of pose MSE, joint MSE and the FK distillation distance
    (FK of the joint prediction against the clean pose rows).  Conditioning
    is dropped at the configured rate for guidance training.

    Returns (model, history) where history holds per-step loss components.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    cfg = config or TrainConfig()
    if any(s.joints.shape[0] != HORIZON for s in dataset):
        raise ValueError(f"all sub-trajectories must have {HORIZON} rows")
    dof = dataset[0].joints.shape[1]
    state_dim = dof + 7
    streams = _rng_streams(seed)
    sched = diffusion.make_schedule(cfg.schedule_steps, cfg.schedule_kind)

    def dcfg(channels):
        return DenoiserConfig(
            channels=channels,
            state_dim=state_dim,
            horizon=HORIZON,
            context_width=cfg.context_width,
            widths=tuple(cfg.widths),
            mlp_hidden=tuple(cfg.mlp_hidden),
        )

    pose_model = DenoiserModel(dcfg(7), streams["init"])
    joint_model = DenoiserModel(dcfg(dof), streams["init"])
    pose_stats = ChannelStats.fit(np.concatenate([s.poses for s in dataset]))
    joint_stats = ChannelStats.fit(np.concatenate([s.joints for s in dataset]))
    model = TrajectoryDiffuser(
        pose_model, joint_model, sched, dof,
        cfg_weight=cfg.cfg_weight,
        loss_weights=(cfg.pose_weight, cfg.joint_weight, cfg.distill_weight),
        pose_stats=pose_stats,
        joint_stats=joint_stats,
    )
    params = list(model.named_parameters().values())
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    sqrt_ab = np.sqrt(sched.alpha_bar).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar).astype(np.float32)
    history = {"total": [], "pose": [], "joint": [], "distill": []}
    for step in range(cfg.steps):
        idx = streams["batch"].integers(0, len(dataset), size=cfg.batch_size)
        subs = [augment_endpoints(dataset[i], streams["augment"]) for i in idx]
        ks = streams["k"].integers(1, sched.K + 1, size=cfg.batch_size)
        drop = streams["dropout"].random(cfg.batch_size) < cfg.cond_dropout
        conds = [Conditions.from_subtrajectory(s) for s in subs]

        pose_raw = np.stack([s.poses for s in subs]).astype(np.float32)
        joint_raw = np.stack([s.joints for s in subs]).astype(np.float32)
        pose0 = pose_stats.normalize(pose_raw)
        joint0 = joint_stats.normalize(joint_raw)
        c_ab = sqrt_ab[ks - 1][:, None, None]
        c_n = sqrt_1mab[ks - 1][:, None, None]
        eps_p = streams["noise_pose"].standard_normal(pose0.shape, dtype=np.float32)
        eps_j = streams["noise_joint"].standard_normal(joint0.shape, dtype=np.float32)
        pose_k = c_ab * pose0 + c_n * eps_p
        joint_k = c_ab * joint0 + c_n * eps_j

        w_pose, w_joint, w_distill = model.loss_weights
        losses = {}
        total = None

        def add_term(name, weight, term):
            nonlocal total
            losses[name] = float(term.data)
            if weight:
                total = term * weight if total is None else total + term * weight

        if w_pose:
            ctx_p = pose_model.encode_conditions(conds, dropout=drop)
            pred_p = pose_model(pose_k, ks, ctx_p)
            diff = pred_p - Tensor(pose0)
            add_term("pose", w_pose, (diff * diff).mean())
        else:
            losses["pose"] = 0.0
        if w_joint or w_distill:
            ctx_j = joint_model.encode_conditions(conds, dropout=drop)
            pred_j = joint_model(joint_k, ks, ctx_j)
        if w_joint:
            diffj = pred_j - Tensor(joint0)
            add_term("joint", w_joint, (diffj * diffj).mean())
        else:
            losses["joint"] = 0.0
        if w_distill:
            flat = ad.reshape(pred_j, (cfg.batch_size * HORIZON, dof))
            # back to raw joint space before running kinematics
            raw = flat * Tensor(joint_stats.std) + Tensor(joint_stats.mean)
            fk_rows = fk_tensor(chain, raw)
            dists = pose_rows_distance_tensor(
                fk_rows, pose_raw.reshape(-1, 7), w_rot=model.refine.w_rot
            )
            # row-sum per trajectory, mean over the batch
            add_term("distill", w_distill, dists.sum() * (1.0 / cfg.batch_size))
        else:
            losses["distill"] = 0.0

        if total is None:
            raise ValueError("all loss weights are zero")
        loss_val = float(total.data)
        if not np.isfinite(loss_val):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: {losses}"
            )
        if cfg.lr_decay == "cosine":
            frac = step / max(cfg.steps - 1, 1)
            opt.state.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1 + np.cos(np.pi * frac)))
        grads = backward(total, params)
        opt.step(grads)
        history["total"].append(loss_val)
        for name in ("pose", "joint", "distill"):
            history[name].append(losses[name])
        if callback and step % cfg.log_every == 0:
            callback(step, loss_val, losses)
    return model, history


# -----------------------------------------------------------------------------
# sampling
# -----------------------------------------------------------------------------


def _mask_rows(model, head, cond):
    """(row index, raw fixed values) pairs for the chosen head's inpainting."""
    if head == "pose":
        return [(0, cond.start_pose.as_array()),
                (HORIZON - 1, cond.goal_pose.as_array())]
    if head == "joint":
        return [(0, np.asarray(cond.start_joints, dtype=np.float32))]
    raise ValueError(f"unknown head {head!r}")


def sample_trajectory(model, head, cond, rng):
    """Sample one trajectory from the chosen head with hard inpainting of the
    conditioning rows and classifier-free guidance.

    The reverse chain runs in normalized channel space; the returned raw
    trajectory carries the conditioning rows bit-exactly.
    """
    denoiser_model = model.pose_denoiser if head == "pose" else model.joint_denoiser
    stats = model.pose_stats if head == "pose" else model.joint_stats
    channels = 7 if head == "pose" else model.dof
    rows = _mask_rows(model, head, cond)
    with ad.no_grad():
        ctx_cond = denoiser_model.encode_conditions(cond).data
        ctx_null = denoiser_model.encode_conditions(cond, dropout=True).data
        w = model.cfg_weight

        def denoise(x, k, _ctx):
            if w == 1.0:
                return denoiser_model(x, k, Tensor(ctx_cond)).data
            both = denoiser_model(
                np.stack([x, x]), np.array([k, k]),
                Tensor(np.stack([ctx_cond, ctx_null])),
            ).data
            return diffusion.cfg_combine(both[0], both[1], w)

        mask = diffusion.InpaintMask(HORIZON, channels)
        for t, values in rows:
            mask.fix_row(t, stats.normalize(values))
        out = diffusion.sample_with_inpainting(
            denoise, None, mask, model.schedule, HORIZON, channels, rng
        )
    out = stats.denormalize(out)
    for t, values in rows:
        out[t] = values
    return out


def _sq_objective_and_grad(chain, joints, pose_traj, w_rot):
    """Smooth refinement objective sum_t(||dt||^2 + w_rot (1 - |<q>|)^2) and
    its joint-space gradient pulled back through FK.  The gradient vanishes
    exactly at zero residual, so fixed steps can converge all the way."""
    rows = forward_kinematics(chain, joints)
    dt = rows[:, :3] - pose_traj[:, :3]
    dots = np.sum(rows[:, 3:7] * pose_traj[:, 3:7], axis=1, keepdims=True)
    gap = 1.0 - np.abs(dots)
    obj = float(np.sum(dt * dt) + w_rot * np.sum(gap * gap))
    cot = np.zeros_like(rows)
    cot[:, :3] = 2.0 * dt
    cot[:, 3:7] = -2.0 * w_rot * gap * np.sign(dots) * pose_traj[:, 3:7]
    grad = fk_pullback(chain, joints, cot)
    metric = float(np.sum(pose_rows_distance(rows, pose_traj, w_rot=w_rot)))
    return obj, grad, metric


def refine_joints(chain, joint_traj, pose_traj, config=None):
    """Descend the FK pose residual in joint space.

    Steps start at the configured size and backtrack (or cautiously grow)
    so every accepted iterate improves the objective; the first row stays
    pinned, iterates are projected into joint limits, and the best iterate
    by summed pose distance is returned with its residual trace.
    """
    cfg = config or RefineConfig()
    pose_traj = np.asarray(pose_traj, dtype=np.float64)
    qnorms = np.linalg.norm(pose_traj[:, 3:7], axis=1)
    if np.any(np.abs(qnorms - 1.0) > 1e-3):
        raise ValueError("refinement targets must carry unit quaternions")
    current = chain.clip_joints(np.asarray(joint_traj, dtype=np.float64).copy())
    row0 = current[0].copy()
    trace = RefinementTrace()
    obj, grad, metric = _sq_objective_and_grad(chain, current, pose_traj, cfg.w_rot)
    grad[0] = 0.0
    trace.residuals.append(metric)
    best, best_metric = current.copy(), metric
    step = cfg.step_size
    prev_joints = None
    prev_grad = None
    for _ in range(cfg.max_steps):
        accepted = False
        for _ in range(20):
            cand = chain.clip_joints(current - step * grad)
            cand[0] = row0
            c_obj, c_grad, c_metric = _sq_objective_and_grad(
                chain, cand, pose_traj, cfg.w_rot
            )
            if c_obj < obj and c_metric <= metric + 1e-12:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = obj - c_obj
        prev_joints, prev_grad = current, grad
        current, obj, grad, metric = cand, c_obj, c_grad, c_metric
        grad[0] = 0.0
        trace.residuals.append(metric)
        if metric < best_metric:
            best, best_metric = current.copy(), metric
        if improvement < cfg.stop_tol:
            break
        # spectral (Barzilai-Borwein) step, safeguarded by the backtracking
        dx = (current - prev_joints).ravel()
        dg = (grad - prev_grad).ravel()
        dgg = float(dg @ dg)
        if dgg > 1e-30:
            step = min(max(float(dx @ dg) / dgg, 1e-4 * cfg.step_size), 1e4)
        else:
            step = cfg.step_size
    return best.astype(np.float32), trace


@dataclass
class ActResult:
    joints: np.ndarray          # (64, N) refined joint trajectory
    trace: RefinementTrace
    pose_traj_raw: np.ndarray   # (64, 7) pose rows as emitted by the diffuser
    pose_traj: np.ndarray       # (64, 7) with re-normalized quaternion rows
    joint_traj_unrefined: np.ndarray


def act(model, chain, cond, rng):
    """Full low-level step: sample both trajectories, re-normalize the pose
    quaternion rows, then refine the joints against the pose rows.  The
    output satisfies joint limits by construction and never touches an IK
    solver."""
    raw_pose = sample_trajectory(model, "pose", cond, rng)
    pose = raw_pose.copy()
    qn = np.linalg.norm(pose[:, 3:7], axis=1, keepdims=True)
    pose[:, 3:7] /= np.maximum(qn, 1e-9)
    joints = sample_trajectory(model, "joint", cond, rng)
    refined, trace = refine_joints(chain, joints, pose, model.refine)
    return ActResult(refined, trace, raw_pose, pose, joints)


def violation_probability(p, horizon):
    """Chance that at least one of ``horizon`` independent steps violates a
    per-step constraint of probability ``p``: 1 - (1 - p)^T."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"per-step probability {p} outside [0, 1]")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return 1.0 - (1.0 - p) ** horizon
