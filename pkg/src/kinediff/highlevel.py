"""High-level next-pose agent: the scene point cloud is voxelized into an
occupancy grid, and discrete heads over translation cells, per-axis Euler
bins, and the binary gripper are trained by cross-entropy behaviour cloning;
inference takes the argmax of each head and reconstructs a continuous pose
from cell/bin centers."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint, nn
from .autodiff import Tensor, backward
from .kinematics import Pose, quat_mul, quat_from_axis_angle
from .optim import AdamW

NULL_TOKEN = 0  # reserved task-token id meaning "no instruction given"


@dataclass(frozen=True)
class GridConfig:
    lo: tuple
    hi: tuple
    resolution: tuple  # (Gx, Gy, Gz), each >= 2
    rot_bins: int = 36

    def __post_init__(self):
        if any(r < 2 for r in self.resolution):
            raise ValueError("grid resolution must be >= 2 per axis")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("degenerate workspace bounds")

    @property
    def n_cells(self):
        gx, gy, gz = self.resolution
        return gx * gy * gz

    def cell_size(self):
        return tuple(
            (h - l) / r for l, h, r in zip(self.lo, self.hi, self.resolution)
        )


@dataclass
class VoxelGrid:
    config: GridConfig
    occupancy: np.ndarray
    dropped: int = 0


@dataclass(frozen=True)
class DiscreteAction:
    """Expert action in grid coordinates: voxel index, per-axis rotation bin
    indices (yaw, pitch, roll), and the binary gripper."""

    trans: tuple
    rot: tuple
    grip: int


def _cell_index_1d(coord, lo, hi, res):
    """Lower-index assignment on shared boundaries; returns -1 when outside
    [lo, hi]."""
    if coord < lo or coord > hi:
        return -1
    u = (coord - lo) * res / (hi - lo)
    idx = int(np.ceil(u)) - 1
    return min(max(idx, 0), res - 1)


def point_to_cell(point, cfg):
    """Voxel index of a point, or None when it falls outside the workspace."""
    idx = tuple(
        _cell_index_1d(float(point[a]), cfg.lo[a], cfg.hi[a], cfg.resolution[a])
        for a in range(3)
    )
    if any(i < 0 for i in idx):
        return None
    return idx


def cell_center(idx, cfg):
    cell = cfg.cell_size()
    return np.array(
        [cfg.lo[a] + (idx[a] + 0.5) * cell[a] for a in range(3)], dtype=np.float32
    )


def voxelize(points, cfg):
    """Binary occupancy counts clamped to 1; outside points are tallied."""
    gx, gy, gz = cfg.resolution
    occ = np.zeros((gx, gy, gz), dtype=np.float32)
    dropped = 0
    for p in np.asarray(points, dtype=np.float64).reshape(-1, 3):
        idx = point_to_cell(p, cfg)
        if idx is None:
            dropped += 1
        else:
            occ[idx] = 1.0
    return VoxelGrid(cfg, occ, dropped)


# -----------------------------------------------------------------------------
# Euler <-> quaternion (yaw about z, pitch about y, roll about x)
# -----------------------------------------------------------------------------


def euler_to_quat(yaw, pitch, roll):
    qz = quat_from_axis_angle([0.0, 0.0, 1.0], yaw)
    qy = quat_from_axis_angle([0.0, 1.0, 0.0], pitch)
    qx = quat_from_axis_angle([1.0, 0.0, 0.0], roll)
    return quat_mul(quat_mul(qz, qy), qx).astype(np.float32)


def quat_to_euler(q):
    w, x, y, z = (float(v) for v in np.asarray(q, dtype=np.float64))
    yaw = np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))
    sp = np.clip(2.0 * (w * y - z * x), -1.0, 1.0)
    pitch = np.arcsin(sp)
    roll = np.arctan2(2.0 * (w * x + y * z), 1.0 - 2.0 * (x * x + y * y))
    return yaw, pitch, roll


def angle_to_bin(angle, bins):
    """Bin index over [-pi, pi); +pi wraps around to the first bin edge."""
    width = 2.0 * np.pi / bins
    wrapped = float(np.mod(angle + np.pi, 2.0 * np.pi))
    return min(int(wrapped / width), bins - 1)


def bin_center(idx, bins):
    width = 2.0 * np.pi / bins
    return -np.pi + (idx + 0.5) * width


def discretize_pose(pose, cfg, grip):
    """Expert pose -> DiscreteAction; raises when outside the workspace."""
    idx = point_to_cell(pose.translation, cfg)
    if idx is None:
        raise ValueError(f"expert translation {pose.translation} outside the grid")
    ypr = quat_to_euler(pose.rotation)
    rot = tuple(angle_to_bin(a, cfg.rot_bins) for a in ypr)
    return DiscreteAction(idx, rot, int(grip))


def reconstruct_pose(action, cfg):
    trans = cell_center(action.trans, cfg)
    yaw, pitch, roll = (bin_center(i, cfg.rot_bins) for i in action.rot)
    return Pose(trans, euler_to_quat(yaw, pitch, roll)), int(action.grip)


# -----------------------------------------------------------------------------
# model
# -----------------------------------------------------------------------------


@dataclass
class AgentConfig:
    grid: GridConfig
    n_tokens: int = 8          # task-token vocabulary, id 0 reserved as null
    token_width: int = 64
    hidden: tuple = (512, 512)


class GoalAgent(nn.Module):
    """Flattened occupancy + token embedding through an MLP trunk feeding the
    three discrete heads."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        g = cfg.grid
        in_width = g.n_cells + cfg.token_width
        dims = (in_width,) + tuple(cfg.hidden)
        self.token_emb = nn.Embedding(rng, cfg.n_tokens, cfg.token_width)
        self.trunk = nn.MLP(rng, dims)
        self.head_trans = nn.Linear(rng, dims[-1], g.n_cells, zero_init=True)
        self.head_rot = nn.Linear(rng, dims[-1], 3 * g.rot_bins, zero_init=True)
        self.head_grip = nn.Linear(rng, dims[-1], 2, zero_init=True)

    def forward(self, occ_flat, tokens):
        """occ_flat (B, n_cells) array, tokens (B,) ints -> logits tuple."""
        emb = self.token_emb(np.asarray(tokens, dtype=np.int64))
        h = ad.concat([Tensor(occ_flat.astype(np.float32)), emb], axis=1)
        h = ad.gelu(self.trunk(h))
        bins = self.cfg.grid.rot_bins
        rot_logits = self.head_rot(h)
        return (
            self.head_trans(h),
            ad.reshape(rot_logits, (rot_logits.shape[0], 3, bins)),
            self.head_grip(h),
        )

    def save(self, path):
        checkpoint.save_checkpoint(path, {k: v.data for k, v in self.named_parameters().items()})
        meta = {
            "grid": {
                "lo": list(self.cfg.grid.lo),
                "hi": list(self.cfg.grid.hi),
                "resolution": list(self.cfg.grid.resolution),
                "rot_bins": self.cfg.grid.rot_bins,
            },
            "n_tokens": self.cfg.n_tokens,
            "token_width": self.cfg.token_width,
            "hidden": list(self.cfg.hidden),
        }
        with open(str(path) + ".json", "w") as fh:
            json.dump(meta, fh, indent=1)

    @staticmethod
    def load(path):
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        grid = GridConfig(
            tuple(meta["grid"]["lo"]),
            tuple(meta["grid"]["hi"]),
            tuple(meta["grid"]["resolution"]),
            meta["grid"]["rot_bins"],
        )
        cfg = AgentConfig(grid, meta["n_tokens"], meta["token_width"], tuple(meta["hidden"]))
        agent = GoalAgent(cfg, np.random.default_rng(0))
        agent.load_state_dict(checkpoint.load_checkpoint(path))
        return agent


def _cross_entropy(logits, targets):
    """Mean cross-entropy from raw logits (B, K) and integer targets (B,)."""
    b = logits.shape[0]
    m = Tensor(logits.data.max(axis=-1, keepdims=True))  # detached shift
    z = logits - m
    lse = ad.log(ad.reduce_sum(ad.exp(z), axis=-1))
    chosen = z[np.arange(b), np.asarray(targets, dtype=np.int64)]
    return (lse - chosen).mean()


@dataclass
class KeyframeSample:
    """One supervised example: first observation, task token, expert action."""

    points: np.ndarray
    token: int
    action: DiscreteAction


@dataclass
class GoalTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    jitter_cells: int = 2
    hidden: tuple = (512, 512)
    n_tokens: int = 8
    log_every: int = 100


def _shift_grid(occ, offset):
    out = np.zeros_like(occ)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for a, o in enumerate(offset):
        n = occ.shape[a]
        if o >= 0:
            src[a] = slice(0, n - o)
            dst[a] = slice(o, n)
        else:
            src[a] = slice(-o, n)
            dst[a] = slice(0, n + o)
    out[tuple(dst)] = occ[tuple(src)]
    return out


def train_goal_agent(samples, grid, config=None, seed=0, callback=None):
    """Behaviour cloning over keyframe samples with grid-jitter augmentation:
    scene occupancy and expert voxel index shift by a common random offset."""
    cfg = config or GoalTrainConfig()
    if not samples:
        raise ValueError("no training samples")
    res = grid.resolution
    for s in samples:
        for a in range(3):
            if not 0 <= s.action.trans[a] < res[a]:
                raise ValueError(f"expert voxel index {s.action.trans} out of bounds")
    rngs = np.random.SeedSequence(seed).spawn(3)
    rng_init = np.random.default_rng(rngs[0])
    rng_batch = np.random.default_rng(rngs[1])
    rng_jitter = np.random.default_rng(rngs[2])
    agent = GoalAgent(
        AgentConfig(grid, n_tokens=cfg.n_tokens, hidden=tuple(cfg.hidden)), rng_init
    )
    occs = [voxelize(s.points, grid).occupancy for s in samples]
    params = list(agent.named_parameters().values())
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for step in range(cfg.steps):
        idx = rng_batch.integers(0, len(samples), size=cfg.batch_size)
        occ_rows = []
        t_targets = []
        r_targets = []
        g_targets = []
        tokens = []
        for i in idx:
            s = samples[i]
            occ = occs[i]
            trans = np.asarray(s.action.trans)
            if cfg.jitter_cells:
                off = rng_jitter.integers(-cfg.jitter_cells, cfg.jitter_cells + 1, 3)
                shifted = trans + off
                if np.all(shifted >= 0) and np.all(shifted < res):
                    occ = _shift_grid(occ, off)
                    trans = shifted
            occ_rows.append(occ.reshape(-1))
            t_targets.append(np.ravel_multi_index(tuple(trans), res))
            r_targets.append(s.action.rot)
            g_targets.append(s.action.grip)
            tokens.append(s.token)
        logits_t, logits_r, logits_g = agent.forward(
            np.stack(occ_rows), np.asarray(tokens)
        )
        loss = _cross_entropy(logits_t, np.asarray(t_targets))
        r_targets = np.asarray(r_targets)
        for a in range(3):
            loss = loss + _cross_entropy(logits_r[:, a, :], r_targets[:, a])
        loss = loss + _cross_entropy(logits_g, np.asarray(g_targets))
        val = float(loss.data)
        if not np.isfinite(val):
            raise RuntimeError(f"non-finite loss at step {step}")
        grads = backward(loss, params)
        opt.step(grads)
        history.append(val)
        if callback and step % cfg.log_every == 0:
            callback(step, val)
    return agent, history


def predict_goal(agent, points, token):
    """Argmax inference: returns (Pose, gripper).  Ties resolve to the lowest
    flat index (np.argmax takes the first maximum)."""
    grid = agent.cfg.grid
    occ = voxelize(points, grid).occupancy.reshape(1, -1)
    with ad.no_grad():
        lt, lr, lg = agent.forward(occ, np.asarray([token]))
    t_idx = np.unravel_index(int(np.argmax(lt.data[0])), grid.resolution)
    rot = tuple(int(np.argmax(lr.data[0, a])) for a in range(3))
    grip = int(np.argmax(lg.data[0]))
    return reconstruct_pose(DiscreteAction(t_idx, rot, grip), grid)
