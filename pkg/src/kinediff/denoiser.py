"""Clean-trajectory prediction network: per-condition MLP encoders plus a
permutation-invariant point-set encoder feed a temporal Conv1d encoder-decoder
with skip connections; the diffusion step and the condition context are
injected additively into every residual block."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int                 # trajectory channel count C
    state_dim: int                # robot low-dimensional state width
    horizon: int = 64             # must be divisible by 8 (three downsamplings)
    context_width: int = 256
    widths: tuple = (64, 128, 256)
    kernel: int = 5
    groups: int = 8
    mlp_hidden: tuple = (128, 512)
    point_hidden: tuple = (64, 128)
    time_dim: int = 128

    def __post_init__(self):
        if self.horizon % 8:
            raise ValueError(f"horizon {self.horizon} must be a multiple of 8")
        for w in self.widths:
            if w % self.groups:
                raise ValueError(f"width {w} not divisible by groups {self.groups}")


def _vector_fields(c):
    """Ordered (name, vector) pairs drawn from a Conditions bundle."""
    return [
        ("start_pose", c.start_pose.as_array()),
        ("goal_pose", c.goal_pose.as_array()),
        ("robot_state", np.asarray(c.robot_state, dtype=np.float32)),
        ("gripper", np.asarray([c.gripper_amount], dtype=np.float32)),
        ("rank", np.asarray([c.rank], dtype=np.float32)),
    ]


class PointSetEncoder(nn.Module):
    """Per-point MLP followed by max-pooling; invariant to point order."""

    def __init__(self, rng, hidden=(64, 128)):
        self.mlp = nn.MLP(rng, (3,) + tuple(hidden))
        self.out_width = hidden[-1]

    def __call__(self, points):
        # points: (B, M, 3) array; empty sets encode to zeros
        b, m = points.shape[0], points.shape[1]
        if m == 0:
            return Tensor(np.zeros((b, self.out_width), np.float32))
        # flatten so the per-point MLP runs as one GEMM
        feats = self.mlp(Tensor(points.reshape(b * m, 3)))
        return ad.reduce_max(ad.reshape(feats, (b, m, self.out_width)), axis=1)


class ConditionEncoder(nn.Module):
    """Concatenated per-field embeddings projected to the context width; a
    learned null embedding stands in for the whole bundle when conditioning
    is dropped (classifier-free guidance training)."""

    def __init__(self, rng, cfg):
        hidden = tuple(cfg.mlp_hidden)
        self.field_dims = {
            "start_pose": 7,
            "goal_pose": 7,
            "robot_state": cfg.state_dim,
            "gripper": 1,
            "rank": 1,
        }
        self.encoders = {}
        for name, dim in self.field_dims.items():
            enc = nn.MLP(rng, (dim,) + hidden)
            setattr(self, f"mlp_{name}", enc)
            self.encoders[name] = enc
        self.points = PointSetEncoder(rng, cfg.point_hidden)
        concat_width = hidden[-1] * len(self.field_dims) + self.points.out_width
        self.null_embedding = Tensor(
            (rng.standard_normal(concat_width) * 0.02).astype(np.float32),
            requires_grad=True,
        )
        self.proj = nn.Linear(rng, concat_width, cfg.context_width)

    def __call__(self, conditions, dropout=False):
        """Encode a list of Conditions (or one) to (B, context_width).

        ``dropout`` is a bool or a (B,) boolean mask; dropped rows use the
        null embedding and drop their gradient path to the inputs.
        """
        single = not isinstance(conditions, (list, tuple))
        if single:
            conditions = [conditions]
        batch = len(conditions)
        pieces = []
        for name, _ in self.field_dims.items():
            rows = np.stack(
                [dict(_vector_fields(c))[name] for c in conditions]
            ).astype(np.float32)
            if not np.all(np.isfinite(rows)):
                raise ValueError(f"non-finite values in condition field {name!r}")
            pieces.append(self.encoders[name](Tensor(rows)))
        pts = np.stack([c.point_cloud for c in conditions]).astype(np.float32)
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite values in condition point cloud")
        pieces.append(self.points(pts))
        joined = ad.concat(pieces, axis=1)
        mask = np.broadcast_to(np.asarray(dropout, dtype=bool), (batch,))
        if mask.any():
            null = ad.reshape(self.null_embedding, (1, self.null_embedding.shape[0]))
            keep = Tensor((~mask).astype(np.float32)[:, None])
            drop = Tensor(mask.astype(np.float32)[:, None])
            joined = joined * keep + null * drop
        out = self.proj(joined)
        return out[0] if single else out


class ResBlock1d(nn.Module):
    """conv-GN-(context add)-GELU twice with a (projected) skip."""

    def __init__(self, rng, c_in, c_out, kernel, groups, inject_width):
        self.conv1 = nn.Conv1d(rng, c_in, c_out, kernel)
        self.norm1 = nn.GroupNorm(c_out, groups)
        self.conv2 = nn.Conv1d(rng, c_out, c_out, kernel)
        self.norm2 = nn.GroupNorm(c_out, groups)
        self.inject = nn.Linear(rng, inject_width, c_out)
        self.skip = None if c_in == c_out else nn.Conv1d(rng, c_in, c_out, 1, pad=0)

    def __call__(self, x, inj):
        h = self.norm1(self.conv1(x))
        add = self.inject(inj)
        h = h + ad.reshape(add, (add.shape[0], add.shape[1], 1))
        h = ad.gelu(h)
        h = ad.gelu(self.norm2(self.conv2(h)))
        s = x if self.skip is None else self.skip(x)
        return h + s


class DenoiserModel(nn.Module):
    """x0-prediction UNet over (T, C) trajectories."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        w0, w1, w2 = cfg.widths
        inject = cfg.context_width + cfg.time_dim
        self.cond = ConditionEncoder(rng, cfg)
        self.time_mlp = nn.MLP(rng, (cfg.time_dim, cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv1d(rng, cfg.channels, w0, cfg.kernel)
        self.down1 = ResBlock1d(rng, w0, w0, cfg.kernel, cfg.groups, inject)
        self.pool1 = nn.Conv1d(rng, w0, w0, 3, stride=2, pad=1)
        self.down2 = ResBlock1d(rng, w0, w1, cfg.kernel, cfg.groups, inject)
        self.pool2 = nn.Conv1d(rng, w1, w1, 3, stride=2, pad=1)
        self.down3 = ResBlock1d(rng, w1, w2, cfg.kernel, cfg.groups, inject)
        self.pool3 = nn.Conv1d(rng, w2, w2, 3, stride=2, pad=1)
        self.mid = ResBlock1d(rng, w2, w2, cfg.kernel, cfg.groups, inject)
        self.up3 = ResBlock1d(rng, w2 + w2, w1, cfg.kernel, cfg.groups, inject)
        self.up2 = ResBlock1d(rng, w1 + w1, w0, cfg.kernel, cfg.groups, inject)
        self.up1 = ResBlock1d(rng, w0 + w0, w0, cfg.kernel, cfg.groups, inject)
        self.head = nn.Conv1d(rng, w0, cfg.channels, 1, pad=0, zero_init=True)

    def encode_conditions(self, conditions, dropout=False):
        return self.cond(conditions, dropout=dropout)

    def __call__(self, x_k, k, context):
        """x_k: (T, C) or (B, T, C) array/Tensor; k: int or (B,) steps;
        context: (context_width,) or (B, context_width) Tensor."""
        arr = x_k.data if isinstance(x_k, Tensor) else np.asarray(x_k, np.float32)
        single = arr.ndim == 2
        if single:
            x_k = ad.reshape(_as_tensor(x_k), (1,) + arr.shape)
        else:
            x_k = _as_tensor(x_k)
        b, t, c = x_k.shape
        if t != self.cfg.horizon or c != self.cfg.channels:
            raise ValueError(
                f"trajectory shape ({t}, {c}) != ({self.cfg.horizon}, {self.cfg.channels})"
            )
        if context.data.ndim == 1:
            context = ad.reshape(context, (1, context.shape[0]))
        temb = self.time_mlp(Tensor(nn.sinusoidal_embedding(k, self.cfg.time_dim)))
        if temb.shape[0] == 1 and b > 1:
            temb = temb * Tensor(np.ones((b, 1), np.float32))
        if context.shape[0] == 1 and b > 1:
            context = context * Tensor(np.ones((b, 1), np.float32))
        inj = ad.concat([context, temb], axis=1)

        h = ad.transpose(x_k, (0, 2, 1))  # (B, C, T)
        h = self.conv_in(h)
        s1 = self.down1(h, inj)
        h = self.pool1(s1)
        s2 = self.down2(h, inj)
        h = self.pool2(s2)
        s3 = self.down3(h, inj)
        h = self.pool3(s3)
        h = self.mid(h, inj)
        h = self.up3(ad.concat([ad.upsample2(h), s3], axis=1), inj)
        h = self.up2(ad.concat([ad.upsample2(h), s2], axis=1), inj)
        h = self.up1(ad.concat([ad.upsample2(h), s1], axis=1), inj)
        out = ad.transpose(self.head(h), (0, 2, 1))
        return out[0] if single else out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def denoise_forward(model, x_k, k, context):
    """Functional wrapper over DenoiserModel.__call__."""
    return model(x_k, k, context)
