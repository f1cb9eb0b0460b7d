"""Minimal layer library over the autodiff tape: Linear, Conv1d, GroupNorm,
Embedding and an MLP block, plus parameter walking for checkpoints."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class; parameters are Tensor attributes with requires_grad set."""

    def named_parameters(self, prefix=""):
        out = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix=name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(prefix=f"{name}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(
                f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        for name, tensor in params.items():
            arr = np.asarray(state[name], dtype=tensor.data.dtype)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"{name}: shape {arr.shape} != expected {tensor.data.shape}"
                )
            tensor.data = arr.copy()


def _he(rng, fan_in, shape):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Linear(Module):
    def __init__(self, rng, n_in, n_out, zero_init=False):
        if zero_init:
            w = np.zeros((n_in, n_out), dtype=np.float32)
        else:
            w = _he(rng, n_in, (n_in, n_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b


class Conv1d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, pad=None, zero_init=False):
        self.stride = stride
        self.pad = (kernel - 1) // 2 if pad is None else pad
        if zero_init:
            w = np.zeros((c_out, c_in, kernel), dtype=np.float32)
        else:
            w = _he(rng, c_in * kernel, (c_out, c_in, kernel))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        y = ad.conv1d(x, self.w, stride=self.stride, pad=self.pad)
        return y + ad.reshape(self.b, (1, self.b.shape[0], 1))


class GroupNorm(Module):
    def __init__(self, channels, groups=8, eps=1e-5):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)

    def __call__(self, x):
        return ad.groupnorm(x, self.gamma, self.beta, self.groups, self.eps)


class Embedding(Module):
    def __init__(self, rng, n_rows, width, scale=0.02):
        table = (rng.standard_normal((n_rows, width)) * scale).astype(np.float32)
        self.table = Tensor(table, requires_grad=True)

    def __call__(self, idx):
        return ad.gather(self.table, np.asarray(idx, dtype=np.int64), axis=0)


class MLP(Module):
    """Linear stack with GELU between layers (none after the last)."""

    def __init__(self, rng, dims, zero_init_last=False):
        self.layers = [
            Linear(rng, dims[i], dims[i + 1],
                   zero_init=zero_init_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


def sinusoidal_embedding(steps, dim):
    """Classic sin/cos positional features for integer diffusion steps."""
    steps = np.atleast_1d(np.asarray(steps, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = steps[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return emb.astype(np.float32)
