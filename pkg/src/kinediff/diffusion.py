"""DDPM machinery: variance schedules, closed-form noising, the reverse step
parameterized by a clean-trajectory prediction, and conditional sampling with
hard inpainting of fixed trajectory entries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


TERMINAL_ALPHA_BAR = 1e-3  # the noising chain must land (numerically) on N(0, I)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Betas for steps 1..K and the derived cumulative products.

    ``alpha_bar[k-1]`` is the product of (1 - beta) up to step k; index 0 of
    the arrays corresponds to diffusion step 1.
    """

    kind: str
    beta: np.ndarray
    alpha_bar: np.ndarray
    params: dict

    @property
    def K(self):
        return len(self.beta)

    def abar(self, k):
        """alpha_bar at step k, with abar(0) == 1."""
        return 1.0 if k == 0 else float(self.alpha_bar[k - 1])

    def posterior_coeffs(self, k):
        """Coefficients (c0, c1, var) of q(x^{k-1} | x^k, x0):
        mean = c0 * x0 + c1 * x^k, variance var."""
        if not 1 <= k <= self.K:
            raise ScheduleError(f"step {k} outside 1..{self.K}")
        ab_k = self.abar(k)
        ab_prev = self.abar(k - 1)
        beta_k = float(self.beta[k - 1])
        denom = 1.0 - ab_k
        c0 = np.sqrt(ab_prev) * beta_k / denom
        c1 = np.sqrt(1.0 - beta_k) * (1.0 - ab_prev) / denom
        var = (1.0 - ab_prev) / denom * beta_k
        return c0, c1, var


def make_schedule(K, kind="cosine", **params):
    """Build a K-step schedule; rejects any whose final alpha_bar is not
    effectively zero (the standard linear schedule fails this at K = 100,
    which is why cosine is the default)."""
    if K < 1:
        raise ScheduleError("K must be >= 1")
    if kind == "cosine":
        s = params.get("s", 0.008)
        ks = np.arange(K + 1, dtype=np.float64)
        f = np.cos(((ks / K + s) / (1.0 + s)) * np.pi / 2.0) ** 2
        alpha_bar = f[1:] / f[0]
        beta = 1.0 - alpha_bar / np.concatenate([[1.0], alpha_bar[:-1]])
        beta = np.clip(beta, 1e-8, 0.999)
        alpha_bar = np.cumprod(1.0 - beta)
    elif kind == "linear":
        lo = params.get("beta_start", 1e-4)
        hi = params.get("beta_end", 0.02)
        beta = np.linspace(lo, hi, K)
        alpha_bar = np.cumprod(1.0 - beta)
    elif kind == "explicit":
        beta = np.asarray(params["beta"], dtype=np.float64)
        if beta.shape != (K,):
            raise ScheduleError(f"explicit beta needs shape ({K},)")
        alpha_bar = np.cumprod(1.0 - beta)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ScheduleError("beta values must lie in (0, 1)")
    if np.any(np.diff(alpha_bar) >= 0):
        raise ScheduleError("alpha_bar must be strictly decreasing")
    if alpha_bar[-1] >= TERMINAL_ALPHA_BAR:
        raise ScheduleError(
            f"{kind} schedule with K={K} ends at alpha_bar={alpha_bar[-1]:.4g} "
            f">= {TERMINAL_ALPHA_BAR}; the noising chain must end near N(0, I)"
        )
    return DiffusionSchedule(kind, beta, alpha_bar, dict(params))


class InpaintMask:
    """Fixed (timestep, channel) positions overwritten after every step."""

    def __init__(self, horizon, channels):
        self.where = np.zeros((horizon, channels), dtype=bool)
        self.values = np.zeros((horizon, channels), dtype=np.float32)

    @staticmethod
    def empty(horizon, channels):
        return InpaintMask(horizon, channels)

    def fix_row(self, t, values):
        values = np.asarray(values, dtype=np.float32)
        if not 0 <= t < self.where.shape[0]:
            raise IndexError(f"row {t} outside trajectory of length {self.where.shape[0]}")
        if values.shape != (self.where.shape[1],):
            raise ValueError("row values must cover every channel")
        if not np.all(np.isfinite(values)):
            raise ValueError("inpainting values must be finite")
        self.where[t] = True
        self.values[t] = values
        return self

    def fix_entry(self, t, c, value):
        if not (0 <= t < self.where.shape[0] and 0 <= c < self.where.shape[1]):
            raise IndexError(f"position ({t}, {c}) outside the trajectory")
        self.where[t, c] = True
        self.values[t, c] = value
        return self

    def apply(self, x):
        x[self.where] = self.values[self.where]
        return x


def forward_diffuse(x0, k, schedule, noise):
    """Closed-form noising: sqrt(abar_k) x0 + sqrt(1 - abar_k) noise."""
    if not 1 <= k <= schedule.K:
        raise ScheduleError(f"step {k} outside 1..{schedule.K}")
    x0 = np.asarray(x0, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    ab = schedule.abar(k)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise).astype(np.float32)


def ddpm_step(x0_hat, x_k, k, schedule, noise=None):
    """One reverse step: posterior mean of q(x^{k-1} | x^k, x0_hat) plus the
    scheduled posterior noise; at k = 1 the variance vanishes and the output
    equals x0_hat exactly."""
    x0_hat = np.asarray(x0_hat, dtype=np.float32)
    x_k = np.asarray(x_k, dtype=np.float32)
    if x0_hat.shape != x_k.shape:
        raise ValueError(f"x0_hat shape {x0_hat.shape} != x_k shape {x_k.shape}")
    c0, c1, var = schedule.posterior_coeffs(k)
    mean = c0 * x0_hat + c1 * x_k
    if k > 1 and noise is not None and var > 0.0:
        mean = mean + np.sqrt(var) * np.asarray(noise, dtype=np.float32)
    return mean.astype(np.float32)


def cfg_combine(pred_cond, pred_uncond, w):
    """Classifier-free guidance: uncond + w * (cond - uncond)."""
    pred_cond = np.asarray(pred_cond, dtype=np.float32)
    pred_uncond = np.asarray(pred_uncond, dtype=np.float32)
    return pred_uncond + np.float32(w) * (pred_cond - pred_uncond)


def sample_with_inpainting(denoiser, context, mask, schedule, horizon, channels,
                           rng):
    """Full reverse chain from x^K ~ N(0, I); after every step the masked
    positions are overwritten with their fixed values, so the returned
    trajectory carries them bit-exactly."""
    if mask is None:
        mask = InpaintMask.empty(horizon, channels)
    x = rng.standard_normal((horizon, channels), dtype=np.float32)
    mask.apply(x)
    for k in range(schedule.K, 0, -1):
        x0_hat = denoiser(x, k, context)
        x0_hat = np.asarray(x0_hat, dtype=np.float32)
        if not np.all(np.isfinite(x0_hat)):
            raise FloatingPointError(f"denoiser produced non-finite values at step {k}")
        noise = rng.standard_normal((horizon, channels), dtype=np.float32) if k > 1 else None
        x = ddpm_step(x0_hat, x, k, schedule, noise)
        mask.apply(x)
    return x
