import numpy as np
import pytest

from kinediff.diffusion import (
    InpaintMask,
    ScheduleError,
    cfg_combine,
    ddpm_step,
    forward_diffuse,
    make_schedule,
    sample_with_inpainting,
)


def test_single_step_explicit_schedule():
    sched = make_schedule(1, "explicit", beta=[0.9999])
    assert sched.K == 1
    assert np.allclose(sched.alpha_bar, [1e-4])


def test_default_cosine_schedule_terminates_near_zero():
    sched = make_schedule(100, "cosine")
    assert sched.alpha_bar[-1] < 1e-3
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.beta > 0) & (sched.beta < 1))


def test_standard_linear_schedule_rejected_at_k100():
    # cumulative product only reaches ~0.36, far from the required 1e-3
    with pytest.raises(ScheduleError):
        make_schedule(100, "linear", beta_start=1e-4, beta_end=0.02)


def test_linear_schedule_accepted_at_k1000():
    sched = make_schedule(1000, "linear", beta_start=1e-4, beta_end=0.02)
    assert sched.alpha_bar[-1] < 1e-3


def test_forward_diffuse_zero_noise_scales_input():
    sched = make_schedule(100, "cosine")
    x0 = np.full((4, 3), 2.0, np.float32)
    for k in (1, 17, 100):
        out = forward_diffuse(x0, k, sched, np.zeros_like(x0))
        assert np.allclose(out, np.sqrt(sched.abar(k)) * x0, rtol=1e-6)


def test_forward_diffuse_terminal_moments():
    sched = make_schedule(100, "cosine")
    rng = np.random.default_rng(0)
    x0 = np.ones((10_000, 1), np.float32)
    samples = forward_diffuse(
        x0, 100, sched, rng.standard_normal((10_000, 1), dtype=np.float32)
    )
    assert abs(samples.mean()) < 0.05
    assert 0.9 < samples.var() < 1.1


def test_forward_diffuse_rejects_bad_step():
    sched = make_schedule(10, "cosine")
    x0 = np.zeros((2, 2), np.float32)
    for k in (0, 11):
        with pytest.raises(ScheduleError):
            forward_diffuse(x0, k, sched, x0)


def test_ddpm_step_k1_returns_prediction_exactly():
    sched = make_schedule(100, "cosine")
    rng = np.random.default_rng(1)
    x0_hat = rng.standard_normal((8, 4)).astype(np.float32)
    x1 = rng.standard_normal((8, 4)).astype(np.float32)
    out = ddpm_step(x0_hat, x1, 1, sched, noise=rng.standard_normal((8, 4)).astype(np.float32))
    assert np.array_equal(out, x0_hat)


def test_ddpm_step_reconstructs_x0_with_perfect_prediction():
    sched = make_schedule(100, "cosine")
    rng = np.random.default_rng(2)
    x0 = rng.uniform(-1, 1, (6, 5)).astype(np.float32)
    for k_start in (100, 40, 7):
        x = forward_diffuse(x0, k_start, sched, np.zeros_like(x0))
        for k in range(k_start, 0, -1):
            x = ddpm_step(x0, x, k, sched, noise=None)
        assert np.abs(x - x0).max() < 1e-4


def test_ddpm_step_shape_mismatch():
    sched = make_schedule(10, "cosine")
    with pytest.raises(ValueError):
        ddpm_step(np.zeros((2, 2), np.float32), np.zeros((3, 2), np.float32), 5, sched)


def test_cfg_combine():
    c = np.full((2, 2), 1.0, np.float32)
    u = np.zeros((2, 2), np.float32)
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    assert np.allclose(cfg_combine(c, u, 2.0), 2.0)


def test_inpainting_overwrites_after_every_step():
    sched = make_schedule(100, "cosine")
    mask = InpaintMask(16, 3).fix_row(0, np.ones(3))
    rng = np.random.default_rng(3)
    out = sample_with_inpainting(
        lambda x, k, ctx: np.zeros_like(x), None, mask, sched, 16, 3, rng
    )
    assert np.array_equal(out[0], np.ones(3, np.float32))


def test_inpainting_exact_for_any_denoiser_and_rng():
    sched = make_schedule(100, "cosine")
    rng_model = np.random.default_rng(11)

    def noisy_denoiser(x, k, ctx):
        return 0.3 * x + rng_model.standard_normal(x.shape).astype(np.float32)

    values = np.array([0.25, -1.5, 3.0, 0.0], np.float32)
    for seed in range(5):
        mask = InpaintMask(12, 4)
        mask.fix_row(0, values)
        mask.fix_entry(7, 2, 9.0)
        out = sample_with_inpainting(
            noisy_denoiser, None, mask, sched, 12, 4, np.random.default_rng(seed)
        )
        assert np.array_equal(out[0], values)
        assert out[7, 2] == np.float32(9.0)


def test_constant_denoiser_converges_to_constant():
    sched = make_schedule(100, "cosine")
    c = 0.7
    out = sample_with_inpainting(
        lambda x, k, ctx: np.full_like(x, c),
        None,
        InpaintMask.empty(8, 2),
        sched,
        8,
        2,
        np.random.default_rng(4),
    )
    assert np.abs(out - c).max() < 1e-3


def test_sampling_reproducible_for_seed():
    sched = make_schedule(100, "cosine")

    def denoiser(x, k, ctx):
        return np.tanh(x) * 0.5

    a = sample_with_inpainting(denoiser, None, None, sched, 8, 2, np.random.default_rng(9))
    b = sample_with_inpainting(denoiser, None, None, sched, 8, 2, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_denoiser_nan_rejected():
    sched = make_schedule(10, "cosine")
    with pytest.raises(FloatingPointError):
        sample_with_inpainting(
            lambda x, k, ctx: np.full_like(x, np.nan), None, None, sched, 4, 2,
            np.random.default_rng(0),
        )


def test_mask_validation():
    mask = InpaintMask(8, 3)
    with pytest.raises(IndexError):
        mask.fix_row(8, np.zeros(3))
    with pytest.raises(ValueError):
        mask.fix_row(0, np.zeros(2))
    with pytest.raises(ValueError):
        mask.fix_row(0, np.array([np.inf, 0, 0]))
    with pytest.raises(IndexError):
        mask.fix_entry(0, 3, 1.0)
