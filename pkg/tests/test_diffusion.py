"""Schedule, forward/reverse kernels, guidance, and sampling-loop tests."""
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motiondiff.diffusion import (
    NoiseSchedule,
    guided_prediction,
    make_cosine_schedule,
    posterior_step,
    q_sample,
    sample,
    sample_batch,
)
from motiondiff.errors import SamplingError, ShapeError, ValidationError
from motiondiff.motion_data import (
    DatasetStats,
    MotionSequence,
    NullCondition,
    TextCondition,
)

FEATURE_DIM = 6


def identity_stats(dim=FEATURE_DIM):
    return DatasetStats(mean=np.zeros(dim), std=np.ones(dim))


class StubDenoiser:
    """Duck-typed denoiser for closed-loop sampler tests."""

    def __init__(self, fn, feature_dim=FEATURE_DIM, max_frames=64, stats=None):
        self.fn = fn
        self.feature_dim = feature_dim
        self.max_frames = max_frames
        self.stats = stats or identity_stats(feature_dim)
        self.skeleton_name = "stub"
        self.fps = 20.0

    def predict_x0(self, x, t, conditions, frame_mask=None):
        return self.fn(x, t, conditions)


def constant_denoiser(value):
    target = torch.as_tensor(value, dtype=torch.float32)
    return StubDenoiser(lambda x, t, c: target.expand_as(x).clone())


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def test_cosine_schedule_length_and_monotonicity():
    for steps in (2, 10, 100, 1000):
        sched = make_cosine_schedule(steps)
        assert sched.num_steps == steps
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert np.all((sched.alpha > 0) & (sched.alpha < 1))


def test_cosine_schedule_closed_form_midpoint():
    # direct evaluation of abar(t) = f(t)/f(0) at t = 500 for T = 1000
    sched = make_cosine_schedule(1000)
    f = lambda u: math.cos(((u / 1000 + 0.008) / 1.008) * math.pi / 2) ** 2
    assert abs(sched.alpha_bar_at(500) - f(500) / f(0)) < 1e-6
    assert abs(sched.alpha_bar_at(500) - 0.494) < 0.005


def test_cosine_schedule_endpoints():
    sched = make_cosine_schedule(1000)
    assert sched.alpha_bar_at(1) > 0.999
    assert sched.alpha_bar_at(1000) < 1e-3


def test_cosine_schedule_beta_clip():
    sched = make_cosine_schedule(1000)
    assert sched.beta.max() <= 0.999 + 1e-12


def test_posterior_variance_bounds():
    sched = make_cosine_schedule(200)
    assert sched.posterior_variance_at(1) == 0.0
    for t in range(1, 201):
        assert 0.0 <= sched.posterior_variance_at(t) <= sched.beta_at(t) + 1e-15


def test_schedule_rejects_tiny_and_bad_alpha():
    with pytest.raises(ValidationError):
        make_cosine_schedule(1)
    with pytest.raises(ValidationError):
        NoiseSchedule(alpha=np.array([0.5, 1.0]))
    with pytest.raises(ValidationError):
        NoiseSchedule(alpha=np.array([0.5, -0.1]))


def test_alpha_bar_prev_convention():
    sched = make_cosine_schedule(10)
    assert sched.alpha_bar_prev_at(1) == 1.0
    assert sched.alpha_bar_prev_at(5) == sched.alpha_bar_at(4)


# ---------------------------------------------------------------------------
# q_sample
# ---------------------------------------------------------------------------

def test_q_sample_zero_noise():
    sched = make_cosine_schedule(100)
    x0 = np.array([1.0, -2.0, 3.0])
    out = q_sample(x0, 40, np.zeros(3), sched)
    np.testing.assert_allclose(out, math.sqrt(sched.alpha_bar_at(40)) * x0, atol=1e-12)


def test_q_sample_scalar_fixture():
    # alpha = (0.5, 0.5) gives abar_2 = 0.25: 0.5*2 + sqrt(0.75)*1 = 1.8660254
    sched = NoiseSchedule(alpha=np.array([0.5, 0.5]))
    out = q_sample(np.array([2.0]), 2, np.array([1.0]), sched)
    np.testing.assert_allclose(out, [0.5 * 2 + math.sqrt(0.75)], atol=1e-12)


def test_q_sample_terminal_marginal_is_standard_normal():
    # Monte-Carlo check that x_T is close to N(0, 1)
    sched = make_cosine_schedule(1000)
    rng = np.random.default_rng(0)
    x0 = np.full(10_000, 2.0)
    xt = q_sample(x0, 1000, rng.standard_normal(10_000), sched)
    assert abs(xt.mean()) < 0.05
    assert abs(xt.std() - 1.0) < 0.05


def test_q_sample_batched_timesteps_match_scalar_calls():
    sched = make_cosine_schedule(50)
    gen = torch.Generator().manual_seed(1)
    x0 = torch.randn((4, 5, 3), generator=gen)
    noise = torch.randn((4, 5, 3), generator=gen)
    t = torch.tensor([1, 17, 33, 50])
    batched = q_sample(x0, t, noise, sched)
    for i in range(4):
        single = q_sample(x0[i].numpy(), int(t[i]), noise[i].numpy(), sched)
        np.testing.assert_allclose(batched[i].numpy(), single, atol=1e-6)


def test_q_sample_shape_mismatch():
    sched = make_cosine_schedule(10)
    with pytest.raises(ShapeError):
        q_sample(np.zeros(3), 5, np.zeros(4), sched)


# ---------------------------------------------------------------------------
# posterior_step
# ---------------------------------------------------------------------------

def fixture_schedule():
    # alpha = (5/9, 0.9): abar_1 = 5/9, abar_2 = 0.5
    return NoiseSchedule(alpha=np.array([5.0 / 9.0, 0.9]))


def test_posterior_mean_hand_fixture():
    sched = fixture_schedule()
    coef_x0 = math.sqrt(5.0 / 9.0) * 0.1 / 0.5
    coef_xt = math.sqrt(0.9) * (1.0 - 5.0 / 9.0) / 0.5
    expected = coef_x0 * 2.0 + coef_xt * 1.0
    out = posterior_step(np.array([1.0]), np.array([2.0]), 2, sched, np.array([0.0]))
    np.testing.assert_allclose(out, [expected], atol=1e-12)
    assert abs(expected - 1.1414166) < 1e-6


def test_posterior_noise_scale_matches_fixed_variance():
    sched = fixture_schedule()
    var = 0.1 * (1.0 - 5.0 / 9.0) / 0.5
    base = posterior_step(np.array([1.0]), np.array([2.0]), 2, sched, np.array([0.0]))
    out = posterior_step(np.array([1.0]), np.array([2.0]), 2, sched, np.array([1.0]))
    np.testing.assert_allclose(out - base, [math.sqrt(var)], atol=1e-12)


def test_posterior_zero_inputs_yield_pure_noise_term():
    sched = fixture_schedule()
    eps = np.array([0.3, -0.7])
    out = posterior_step(np.zeros(2), np.zeros(2), 2, sched, eps)
    np.testing.assert_allclose(
        out, math.sqrt(sched.posterior_variance_at(2)) * eps, atol=1e-12
    )


def test_posterior_final_step_is_exact_and_noiseless():
    sched = fixture_schedule()
    x0_hat = np.array([3.25, -1.5])
    # at t=1: coef_x0 = 1*beta_1/(1-abar_1) = 1, coef_xt = 0
    out = posterior_step(np.array([9.0, 9.0]), x0_hat, 1, sched, noise=None)
    np.testing.assert_allclose(out, x0_hat, atol=1e-12)


def test_posterior_validation():
    sched = fixture_schedule()
    with pytest.raises(ValidationError):
        posterior_step(np.zeros(2), np.zeros(2), 3, sched, np.zeros(2))
    with pytest.raises(ValidationError):
        posterior_step(np.zeros(2), np.zeros(2), 2, sched, None)
    with pytest.raises(ShapeError):
        posterior_step(np.zeros(2), np.zeros(3), 2, sched, np.zeros(2))


# ---------------------------------------------------------------------------
# Guidance
# ---------------------------------------------------------------------------

def test_guidance_endpoints_and_fixture():
    cond, uncond = np.array([2.0]), np.array([1.0])
    np.testing.assert_array_equal(guided_prediction(cond, uncond, 1.0), cond)
    np.testing.assert_array_equal(guided_prediction(cond, uncond, 0.0), uncond)
    np.testing.assert_allclose(guided_prediction(cond, uncond, 2.5), [3.5], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-10, 10, allow_nan=False),
    st.integers(0, 2**32 - 1),
)
def test_guidance_is_exact_interpolation(scale, seed):
    rng = np.random.default_rng(seed)
    uncond = rng.standard_normal(8)
    cond = rng.standard_normal(8)
    out = guided_prediction(cond, uncond, scale)
    np.testing.assert_allclose(
        out - uncond, scale * (cond - uncond), rtol=1e-12, atol=1e-12
    )


def test_guidance_shape_mismatch():
    with pytest.raises(ShapeError):
        guided_prediction(np.zeros(2), np.zeros(3), 1.0)


# ---------------------------------------------------------------------------
# Sampling loop with stub denoisers
# ---------------------------------------------------------------------------

def test_sampler_converges_to_constant_stub_target():
    target = torch.linspace(-1.0, 1.0, FEATURE_DIM)
    den = constant_denoiser(target)
    sched = make_cosine_schedule(50)
    gen = torch.Generator().manual_seed(0)
    out = sample(den, NullCondition(), 16, sched, rng=gen)
    np.testing.assert_allclose(
        out.features, np.tile(target.numpy(), (16, 1)), atol=1e-5
    )


def test_sampler_unit_scale_equals_unguided_trajectory():
    # when cond and uncond predictions coincide, s=1 changes nothing
    den = StubDenoiser(lambda x, t, c: 0.5 * x)
    sched = make_cosine_schedule(20)
    a = sample(den, TextCondition("anything"), 12, sched, guidance_scale=1.0,
               rng=torch.Generator().manual_seed(3))
    b = sample(den, NullCondition(), 12, sched,
               rng=torch.Generator().manual_seed(3))
    np.testing.assert_array_equal(a.features, b.features)


def test_sampler_is_seed_deterministic():
    den = StubDenoiser(lambda x, t, c: 0.9 * x)
    sched = make_cosine_schedule(30)
    a = sample(den, NullCondition(), 10, sched, rng=torch.Generator().manual_seed(7))
    b = sample(den, NullCondition(), 10, sched, rng=torch.Generator().manual_seed(7))
    c = sample(den, NullCondition(), 10, sched, rng=torch.Generator().manual_seed(8))
    np.testing.assert_array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)


def test_sampler_all_observed_edit_returns_reference():
    den = StubDenoiser(lambda x, t, c: torch.zeros_like(x))
    sched = make_cosine_schedule(25)
    rng = np.random.default_rng(5)
    ref = MotionSequence(
        rng.standard_normal((14, FEATURE_DIM)).astype(np.float32), "stub", 20.0
    )
    spec = SimpleNamespace(
        reference=ref,
        mask=SimpleNamespace(observed=np.ones((14, FEATURE_DIM), dtype=np.float32)),
    )
    out = sample(den, NullCondition(), 14, sched,
                 rng=torch.Generator().manual_seed(1), edit_spec=spec)
    np.testing.assert_allclose(out.features, ref.features, atol=1e-5)


def test_sampler_partial_edit_pins_only_observed_entries():
    den = constant_denoiser(torch.full((FEATURE_DIM,), 5.0))
    sched = make_cosine_schedule(25)
    ref = MotionSequence(np.zeros((10, FEATURE_DIM), dtype=np.float32), "stub", 20.0)
    mask = np.zeros((10, FEATURE_DIM), dtype=np.float32)
    mask[:4] = 1.0
    spec = SimpleNamespace(reference=ref, mask=SimpleNamespace(observed=mask))
    out = sample(den, NullCondition(), 10, sched,
                 rng=torch.Generator().manual_seed(2), edit_spec=spec)
    np.testing.assert_allclose(out.features[:4], 0.0, atol=1e-5)
    np.testing.assert_allclose(out.features[4:], 5.0, atol=1e-5)


def test_sampler_rejects_overlong_request():
    den = constant_denoiser(torch.zeros(FEATURE_DIM))
    sched = make_cosine_schedule(10)
    with pytest.raises(ValidationError):
        sample(den, NullCondition(), den.max_frames + 1, sched)


def test_sampler_reports_nonfinite_step():
    def explode(x, t, c):
        return torch.full_like(x, math.nan) if t <= 5 else 0.5 * x

    den = StubDenoiser(explode)
    sched = make_cosine_schedule(10)
    with pytest.raises(SamplingError, match="t=5"):
        sample(den, NullCondition(), 8, sched, rng=torch.Generator().manual_seed(0))


def test_sampler_applies_denormalization():
    stats = DatasetStats(
        mean=np.full(FEATURE_DIM, 10.0), std=np.full(FEATURE_DIM, 2.0)
    )
    den = constant_denoiser(torch.zeros(FEATURE_DIM))
    den.stats = stats
    sched = make_cosine_schedule(20)
    out = sample(den, NullCondition(), 8, sched, rng=torch.Generator().manual_seed(0))
    # normalized output is 0 everywhere, so raw output is the channel mean
    np.testing.assert_allclose(out.features, 10.0, atol=1e-4)


def test_sample_batch_shapes_and_determinism():
    den = StubDenoiser(lambda x, t, c: 0.8 * x)
    sched = make_cosine_schedule(15)
    conds = [NullCondition(), NullCondition(), NullCondition()]
    lengths = [6, 11, 9]
    a = sample_batch(den, conds, lengths, sched, rng=torch.Generator().manual_seed(4))
    b = sample_batch(den, conds, lengths, sched, rng=torch.Generator().manual_seed(4))
    assert [m.num_frames for m in a] == lengths
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.features, y.features)


def test_sample_batch_validates_pairing():
    den = constant_denoiser(torch.zeros(FEATURE_DIM))
    sched = make_cosine_schedule(10)
    with pytest.raises(ShapeError):
        sample_batch(den, [NullCondition()], [8, 9], sched)
