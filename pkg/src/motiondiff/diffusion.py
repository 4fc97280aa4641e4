"""Diffusion mathematics: schedule, forward noising, reverse sampling.

The model predicts the clean signal x0 rather than the noise. One reverse
step therefore predicts x0_hat from x_t, then renoises it back to x_{t-1}
through the DDPM posterior

    mu_t = (sqrt(abar_{t-1}) * beta_t / (1 - abar_t)) * x0_hat
         + (sqrt(alpha_t) * (1 - abar_{t-1}) / (1 - abar_t)) * x_t

with fixed variance beta_t * (1 - abar_{t-1}) / (1 - abar_t) and no noise at
t = 1. Classifier-free guidance blends the conditional and unconditional
predictions; inpainting-style editing overwrites the observed entries of
x0_hat in normalized feature space at every step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import SamplingError, ShapeError, ValidationError
from .motion_data import (
    DatasetStats,
    MotionSequence,
    NullCondition,
    denormalize,
    normalize,
)

DEFAULT_GUIDANCE_SCALE = 2.5


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step alpha_t for t = 1..T plus quantities derived from it.

    Arrays are indexed by t - 1; the *_at accessors take t in [1, T] and do
    the shift, with alpha_bar_prev_at(1) = 1 by convention.
    """

    alpha: np.ndarray
    beta: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    posterior_variance: np.ndarray = field(init=False)

    def __post_init__(self):
        alpha = np.ascontiguousarray(np.asarray(self.alpha, dtype=np.float64))
        if alpha.ndim != 1 or alpha.shape[0] < 2:
            raise ValidationError("schedule needs at least 2 steps of alpha values")
        if not np.all((alpha > 0.0) & (alpha < 1.0)):
            raise ValidationError("every alpha_t must lie strictly in (0, 1)")
        beta = 1.0 - alpha
        alpha_bar = np.cumprod(alpha)
        if not np.all(np.diff(alpha_bar) < 0.0):
            raise ValidationError("alpha_bar must be strictly decreasing")
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        post_var = beta * (1.0 - prev) / (1.0 - alpha_bar)
        for arr in (alpha, beta, alpha_bar, post_var):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        object.__setattr__(self, "posterior_variance", post_var)

    @property
    def num_steps(self) -> int:
        return self.alpha.shape[0]

    def _check_t(self, t: int):
        if not (1 <= t <= self.num_steps):
            raise ValidationError(f"timestep {t} outside [1, {self.num_steps}]")

    def alpha_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def beta_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.beta[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bar[t - 1])

    def alpha_bar_prev_at(self, t: int) -> float:
        self._check_t(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def posterior_variance_at(self, t: int) -> float:
        self._check_t(t)
        return float(self.posterior_variance[t - 1])


def make_cosine_schedule(num_steps: int, offset: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: abar(t) = f(t)/f(0), f(t) = cos^2(((t/T + o)/(1 + o)) * pi/2).

    Per-step betas are clipped at 0.999 and alpha_bar is recomputed as the
    cumulative product afterwards, so the stored arrays stay self-consistent.
    """
    if num_steps < 2:
        raise ValidationError("a schedule needs at least 2 steps")
    steps = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos(((steps / num_steps + offset) / (1.0 + offset)) * math.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    betas = np.minimum(betas, 0.999)
    return NoiseSchedule(alpha=1.0 - betas)


# ---------------------------------------------------------------------------
# Forward and reverse kernels
# ---------------------------------------------------------------------------

def _sqrt(value):
    if isinstance(value, torch.Tensor):
        return torch.sqrt(value)
    return math.sqrt(value)


def _alpha_bar_term(schedule: NoiseSchedule, t, like):
    """alpha_bar at t as a scalar, or broadcastable tensor for vector t."""
    if isinstance(t, (int, np.integer)):
        return schedule.alpha_bar_at(int(t))
    if not isinstance(like, torch.Tensor):
        raise ValidationError("per-sample timestep vectors require torch tensors")
    t = torch.as_tensor(t, dtype=torch.long, device=like.device)
    if t.ndim != 1 or t.shape[0] != like.shape[0]:
        raise ShapeError("batched t must be a 1-D vector matching the leading axis")
    if torch.any(t < 1) or torch.any(t > schedule.num_steps):
        raise ValidationError(f"timesteps outside [1, {schedule.num_steps}]")
    ab = torch.tensor(schedule.alpha_bar, dtype=like.dtype, device=like.device)[t - 1]
    return ab.reshape((t.shape[0],) + (1,) * (like.ndim - 1))


def q_sample(x0, t, noise, schedule: NoiseSchedule):
    """Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    Works elementwise on numpy arrays or torch tensors; t may be an int or,
    for training batches, a per-sample index vector along the leading axis.
    """
    if np.shape(x0) != np.shape(noise):
        raise ShapeError(
            f"x0 shape {np.shape(x0)} does not match noise shape {np.shape(noise)}"
        )
    ab = _alpha_bar_term(schedule, t, x0)
    return _sqrt(ab) * x0 + _sqrt(1.0 - ab) * noise


def posterior_step(x_t, x0_hat, t: int, schedule: NoiseSchedule, noise=None):
    """One reverse step x_t -> x_{t-1} given the predicted clean signal.

    Noise feeds the fixed-variance term and is ignored (may be None) at t = 1,
    where the step returns the posterior mean exactly.
    """
    if np.shape(x_t) != np.shape(x0_hat):
        raise ShapeError(
            f"x_t shape {np.shape(x_t)} does not match x0_hat shape {np.shape(x0_hat)}"
        )
    t = int(t)
    alpha = schedule.alpha_at(t)
    beta = schedule.beta_at(t)
    ab = schedule.alpha_bar_at(t)
    ab_prev = schedule.alpha_bar_prev_at(t)
    coef_x0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    coef_xt = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    if t == 1:
        return mean
    if noise is None:
        raise ValidationError("posterior_step needs noise for t > 1")
    if np.shape(noise) != np.shape(x_t):
        raise ShapeError("noise shape does not match x_t")
    return mean + math.sqrt(schedule.posterior_variance_at(t)) * noise


def guided_prediction(pred_cond, pred_uncond, guidance_scale: float):
    """Classifier-free blend: uncond + s * (cond - uncond), elementwise."""
    if np.shape(pred_cond) != np.shape(pred_uncond):
        raise ShapeError("conditional/unconditional predictions differ in shape")
    return pred_uncond + guidance_scale * (pred_cond - pred_uncond)


# ---------------------------------------------------------------------------
# Full sampling loop
# ---------------------------------------------------------------------------

def _check_finite(x: torch.Tensor, what: str, t: int):
    if not torch.isfinite(x).all():
        raise SamplingError(f"{what} became non-finite at step t={t}")


def _predict_guided(denoiser, x, t, conditions, guidance_scale, frame_mask=None):
    pred_cond = denoiser.predict_x0(x, t, conditions, frame_mask=frame_mask)
    if all(isinstance(c, NullCondition) for c in conditions):
        return pred_cond  # both passes would coincide; the blend is the identity
    null = [NullCondition()] * len(conditions)
    pred_uncond = denoiser.predict_x0(x, t, null, frame_mask=frame_mask)
    return guided_prediction(pred_cond, pred_uncond, guidance_scale)


def sample(
    denoiser,
    condition,
    num_frames: int,
    schedule: NoiseSchedule,
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE,
    rng: torch.Generator = None,
    edit_spec=None,
) -> MotionSequence:
    """Generate one motion by iterating the reverse process from t = T to 1.

    The denoiser carries its dataset stats, skeleton name, fps and frame
    budget; the returned motion is denormalized. With an edit_spec, observed
    mask entries of x0_hat are overwritten with the normalized reference at
    every step, which pins them exactly (the t = 1 step returns x0_hat).
    """
    stats: DatasetStats = denoiser.stats
    feature_dim = denoiser.feature_dim
    if num_frames < 2:
        raise ValidationError("cannot sample fewer than 2 frames")
    if num_frames > denoiser.max_frames:
        raise ValidationError(
            f"requested {num_frames} frames, model supports {denoiser.max_frames}"
        )
    ref_values = mask = None
    if edit_spec is not None:
        if edit_spec.reference.num_frames != num_frames:
            raise ShapeError(
                f"edit reference has {edit_spec.reference.num_frames} frames, "
                f"sampling {num_frames}"
            )
        ref_norm = normalize(edit_spec.reference, stats)
        ref_values = torch.from_numpy(ref_norm.features.copy())[None]
        mask = torch.from_numpy(edit_spec.mask.observed.copy())[None].bool()

    x = torch.randn((1, num_frames, feature_dim), generator=rng)
    with torch.no_grad():
        for t in range(schedule.num_steps, 0, -1):
            x0_hat = _predict_guided(denoiser, x, t, [condition], guidance_scale)
            _check_finite(x0_hat, "predicted x0", t)
            if mask is not None:
                x0_hat = torch.where(mask, ref_values, x0_hat)
            noise = (
                torch.randn(x.shape, generator=rng) if t > 1 else None
            )
            x = posterior_step(x, x0_hat, t, schedule, noise)
            _check_finite(x, "trajectory", t)
    out = MotionSequence(
        features=x[0].numpy(),
        skeleton_ref=denoiser.skeleton_name,
        fps=denoiser.fps,
    )
    return denormalize(out, stats)


def sample_batch(
    denoiser,
    conditions,
    lengths,
    schedule: NoiseSchedule,
    guidance_scale: float = DEFAULT_GUIDANCE_SCALE,
    rng: torch.Generator = None,
):
    """Generate many motions at once, padded to the longest request.

    Padding frames are masked out of the denoiser's attention and sliced away
    at the end, so each output only depends on its own requested length.
    """
    if len(conditions) != len(lengths):
        raise ShapeError("conditions and lengths must pair up one-to-one")
    if not conditions:
        return []
    stats: DatasetStats = denoiser.stats
    lengths = [int(n) for n in lengths]
    for n in lengths:
        if n < 2:
            raise ValidationError("cannot sample fewer than 2 frames")
        if n > denoiser.max_frames:
            raise ValidationError(
                f"requested {n} frames, model supports {denoiser.max_frames}"
            )
    batch = len(conditions)
    n_max = max(lengths)
    frame_mask = torch.zeros((batch, n_max), dtype=torch.bool)
    for i, n in enumerate(lengths):
        frame_mask[i, :n] = True

    x = torch.randn((batch, n_max, denoiser.feature_dim), generator=rng)
    with torch.no_grad():
        for t in range(schedule.num_steps, 0, -1):
            x0_hat = _predict_guided(
                denoiser, x, t, conditions, guidance_scale, frame_mask=frame_mask
            )
            _check_finite(x0_hat, "predicted x0", t)
            noise = torch.randn(x.shape, generator=rng) if t > 1 else None
            x = posterior_step(x, x0_hat, t, schedule, noise)
            _check_finite(x, "trajectory", t)
    out = []
    for i, n in enumerate(lengths):
        motion = MotionSequence(
            features=x[i, :n].numpy(),
            skeleton_ref=denoiser.skeleton_name,
            fps=denoiser.fps,
        )
        out.append(denormalize(motion, stats))
    return out
