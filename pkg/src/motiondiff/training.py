"""Geometric training losses and the optimization loop.

Losses compare the predicted clean signal x0_hat against the true x0:

    simple    mean squared error over feature entries
    positions mean over frames of squared joint-position error, positions
              obtained by forward kinematics of each side's rotation channels
              (identity FK in positions-only mode)
    foot      squared foot velocities on frames labeled as ground contact
    velocity  squared difference of frame-to-frame feature differences

The training loop samples t uniformly in [1, T] per element, noises clips
with the closed-form forward marginal, masks conditions for classifier-free
guidance, and takes clipped adaptive-moment steps. The simple and velocity
terms act on the normalized features the model sees; the position and foot
terms act after differentiable denormalization, so they measure meters.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .denoiser import MotionDenoiser, save_checkpoint
from .diffusion import NoiseSchedule, q_sample
from .errors import ShapeError, TrainingDivergenceError, ValidationError
from .motion_data import (
    ActionCondition,
    FeatureLayout,
    LabeledDataset,
    NullCondition,
    TextCondition,
    normalize,
)
from .skeleton import ContactMask, Skeleton, fk_positions


@dataclass(frozen=True)
class LossWeights:
    lambda_pos: float = 0.0
    lambda_vel: float = 0.0
    lambda_foot: float = 0.0

    def __post_init__(self):
        for name in ("lambda_pos", "lambda_vel", "lambda_foot"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    def to_json(self) -> dict:
        return {
            "lambda_pos": self.lambda_pos,
            "lambda_vel": self.lambda_vel,
            "lambda_foot": self.lambda_foot,
        }

    @classmethod
    def from_json(cls, data: dict) -> "LossWeights":
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    batch_size: int = 32
    learning_rate: float = 1e-4
    grad_clip: float = 1.0
    cfg_mask_prob: float = 0.1
    seed: int = 0
    eval_interval: int = 0  # 0 disables in-training evaluation
    checkpoint_interval: int = 0  # 0 keeps only the final checkpoint
    log_interval: int = 50
    loss_weights: LossWeights = field(default_factory=LossWeights)
    use_geometric_losses_on_positions: bool = False

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValidationError("total_steps and batch_size must be positive")
        if self.learning_rate < 0 or self.grad_clip <= 0:
            raise ValidationError("learning_rate must be >= 0 and grad_clip > 0")
        if not (0.0 <= self.cfg_mask_prob <= 1.0):
            raise ValidationError("cfg_mask_prob must lie in [0, 1]")
        if min(self.eval_interval, self.checkpoint_interval) < 0 or self.log_interval < 1:
            raise ValidationError("intervals must be non-negative (log_interval >= 1)")

    def to_json(self) -> dict:
        out = {
            "total_steps": self.total_steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "grad_clip": self.grad_clip,
            "cfg_mask_prob": self.cfg_mask_prob,
            "seed": self.seed,
            "eval_interval": self.eval_interval,
            "checkpoint_interval": self.checkpoint_interval,
            "log_interval": self.log_interval,
            "loss_weights": self.loss_weights.to_json(),
            "use_geometric_losses_on_positions": self.use_geometric_losses_on_positions,
        }
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        kwargs = dict(data)
        if "loss_weights" in kwargs:
            kwargs["loss_weights"] = LossWeights.from_json(kwargs["loss_weights"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _as_batched(x) -> torch.Tensor:
    t = torch.as_tensor(x)
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise ShapeError(f"expected (N, F) or (B, N, F) features, got {tuple(t.shape)}")
    return t.to(torch.float64) if not t.dtype.is_floating_point else t


def _pair_shapes(x0, x0_hat):
    a, b = _as_batched(x0), _as_batched(x0_hat)
    if a.shape != b.shape:
        raise ShapeError(f"x0 shape {tuple(a.shape)} != x0_hat shape {tuple(b.shape)}")
    return a, b.to(a.dtype)


def _frame_weights(mask, like: torch.Tensor) -> torch.Tensor:
    """(B, N) validity weights in the tensor's dtype; all-ones when mask is None."""
    if mask is None:
        return torch.ones(like.shape[:2], dtype=like.dtype, device=like.device)
    m = torch.as_tensor(mask)
    if m.ndim == 1:
        m = m[None]
    if m.shape != like.shape[:2]:
        raise ShapeError("frame_mask must match the (B, N) layout of the features")
    return m.to(like.dtype)


def loss_simple(x0, x0_hat, frame_mask=None) -> torch.Tensor:
    """Mean squared error over all (valid) feature entries."""
    a, b = _pair_shapes(x0, x0_hat)
    w = _frame_weights(frame_mask, a)
    sq = ((a - b) ** 2).sum(dim=-1) * w
    return sq.sum() / (w.sum() * a.shape[-1])


def loss_velocity(x0, x0_hat, frame_mask=None) -> torch.Tensor:
    """Mean squared difference of forward differences over (valid) frame pairs."""
    a, b = _pair_shapes(x0, x0_hat)
    if a.shape[1] < 2:
        raise ValidationError("velocity loss needs at least 2 frames")
    w = _frame_weights(frame_mask, a)
    pair_w = w[:, 1:] * w[:, :-1]
    da = a[:, 1:] - a[:, :-1]
    db = b[:, 1:] - b[:, :-1]
    sq = ((da - db) ** 2).sum(dim=-1) * pair_w
    return sq.sum() / (pair_w.sum() * a.shape[-1])


def _fk_from_features(features: torch.Tensor, skeleton: Skeleton) -> torch.Tensor:
    """Differentiable FK of raw-space features: (B, N, F) -> (B, N, J, 3).

    Root translation comes from the root's position channels; rotation
    channels are renormalized with an identity fallback for zero rows.
    """
    layout = FeatureLayout.for_skeleton(skeleton)
    if features.shape[-1] != layout.feature_dim:
        raise ShapeError(
            f"features have {features.shape[-1]} channels, layout needs "
            f"{layout.feature_dim}"
        )
    b, n = features.shape[0], features.shape[1]
    j = skeleton.num_joints
    pos = features[..., layout.positions].reshape(b, n, j, 3)
    root = pos[..., 0, :]
    quats = features[..., layout.rotations].reshape(b, n, j, 4)
    norms = quats.norm(dim=-1, keepdim=True)
    identity = torch.zeros_like(quats)
    identity[..., 0] = 1.0
    quats = torch.where(norms > 1e-8, quats / norms.clamp_min(1e-8), identity)
    out = fk_positions(skeleton, root, quats)
    if not torch.isfinite(out).all():
        raise ValidationError("forward kinematics produced non-finite positions")
    return out


def loss_positions(
    x0, x0_hat, skeleton: Skeleton, positions_only: bool = False, frame_mask=None
) -> torch.Tensor:
    """Mean over frames of the squared joint-position error between the sides.

    In positions-only mode FK is the identity and this is plain MSE on the
    position channels.
    """
    a, b = _pair_shapes(x0, x0_hat)
    layout = FeatureLayout.for_skeleton(skeleton)
    w = _frame_weights(frame_mask, a)
    if positions_only:
        pa, pb = a[..., layout.positions], b[..., layout.positions]
        sq = ((pa - pb) ** 2).sum(dim=-1) * w
        return sq.sum() / (w.sum() * pa.shape[-1])
    fa = _fk_from_features(a, skeleton)
    fb = _fk_from_features(b, skeleton)
    per_frame = ((fa - fb) ** 2).sum(dim=(-1, -2))  # sum joints and coords
    return (per_frame * w).sum() / w.sum()


def loss_foot(x0_hat, contacts, skeleton: Skeleton, frame_mask=None) -> torch.Tensor:
    """Squared predicted foot velocity on ground-truth contact frames.

    contacts is (N, num_feet) or (B, N, num_feet) with frame i gating the
    velocity between frames i and i+1; the average runs over frame pairs.
    """
    b = _as_batched(x0_hat)
    if b.shape[1] < 2:
        raise ValidationError("foot loss needs at least 2 frames")
    if isinstance(contacts, ContactMask):
        c = torch.from_numpy(contacts.values.copy())
    elif isinstance(contacts, torch.Tensor):
        c = contacts
    else:
        c = torch.from_numpy(np.ascontiguousarray(contacts, dtype=np.float64))
    if c.ndim == 2:
        c = c[None]
    if c.shape[:2] != b.shape[:2] or c.shape[2] != len(skeleton.foot_joints):
        raise ShapeError(
            f"contacts shape {tuple(c.shape)} does not match motion "
            f"{tuple(b.shape[:2])} with {len(skeleton.foot_joints)} feet"
        )
    c = c.to(b.dtype)
    w = _frame_weights(frame_mask, b)
    pair_w = w[:, 1:] * w[:, :-1]
    feet = _fk_from_features(b, skeleton)[:, :, list(skeleton.foot_joints), :]
    vel = feet[:, 1:] - feet[:, :-1]  # (B, N-1, nf, 3)
    gated = vel * c[:, :-1, :, None]
    sq = (gated**2).sum(dim=(-1, -2)) * pair_w
    return sq.sum() / pair_w.sum()


def total_loss(
    x0,
    x0_hat,
    contacts,
    skeleton: Skeleton,
    weights: LossWeights,
    stats=None,
    positions_only: bool = False,
    frame_mask=None,
):
    """Weighted sum: simple + l_pos * pos + l_vel * vel + l_foot * foot.

    With stats given, x0/x0_hat are taken as normalized features and the
    geometric terms (positions, foot) are computed after differentiable
    denormalization; simple and velocity act on the inputs as passed.
    """
    a, b = _pair_shapes(x0, x0_hat)
    terms = {"simple": loss_simple(a, b, frame_mask)}
    # accumulate in float64 so logged terms reconstruct the logged total exactly
    total = terms["simple"].double()
    if weights.lambda_vel > 0:
        terms["vel"] = loss_velocity(a, b, frame_mask)
        total = total + weights.lambda_vel * terms["vel"].double()
    if weights.lambda_pos > 0 or weights.lambda_foot > 0:
        if stats is not None:
            mean = torch.tensor(stats.mean, dtype=a.dtype, device=a.device)
            std = torch.tensor(stats.std, dtype=a.dtype, device=a.device)
            raw_a, raw_b = a * std + mean, b * std + mean
        else:
            raw_a, raw_b = a, b
        if weights.lambda_pos > 0:
            terms["pos"] = loss_positions(
                raw_a, raw_b, skeleton, positions_only, frame_mask
            )
            total = total + weights.lambda_pos * terms["pos"].double()
        if weights.lambda_foot > 0:
            terms["foot"] = loss_foot(raw_b, contacts, skeleton, frame_mask)
            total = total + weights.lambda_foot * terms["foot"].double()
    terms["total"] = total
    return total, terms


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    steps: int
    last_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    final_losses: dict


def _batch_conditions(dataset: LabeledDataset, indices, mode: str, rng):
    conds = []
    for i in indices:
        label = dataset.labels[i]
        if mode == "text":
            conds.append(TextCondition(label.captions[rng.integers(len(label.captions))]))
        elif mode == "action":
            conds.append(ActionCondition(label.class_id))
        else:
            conds.append(NullCondition())
    return conds


def train(
    model: MotionDenoiser,
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    config: TrainConfig,
    out_dir,
    eval_fn=None,
    extra_meta: dict = None,
) -> TrainResult:
    """Optimize the denoiser on the dataset's train split.

    Writes an append-only JSON-lines log plus periodic checkpoints under
    out_dir; the final state is always saved as last.ckpt. With eval_fn
    (model, step) -> score given and eval_interval > 0, the checkpoint
    minimizing the score is additionally kept as best.ckpt; otherwise
    best.ckpt is the final one. Deterministic given config.seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_indices = list(dataset.train_indices)
    if not train_indices:
        raise ValidationError("dataset has an empty train split")
    if model.config.num_steps != schedule.num_steps:
        raise ValidationError(
            f"model expects {model.config.num_steps} diffusion steps, "
            f"schedule has {schedule.num_steps}"
        )
    layout = dataset.layout
    if model.config.feature_dim != layout.feature_dim:
        raise ShapeError(
            f"model feature_dim {model.config.feature_dim} does not match "
            f"dataset feature_dim {layout.feature_dim}"
        )
    if model.config.condition_mode == "action":
        if dataset.num_classes > model.config.num_classes:
            raise ValidationError(
                f"dataset has {dataset.num_classes} classes, model only "
                f"{model.config.num_classes}"
            )

    model.attach_dataset_info(dataset.stats, dataset.skeleton.name, dataset.fps)
    normalized = [
        torch.from_numpy(normalize(dataset.motions[i], dataset.stats).features.copy())
        for i in train_indices
    ]
    raw_contacts = [
        torch.from_numpy(
            dataset.motions[i].features[:, layout.contacts].copy()
        )
        for i in train_indices
    ]

    torch.manual_seed(config.seed)  # covers dropout, noise, and cfg masking
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    log_path = out_dir / "log.jsonl"
    mode = model.config.condition_mode
    best_score, best_path = math.inf, None
    start_time = time.time()
    last_terms = {}

    model.train()
    with open(log_path, "a", encoding="utf-8") as log:
        for step in range(1, config.total_steps + 1):
            picks = rng.integers(0, len(train_indices), size=config.batch_size)
            clips = [normalized[i] for i in picks]
            contact_clips = [raw_contacts[i] for i in picks]
            n_max = max(c.shape[0] for c in clips)
            x0 = torch.zeros(config.batch_size, n_max, layout.feature_dim)
            contacts = torch.zeros(config.batch_size, n_max, layout.num_feet)
            frame_mask = torch.zeros(config.batch_size, n_max, dtype=torch.bool)
            for b, (clip, cont) in enumerate(zip(clips, contact_clips)):
                n = clip.shape[0]
                x0[b, :n] = clip
                contacts[b, :n] = cont
                frame_mask[b, :n] = True

            t = torch.from_numpy(
                rng.integers(1, schedule.num_steps + 1, size=config.batch_size)
            )
            noise = torch.randn(x0.shape)
            x_t = q_sample(x0, t, noise, schedule)
            conds = _batch_conditions(
                dataset, [train_indices[i] for i in picks], mode, rng
            )
            cond_emb, _ = model.embed_conditions(
                conds, cfg_mask_prob=config.cfg_mask_prob
            )
            x0_hat = model(x_t, t, cond_emb, frame_mask=frame_mask)
            total, terms = total_loss(
                x0,
                x0_hat,
                contacts,
                dataset.skeleton,
                config.loss_weights,
                stats=dataset.stats,
                positions_only=config.use_geometric_losses_on_positions,
                frame_mask=frame_mask,
            )
            if not torch.isfinite(total):
                raise TrainingDivergenceError(
                    f"loss became non-finite at step {step}: "
                    + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items())
                )
            optimizer.zero_grad()
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

            last_terms = {k: float(v.detach()) for k, v in terms.items()}
            if step == 1 or step % config.log_interval == 0 or step == config.total_steps:
                record = {
                    "step": step,
                    "lr": config.learning_rate,
                    "wall_time": time.time() - start_time,
                }
                record.update({f"loss_{k}": v for k, v in last_terms.items()})
                log.write(json.dumps(record) + "\n")
                log.flush()

            if config.checkpoint_interval and step % config.checkpoint_interval == 0:
                save_checkpoint(
                    out_dir / f"step_{step:07d}.ckpt",
                    model,
                    optimizer=optimizer,
                    step=step,
                    skeleton=dataset.skeleton,
                    extra=extra_meta,
                )
            if eval_fn is not None and config.eval_interval and step % config.eval_interval == 0:
                score = float(eval_fn(model, step))
                model.train()
                if score < best_score:
                    best_score = score
                    best_path = out_dir / "best.ckpt"
                    save_checkpoint(
                        best_path,
                        model,
                        optimizer=optimizer,
                        step=step,
                        skeleton=dataset.skeleton,
                        extra=extra_meta,
                    )

    last_path = save_checkpoint(
        out_dir / "last.ckpt",
        model,
        optimizer=optimizer,
        step=config.total_steps,
        skeleton=dataset.skeleton,
        extra=extra_meta,
    )
    if best_path is None:
        best_path = last_path
    model.eval()
    return TrainResult(
        steps=config.total_steps,
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        log_path=log_path,
        final_losses=last_terms,
    )
