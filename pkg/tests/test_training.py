"""Loss-term oracles and training-loop contracts.

Fixture values are frozen from hand calculations:

  * translating every joint of one side by v shifts all FK positions by v,
    so the position loss is J * ||v||^2
  * a foot sliding d per frame with a single contact frame contributes
    d^2 / (N - 1)
  * scalar tracks x = (0, 1) vs x_hat = (0, 2) differ by 1 in their forward
    difference, so the velocity loss is (2 - 1)^2 = 1
"""
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _fixtures import CHAIN_F, chain_skeleton, make_tiny_dataset, smooth_motion, tiny_model
from motiondiff.denoiser import DenoiserConfig, MotionDenoiser, load_checkpoint
from motiondiff.diffusion import make_cosine_schedule, q_sample
from motiondiff.errors import ShapeError, TrainingDivergenceError, ValidationError
from motiondiff.motion_data import (
    FeatureLayout,
    LabeledDataset,
    NullCondition,
    features_from_kinematics,
)
from motiondiff.skeleton import (
    ContactMask,
    PoseRotations,
    quat_identity,
)
from motiondiff.training import (
    LossWeights,
    TrainConfig,
    loss_foot,
    loss_positions,
    loss_simple,
    loss_velocity,
    total_loss,
    train,
)


# ---------------------------------------------------------------------------
# Loss fixtures
# ---------------------------------------------------------------------------

def test_loss_simple_all_ones_residual():
    x0 = torch.zeros(4, 5, dtype=torch.float64)
    assert float(loss_simple(x0, torch.ones_like(x0))) == pytest.approx(1.0, abs=1e-12)


def test_loss_velocity_scalar_track_fixture():
    x = torch.tensor([[0.0], [1.0]], dtype=torch.float64)
    x_hat = torch.tensor([[0.0], [2.0]], dtype=torch.float64)
    assert float(loss_velocity(x, x_hat)) == pytest.approx(1.0, abs=1e-12)


def test_loss_positions_translation_is_j_v_squared():
    skel = chain_skeleton()
    layout = FeatureLayout.for_skeleton(skel)
    a = torch.from_numpy(smooth_motion(skel, frames=6, seed=3).features.astype(np.float64))
    b = a.clone()
    v = torch.tensor([0.3, -0.2, 0.7], dtype=torch.float64)
    shifted = b[:, layout.positions].reshape(6, 3, 3) + v
    b[:, layout.positions] = shifted.reshape(6, 9)
    want = skel.num_joints * float(v @ v)
    assert float(loss_positions(a, b, skel)) == pytest.approx(want, abs=1e-9)


def test_loss_foot_single_contact_slide():
    skel = chain_skeleton()
    n, d = 3, 0.25
    root = np.stack([d * np.arange(n), np.ones(n), np.zeros(n)], axis=1)
    pose = PoseRotations(root, quat_identity((n, skel.num_joints)))
    contacts = ContactMask(np.array([[1.0], [0.0], [0.0]], dtype=np.float32))
    motion = features_from_kinematics(skel, pose, contacts, fps=20.0)
    feats = torch.from_numpy(motion.features.astype(np.float64))
    got = float(loss_foot(feats, contacts, skel))
    assert got == pytest.approx(d * d / (n - 1), abs=1e-12)


def test_losses_vanish_on_identical_inputs():
    skel = chain_skeleton()
    a = torch.from_numpy(smooth_motion(skel, frames=8, seed=1).features.astype(np.float64))
    assert float(loss_simple(a, a)) <= 1e-10
    assert float(loss_velocity(a, a)) <= 1e-10
    assert float(loss_positions(a, a, skel)) <= 1e-10
    # the foot term vanishes exactly when feet are still on contact frames
    static = a[:1].repeat(4, 1)
    contacts = np.ones((4, 1), dtype=np.float64)
    assert float(loss_foot(static, contacts, skel)) <= 1e-10


def test_moving_feet_on_contact_frames_are_penalized():
    skel = chain_skeleton()
    a = torch.from_numpy(smooth_motion(skel, frames=8, seed=2).features.astype(np.float64))
    # the clip's root drifts, so claiming full contact must cost something
    assert float(loss_foot(a, np.ones((8, 1)), skel)) > 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 6), st.integers(1, 5))
def test_simple_and_velocity_losses_nonnegative(seed, n, f):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, f))
    b = rng.normal(size=(n, f))
    assert float(loss_simple(a, b)) >= 0.0
    assert float(loss_velocity(a, b)) >= 0.0
    assert float(loss_simple(a, a)) <= 1e-10


def test_positions_only_mode_is_position_channel_mse():
    skel = chain_skeleton()
    layout = FeatureLayout.for_skeleton(skel)
    rng = np.random.default_rng(9)
    a = torch.from_numpy(rng.normal(size=(2, 7, layout.feature_dim)))
    b = torch.from_numpy(rng.normal(size=(2, 7, layout.feature_dim)))
    got = loss_positions(a, b, skel, positions_only=True)
    want = ((a[..., layout.positions] - b[..., layout.positions]) ** 2).mean()
    assert torch.allclose(got, want, rtol=0, atol=1e-12)


def test_masked_padding_frames_do_not_change_losses():
    skel = chain_skeleton()
    a = torch.from_numpy(smooth_motion(skel, frames=6, seed=4).features.astype(np.float64))
    b = a + 0.01 * torch.from_numpy(
        np.random.default_rng(5).normal(size=tuple(a.shape))
    )
    contacts = np.ones((6, 1), dtype=np.float64)

    pad_a = torch.full((1, 9, a.shape[1]), 777.0, dtype=torch.float64)
    pad_b = pad_a.clone()
    pad_a[0, :6], pad_b[0, :6] = a, b
    pad_c = np.zeros((1, 9, 1))
    pad_c[0, :6] = contacts
    mask = torch.zeros(1, 9, dtype=torch.bool)
    mask[0, :6] = True

    pairs = [
        (loss_simple(a, b), loss_simple(pad_a, pad_b, frame_mask=mask)),
        (loss_velocity(a, b), loss_velocity(pad_a, pad_b, frame_mask=mask)),
        (loss_positions(a, b, skel), loss_positions(pad_a, pad_b, skel, frame_mask=mask)),
        (loss_foot(b, contacts, skel), loss_foot(pad_b, pad_c, skel, frame_mask=mask)),
    ]
    for plain, padded in pairs:
        assert float(padded) == pytest.approx(float(plain), rel=1e-12)


def test_total_loss_combines_weighted_terms():
    ds = make_tiny_dataset()
    skel, layout, stats = ds.skeleton, ds.layout, ds.stats
    raw = torch.from_numpy(ds.motions[0].features.astype(np.float64))
    mean = torch.from_numpy(stats.mean.copy())
    std = torch.from_numpy(stats.std.copy())
    a = (raw - mean) / std
    b = a + 0.05 * torch.from_numpy(np.random.default_rng(1).normal(size=tuple(a.shape)))
    contacts = raw[:, layout.contacts]

    weights = LossWeights(lambda_pos=0.7, lambda_vel=1.3, lambda_foot=2.0)
    total, terms = total_loss(a, b, contacts, skel, weights, stats=stats)
    raw_b = b * std + mean
    want = (
        float(loss_simple(a, b))
        + 0.7 * float(loss_positions(raw, raw_b, skel))
        + 1.3 * float(loss_velocity(a, b))
        + 2.0 * float(loss_foot(raw_b, contacts, skel))
    )
    assert float(total) == pytest.approx(want, rel=1e-10)
    assert set(terms) == {"simple", "pos", "vel", "foot", "total"}
    assert float(terms["total"]) == float(total)


def test_total_loss_with_zero_weights_is_simple():
    ds = make_tiny_dataset(num_clips=2)
    a = torch.from_numpy(ds.motions[0].features.astype(np.float64))
    b = a + 0.1
    contacts = a[:, ds.layout.contacts]
    total, terms = total_loss(a, b, contacts, ds.skeleton, LossWeights())
    assert float(total) == pytest.approx(float(loss_simple(a, b)), rel=1e-12)
    assert set(terms) == {"simple", "total"}


def test_loss_weight_and_config_validation():
    with pytest.raises(ValidationError):
        LossWeights(lambda_pos=-0.1)
    with pytest.raises(ValidationError):
        TrainConfig(total_steps=0)
    with pytest.raises(ValidationError):
        TrainConfig(total_steps=10, batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(total_steps=10, learning_rate=-1.0)
    with pytest.raises(ValidationError):
        TrainConfig(total_steps=10, cfg_mask_prob=1.5)
    with pytest.raises(ValidationError):
        TrainConfig(total_steps=10, log_interval=0)
    cfg = TrainConfig(total_steps=10, loss_weights=LossWeights(1.0, 2.0, 3.0))
    assert TrainConfig.from_json(cfg.to_json()) == cfg


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def test_zero_learning_rate_leaves_parameters_bitwise(tmp_path):
    ds = make_tiny_dataset()
    model = tiny_model()
    before = {k: v.detach().clone() for k, v in model.state_dict().items()}
    cfg = TrainConfig(total_steps=12, batch_size=3, learning_rate=0.0, seed=5, log_interval=4)
    train(model, ds, make_cosine_schedule(50), cfg, tmp_path / "run")
    for k, v in model.state_dict().items():
        assert torch.equal(before[k], v), k


def test_same_seed_reproduces_losses_and_weights(tmp_path):
    ds = make_tiny_dataset()
    runs = []
    for sub in ("a", "b"):
        model = tiny_model(mode="text", num_classes=0, seed=7)
        cfg = TrainConfig(
            total_steps=15,
            batch_size=4,
            learning_rate=1e-3,
            seed=11,
            log_interval=1,
            loss_weights=LossWeights(1.0, 1.0, 1.0),
        )
        res = train(model, ds, make_cosine_schedule(50), cfg, tmp_path / sub)
        records = [json.loads(line) for line in open(res.log_path)]
        for r in records:
            r.pop("wall_time")
        runs.append((records, {k: v.detach().clone() for k, v in model.state_dict().items()}))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert torch.equal(runs[0][1][k], runs[1][1][k]), k


def test_overfitting_four_clips_shrinks_simple_loss_tenfold(tmp_path):
    ds = make_tiny_dataset(num_clips=4, frames=12)
    model = tiny_model(mode="action", num_classes=4)
    cfg = TrainConfig(
        total_steps=200, batch_size=4, learning_rate=2e-3, cfg_mask_prob=0.0,
        seed=3, log_interval=1,
    )
    res = train(model, ds, make_cosine_schedule(50), cfg, tmp_path / "fit")
    records = [json.loads(line) for line in open(res.log_path)]
    assert records[0]["step"] == 1 and records[-1]["step"] == 200
    assert records[-1]["loss_simple"] <= records[0]["loss_simple"] / 10


def test_logged_terms_reconstruct_logged_total(tmp_path):
    ds = make_tiny_dataset()
    model = tiny_model()
    cfg = TrainConfig(
        total_steps=8, batch_size=3, learning_rate=1e-3, seed=2, log_interval=1,
        loss_weights=LossWeights(1.0, 1.0, 1.0),
    )
    res = train(model, ds, make_cosine_schedule(50), cfg, tmp_path / "run")
    records = [json.loads(line) for line in open(res.log_path)]
    assert len(records) == 8
    for r in records:
        parts = r["loss_simple"] + r["loss_pos"] + r["loss_vel"] + r["loss_foot"]
        assert abs(parts - r["loss_total"]) <= 1e-6
        assert r["lr"] == 1e-3 and r["wall_time"] >= 0


def test_divergent_run_aborts_with_step_number(tmp_path):
    ds = make_tiny_dataset()
    model = tiny_model()
    cfg = TrainConfig(total_steps=5, batch_size=4, learning_rate=1e20, seed=0)
    with pytest.raises(TrainingDivergenceError, match="step"):
        train(model, ds, make_cosine_schedule(50), cfg, tmp_path / "run")


def test_checkpoints_written_and_runnable(tmp_path):
    ds = make_tiny_dataset()
    model = tiny_model()
    cfg = TrainConfig(
        total_steps=10, batch_size=2, learning_rate=1e-3, seed=4,
        checkpoint_interval=5,
    )
    res = train(model, ds, make_cosine_schedule(50), cfg, tmp_path / "run",
                extra_meta={"corpus": "tiny"})
    for name in ("step_0000005.ckpt", "step_0000010.ckpt", "last.ckpt"):
        assert (tmp_path / "run" / name).exists()
    assert res.best_checkpoint == res.last_checkpoint

    loaded, info = load_checkpoint(res.last_checkpoint)
    assert info["step"] == 10
    assert info["skeleton"].name == "chain3"
    assert info["extra"] == {"corpus": "tiny"}
    assert info["optimizer_state"] is not None
    x = torch.zeros(1, 4, CHAIN_F)
    cond = model.embed_conditions([NullCondition()])[0]
    model.eval()
    assert torch.allclose(model.predict_x0(x, 3, [NullCondition()]),
                          loaded.predict_x0(x, 3, [NullCondition()]))


def test_eval_hook_keeps_best_scoring_checkpoint(tmp_path):
    ds = make_tiny_dataset()
    model = tiny_model()
    scores = {5: 3.0, 10: 1.0, 15: 2.0}
    seen = []

    def eval_fn(m, step):
        seen.append(step)
        return scores[step]

    cfg = TrainConfig(total_steps=15, batch_size=2, learning_rate=1e-3, seed=4,
                      eval_interval=5)
    res = train(model, ds, make_cosine_schedule(50), cfg, tmp_path / "run",
                eval_fn=eval_fn)
    assert seen == [5, 10, 15]
    assert res.best_checkpoint.name == "best.ckpt"
    _, info = load_checkpoint(res.best_checkpoint)
    assert info["step"] == 10


def test_train_rejects_mismatched_components(tmp_path):
    ds = make_tiny_dataset()
    model = tiny_model(steps=50)
    with pytest.raises(ValidationError):
        train(model, ds, make_cosine_schedule(20),
              TrainConfig(total_steps=2), tmp_path / "a")
    model_small = MotionDenoiser(DenoiserConfig(
        feature_dim=CHAIN_F + 1, latent_dim=16, num_layers=1, num_heads=2,
        ff_dim=16, dropout=0.0, max_frames=16, condition_mode="action",
        num_classes=4, num_steps=50,
    ))
    with pytest.raises(ShapeError):
        train(model_small, ds, make_cosine_schedule(50),
              TrainConfig(total_steps=2), tmp_path / "b")
    few_classes = tiny_model(num_classes=2)
    with pytest.raises(ValidationError):
        train(few_classes, ds, make_cosine_schedule(50),
              TrainConfig(total_steps=2), tmp_path / "c")


def test_train_requires_nonempty_train_split(tmp_path):
    ds = make_tiny_dataset(num_clips=2)
    all_test = LabeledDataset(
        motions=ds.motions, labels=ds.labels, class_names=ds.class_names,
        train_indices=(), test_indices=(0, 1), stats=ds.stats,
        skeleton=ds.skeleton, fps=ds.fps,
    )
    with pytest.raises(ValidationError):
        train(tiny_model(num_classes=2), all_test, make_cosine_schedule(50),
              TrainConfig(total_steps=2), tmp_path / "run")


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def test_analytic_gradients_match_finite_differences():
    """Central differences in double precision, through the model and FK."""
    ds = make_tiny_dataset(num_clips=2, frames=6)
    skel, layout, stats = ds.skeleton, ds.layout, ds.stats
    torch.manual_seed(0)
    cfg = DenoiserConfig(
        feature_dim=CHAIN_F, latent_dim=16, num_layers=2, num_heads=2,
        ff_dim=16, dropout=0.0, max_frames=8, backbone="encoder",
        condition_mode="unconditional", num_steps=10,
    )
    model = MotionDenoiser(cfg).double().eval()
    schedule = make_cosine_schedule(10)

    raw = torch.from_numpy(ds.motions[0].features[:6].astype(np.float64))[None]
    mean, std = torch.from_numpy(stats.mean.copy()), torch.from_numpy(stats.std.copy())
    x0 = (raw - mean) / std
    contacts = raw[..., layout.contacts]
    t = torch.tensor([3])
    noise = torch.from_numpy(np.random.default_rng(8).normal(size=tuple(x0.shape)))
    x_t = q_sample(x0, t, noise, schedule)
    cond = model.embed_conditions([NullCondition()])[0]
    weights = LossWeights(1.0, 1.0, 1.0)

    def loss_value():
        out = model(x_t, t, cond)
        return total_loss(x0, out, contacts, skel, weights, stats=stats)[0]

    model.zero_grad()
    loss_value().backward()

    h = 1e-6
    checked = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            grad = torch.zeros_like(p) if p.grad is None else p.grad
            flat, gflat = p.data.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_value())
                flat[i] = orig - h
                down = float(loss_value())
                flat[i] = orig
                fd = (up - down) / (2 * h)
                g = float(gflat[i])
                assert abs(fd - g) <= 1e-7 + 1e-4 * abs(g), (name, i, fd, g)
                checked += 1
    assert checked > 3000  # every parameter of the tiny model was exercised
