"""Denoiser architecture, condition embedding, and checkpoint tests."""
import json
import struct

import numpy as np
import pytest
import torch

from motiondiff.denoiser import (
    CHECKPOINT_MAGIC,
    BACKBONES,
    DenoiserConfig,
    HashedBagTextEmbedder,
    MotionDenoiser,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_embedding,
)
from motiondiff.errors import CheckpointError, ShapeError, ValidationError
from motiondiff.motion_data import (
    ActionCondition,
    DatasetStats,
    NullCondition,
    TextCondition,
)
from motiondiff.skeleton import default_skeleton

F_DIM = 9


def tiny_config(**overrides):
    base = dict(
        feature_dim=F_DIM,
        latent_dim=32,
        num_layers=1,
        num_heads=2,
        ff_dim=48,
        dropout=0.0,
        max_frames=24,
        condition_mode="text",
        num_steps=100,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


def make_model(**overrides):
    torch.manual_seed(0)
    return MotionDenoiser(tiny_config(**overrides))


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValidationError):
        tiny_config(latent_dim=30, num_heads=4)  # not divisible by heads
    with pytest.raises(ValidationError):
        tiny_config(max_frames=1)
    with pytest.raises(ValidationError):
        tiny_config(backbone="gru")
    with pytest.raises(ValidationError):
        tiny_config(condition_mode="action", num_classes=0)
    with pytest.raises(ValidationError):
        tiny_config(condition_mode="sound")


def test_config_json_roundtrip():
    cfg = tiny_config(backbone="decoder_plus_token")
    assert DenoiserConfig.from_json(cfg.to_json()) == cfg


def test_default_desk_configuration():
    cfg = DenoiserConfig(feature_dim=175)
    assert (cfg.latent_dim, cfg.num_layers, cfg.num_heads, cfg.ff_dim) == (
        128,
        4,
        4,
        256,
    )
    assert cfg.dropout == 0.1
    assert cfg.max_frames == 120


# ---------------------------------------------------------------------------
# Timestep embedding
# ---------------------------------------------------------------------------

def test_timestep_embedding_shape_and_determinism():
    model = make_model()
    e = model.embed_timestep(5)
    assert e.shape == (32,)
    torch.testing.assert_close(e, model.embed_timestep(5))


def test_timestep_embeddings_do_not_collide():
    torch.manual_seed(1)
    model = MotionDenoiser(tiny_config(latent_dim=128, num_heads=4, num_steps=1000))
    with torch.no_grad():
        embs = model.embed_timestep(torch.arange(1, 1001))
    dists = torch.cdist(embs, embs)
    dists.fill_diagonal_(float("inf"))
    assert dists.min() > 1e-6


def test_timestep_out_of_range():
    model = make_model()
    with pytest.raises(ValidationError):
        model.embed_timestep(0)
    with pytest.raises(ValidationError):
        model.embed_timestep(101)


def test_sinusoidal_embedding_requires_even_dim():
    with pytest.raises(ValidationError):
        sinusoidal_embedding(torch.arange(3, dtype=torch.float32), 7)


# ---------------------------------------------------------------------------
# Condition embedding
# ---------------------------------------------------------------------------

def test_text_embedder_is_deterministic():
    torch.manual_seed(2)
    emb = HashedBagTextEmbedder(dim=16)
    a = emb.embed("A Person Walks")
    b = emb.embed("a person walks")  # case-insensitive tokens
    torch.testing.assert_close(a, b)
    c = emb.embed("a person kicks")
    assert not torch.allclose(a, c)


def test_text_embedder_rejects_empty():
    emb = HashedBagTextEmbedder(dim=16)
    with pytest.raises(ValidationError):
        emb.embed("   ")


def test_mask_prob_zero_and_one():
    model = make_model()
    conds = [TextCondition("a person walks")] * 8
    embs, flags = model.embed_conditions(conds, cfg_mask_prob=0.0)
    assert not flags.any()
    gen = torch.Generator().manual_seed(0)
    embs, flags = model.embed_conditions(conds, rng=gen, cfg_mask_prob=1.0)
    assert flags.all()
    null = model.null_embedding.detach()
    for row in embs:
        torch.testing.assert_close(row, null)


def test_mask_prob_monte_carlo():
    torch.manual_seed(3)
    model = MotionDenoiser(
        tiny_config(condition_mode="action", num_classes=4, latent_dim=16, ff_dim=16)
    )
    conds = [ActionCondition(0)] * 100_000
    gen = torch.Generator().manual_seed(123)
    with torch.no_grad():
        _, flags = model.embed_conditions(conds, rng=gen, cfg_mask_prob=0.1)
    frac = flags.float().mean().item()
    assert abs(frac - 0.100) <= 0.005


def test_condition_mode_mismatches():
    text_model = make_model()
    with pytest.raises(ValidationError):
        text_model.embed_conditions([ActionCondition(0)])
    action_model = make_model(condition_mode="action", num_classes=3)
    with pytest.raises(ValidationError):
        action_model.embed_conditions([TextCondition("hi there")])
    with pytest.raises(ValidationError):
        action_model.embed_conditions([ActionCondition(3)])


def test_action_classes_have_distinct_embeddings():
    model = make_model(condition_mode="action", num_classes=5)
    embs, _ = model.embed_conditions([ActionCondition(i) for i in range(5)])
    dists = torch.cdist(embs, embs)
    dists.fill_diagonal_(float("inf"))
    assert dists.min() > 1e-6


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("backbone", BACKBONES)
def test_forward_shape_contract(backbone):
    model = make_model(backbone=backbone)
    model.eval()
    for n in (2, 17, model.max_frames):
        x = torch.randn(3, n, F_DIM)
        cond, _ = model.embed_conditions([TextCondition("a person walks")] * 3)
        out = model(x, 7, cond)
        assert out.shape == (3, n, F_DIM)


def test_forward_rejects_overlong_and_nonfinite():
    model = make_model()
    cond, _ = model.embed_conditions([NullCondition()])
    with pytest.raises(ValidationError):
        model(torch.randn(1, model.max_frames + 1, F_DIM), 3, cond)
    bad = torch.randn(1, 4, F_DIM)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ValidationError):
        model(bad, 3, cond)


@pytest.mark.parametrize("backbone", BACKBONES)
def test_batch_independence(backbone):
    model = make_model(backbone=backbone)
    model.eval()
    gen = torch.Generator().manual_seed(5)
    a = torch.randn(1, 10, F_DIM, generator=gen)
    b = torch.randn(1, 10, F_DIM, generator=gen)
    conds = [TextCondition("a person walks"), TextCondition("a person kicks")]
    with torch.no_grad():
        cond_ab, _ = model.embed_conditions(conds)
        out_ab = model(torch.cat([a, b]), 9, cond_ab)
        cond_ba, _ = model.embed_conditions(conds[::-1])
        out_ba = model(torch.cat([b, a]), 9, cond_ba)
    torch.testing.assert_close(out_ab[0], out_ba[1], atol=1e-6, rtol=1e-5)
    torch.testing.assert_close(out_ab[1], out_ba[0], atol=1e-6, rtol=1e-5)


@pytest.mark.parametrize("backbone", BACKBONES)
def test_padding_invariance(backbone):
    model = make_model(backbone=backbone)
    model.eval()
    gen = torch.Generator().manual_seed(6)
    n = 11
    x = torch.randn(1, n, F_DIM, generator=gen)
    garbage = 1000.0 * torch.randn(1, 5, F_DIM, generator=gen)
    padded = torch.cat([x, garbage], dim=1)
    mask = torch.zeros(1, n + 5, dtype=torch.bool)
    mask[0, :n] = True
    with torch.no_grad():
        cond, _ = model.embed_conditions([NullCondition()])
        out_plain = model(x, 4, cond, frame_mask=torch.ones(1, n, dtype=torch.bool))
        out_padded = model(padded, 4, cond, frame_mask=mask)
    torch.testing.assert_close(out_padded[:, :n], out_plain, atol=1e-6, rtol=1e-5)
    assert torch.all(out_padded[:, n:] == 0)


def test_unconditional_mode_ignores_condition_content():
    model = make_model(condition_mode="unconditional")
    model.eval()
    x = torch.randn(2, 8, F_DIM)
    with torch.no_grad():
        out_null = model.predict_x0(x, 3, [NullCondition()] * 2)
        out_text = model.predict_x0(x, 3, [TextCondition("a person dances")] * 2)
        out_action = model.predict_x0(x, 3, [ActionCondition(7)] * 2)
    torch.testing.assert_close(out_null, out_text)
    torch.testing.assert_close(out_null, out_action)


def test_text_condition_changes_output():
    model = make_model()
    model.eval()
    x = torch.randn(1, 8, F_DIM)
    with torch.no_grad():
        a = model.predict_x0(x, 3, [TextCondition("a person walks forward")])
        b = model.predict_x0(x, 3, [NullCondition()])
    assert not torch.allclose(a, b)


def test_eval_forward_is_deterministic_and_dropout_is_live():
    model = make_model(dropout=0.3)
    x = torch.randn(1, 6, F_DIM)
    model.eval()
    with torch.no_grad():
        cond, _ = model.embed_conditions([NullCondition()])
        a = model(x, 2, cond)
        b = model(x, 2, cond)
    torch.testing.assert_close(a, b)
    model.train()
    torch.manual_seed(0)
    c = model(x, 2, cond)
    d = model(x, 2, cond)
    assert not torch.allclose(c, d)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def fitted_model():
    model = make_model()
    stats = DatasetStats(mean=np.zeros(F_DIM), std=np.ones(F_DIM))
    model.attach_dataset_info(stats, "desk17", 20.0)
    return model


def test_checkpoint_roundtrip(tmp_path):
    model = fitted_model()
    skel = default_skeleton()
    path = save_checkpoint(
        tmp_path / "m.ckpt", model, step=42, skeleton=skel,
        extra={"corpus_hash": "abc123"},
    )
    loaded, info = load_checkpoint(path)
    assert info["step"] == 42
    assert info["extra"]["corpus_hash"] == "abc123"
    assert info["skeleton"].joint_names == skel.joint_names
    assert loaded.skeleton_name == "desk17"
    assert loaded.fps == 20.0
    np.testing.assert_array_equal(loaded.stats.mean, model.stats.mean)
    for name, tensor in model.state_dict().items():
        torch.testing.assert_close(loaded.state_dict()[name], tensor)


def test_checkpoint_roundtrip_with_optimizer(tmp_path):
    model = fitted_model()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    cond, _ = model.embed_conditions([NullCondition()])
    loss = model(torch.randn(1, 6, F_DIM), 3, cond).square().mean()
    loss.backward()
    opt.step()
    path = save_checkpoint(tmp_path / "m.ckpt", model, optimizer=opt, step=1)
    loaded, info = load_checkpoint(path)
    assert info["optimizer_state"] is not None
    new_opt = torch.optim.Adam(loaded.parameters(), lr=1e-3)
    new_opt.load_state_dict(info["optimizer_state"])
    old_state = opt.state_dict()["state"]
    new_state = new_opt.state_dict()["state"]
    assert set(old_state) == set(new_state)
    for pid in old_state:
        torch.testing.assert_close(
            new_state[pid]["exp_avg"], old_state[pid]["exp_avg"]
        )
    # the restored optimizer must actually be usable
    cond, _ = loaded.embed_conditions([NullCondition()])
    loss = loaded(torch.randn(1, 6, F_DIM), 3, cond).square().mean()
    loss.backward()
    new_opt.step()


def test_checkpoint_predicts_identically(tmp_path):
    model = fitted_model()
    model.eval()
    x = torch.randn(2, 10, F_DIM)
    with torch.no_grad():
        before = model.predict_x0(x, 5, [TextCondition("a person waves")] * 2)
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    loaded, _ = load_checkpoint(path)
    with torch.no_grad():
        after = loaded.predict_x0(x, 5, [TextCondition("a person waves")] * 2)
    torch.testing.assert_close(before, after)


def test_checkpoint_rejects_config_mismatch(tmp_path):
    model = fitted_model()
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    other = tiny_config(latent_dim=64)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(path, expect_config=other)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"JUNKJUNK" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_tampered_config(tmp_path):
    model = fitted_model()
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    raw = path.read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(raw[start : start + hlen])
    header["config"]["latent_dim"] = 64  # tensors no longer fit this config
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path.write_bytes(
        CHECKPOINT_MAGIC + struct.pack("<Q", len(payload)) + payload + raw[start + hlen:]
    )
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    model = fitted_model()
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
