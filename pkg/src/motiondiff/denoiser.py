"""Transformer denoiser G(x_t, t, c) with text / action / null conditioning.

The timestep embedding and the condition embedding are summed into a single
token z_tk. Frames are linearly projected to the latent width, summed with a
fixed sinusoidal positional embedding, and run through the backbone together
with z_tk; the token's output position is dropped and the rest is projected
back to feature space. Backbones: a plain transformer encoder (default), a
decoder where z_tk enters only through cross-attention, and a decoder that
injects z_tk both ways.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ShapeError, ValidationError
from .motion_data import (
    ActionCondition,
    Condition,
    DatasetStats,
    NullCondition,
    TextCondition,
)
from .skeleton import Skeleton

BACKBONES = ("encoder", "decoder_cross_attention", "decoder_plus_token")
CONDITION_MODES = ("text", "action", "unconditional")
TEXT_HASH_SLOTS = 512
CHECKPOINT_MAGIC = b"MDCK0001"


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture knobs; defaults are the desk-scale model."""

    feature_dim: int
    latent_dim: int = 128
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.1
    max_frames: int = 120
    backbone: str = "encoder"
    condition_mode: str = "text"
    num_classes: int = 0
    num_steps: int = 1000  # diffusion steps the model is trained against

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValidationError("feature_dim must be positive")
        if self.latent_dim % self.num_heads != 0:
            raise ValidationError("latent_dim must be divisible by num_heads")
        if self.max_frames < 2:
            raise ValidationError("max_frames must be at least 2")
        if self.backbone not in BACKBONES:
            raise ValidationError(f"backbone must be one of {BACKBONES}")
        if self.condition_mode not in CONDITION_MODES:
            raise ValidationError(f"condition_mode must be one of {CONDITION_MODES}")
        if self.condition_mode == "action" and self.num_classes < 1:
            raise ValidationError("action mode needs num_classes >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError("dropout must lie in [0, 1)")
        if self.num_steps < 2:
            raise ValidationError("num_steps must be at least 2")

    def to_json(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "latent_dim": self.latent_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ff_dim": self.ff_dim,
            "dropout": self.dropout,
            "max_frames": self.max_frames,
            "backbone": self.backbone,
            "condition_mode": self.condition_mode,
            "num_classes": self.num_classes,
            "num_steps": self.num_steps,
        }

    @classmethod
    def from_json(cls, data: dict) -> "DenoiserConfig":
        return cls(**data)


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos features: positions (...,) -> (..., dim)."""
    if dim % 2 != 0:
        raise ValidationError("sinusoidal embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=positions.dtype, device=positions.device)
        / half
    )
    angles = positions[..., None] * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class HashedBagTextEmbedder(nn.Module):
    """Deterministic fallback text encoder: hashed bag of learned embeddings.

    Lowercased whitespace tokens hash (crc32) into a fixed slot table; the
    prompt embedding is the mean of its token rows. No external weights.
    """

    def __init__(self, dim: int, slots: int = TEXT_HASH_SLOTS):
        super().__init__()
        self.dim = dim
        self.slots = slots
        self.table = nn.Embedding(slots, dim)

    @staticmethod
    def token_slots(prompt: str, slots: int = TEXT_HASH_SLOTS):
        tokens = prompt.lower().split()
        if not tokens:
            raise ValidationError("cannot embed an empty prompt")
        return [zlib.crc32(tok.encode("utf-8")) % slots for tok in tokens]

    def embed(self, prompt: str) -> torch.Tensor:
        idx = torch.tensor(
            self.token_slots(prompt, self.slots),
            dtype=torch.long,
            device=self.table.weight.device,
        )
        return self.table(idx).mean(dim=0)


class MotionDenoiser(nn.Module):
    """x0-predicting transformer denoiser over normalized motion features."""

    def __init__(self, config: DenoiserConfig, text_embedder=None):
        super().__init__()
        self.config = config
        d = config.latent_dim

        self.input_proj = nn.Linear(config.feature_dim, d)
        self.output_proj = nn.Linear(d, config.feature_dim)
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d))

        if config.condition_mode == "text":
            if text_embedder is None:
                text_embedder = HashedBagTextEmbedder(dim=d)
            self.text_embedder = text_embedder
            self.text_proj = nn.Linear(text_embedder.dim, d)
            self.null_embedding = nn.Parameter(torch.zeros(d))
            nn.init.normal_(self.null_embedding, std=0.02)
        elif config.condition_mode == "action":
            self.class_embedding = nn.Embedding(config.num_classes, d)
            self.null_embedding = nn.Parameter(torch.zeros(d))
            nn.init.normal_(self.null_embedding, std=0.02)
        # unconditional mode carries no condition parameters at all

        # frame positions only; the z_tk token is position-free
        pe = sinusoidal_embedding(
            torch.arange(config.max_frames, dtype=torch.float32), d
        )
        self.register_buffer("frame_positional", pe, persistent=False)

        if config.backbone == "encoder":
            layer = nn.TransformerEncoderLayer(
                d_model=d,
                nhead=config.num_heads,
                dim_feedforward=config.ff_dim,
                dropout=config.dropout,
                activation="gelu",
                batch_first=True,
            )
            self.backbone = nn.TransformerEncoder(layer, config.num_layers)
        else:
            layer = nn.TransformerDecoderLayer(
                d_model=d,
                nhead=config.num_heads,
                dim_feedforward=config.ff_dim,
                dropout=config.dropout,
                activation="gelu",
                batch_first=True,
            )
            self.backbone = nn.TransformerDecoder(layer, config.num_layers)

        # dataset identity for sampling; populated by training / checkpoint load
        self.stats: DatasetStats = None
        self.skeleton_name: str = ""
        self.fps: float = 0.0

    # -- metadata -----------------------------------------------------------

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    @property
    def max_frames(self) -> int:
        return self.config.max_frames

    def attach_dataset_info(self, stats: DatasetStats, skeleton_name: str, fps: float):
        if stats.feature_dim != self.config.feature_dim:
            raise ShapeError(
                f"stats have {stats.feature_dim} channels, model expects "
                f"{self.config.feature_dim}"
            )
        self.stats = stats
        self.skeleton_name = skeleton_name
        self.fps = float(fps)

    # -- embeddings ----------------------------------------------------------

    def embed_timestep(self, t) -> torch.Tensor:
        """Sinusoidal features of t through a 2-layer feed-forward; (B, d) or (d,)."""
        scalar = isinstance(t, (int, np.integer))
        t_arr = torch.as_tensor([t] if scalar else t, dtype=torch.long)
        if torch.any(t_arr < 1) or torch.any(t_arr > self.config.num_steps):
            raise ValidationError(
                f"timestep outside [1, {self.config.num_steps}]"
            )
        dtype = self.input_proj.weight.dtype
        base = sinusoidal_embedding(t_arr.to(dtype), self.config.latent_dim)
        out = self.time_mlp(base)
        return out[0] if scalar else out

    def _embed_one_condition(self, condition: Condition) -> torch.Tensor:
        mode = self.config.condition_mode
        if mode == "unconditional":
            # z_tk must depend on t only: conditions carry no content here
            d = self.config.latent_dim
            return torch.zeros(d, dtype=self.input_proj.weight.dtype)
        if isinstance(condition, NullCondition):
            return self.null_embedding
        if mode == "text":
            if not isinstance(condition, TextCondition):
                raise ValidationError(
                    f"text-conditioned model got {type(condition).__name__}"
                )
            return self.text_proj(self.text_embedder.embed(condition.prompt))
        if mode == "action":
            if not isinstance(condition, ActionCondition):
                raise ValidationError(
                    f"action-conditioned model got {type(condition).__name__}"
                )
            if condition.class_id >= self.config.num_classes:
                raise ValidationError(
                    f"class_id {condition.class_id} outside "
                    f"{self.config.num_classes} classes"
                )
            return self.class_embedding.weight[condition.class_id]
        raise ValidationError(f"unknown condition mode {mode!r}")

    def embed_conditions(
        self, conditions, rng: torch.Generator = None, cfg_mask_prob: float = 0.0
    ):
        """Batch condition embeddings plus per-sample was-masked flags.

        With probability cfg_mask_prob each non-null embedding is replaced by
        the learned null embedding (classifier-free training). Sampling code
        calls this with cfg_mask_prob = 0.
        """
        embs = torch.stack([self._embed_one_condition(c) for c in conditions])
        masked = torch.zeros(len(conditions), dtype=torch.bool)
        if cfg_mask_prob > 0.0 and self.config.condition_mode != "unconditional":
            draws = torch.rand(len(conditions), generator=rng)
            masked = draws < cfg_mask_prob
            if masked.any():
                embs = torch.where(
                    masked[:, None], self.null_embedding[None, :].to(embs.dtype), embs
                )
        return embs, masked

    # -- forward -------------------------------------------------------------

    def forward(self, x: torch.Tensor, t, cond_emb: torch.Tensor, frame_mask=None):
        """Denoise a batch: (B, N, F), t int or (B,), cond (B, d) -> (B, N, F).

        frame_mask (B, N) marks valid frames; padded frames are excluded from
        attention and zeroed in the output.
        """
        if x.ndim != 3 or x.shape[2] != self.config.feature_dim:
            raise ShapeError(
                f"expected (B, N, {self.config.feature_dim}) input, got {tuple(x.shape)}"
            )
        batch, n = x.shape[0], x.shape[1]
        if n > self.config.max_frames:
            raise ValidationError(
                f"{n} frames exceed the model budget of {self.config.max_frames}"
            )
        if not torch.isfinite(x).all():
            raise ValidationError("denoiser input contains non-finite values")
        if cond_emb.shape != (batch, self.config.latent_dim):
            raise ShapeError("condition embedding must be (B, latent_dim)")

        t_emb = self.embed_timestep(t)
        if t_emb.ndim == 1:
            t_emb = t_emb[None, :].expand(batch, -1)
        z_tk = t_emb + cond_emb  # (B, d)

        tokens = self.input_proj(x) + self.frame_positional[:n].to(x.dtype)
        if frame_mask is not None:
            if frame_mask.shape != (batch, n):
                raise ShapeError("frame_mask must be (B, N)")
            pad = ~frame_mask.bool()
        else:
            pad = torch.zeros((batch, n), dtype=torch.bool, device=x.device)

        token_col = torch.zeros((batch, 1), dtype=torch.bool, device=x.device)
        if self.config.backbone == "encoder":
            seq = torch.cat([z_tk[:, None, :], tokens], dim=1)
            out = self.backbone(
                seq, src_key_padding_mask=torch.cat([token_col, pad], dim=1)
            )[:, 1:]
        elif self.config.backbone == "decoder_cross_attention":
            out = self.backbone(
                tokens, z_tk[:, None, :], tgt_key_padding_mask=pad
            )
        else:  # decoder_plus_token: z_tk both as a token and as memory
            seq = torch.cat([z_tk[:, None, :], tokens], dim=1)
            out = self.backbone(
                seq,
                z_tk[:, None, :],
                tgt_key_padding_mask=torch.cat([token_col, pad], dim=1),
            )[:, 1:]
        out = self.output_proj(out)
        if frame_mask is not None:
            out = out * frame_mask.to(out.dtype)[:, :, None]
        return out

    def predict_x0(self, x, t: int, conditions, frame_mask=None):
        """Evaluation-mode prediction used by the sampler (no cfg masking)."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                cond_emb, _ = self.embed_conditions(conditions)
                return self.forward(x, t, cond_emb, frame_mask=frame_mask)
        finally:
            if was_training:
                self.train()


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header + named float32 tensor blocks
# ---------------------------------------------------------------------------

def _flatten_state(state_dict):
    """state_dict -> ordered (name, float32 C-contiguous array) pairs."""
    out = []
    for name in sorted(state_dict):
        tensor = state_dict[name]
        arr = tensor.detach().cpu().numpy().astype("<f4")
        out.append((name, np.ascontiguousarray(arr)))
    return out


def save_checkpoint(
    path,
    model: MotionDenoiser,
    optimizer=None,
    step: int = 0,
    skeleton: Skeleton = None,
    extra: dict = None,
) -> Path:
    """Write a self-describing checkpoint the sampler can run from alone."""
    path = Path(path)
    entries = _flatten_state(model.state_dict())
    opt_header = None
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        groups = opt_state["param_groups"]
        tensor_fields, scalar_fields = [], {}
        for pid in sorted(opt_state["state"]):
            for field_name, value in sorted(opt_state["state"][pid].items()):
                key = f"optimizer.{pid}.{field_name}"
                if isinstance(value, torch.Tensor) and value.ndim > 0:
                    entries.append(
                        (key, np.ascontiguousarray(value.cpu().numpy().astype("<f4")))
                    )
                    tensor_fields.append(key)
                else:
                    scalar_fields[key] = float(
                        value.item() if isinstance(value, torch.Tensor) else value
                    )
        opt_header = {
            "param_groups": groups,
            "tensor_fields": tensor_fields,
            "scalar_fields": scalar_fields,
        }

    blocks, table, offset = [], [], 0
    for name, arr in entries:
        raw = arr.tobytes()
        table.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "byte_offset": offset,  # relative to the start of the block area
                "byte_length": len(raw),
                "dtype": "float32_le",
            }
        )
        blocks.append(raw)
        offset += len(raw)

    header = {
        "format": "denoiser-checkpoint",
        "version": 1,
        "config": model.config.to_json(),
        "step": int(step),
        "dataset": {
            "stats": None if model.stats is None else model.stats.to_json(),
            "skeleton_name": model.skeleton_name,
            "skeleton": None if skeleton is None else skeleton.to_json(),
            "fps": model.fps,
        },
        "tensors": table,
        "optimizer": opt_header,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for raw in blocks:
            fh.write(raw)
    return path


def _read_checkpoint_header(raw: bytes, path):
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a denoiser checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 8
    if start + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated checkpoint header")
    header = json.loads(raw[start : start + header_len].decode("utf-8"))
    if header.get("format") != "denoiser-checkpoint":
        raise CheckpointError(f"{path}: unrecognized checkpoint format")
    return header, start + header_len


def load_checkpoint(path, expect_config: DenoiserConfig = None, text_embedder=None):
    """Rebuild the model (and metadata) from a checkpoint file.

    Returns (model, info) where info carries step, skeleton, optimizer state
    and the extra dict. Any config or tensor-shape disagreement fails loudly.
    """
    path = Path(path)
    raw = path.read_bytes()
    header, block_start = _read_checkpoint_header(raw, path)
    config = DenoiserConfig.from_json(header["config"])
    if expect_config is not None and config != expect_config:
        raise CheckpointError(
            f"{path}: checkpoint config {config.to_json()} does not match "
            f"expected {expect_config.to_json()}"
        )

    tensors = {}
    for entry in header["tensors"]:
        off = block_start + int(entry["byte_offset"])
        length = int(entry["byte_length"])
        shape = tuple(entry["shape"])
        if entry.get("dtype", "float32_le") != "float32_le":
            raise CheckpointError(f"{path}: unsupported tensor dtype")
        expected = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        if length != expected or off + length > len(raw):
            raise CheckpointError(
                f"{path}: tensor {entry['name']!r} block is inconsistent"
            )
        arr = np.frombuffer(raw, dtype="<f4", count=length // 4, offset=off)
        tensors[entry["name"]] = torch.from_numpy(arr.copy().reshape(shape))

    model = MotionDenoiser(config, text_embedder=text_embedder)
    model_state = model.state_dict()
    missing = sorted(set(model_state) - set(tensors))
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks tensors {missing}")
    new_state = {}
    for name in model_state:
        if tuple(tensors[name].shape) != tuple(model_state[name].shape):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tuple(tensors[name].shape)}, "
                f"model expects {tuple(model_state[name].shape)}"
            )
        new_state[name] = tensors[name]
    model.load_state_dict(new_state)
    model.eval()

    ds = header.get("dataset") or {}
    skeleton = None
    if ds.get("skeleton") is not None:
        skeleton = Skeleton.from_json(ds["skeleton"])
    if ds.get("stats") is not None:
        model.attach_dataset_info(
            DatasetStats.from_json(ds["stats"]),
            ds.get("skeleton_name", ""),
            float(ds.get("fps", 0.0) or 0.0),
        )

    opt_header = header.get("optimizer")
    optimizer_state = None
    if opt_header is not None:
        state = {}
        for key in opt_header["tensor_fields"]:
            _, pid, field_name = key.split(".", 2)
            state.setdefault(int(pid), {})[field_name] = tensors[key]
        for key, value in opt_header["scalar_fields"].items():
            _, pid, field_name = key.split(".", 2)
            state.setdefault(int(pid), {})[field_name] = value
        optimizer_state = {
            "state": state,
            "param_groups": opt_header["param_groups"],
        }

    info = {
        "step": int(header.get("step", 0)),
        "skeleton": skeleton,
        "optimizer_state": optimizer_state,
        "extra": header.get("extra", {}),
        "config": config,
    }
    return model, info


def checkpoint_fingerprint(path) -> str:
    import hashlib

    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
