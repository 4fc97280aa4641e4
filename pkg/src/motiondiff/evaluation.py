"""Metric suite over locally trained feature extractors.

Distribution metrics (FID, diversity, multimodality) run in the latent
space of a recurrent action classifier trained on the procedural corpus;
relevancy metrics (R-precision, multimodal distance) run in the shared
space of a contrastively trained text/motion embedder; generation quality
for action models is scored by recognition accuracy, and a foot-skate
diagnostic measures horizontal foot travel on contact frames.

The extractors are trained locally on the procedural corpus. Absolute
metric values are therefore NOT comparable to any published table trained
against other corpora or extractors; only comparisons between runs of this
repository are meaningful.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .denoiser import HashedBagTextEmbedder
from .diffusion import NoiseSchedule, sample_batch
from .errors import ShapeError, ValidationError
from .motion_data import (
    ActionCondition,
    DatasetStats,
    FeatureLayout,
    LabeledDataset,
    MotionSequence,
    NullCondition,
    TextCondition,
    normalize,
)
from .skeleton import DEFAULT_HEIGHT_THRESH, Skeleton

EPS_COV = 1e-6


# ---------------------------------------------------------------------------
# Distribution metrics
# ---------------------------------------------------------------------------

def _feature_matrix(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("feature set must be a non-empty (n, d) matrix")
    if not np.isfinite(x).all():
        raise ValidationError("feature set contains non-finite values")
    return x


def _gaussian_stats(x: np.ndarray):
    mu = x.mean(axis=0)
    n, d = x.shape
    if n == 1:
        cov = np.zeros((d, d))
    else:
        cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    if n < d + 1:
        # too few samples for a full-rank covariance
        cov = cov + EPS_COV * np.eye(d)
    return mu, cov


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), with the matrix square
    root taken by eigendecomposition of the symmetrized product and negative
    eigenvalues clipped at zero.
    """
    a, b = _feature_matrix(features_a), _feature_matrix(features_b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    mu1, c1 = _gaussian_stats(a)
    mu2, c2 = _gaussian_stats(b)
    s1 = _sqrtm_psd(c1)
    inner = s1 @ c2 @ s1
    tr_sqrt = np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)


def diversity(features, n_pairs: int = 300, rng=None) -> float:
    """Mean distance over n_pairs disjoint random feature pairs."""
    x = _feature_matrix(features)
    if n_pairs < 1:
        raise ValidationError("n_pairs must be positive")
    if x.shape[0] < 2 * n_pairs:
        raise ValidationError(
            f"diversity over {n_pairs} disjoint pairs needs at least "
            f"{2 * n_pairs} samples, got {x.shape[0]}"
        )
    rng = np.random.default_rng(rng)
    perm = rng.permutation(x.shape[0])[: 2 * n_pairs]
    return float(np.linalg.norm(x[perm[0::2]] - x[perm[1::2]], axis=1).mean())


def multimodality(groups, pairs_per_condition: int = 20, rng=None) -> float:
    """Mean over conditions of mean pairwise distance within the group.

    groups maps a condition key to that condition's feature matrix. Groups
    are visited in sorted key order so the result does not depend on dict
    insertion order. Small groups are scored over all unordered pairs;
    larger ones over pairs_per_condition sampled pairs.
    """
    if not groups:
        raise ValidationError("multimodality needs at least one condition group")
    if pairs_per_condition < 1:
        raise ValidationError("pairs_per_condition must be positive")
    rng = np.random.default_rng(rng)
    means = []
    for key in sorted(groups, key=str):
        g = _feature_matrix(groups[key])
        n = g.shape[0]
        if n < 2:
            raise ValidationError(f"condition group {key!r} has fewer than 2 samples")
        if n * (n - 1) // 2 <= pairs_per_condition:
            i, j = np.triu_indices(n, k=1)
        else:
            i = rng.integers(0, n, size=pairs_per_condition)
            j = (i + rng.integers(1, n, size=pairs_per_condition)) % n
        means.append(np.linalg.norm(g[i] - g[j], axis=1).mean())
    return float(np.mean(means))


# ---------------------------------------------------------------------------
# Relevancy metrics
# ---------------------------------------------------------------------------

def _paired(motion_feats, text_feats):
    m, t = _feature_matrix(motion_feats), _feature_matrix(text_feats)
    if m.shape != t.shape:
        raise ShapeError(f"paired features differ in shape: {m.shape} vs {t.shape}")
    return m, t


def r_precision(
    motion_feats,
    text_feats,
    pool_size: int = 32,
    top_k=(1, 2, 3),
    num_pools: int = 1000,
    rng=None,
) -> dict:
    """Pool-of-N retrieval score.

    Each pool holds one true (motion, text) pair plus pool_size - 1
    distractor texts; a pool scores for top-k when at most k - 1 distractors
    sit strictly closer to the motion than its own text. Returns
    {k: fraction of pools scored}.
    """
    m, t = _paired(motion_feats, text_feats)
    n = m.shape[0]
    if pool_size < 2:
        raise ValidationError("pool_size must be at least 2")
    if n < pool_size:
        raise ValidationError(f"r_precision needs at least {pool_size} pairs, got {n}")
    ks = tuple(int(k) for k in top_k)
    if any(k < 1 or k >= pool_size for k in ks):
        raise ValidationError("top_k values must lie in [1, pool_size)")
    rng = np.random.default_rng(rng)
    hits = {k: 0 for k in ks}
    for _ in range(num_pools):
        true = int(rng.integers(n))
        others = rng.choice(n - 1, size=pool_size - 1, replace=False)
        others = others + (others >= true)  # skip the true index
        d_true = np.linalg.norm(m[true] - t[true])
        d_others = np.linalg.norm(m[true] - t[others], axis=1)
        rank = int((d_others < d_true).sum())
        for k in ks:
            if rank < k:
                hits[k] += 1
    return {k: hits[k] / num_pools for k in ks}


def multimodal_distance(motion_feats, text_feats) -> float:
    """Mean distance between each motion and its own prompt embedding."""
    m, t = _paired(motion_feats, text_feats)
    return float(np.linalg.norm(m - t, axis=1).mean())


# ---------------------------------------------------------------------------
# Foot-skate diagnostic
# ---------------------------------------------------------------------------

def foot_skate(motion: MotionSequence, skeleton: Skeleton, contacts=None) -> float:
    """Mean horizontal foot displacement per contact-gated frame pair.

    contacts (frames x feet) gates the displacement between frames i and
    i + 1 by the flag at frame i; defaults to the motion's own contact
    channels. No contact frames means no skating: 0.
    """
    layout = FeatureLayout.for_skeleton(skeleton)
    feats = motion.features
    n = feats.shape[0]
    if n < 2:
        raise ValidationError("foot skate needs at least 2 frames")
    pos = feats[:, layout.positions].reshape(n, skeleton.num_joints, 3)
    feet = pos[:, list(skeleton.foot_joints), :]
    if contacts is None:
        c = feats[:, layout.contacts] > 0.5
    else:
        values = contacts.values if hasattr(contacts, "values") else contacts
        c = np.asarray(values) > 0.5
    if c.shape != (n, len(skeleton.foot_joints)):
        raise ShapeError(
            f"contacts shape {c.shape} does not match "
            f"({n}, {len(skeleton.foot_joints)})"
        )
    horiz = feet[1:, :, [0, 2]] - feet[:-1, :, [0, 2]]
    disp = np.linalg.norm(horiz, axis=-1)
    gate = c[:-1]
    count = int(gate.sum())
    if count == 0:
        return 0.0
    return float((disp * gate).sum() / count)


def height_contacts(
    motion: MotionSequence,
    skeleton: Skeleton,
    height_thresh: float = DEFAULT_HEIGHT_THRESH,
) -> np.ndarray:
    """Height-only contact gate from the position channels.

    Velocity plays no part here on purpose: a sliding foot moves fast, and a
    velocity-gated detector would excuse exactly the frames the foot-skate
    diagnostic exists to catch.
    """
    layout = FeatureLayout.for_skeleton(skeleton)
    n = motion.features.shape[0]
    pos = motion.features[:, layout.positions].reshape(n, skeleton.num_joints, 3)
    feet_y = pos[:, list(skeleton.foot_joints), 1]
    return feet_y < (skeleton.ground_height + height_thresh)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------

def _pad_normalized(motions, stats: DatasetStats):
    arrays = [normalize(m, stats).features for m in motions]
    lengths = [a.shape[0] for a in arrays]
    x = torch.zeros(len(arrays), max(lengths), arrays[0].shape[1])
    for i, a in enumerate(arrays):
        x[i, : a.shape[0]] = torch.from_numpy(a.copy())
    return x, lengths


class MotionClassifier(nn.Module):
    """Recurrent action classifier; its penultimate layer is the metric space."""

    def __init__(self, feature_dim: int, num_classes: int,
                 hidden_dim: int = 64, feature_width: int = 32):
        super().__init__()
        self.gru = nn.GRU(feature_dim, hidden_dim, batch_first=True)
        self.feature_head = nn.Linear(hidden_dim, feature_width)
        self.class_head = nn.Linear(feature_width, num_classes)
        self.stats: DatasetStats = None

    @property
    def num_classes(self) -> int:
        return self.class_head.out_features

    @property
    def feature_width(self) -> int:
        return self.class_head.in_features

    def attach_stats(self, stats: DatasetStats):
        self.stats = stats

    def encode(self, x: torch.Tensor, lengths) -> torch.Tensor:
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths, batch_first=True, enforce_sorted=False
        )
        _, h = self.gru(packed)
        return torch.tanh(self.feature_head(h[-1]))

    def logits(self, x: torch.Tensor, lengths) -> torch.Tensor:
        return self.class_head(self.encode(x, lengths))

    def predict_classes(self, motions) -> np.ndarray:
        if self.stats is None:
            raise ValidationError("classifier has no dataset stats attached")
        x, lengths = _pad_normalized(motions, self.stats)
        was_training = self.training
        self.eval()
        with torch.no_grad():
            out = self.logits(x, lengths).argmax(dim=1).numpy()
        self.train(was_training)
        return out


def extract_features(encoder, motions) -> np.ndarray:
    """Penultimate-layer features for a list of motions, (n, width)."""
    if encoder.stats is None:
        raise ValidationError("encoder has no dataset stats attached")
    x, lengths = _pad_normalized(motions, encoder.stats)
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        feats = encoder.encode(x, lengths).numpy().astype(np.float64)
    encoder.train(was_training)
    return feats


@dataclass(frozen=True)
class ExtractorConfig:
    hidden_dim: int = 64
    feature_width: int = 32
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden_dim, self.feature_width, self.epochs, self.batch_size) < 1:
            raise ValidationError("extractor dimensions and schedule must be positive")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")

    def to_json(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "feature_width": self.feature_width,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExtractorConfig":
        return cls(**data)


def _accuracy(classifier: MotionClassifier, motions, labels) -> float:
    if not motions:
        return float("nan")
    preds = classifier.predict_classes(motions)
    return float((preds == np.asarray(labels)).mean())


def train_motion_classifier(
    dataset: LabeledDataset, config: ExtractorConfig = ExtractorConfig()
):
    """Fit the action classifier on the train split; returns (model, info).

    info reports train_accuracy and test_accuracy (None without a test split).
    Deterministic given config.seed.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    layout = dataset.layout
    model = MotionClassifier(
        layout.feature_dim,
        dataset.num_classes,
        hidden_dim=config.hidden_dim,
        feature_width=config.feature_width,
    )
    model.attach_stats(dataset.stats)
    motions = dataset.split_motions("train")
    labels = np.array([lab.class_id for lab in dataset.split_labels("train")])
    if len(motions) == 0:
        raise ValidationError("dataset has an empty train split")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    ce = nn.CrossEntropyLoss()
    model.train()
    for _ in range(config.epochs):
        order = rng.permutation(len(motions))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            x, lengths = _pad_normalized([motions[i] for i in batch], dataset.stats)
            y = torch.from_numpy(labels[batch]).long()
            loss = ce(model.logits(x, lengths), y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    model.eval()
    test_motions = dataset.split_motions("test")
    test_labels = [lab.class_id for lab in dataset.split_labels("test")]
    info = {
        "train_accuracy": _accuracy(model, list(motions), labels),
        "test_accuracy": _accuracy(model, test_motions, test_labels)
        if test_motions
        else None,
    }
    return model, info


def recognition_accuracy(classifier, motions, labels) -> float:
    """Fraction of motions whose predicted class equals the intended label."""
    labels = np.asarray(labels)
    if len(motions) != labels.shape[0]:
        raise ShapeError("motions and labels must pair up one-to-one")
    if labels.size == 0:
        raise ValidationError("recognition accuracy needs at least one motion")
    num_classes = classifier.num_classes
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    preds = classifier.predict_classes(motions)
    return float((preds == labels).mean())


class JointTextMotionEmbedder(nn.Module):
    """Paired encoders mapping captions and motions into one metric space."""

    def __init__(self, feature_dim: int, embed_dim: int = 32,
                 hidden_dim: int = 64, text_slots: int = 512):
        super().__init__()
        self.text_bag = HashedBagTextEmbedder(hidden_dim, slots=text_slots)
        self.text_proj = nn.Sequential(
            nn.Linear(hidden_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, embed_dim)
        )
        self.gru = nn.GRU(feature_dim, hidden_dim, batch_first=True)
        self.motion_proj = nn.Linear(hidden_dim, embed_dim)
        self.stats: DatasetStats = None
        self.embed_dim = embed_dim

    def attach_stats(self, stats: DatasetStats):
        self.stats = stats

    def embed_texts(self, prompts) -> torch.Tensor:
        raw = torch.stack([self.text_bag.embed(p) for p in prompts])
        out = self.text_proj(raw)
        return out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def encode(self, x: torch.Tensor, lengths) -> torch.Tensor:
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths, batch_first=True, enforce_sorted=False
        )
        _, h = self.gru(packed)
        out = self.motion_proj(h[-1])
        return out / out.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def text_features(self, prompts) -> np.ndarray:
        was_training = self.training
        self.eval()
        with torch.no_grad():
            out = self.embed_texts(prompts).numpy().astype(np.float64)
        self.train(was_training)
        return out


@dataclass(frozen=True)
class EmbedderConfig:
    embed_dim: int = 32
    hidden_dim: int = 64
    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 1e-3
    temperature: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_dim, self.epochs, self.batch_size) < 1:
            raise ValidationError("embedder dimensions and schedule must be positive")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValidationError("learning_rate and temperature must be positive")

    def to_json(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "hidden_dim": self.hidden_dim,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "temperature": self.temperature,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EmbedderConfig":
        return cls(**data)


def train_joint_embedder(
    dataset: LabeledDataset, config: EmbedderConfig = EmbedderConfig()
):
    """Contrastive fit of the joint text/motion space on caption pairs.

    Symmetric cross-entropy over in-batch negatives; one caption is drawn
    per clip per epoch. Returns (embedder, info).
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    layout = dataset.layout
    model = JointTextMotionEmbedder(
        layout.feature_dim, embed_dim=config.embed_dim, hidden_dim=config.hidden_dim
    )
    model.attach_stats(dataset.stats)
    motions = dataset.split_motions("train")
    labels = dataset.split_labels("train")
    if len(motions) < 2:
        raise ValidationError("contrastive training needs at least 2 train clips")
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    ce = nn.CrossEntropyLoss()
    model.train()
    last_loss = math.nan
    for _ in range(config.epochs):
        order = rng.permutation(len(motions))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            if len(batch) < 2:
                continue  # a single pair has no in-batch negatives
            x, lengths = _pad_normalized([motions[i] for i in batch], dataset.stats)
            prompts = [
                labels[i].captions[rng.integers(len(labels[i].captions))]
                for i in batch
            ]
            m = model.encode(x, lengths)
            t = model.embed_texts(prompts)
            logits = (m @ t.T) / config.temperature
            target = torch.arange(len(batch))
            loss = 0.5 * (ce(logits, target) + ce(logits.T, target))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        if epoch_losses:
            last_loss = float(np.mean(epoch_losses))
    model.eval()
    return model, {"final_loss": last_loss}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricResult:
    value: float
    half_width: float
    replications: int

    def __post_init__(self):
        if not (math.isfinite(self.value) and math.isfinite(self.half_width)):
            raise ValidationError("metric value and half-width must be finite")
        if self.replications < 1:
            raise ValidationError("replications must be at least 1")

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "half_width": self.half_width,
            "replications": self.replications,
        }

    @classmethod
    def from_json(cls, data: dict) -> "MetricResult":
        return cls(**data)


def aggregate_replications(values) -> MetricResult:
    """Mean with a 95% half-width of 1.96 * sd / sqrt(reps)."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValidationError("cannot aggregate zero replications")
    reps = len(vals)
    half = 0.0 if reps == 1 else 1.96 * float(np.std(vals, ddof=1)) / math.sqrt(reps)
    return MetricResult(value=float(np.mean(vals)), half_width=half, replications=reps)


@dataclass(frozen=True)
class EvalReport:
    metrics: dict
    config_hash: str
    sample_counts: dict

    def __post_init__(self):
        for name, m in self.metrics.items():
            if not isinstance(m, MetricResult):
                raise ValidationError(f"metric {name!r} is not a MetricResult")

    def to_json(self) -> dict:
        return {
            "metrics": {k: m.to_json() for k, m in self.metrics.items()},
            "config_hash": self.config_hash,
            "sample_counts": dict(self.sample_counts),
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        return cls(
            metrics={k: MetricResult.from_json(v) for k, v in data["metrics"].items()},
            config_hash=data["config_hash"],
            sample_counts=dict(data["sample_counts"]),
        )

    def render_table(self) -> str:
        width = max([len(k) for k in self.metrics] + [6])
        lines = [f"{'metric':<{width}}  {'value':>10}  {'+-95%':>9}  {'reps':>4}"]
        for name in sorted(self.metrics):
            m = self.metrics[name]
            lines.append(
                f"{name:<{width}}  {m.value:>10.4f}  {m.half_width:>9.4f}  "
                f"{m.replications:>4d}"
            )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    replications: int = 20
    samples_per_replication: int = 32
    guidance_scale: float = 2.5
    seed: int = 0
    r_pool_size: int = 32
    r_num_pools: int = 100
    diversity_pairs: int = 300
    multimodality_pairs: int = 20
    multimodality_conditions: int = 8
    multimodality_samples: int = 4
    sample_batch_size: int = 16
    split: str = "test"

    def __post_init__(self):
        positive = (
            self.replications, self.samples_per_replication, self.r_pool_size,
            self.r_num_pools, self.diversity_pairs, self.multimodality_pairs,
            self.multimodality_samples, self.sample_batch_size,
        )
        if min(positive) < 1:
            raise ValidationError("evaluation sizes must all be positive")
        # 0 conditions turns the (expensive) multimodality side-pool off
        if self.multimodality_conditions < 0:
            raise ValidationError("multimodality_conditions must be >= 0")
        if self.guidance_scale < 0:
            raise ValidationError("guidance_scale must be non-negative")
        if self.split not in ("train", "test"):
            raise ValidationError("split must be 'train' or 'test'")

    def to_json(self) -> dict:
        return {
            "replications": self.replications,
            "samples_per_replication": self.samples_per_replication,
            "guidance_scale": self.guidance_scale,
            "seed": self.seed,
            "r_pool_size": self.r_pool_size,
            "r_num_pools": self.r_num_pools,
            "diversity_pairs": self.diversity_pairs,
            "multimodality_pairs": self.multimodality_pairs,
            "multimodality_conditions": self.multimodality_conditions,
            "multimodality_samples": self.multimodality_samples,
            "sample_batch_size": self.sample_batch_size,
            "split": self.split,
        }

    @classmethod
    def from_json(cls, data: dict) -> "EvalConfig":
        return cls(**data)


def _config_hash(config: EvalConfig) -> str:
    payload = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _condition_for(mode: str, label, rng) -> object:
    if mode == "text":
        return TextCondition(label.captions[rng.integers(len(label.captions))])
    if mode == "action":
        return ActionCondition(label.class_id)
    return NullCondition()


def _sample_chunked(model, conditions, lengths, schedule, scale, rng, chunk):
    out = []
    for start in range(0, len(conditions), chunk):
        out.extend(
            sample_batch(
                model,
                conditions[start : start + chunk],
                lengths[start : start + chunk],
                schedule,
                guidance_scale=scale,
                rng=rng,
            )
        )
    return out


def generate_eval_samples(
    model,
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    num: int,
    guidance_scale: float,
    torch_rng: torch.Generator,
    np_rng,
    split: str = "test",
    batch_size: int = 16,
):
    """Draw num conditions from the split's clips and sample a motion each.

    Returns (motions, conditions, class_ids, prompts); prompts entries are
    None outside text mode.
    """
    clips = dataset.split_motions(split)
    labels = dataset.split_labels(split)
    if not clips:
        raise ValidationError(f"dataset has an empty {split} split")
    mode = model.config.condition_mode
    order = np_rng.permutation(len(clips))
    picks = [int(order[i % len(clips)]) for i in range(num)]
    conditions, lengths, class_ids, prompts = [], [], [], []
    for i in picks:
        cond = _condition_for(mode, labels[i], np_rng)
        conditions.append(cond)
        lengths.append(min(clips[i].num_frames, model.max_frames))
        class_ids.append(labels[i].class_id)
        prompts.append(cond.prompt if mode == "text" else None)
    motions = _sample_chunked(
        model, conditions, lengths, schedule, guidance_scale, torch_rng, batch_size
    )
    return motions, conditions, np.array(class_ids), prompts


def _multimodality_pool(
    model, dataset, schedule, config, torch_rng, np_rng, classifier
):
    """Generate several motions per condition and group their features."""
    labels = dataset.split_labels(config.split)
    mode = model.config.condition_mode
    if mode == "action":
        keys = sorted({lab.class_id for lab in labels})
        per_key = {k: next(l for l in labels if l.class_id == k) for k in keys}
    else:
        # one representative caption per clip, deduplicated
        seen = {}
        for lab in labels:
            seen.setdefault(lab.captions[0], lab)
        keys = sorted(seen)
        per_key = seen
    if len(keys) > config.multimodality_conditions:
        chosen = np_rng.choice(
            len(keys), size=config.multimodality_conditions, replace=False
        )
        keys = [keys[int(c)] for c in sorted(chosen)]
    conditions, lengths, owners = [], [], []
    max_n = min(max(m.num_frames for m in dataset.split_motions(config.split)),
                model.max_frames)
    for key in keys:
        lab = per_key[key]
        for _ in range(config.multimodality_samples):
            if mode == "action":
                conditions.append(ActionCondition(lab.class_id))
            elif mode == "text":
                conditions.append(TextCondition(key))
            else:
                conditions.append(NullCondition())
            lengths.append(max_n)
            owners.append(key)
    motions = _sample_chunked(
        model, conditions, lengths, schedule, config.guidance_scale,
        torch_rng, config.sample_batch_size,
    )
    feats = extract_features(classifier, motions)
    groups = {}
    for key, f in zip(owners, feats):
        groups.setdefault(key, []).append(f)
    return {k: np.stack(v) for k, v in groups.items()}


def evaluate_model(
    model,
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    config: EvalConfig = EvalConfig(),
    classifier: MotionClassifier = None,
    embedder: JointTextMotionEmbedder = None,
) -> EvalReport:
    """Replicate the full metric set and report mean +- 95% half-widths.

    Every replication regenerates its own samples from fresh sub-seeds.
    Needs the classifier for FID/diversity/multimodality/recognition and
    the embedder for R-precision/multimodal distance (text mode).
    """
    if classifier is None:
        raise ValidationError("evaluate_model needs a trained motion classifier")
    if getattr(model, "stats", None) is None:
        raise ValidationError(
            "model has no dataset stats attached; train it or call "
            "attach_dataset_info first"
        )
    mode = model.config.condition_mode
    gt_motions = dataset.split_motions(config.split)
    if not gt_motions:
        raise ValidationError(f"dataset has an empty {config.split} split")
    gt_feats = extract_features(classifier, gt_motions)
    seeds = np.random.SeedSequence(config.seed).generate_state(4 * config.replications)

    per_rep = {}
    for rep in range(config.replications):
        torch_rng = torch.Generator().manual_seed(int(seeds[4 * rep]))
        np_rng = np.random.default_rng(int(seeds[4 * rep + 1]))
        motions, conditions, class_ids, prompts = generate_eval_samples(
            model, dataset, schedule, config.samples_per_replication,
            config.guidance_scale, torch_rng, np_rng,
            split=config.split, batch_size=config.sample_batch_size,
        )
        gen_feats = extract_features(classifier, motions)
        rep_metrics = {
            "fid": fid(gt_feats, gen_feats),
            "diversity": diversity(
                gen_feats,
                n_pairs=min(config.diversity_pairs, len(motions) // 2),
                rng=np_rng,
            ),
            "foot_skate": float(np.mean([
                foot_skate(m, dataset.skeleton,
                           contacts=height_contacts(m, dataset.skeleton))
                for m in motions
            ])),
        }
        if mode == "action":
            rep_metrics["recognition_accuracy"] = recognition_accuracy(
                classifier, motions, class_ids
            )
        if mode == "text" and embedder is not None:
            x, lengths = _pad_normalized(motions, embedder.stats)
            with torch.no_grad():
                m_emb = embedder.encode(x, lengths).numpy().astype(np.float64)
            t_emb = embedder.text_features(prompts)
            pool = min(config.r_pool_size, len(motions))
            tops = r_precision(
                m_emb, t_emb, pool_size=pool,
                top_k=tuple(k for k in (1, 2, 3) if k < pool),
                num_pools=config.r_num_pools, rng=np_rng,
            )
            for k, v in tops.items():
                rep_metrics[f"r_precision_top{k}"] = v
            rep_metrics["multimodal_distance"] = multimodal_distance(m_emb, t_emb)
        if config.multimodality_conditions > 0:
            mm_rng = np.random.default_rng(int(seeds[4 * rep + 2]))
            mm_torch = torch.Generator().manual_seed(int(seeds[4 * rep + 3]))
            groups = _multimodality_pool(
                model, dataset, schedule, config, mm_torch, mm_rng, classifier
            )
            rep_metrics["multimodality"] = multimodality(
                groups, pairs_per_condition=config.multimodality_pairs, rng=mm_rng
            )
        for k, v in rep_metrics.items():
            per_rep.setdefault(k, []).append(v)

    metrics = {k: aggregate_replications(v) for k, v in per_rep.items()}
    return EvalReport(
        metrics=metrics,
        config_hash=_config_hash(config),
        sample_counts={
            "ground_truth": len(gt_motions),
            "generated_per_replication": config.samples_per_replication,
            "replications": config.replications,
        },
    )


# ---------------------------------------------------------------------------
# Guidance sweep
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepResult:
    rows: tuple  # of (guidance_scale, EvalReport)

    def to_json(self) -> dict:
        return {
            "rows": [
                {"guidance_scale": s, "report": r.to_json()} for s, r in self.rows
            ]
        }

    @classmethod
    def from_json(cls, data: dict) -> "SweepResult":
        return cls(
            rows=tuple(
                (row["guidance_scale"], EvalReport.from_json(row["report"]))
                for row in data["rows"]
            )
        )

    def to_csv(self) -> str:
        lines = ["s,metric,value,half_width,replications"]
        for s, report in self.rows:
            for name in sorted(report.metrics):
                m = report.metrics[name]
                lines.append(
                    f"{s},{name},{m.value:.10g},{m.half_width:.10g},{m.replications}"
                )
        return "\n".join(lines) + "\n"

    def to_wide_csv(self) -> str:
        """One row per guidance scale, one column per metric mean."""
        names = sorted({k for _, r in self.rows for k in r.metrics})
        lines = ["s," + ",".join(names)]
        for s, report in self.rows:
            cells = [
                f"{report.metrics[n].value:.10g}" if n in report.metrics else ""
                for n in names
            ]
            lines.append(f"{s:g}," + ",".join(cells))
        return "\n".join(lines) + "\n"

    def render_table(self) -> str:
        names = sorted({k for _, r in self.rows for k in r.metrics})
        header = f"{'s':>6}  " + "  ".join(f"{n:>18}" for n in names)
        lines = [header]
        for s, report in self.rows:
            cells = []
            for n in names:
                if n in report.metrics:
                    m = report.metrics[n]
                    cells.append(f"{m.value:>9.4f}+-{m.half_width:<7.4f}")
                else:
                    cells.append(f"{'-':>18}")
            lines.append(f"{s:>6.2f}  " + "  ".join(cells))
        return "\n".join(lines)


def guidance_sweep(
    model,
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    s_values,
    config: EvalConfig = EvalConfig(),
    classifier: MotionClassifier = None,
    embedder: JointTextMotionEmbedder = None,
) -> SweepResult:
    """Evaluate the model at each guidance scale; one report row per s."""
    s_list = [float(s) for s in s_values]
    if not s_list:
        raise ValidationError("s_values must be non-empty")
    rows = []
    for s in s_list:
        report = evaluate_model(
            model, dataset, schedule,
            replace(config, guidance_scale=s),
            classifier=classifier, embedder=embedder,
        )
        rows.append((s, report))
    return SweepResult(rows=tuple(rows))
