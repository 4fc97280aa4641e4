"""Command-line shell: corpus generation, training, sampling, editing,
evaluation, sweeps, rendering, and export behind one executable.

Every flag can also come from a JSON config file (--config); explicit flags
win on conflict. Commands that produce a run directory leave exactly one
manifest.json there recording the command line, the fully resolved
configuration, input hashes, and seeds - `replay` re-executes a manifest
into a fresh directory. Exit codes: 0 success, 1 runtime failure, 2
usage or validation error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .corpus import FAMILY_NAMES, CorpusConfig, canonical_family, generate_procedural_corpus
from .denoiser import DenoiserConfig, MotionDenoiser, load_checkpoint
from .diffusion import make_cosine_schedule, sample_batch
from .editing import (
    PRESET_NAMES,
    EditSpec,
    edit,
    edit_mask_from_json,
    make_preset_mask,
)
from .errors import CheckpointError, ShapeError, ValidationError
from .evaluation import (
    EmbedderConfig,
    EvalConfig,
    ExtractorConfig,
    evaluate_model,
    guidance_sweep,
    train_joint_embedder,
    train_motion_classifier,
)
from .motion_data import (
    ActionCondition,
    FeatureLayout,
    MotionFile,
    NullCondition,
    TextCondition,
    dataset_fingerprint,
    load_dataset,
    load_motion,
    save_dataset,
    save_motion,
)
from .rendering import RENDER_FORMATS, RenderStyle, positions_from_motion, render_motion
from .training import LossWeights, TrainConfig, train

MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    """Bad flags or config keys; maps to exit code 2."""


def _canonical_json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunManifest:
    command: str
    argv: tuple
    resolved_config: dict
    seeds: dict
    tool_version: str = __version__
    corpus_hash: str = None
    checkpoint_hash: str = None
    started_at: str = ""
    finished_at: str = ""

    def to_json(self) -> dict:
        return {
            "format": "run-manifest",
            "version": 1,
            "command": self.command,
            "argv": list(self.argv),
            "resolved_config": dict(self.resolved_config),
            "seeds": dict(self.seeds),
            "tool_version": self.tool_version,
            "corpus_hash": self.corpus_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RunManifest":
        if data.get("format") != "run-manifest":
            raise ValidationError("not a run manifest")
        return cls(
            command=data["command"],
            argv=tuple(data["argv"]),
            resolved_config=dict(data["resolved_config"]),
            seeds=dict(data["seeds"]),
            tool_version=data["tool_version"],
            corpus_hash=data.get("corpus_hash"),
            checkpoint_hash=data.get("checkpoint_hash"),
            started_at=data.get("started_at", ""),
            finished_at=data.get("finished_at", ""),
        )

    def save(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_bytes(_canonical_json_bytes(self.to_json()))
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        if not path.exists():
            raise UsageError(f"--manifest: no manifest at {path}")
        return cls.from_json(json.loads(path.read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# Flag tables: one source of truth for parsing, defaults, and config merge
# ---------------------------------------------------------------------------

@dataclass
class _Arg:
    flag: str
    required: bool = False
    kwargs: dict = field(default_factory=dict)

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


@dataclass
class _Command:
    name: str
    help: str
    args: list
    makes_run_dir: bool = True


def _common_model_args():
    return [
        _Arg("--latent-dim", kwargs=dict(type=int, default=128)),
        _Arg("--layers", kwargs=dict(type=int, default=4)),
        _Arg("--heads", kwargs=dict(type=int, default=4)),
        _Arg("--ff-dim", kwargs=dict(type=int, default=256)),
        _Arg("--dropout", kwargs=dict(type=float, default=0.1)),
        _Arg("--max-frames", kwargs=dict(type=int, default=120)),
        _Arg("--diffusion-steps", kwargs=dict(type=int, default=1000)),
    ]


def _eval_shared_args():
    return [
        _Arg("--ckpt", required=True, kwargs=dict(type=str)),
        _Arg("--data", required=True, kwargs=dict(type=str)),
        _Arg("--out", required=True, kwargs=dict(type=str)),
        _Arg("--reps", kwargs=dict(type=int, default=20)),
        _Arg("--samples", kwargs=dict(type=int, default=32)),
        _Arg("--seed", kwargs=dict(type=int, default=0)),
        _Arg("--split", kwargs=dict(type=str, default="test",
                                    choices=["train", "test"])),
        _Arg("--extractor-epochs", kwargs=dict(type=int, default=40)),
        _Arg("--embedder-epochs", kwargs=dict(type=int, default=60)),
        _Arg("--batch-size", kwargs=dict(type=int, default=16)),
        _Arg("--mm-conditions", kwargs=dict(type=int, default=8)),
    ]


def _commands():
    return [
        _Command(
            "gen-corpus",
            "generate the procedural labeled motion corpus",
            [
                _Arg("--families", kwargs=dict(
                    type=str, default=",".join(FAMILY_NAMES))),
                _Arg("--per-family", kwargs=dict(type=int, default=16)),
                _Arg("--min-frames", kwargs=dict(type=int, default=40)),
                _Arg("--max-frames", kwargs=dict(type=int, default=56)),
                _Arg("--fps", kwargs=dict(type=float, default=20.0)),
                _Arg("--test-fraction", kwargs=dict(type=float, default=0.2)),
                _Arg("--seed", kwargs=dict(type=int, default=0)),
                _Arg("--out", required=True, kwargs=dict(type=str)),
            ],
        ),
        _Command(
            "train",
            "train a denoiser on a corpus directory",
            [
                _Arg("--data", required=True, kwargs=dict(type=str)),
                _Arg("--out", required=True, kwargs=dict(type=str)),
                _Arg("--cond", kwargs=dict(type=str, default="text",
                                           choices=["text", "action", "none"])),
                _Arg("--steps", required=True, kwargs=dict(type=int)),
                _Arg("--seed", kwargs=dict(type=int, default=0)),
                _Arg("--batch-size", kwargs=dict(type=int, default=32)),
                _Arg("--lr", kwargs=dict(type=float, default=1e-4)),
                _Arg("--cfg-mask-prob", kwargs=dict(type=float, default=0.1)),
                _Arg("--lambda-pos", kwargs=dict(type=float, default=0.0)),
                _Arg("--lambda-vel", kwargs=dict(type=float, default=0.0)),
                _Arg("--lambda-foot", kwargs=dict(type=float, default=0.0)),
                _Arg("--log-interval", kwargs=dict(type=int, default=50)),
                _Arg("--ckpt-interval", kwargs=dict(type=int, default=0)),
                *_common_model_args(),
            ],
        ),
        _Command(
            "sample",
            "sample motions from a checkpoint",
            [
                _Arg("--ckpt", required=True, kwargs=dict(type=str)),
                _Arg("--out", required=True, kwargs=dict(type=str)),
                _Arg("--text", kwargs=dict(type=str, default=None)),
                _Arg("--action", kwargs=dict(type=int, default=None)),
                _Arg("--n", kwargs=dict(type=int, default=1)),
                _Arg("--scale", kwargs=dict(type=float, default=2.5)),
                _Arg("--seed", kwargs=dict(type=int, default=0)),
                _Arg("--length", kwargs=dict(type=int, default=0)),
                _Arg("--render", kwargs=dict(type=str, default="none",
                                             choices=["none", *RENDER_FORMATS])),
            ],
        ),
        _Command(
            "edit",
            "regenerate masked channels of a reference motion",
            [
                _Arg("--ckpt", required=True, kwargs=dict(type=str)),
                _Arg("--ref", required=True, kwargs=dict(type=str)),
                _Arg("--out", required=True, kwargs=dict(type=str)),
                _Arg("--preset", kwargs=dict(type=str, default="inbetween",
                                             choices=list(PRESET_NAMES))),
                _Arg("--mask-json", kwargs=dict(type=str, default=None)),
                _Arg("--text", kwargs=dict(type=str, default=None)),
                _Arg("--action", kwargs=dict(type=int, default=None)),
                _Arg("--scale", kwargs=dict(type=float, default=2.5)),
                _Arg("--seed", kwargs=dict(type=int, default=0)),
                _Arg("--prefix-frac", kwargs=dict(type=float, default=0.25)),
                _Arg("--suffix-frac", kwargs=dict(type=float, default=0.25)),
                _Arg("--free-root", kwargs=dict(action="store_true",
                                                default=False)),
                _Arg("--render", kwargs=dict(type=str, default="none",
                                             choices=["none", *RENDER_FORMATS])),
            ],
        ),
        _Command(
            "eval",
            "evaluate a checkpoint with the metric suite",
            [
                *_eval_shared_args(),
                _Arg("--scale", kwargs=dict(type=float, default=2.5)),
            ],
        ),
        _Command(
            "sweep",
            "evaluate across guidance scales",
            [
                *_eval_shared_args(),
                _Arg("--scales", kwargs=dict(type=str, default="0,1,1.5,2.5,4,7")),
            ],
        ),
        _Command(
            "render",
            "draw a motion file as a stick figure",
            [
                _Arg("--motion", required=True, kwargs=dict(type=str)),
                _Arg("--out", required=True, kwargs=dict(type=str)),
                _Arg("--fmt", kwargs=dict(type=str, default=None,
                                          choices=list(RENDER_FORMATS))),
                _Arg("--width", kwargs=dict(type=int, default=480)),
                _Arg("--height", kwargs=dict(type=int, default=480)),
                _Arg("--plane", kwargs=dict(type=str, default="xy")),
                _Arg("--trail", kwargs=dict(type=int, default=0)),
                _Arg("--fps", kwargs=dict(type=float, default=0.0)),
            ],
            makes_run_dir=False,
        ),
        _Command(
            "export",
            "dump a motion file to inspectable JSON",
            [
                _Arg("--motion", required=True, kwargs=dict(type=str)),
                _Arg("--out", required=True, kwargs=dict(type=str)),
                _Arg("--what", kwargs=dict(type=str, default="both",
                                           choices=["features", "positions", "both"])),
            ],
            makes_run_dir=False,
        ),
        _Command(
            "replay",
            "re-run a command from its manifest into a new directory",
            [
                _Arg("--manifest", required=True, kwargs=dict(type=str)),
                _Arg("--out", required=True, kwargs=dict(type=str)),
            ],
            makes_run_dir=False,
        ),
    ]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motiondiff",
        description="desk-scale motion diffusion: corpus, training, sampling, "
                    "editing, evaluation, rendering",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in _commands():
        p = sub.add_parser(cmd.name, help=cmd.help)
        p.add_argument("--config", type=str, default=None,
                       help="JSON file of flag values; explicit flags win")
        for arg in cmd.args:
            # explicit-vs-default detection drives the config merge
            kwargs = dict(arg.kwargs)
            kwargs["default"] = argparse.SUPPRESS
            p.add_argument(arg.flag, **kwargs)
    return parser


def _resolve_flags(cmd: _Command, explicit: dict) -> dict:
    """defaults < config file < explicit flags, with unknown keys rejected."""
    by_dest = {arg.dest: arg for arg in cmd.args}
    resolved = {arg.dest: arg.kwargs.get("default") for arg in cmd.args}
    config_path = explicit.pop("config", None)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise UsageError(f"--config: no file at {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise UsageError(f"--config: {path} is not valid JSON ({e})")
        if not isinstance(loaded, dict):
            raise UsageError(f"--config: {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(by_dest))
        if unknown:
            raise UsageError(
                f"--config: unknown keys {unknown} for command {cmd.name!r}"
            )
        for key, value in loaded.items():
            caster = by_dest[key].kwargs.get("type")
            choices = by_dest[key].kwargs.get("choices")
            if caster is not None and value is not None:
                try:
                    value = caster(value)
                except (TypeError, ValueError):
                    raise UsageError(f"--config: key {key!r} has invalid value {value!r}")
            if choices is not None and value not in choices:
                raise UsageError(
                    f"--config: key {key!r} must be one of {list(choices)}"
                )
            resolved[key] = value
    resolved.update(explicit)
    missing = [
        by_dest[d].flag for d, arg in by_dest.items()
        if arg.required and resolved.get(d) is None
    ]
    if missing:
        raise UsageError(f"missing required flags: {', '.join(sorted(missing))}")
    return resolved


# ---------------------------------------------------------------------------
# Shared command plumbing
# ---------------------------------------------------------------------------

def _require_file(path_str: str, flag: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise UsageError(f"{flag}: no file at {path}")
    return path


def _load_model(ckpt_flag_value: str):
    path = _require_file(ckpt_flag_value, "--ckpt")
    model, info = load_checkpoint(path)
    model.eval()
    return model, info, _sha256_file(path)


def _condition_from_flags(resolved, model) -> object:
    text, action = resolved.get("text"), resolved.get("action")
    if text is not None and action is not None:
        raise UsageError("--text and --action are mutually exclusive")
    if text is not None:
        return TextCondition(text)
    if action is not None:
        num_classes = model.config.num_classes
        if not (0 <= int(action) < max(num_classes, 1)):
            raise UsageError(
                f"--action: class {action} outside 0..{num_classes - 1} "
                "for this checkpoint"
            )
        return ActionCondition(int(action))
    return NullCondition()


def _checkpoint_skeleton(info, flag: str = "--ckpt"):
    skeleton = info.get("skeleton")
    if skeleton is None:
        raise ValidationError(
            f"{flag}: checkpoint stores no skeleton; cannot write motion files"
        )
    return skeleton


def _render_outputs(motions, skeleton, out_dir: Path, fmt: str):
    style = RenderStyle()
    render_dir = out_dir / "renders"
    for i, motion in enumerate(motions):
        target = (
            render_dir / f"sample_{i:04d}"
            if fmt == "png"
            else render_dir / f"sample_{i:04d}.{fmt}"
        )
        render_motion(motion, skeleton, target, style=style, fmt=fmt)


def _finish_manifest(command, argv, resolved, out_dir, started, *,
                     corpus_hash=None, checkpoint_hash=None, seeds=None):
    manifest = RunManifest(
        command=command,
        argv=tuple(argv),
        resolved_config=dict(resolved),
        seeds={"torch_num_threads": torch.get_num_threads(), **(seeds or {})},
        corpus_hash=corpus_hash,
        checkpoint_hash=checkpoint_hash,
        started_at=started,
        finished_at=_utc_now(),
    )
    return manifest.save(out_dir)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(resolved, argv) -> int:
    started = _utc_now()
    families = tuple(
        canonical_family(f) for f in resolved["families"].split(",") if f.strip()
    )
    unknown = [f for f in families if f not in FAMILY_NAMES]
    if unknown:
        raise UsageError(
            f"--families: unknown motion families {unknown}; "
            f"choose from {list(FAMILY_NAMES)}"
        )
    config = CorpusConfig(
        families=families,
        per_family=resolved["per_family"],
        min_frames=resolved["min_frames"],
        max_frames=resolved["max_frames"],
        fps=resolved["fps"],
        test_fraction=resolved["test_fraction"],
    )
    dataset = generate_procedural_corpus(config, seed=resolved["seed"])
    out_dir = Path(resolved["out"])
    save_dataset(
        dataset, out_dir,
        extra={"corpus_config": config.to_json(), "seed": resolved["seed"]},
    )
    corpus_hash = dataset_fingerprint(out_dir)
    _finish_manifest(
        "gen-corpus", argv, resolved, out_dir, started,
        corpus_hash=corpus_hash, seeds={"seed": resolved["seed"]},
    )
    print(f"wrote {len(dataset.motions)} clips across {len(families)} families "
          f"to {out_dir} (corpus {corpus_hash[:12]})")
    return 0


def _train_model_config(resolved, dataset) -> DenoiserConfig:
    cond = {"text": "text", "action": "action", "none": "unconditional"}[
        resolved["cond"]
    ]
    return DenoiserConfig(
        feature_dim=dataset.layout.feature_dim,
        latent_dim=resolved["latent_dim"],
        num_layers=resolved["layers"],
        num_heads=resolved["heads"],
        ff_dim=resolved["ff_dim"],
        dropout=resolved["dropout"],
        max_frames=resolved["max_frames"],
        condition_mode=cond,
        num_classes=dataset.num_classes if cond == "action" else 0,
        num_steps=resolved["diffusion_steps"],
    )


def cmd_train(resolved, argv) -> int:
    started = _utc_now()
    data_dir = Path(resolved["data"])
    dataset = load_dataset(data_dir)
    model = MotionDenoiser(_train_model_config(resolved, dataset))
    schedule = make_cosine_schedule(resolved["diffusion_steps"])
    train_config = TrainConfig(
        total_steps=resolved["steps"],
        batch_size=resolved["batch_size"],
        learning_rate=resolved["lr"],
        cfg_mask_prob=resolved["cfg_mask_prob"],
        seed=resolved["seed"],
        checkpoint_interval=resolved["ckpt_interval"],
        log_interval=resolved["log_interval"],
        loss_weights=LossWeights(
            lambda_pos=resolved["lambda_pos"],
            lambda_vel=resolved["lambda_vel"],
            lambda_foot=resolved["lambda_foot"],
        ),
    )
    out_dir = Path(resolved["out"])
    result = train(model, dataset, schedule, train_config, out_dir)
    _finish_manifest(
        "train", argv, resolved, out_dir, started,
        corpus_hash=dataset_fingerprint(data_dir),
        checkpoint_hash=_sha256_file(result.last_checkpoint),
        seeds={"seed": resolved["seed"]},
    )
    final = {k: round(v, 6) for k, v in result.final_losses.items()}
    print(f"trained {result.steps} steps -> {result.last_checkpoint} "
          f"(final losses {final})")
    return 0


def cmd_sample(resolved, argv) -> int:
    started = _utc_now()
    model, info, ckpt_hash = _load_model(resolved["ckpt"])
    if resolved["n"] < 1:
        raise UsageError("--n must be positive")
    condition = _condition_from_flags(resolved, model)
    length = resolved["length"] or min(model.max_frames, 60)
    schedule = make_cosine_schedule(model.config.num_steps)
    rng = torch.Generator().manual_seed(resolved["seed"])
    motions = sample_batch(
        model,
        [condition] * resolved["n"],
        [length] * resolved["n"],
        schedule,
        guidance_scale=resolved["scale"],
        rng=rng,
    )
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    skeleton = _checkpoint_skeleton(info)
    for i, motion in enumerate(motions):
        save_motion(
            out_dir / f"sample_{i:04d}.motn",
            MotionFile(
                motion=motion,
                skeleton=skeleton,
                class_id=resolved.get("action"),
                captions=(resolved["text"],) if resolved.get("text") else (),
            ),
        )
    if resolved["render"] != "none":
        _render_outputs(motions, skeleton, out_dir, resolved["render"])
    _finish_manifest(
        "sample", argv, resolved, out_dir, started,
        checkpoint_hash=ckpt_hash, seeds={"seed": resolved["seed"]},
    )
    print(f"sampled {len(motions)} motion(s) of {length} frames "
          f"at scale {resolved['scale']} -> {out_dir}")
    return 0


def cmd_edit(resolved, argv) -> int:
    started = _utc_now()
    model, info, ckpt_hash = _load_model(resolved["ckpt"])
    ref_path = _require_file(resolved["ref"], "--ref")
    ref = load_motion(ref_path)
    skeleton = _checkpoint_skeleton(info)
    if ref.skeleton.to_json() != skeleton.to_json():
        raise ValidationError(
            "--ref: reference skeleton differs from the checkpoint's skeleton"
        )
    layout = FeatureLayout.for_skeleton(skeleton)
    if resolved["mask_json"] is not None:
        mask_spec = json.loads(
            _require_file(resolved["mask_json"], "--mask-json").read_text()
        )
        mask = edit_mask_from_json(mask_spec, ref.motion.num_frames, skeleton)
    else:
        mask = make_preset_mask(
            resolved["preset"],
            ref.motion.num_frames,
            skeleton,
            layout=layout,
            fix_root=not resolved["free_root"],
            prefix_frac=resolved["prefix_frac"],
            suffix_frac=resolved["suffix_frac"],
        )
    condition = _condition_from_flags(resolved, model)
    rng = torch.Generator().manual_seed(resolved["seed"])
    edited = edit(
        model,
        make_cosine_schedule(model.config.num_steps),
        EditSpec(reference=ref.motion, mask=mask),
        condition=condition,
        guidance_scale=resolved["scale"],
        rng=rng,
    )
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    save_motion(
        out_dir / "edited.motn",
        MotionFile(
            motion=edited,
            skeleton=skeleton,
            class_id=resolved.get("action"),
            captions=(resolved["text"],) if resolved.get("text") else (),
        ),
    )
    if resolved["render"] != "none":
        _render_outputs([edited], skeleton, out_dir, resolved["render"])
    _finish_manifest(
        "edit", argv, resolved, out_dir, started,
        checkpoint_hash=ckpt_hash, seeds={"seed": resolved["seed"]},
    )
    observed = int(mask.observed.sum())
    print(f"edited {ref_path.name} with {resolved['mask_json'] or resolved['preset']} "
          f"({observed} observed entries) -> {out_dir / 'edited.motn'}")
    return 0


def _eval_setup(resolved):
    """Load model + dataset and fit the extractors the metrics run in."""
    model, info, ckpt_hash = _load_model(resolved["ckpt"])
    data_dir = Path(resolved["data"])
    dataset = load_dataset(data_dir)
    classifier, clf_info = train_motion_classifier(
        dataset,
        ExtractorConfig(epochs=resolved["extractor_epochs"], seed=resolved["seed"]),
    )
    embedder = None
    if model.config.condition_mode == "text":
        embedder, _ = train_joint_embedder(
            dataset,
            EmbedderConfig(epochs=resolved["embedder_epochs"], seed=resolved["seed"]),
        )
    eval_config = EvalConfig(
        replications=resolved["reps"],
        samples_per_replication=resolved["samples"],
        guidance_scale=resolved.get("scale", 2.5),
        seed=resolved["seed"],
        multimodality_conditions=resolved["mm_conditions"],
        sample_batch_size=resolved["batch_size"],
        split=resolved["split"],
    )
    schedule = make_cosine_schedule(model.config.num_steps)
    return model, dataset, schedule, classifier, embedder, eval_config, {
        "checkpoint_hash": ckpt_hash,
        "corpus_hash": dataset_fingerprint(data_dir),
        "classifier_info": clf_info,
    }


def cmd_eval(resolved, argv) -> int:
    started = _utc_now()
    model, dataset, schedule, classifier, embedder, eval_config, meta = (
        _eval_setup(resolved)
    )
    report = evaluate_model(
        model, dataset, schedule, eval_config,
        classifier=classifier, embedder=embedder,
    )
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(report.to_json())
    payload["classifier_info"] = meta["classifier_info"]
    (out_dir / "report.json").write_bytes(_canonical_json_bytes(payload))
    (out_dir / "report.txt").write_text(report.render_table() + "\n")
    _finish_manifest(
        "eval", argv, resolved, out_dir, started,
        corpus_hash=meta["corpus_hash"],
        checkpoint_hash=meta["checkpoint_hash"],
        seeds={"seed": resolved["seed"]},
    )
    print(report.render_table())
    print(f"report -> {out_dir / 'report.json'}")
    return 0


def cmd_sweep(resolved, argv) -> int:
    started = _utc_now()
    model, dataset, schedule, classifier, embedder, eval_config, meta = (
        _eval_setup(resolved)
    )
    try:
        scales = [float(s) for s in resolved["scales"].split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--scales: could not parse {resolved['scales']!r}")
    sweep = guidance_sweep(
        model, dataset, schedule, scales, eval_config,
        classifier=classifier, embedder=embedder,
    )
    out_dir = Path(resolved["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.json").write_bytes(_canonical_json_bytes(sweep.to_json()))
    (out_dir / "sweep.csv").write_text(sweep.to_wide_csv())
    (out_dir / "sweep_long.csv").write_text(sweep.to_csv())
    _finish_manifest(
        "sweep", argv, resolved, out_dir, started,
        corpus_hash=meta["corpus_hash"],
        checkpoint_hash=meta["checkpoint_hash"],
        seeds={"seed": resolved["seed"]},
    )
    print(sweep.render_table())
    print(f"sweep -> {out_dir / 'sweep.csv'}")
    return 0


def cmd_render(resolved, argv) -> int:
    mf = load_motion(_require_file(resolved["motion"], "--motion"))
    style = RenderStyle(
        width=resolved["width"],
        height=resolved["height"],
        plane=resolved["plane"],
        trail=resolved["trail"],
        fps_override=resolved["fps"],
    )
    written = render_motion(
        mf.motion, mf.skeleton, resolved["out"], style=style, fmt=resolved["fmt"]
    )
    count = len(written) if isinstance(written, list) else 1
    print(f"rendered {mf.motion.num_frames} frames ({count} file(s)) "
          f"-> {resolved['out']}")
    return 0


def cmd_export(resolved, argv) -> int:
    mf = load_motion(_require_file(resolved["motion"], "--motion"))
    payload = {
        "fps": float(mf.motion.fps),
        "skeleton": mf.skeleton.to_json(),
        "num_frames": mf.motion.num_frames,
        "class_id": mf.class_id,
        "captions": list(mf.captions),
    }
    if resolved["what"] in ("features", "both"):
        payload["features"] = [
            [float(v) for v in row] for row in mf.motion.features
        ]
    if resolved["what"] in ("positions", "both"):
        payload["positions"] = [
            [[float(v) for v in joint] for joint in frame]
            for frame in positions_from_motion(mf.motion, mf.skeleton)
        ]
    out_path = Path(resolved["out"])
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(_canonical_json_bytes(payload))
    print(f"exported {resolved['what']} -> {out_path}")
    return 0


def cmd_replay(resolved, argv) -> int:
    manifest = RunManifest.load(resolved["manifest"])
    commands = {c.name: c for c in _commands()}
    if manifest.command not in commands or manifest.command == "replay":
        raise UsageError(f"--manifest: cannot replay command {manifest.command!r}")
    threads = manifest.seeds.get("torch_num_threads")
    if threads:
        torch.set_num_threads(int(threads))
    replay_resolved = dict(manifest.resolved_config)
    replay_resolved["out"] = resolved["out"]
    print(f"replaying {manifest.command} (tool {manifest.tool_version}) "
          f"into {resolved['out']}")
    return _DISPATCH[manifest.command](replay_resolved, argv)


_DISPATCH = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "render": cmd_render,
    "export": cmd_export,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _apply_thread_cap():
    raw = os.environ.get("MDM_NUM_THREADS")
    if raw is None:
        return
    try:
        threads = int(raw)
    except ValueError:
        raise UsageError(f"MDM_NUM_THREADS must be an integer, got {raw!r}")
    if threads < 1:
        raise UsageError("MDM_NUM_THREADS must be positive")
    torch.set_num_threads(threads)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        namespace = parser.parse_args(argv)
    except SystemExit as e:  # argparse already printed the message
        return int(e.code or 0)
    explicit = vars(namespace)
    command_name = explicit.pop("command")
    command = {c.name: c for c in _commands()}[command_name]
    try:
        _apply_thread_cap()
        resolved = _resolve_flags(command, explicit)
        return _DISPATCH[command_name](resolved, [command_name, *argv[1:]])
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValidationError, ShapeError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
