"""Stick-figure renderers for motion clips.

Joint positions are read straight from the feature channels, projected
orthographically onto a chosen plane, and drawn as bone segments: one PNG
per frame, an animated GIF, or a single self-animating SVG. An optional
trail ghosts earlier frames in lighter shades, so darker strokes always
mean later frames. Output bytes depend only on the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ValidationError
from .motion_data import FeatureLayout
from .skeleton import Skeleton

PLANES = {"xy": (0, 1), "zy": (2, 1), "xz": (0, 2)}
RENDER_FORMATS = ("png", "gif", "svg")


@dataclass(frozen=True)
class RenderStyle:
    width: int = 480
    height: int = 480
    margin: float = 0.08  # canvas fraction kept clear around the figure
    plane: str = "xy"  # front view; "zy" side view, "xz" top-down
    trail: int = 0  # how many earlier frames to ghost behind the pose
    line_width: int = 3
    joint_radius: int = 3
    background: tuple = (255, 255, 255)
    bone_color: tuple = (20, 24, 90)
    fps_override: float = 0.0  # >0 replaces the motion's own playback rate

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ValidationError("render canvas must be at least 32x32")
        if self.plane not in PLANES:
            raise ValidationError(f"plane must be one of {sorted(PLANES)}")
        if self.trail < 0:
            raise ValidationError("trail must be non-negative")
        if not (0.0 <= self.margin < 0.5):
            raise ValidationError("margin must lie in [0, 0.5)")
        if self.line_width < 1 or self.joint_radius < 0:
            raise ValidationError("line_width >= 1 and joint_radius >= 0 required")
        for channel in (*self.background, *self.bone_color):
            if not (0 <= int(channel) <= 255):
                raise ValidationError("colors are 8-bit RGB tuples")
        if self.fps_override < 0:
            raise ValidationError("fps_override must be non-negative")

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "margin": self.margin,
            "plane": self.plane,
            "trail": self.trail,
            "line_width": self.line_width,
            "joint_radius": self.joint_radius,
            "background": list(self.background),
            "bone_color": list(self.bone_color),
            "fps_override": self.fps_override,
        }

    @classmethod
    def from_json(cls, data: dict) -> "RenderStyle":
        kwargs = dict(data)
        for key in ("background", "bone_color"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def positions_from_motion(motion, skeleton: Skeleton) -> np.ndarray:
    """Decode the per-joint position channels, (frames, joints, 3)."""
    layout = FeatureLayout.for_skeleton(skeleton)
    feats = np.asarray(motion.features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != layout.feature_dim:
        raise ValidationError(
            f"features must be (frames, {layout.feature_dim}), got {feats.shape}"
        )
    pos = feats[:, layout.positions].reshape(feats.shape[0], skeleton.num_joints, 3)
    if not np.isfinite(pos).all():
        raise ValidationError("motion positions contain non-finite values")
    return pos


def bone_pairs(skeleton: Skeleton):
    """(child, parent) joint index pairs; one segment per non-root joint."""
    return tuple(
        (child, parent)
        for child, parent in enumerate(skeleton.parent_index)
        if parent is not None
    )


def _project(positions: np.ndarray, plane: str) -> np.ndarray:
    a, b = PLANES[plane]
    return positions[..., (a, b)]


def _fit_to_canvas(points: np.ndarray, style: RenderStyle) -> np.ndarray:
    """Map world 2-D points into pixel coordinates, preserving aspect ratio."""
    lo = points.reshape(-1, 2).min(axis=0)
    hi = points.reshape(-1, 2).max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    usable = np.array(
        [style.width * (1 - 2 * style.margin), style.height * (1 - 2 * style.margin)]
    )
    scale = float(np.min(usable / span))
    center = (lo + hi) / 2.0
    canvas_center = np.array([style.width / 2.0, style.height / 2.0])
    pixels = (points - center) * scale + canvas_center
    pixels[..., 1] = style.height - pixels[..., 1]  # image y grows downward
    return pixels


def _fade_color(style: RenderStyle, ghost_rank: int, trail: int) -> tuple:
    """Blend toward the background; older ghosts come out lighter."""
    keep = (trail - ghost_rank + 1) / (trail + 1)
    return tuple(
        int(round(bg + (fg - bg) * keep))
        for fg, bg in zip(style.bone_color, style.background)
    )


def _frame_layers(pixels: np.ndarray, index: int, style: RenderStyle):
    """(color, frame pixel array) pairs to draw, oldest ghost first."""
    layers = []
    for rank in range(style.trail, 0, -1):
        j = index - rank
        if j >= 0:
            layers.append((_fade_color(style, rank, style.trail), pixels[j]))
    layers.append((style.bone_color, pixels[index]))
    return layers


def _draw_frame(pixels: np.ndarray, index: int, skeleton: Skeleton,
                style: RenderStyle) -> Image.Image:
    image = Image.new("RGB", (style.width, style.height), style.background)
    draw = ImageDraw.Draw(image)
    pairs = bone_pairs(skeleton)
    for color, pts in _frame_layers(pixels, index, style):
        for child, parent in pairs:
            draw.line(
                [tuple(pts[parent]), tuple(pts[child])],
                fill=color,
                width=style.line_width,
            )
        if style.joint_radius > 0:
            r = style.joint_radius
            for x, y in pts:
                draw.ellipse([x - r, y - r, x + r, y + r], fill=color)
    return image


def _playback_fps(motion, style: RenderStyle) -> float:
    return style.fps_override if style.fps_override > 0 else float(motion.fps)


def _render_frames(motion, skeleton: Skeleton, style: RenderStyle):
    positions = positions_from_motion(motion, skeleton)
    pixels = _fit_to_canvas(_project(positions, style.plane), style)
    return [
        _draw_frame(pixels, i, skeleton, style) for i in range(positions.shape[0])
    ], pixels


def _svg_frame_group(pts: np.ndarray, index: int, num_frames: int,
                     skeleton: Skeleton, style: RenderStyle, total: float,
                     pixels: np.ndarray) -> str:
    def lines_for(color: tuple, frame_pts: np.ndarray) -> list:
        rgb = f"rgb({color[0]},{color[1]},{color[2]})"
        out = []
        for child, parent in bone_pairs(skeleton):
            x1, y1 = frame_pts[parent]
            x2, y2 = frame_pts[child]
            out.append(
                f'    <line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" '
                f'y2="{y2:.2f}" stroke="{rgb}" stroke-width="{style.line_width}" '
                f'stroke-linecap="round"/>'
            )
        if style.joint_radius > 0:
            for x, y in frame_pts:
                out.append(
                    f'    <circle cx="{x:.2f}" cy="{y:.2f}" '
                    f'r="{style.joint_radius}" fill="{rgb}"/>'
                )
        return out

    if index == 0:
        values, key_times = "visible;hidden", f"0;{1 / num_frames:.6f}"
    elif index == num_frames - 1:
        values, key_times = "hidden;visible", f"0;{index / num_frames:.6f}"
    else:
        values = "hidden;visible;hidden"
        key_times = f"0;{index / num_frames:.6f};{(index + 1) / num_frames:.6f}"
    body = []
    for color, frame_pts in _frame_layers(pixels, index, style):
        body.extend(lines_for(color, frame_pts))
    initial = "visible" if index == 0 else "hidden"
    head = (
        f'  <g class="frame" visibility="{initial}">\n'
        f'    <animate attributeName="visibility" values="{values}" '
        f'keyTimes="{key_times}" calcMode="discrete" dur="{total:.6f}s" '
        f'repeatCount="indefinite"/>'
    )
    return head + "\n" + "\n".join(body) + "\n  </g>"


def render_svg(motion, skeleton: Skeleton, out_path, style: RenderStyle) -> Path:
    """One self-animating SVG: every frame is a group toggled on in turn."""
    positions = positions_from_motion(motion, skeleton)
    pixels = _fit_to_canvas(_project(positions, style.plane), style)
    n = positions.shape[0]
    total = n / _playback_fps(motion, style)
    bg = f"rgb({style.background[0]},{style.background[1]},{style.background[2]})"
    groups = [
        _svg_frame_group(pixels[i], i, n, skeleton, style, total, pixels)
        for i in range(n)
    ]
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{style.width}" '
        f'height="{style.height}" viewBox="0 0 {style.width} {style.height}">\n'
        f'  <rect width="100%" height="100%" fill="{bg}"/>\n'
        + "\n".join(groups)
        + "\n</svg>\n"
    )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg, encoding="utf-8")
    return out_path


def render_png_frames(motion, skeleton: Skeleton, out_dir, style: RenderStyle):
    """frame_00000.png ... under out_dir; returns the written paths."""
    frames, _ = _render_frames(motion, skeleton, style)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, image in enumerate(frames):
        path = out_dir / f"frame_{i:05d}.png"
        image.save(path, format="PNG")
        paths.append(path)
    return paths


def render_gif(motion, skeleton: Skeleton, out_path, style: RenderStyle) -> Path:
    frames, _ = _render_frames(motion, skeleton, style)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    duration_ms = int(round(1000.0 / _playback_fps(motion, style)))
    frames[0].save(
        out_path,
        format="GIF",
        save_all=True,
        append_images=frames[1:],
        duration=duration_ms,
        loop=0,
    )
    return out_path


def render_motion(motion, skeleton: Skeleton, out_path,
                  style: RenderStyle = RenderStyle(), fmt: str = None):
    """Render a clip as a PNG frame sequence, an animated GIF, or an SVG.

    fmt defaults to the output suffix; "png" treats out_path as a directory
    of per-frame images and returns their paths, the other formats return
    the single file written.
    """
    if fmt is None:
        suffix = Path(out_path).suffix.lower().lstrip(".")
        fmt = suffix if suffix else "png"
    if fmt not in RENDER_FORMATS:
        raise ValidationError(f"render format must be one of {RENDER_FORMATS}")
    if fmt == "png":
        return render_png_frames(motion, skeleton, out_path, style)
    if fmt == "gif":
        return render_gif(motion, skeleton, out_path, style)
    return render_svg(motion, skeleton, out_path, style)
