"""Stick-figure renderers: frame counts, determinism, projection geometry,
trail ghosting, and error paths."""
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

from motiondiff.errors import ValidationError
from motiondiff.rendering import (
    RenderStyle,
    bone_pairs,
    positions_from_motion,
    render_motion,
)

from _fixtures import chain_skeleton, smooth_motion


@pytest.fixture(scope="module")
def clip():
    return smooth_motion(chain_skeleton(), frames=6, seed=3)


def test_png_sequence_one_file_per_frame(clip, tmp_path):
    paths = render_motion(clip, chain_skeleton(), tmp_path / "frames", fmt="png")
    assert len(paths) == clip.num_frames
    assert all(p.exists() for p in paths)
    image = Image.open(paths[0])
    assert image.size == (480, 480)


def test_gif_has_all_frames_and_fps_duration(clip, tmp_path):
    style = RenderStyle(width=64, height=64)
    path = render_motion(clip, chain_skeleton(), tmp_path / "clip.gif", style=style)
    with Image.open(path) as gif:
        assert gif.n_frames == clip.num_frames
        assert gif.info["duration"] == int(round(1000.0 / clip.fps))


def test_svg_frame_groups_and_segment_count(clip, tmp_path):
    skel = chain_skeleton()
    path = render_motion(clip, skel, tmp_path / "clip.svg")
    text = path.read_text()
    assert text.count('<g class="frame"') == clip.num_frames
    # each frame draws one bone segment per non-root joint
    per_frame = text.count("<line") / clip.num_frames
    assert per_frame == skel.num_joints - 1
    assert len(bone_pairs(skel)) == skel.num_joints - 1


def test_renders_are_byte_deterministic(clip, tmp_path):
    skel = chain_skeleton()
    style = RenderStyle(width=64, height=64, trail=2)
    outputs = {}
    for run in ("a", "b"):
        base = tmp_path / run
        png = render_motion(clip, skel, base / "frames", style=style, fmt="png")
        gif = render_motion(clip, skel, base / "clip.gif", style=style)
        svg = render_motion(clip, skel, base / "clip.svg", style=style)
        outputs[run] = (
            [p.read_bytes() for p in png],
            gif.read_bytes(),
            svg.read_bytes(),
        )
    assert outputs["a"] == outputs["b"]


def test_trail_ghosts_earlier_frames(clip, tmp_path):
    skel = chain_skeleton()
    plain = render_motion(clip, skel, tmp_path / "plain.svg",
                          style=RenderStyle(trail=0))
    trailed = render_motion(clip, skel, tmp_path / "trail.svg",
                            style=RenderStyle(trail=2))
    segments = skel.num_joints - 1
    n = clip.num_frames
    assert plain.read_text().count("<line") == n * segments
    # frame 0 has no ghosts, frame 1 one, later frames two each
    expected = segments * (1 + 2 + 3 * (n - 2))
    assert trailed.read_text().count("<line") == expected


def test_projection_plane_changes_output(clip, tmp_path):
    skel = chain_skeleton()
    front = render_motion(clip, skel, tmp_path / "front.svg",
                          style=RenderStyle(plane="xy"))
    side = render_motion(clip, skel, tmp_path / "side.svg",
                         style=RenderStyle(plane="zy"))
    assert front.read_bytes() != side.read_bytes()


def test_figure_stays_inside_canvas(clip, tmp_path):
    style = RenderStyle(width=100, height=80, margin=0.1, joint_radius=0,
                        line_width=1)
    paths = render_motion(clip, chain_skeleton(), tmp_path / "f", style=style,
                          fmt="png")
    for p in paths:
        arr = np.asarray(Image.open(p))
        border = np.concatenate(
            [arr[0].reshape(-1, 3), arr[-1].reshape(-1, 3),
             arr[:, 0].reshape(-1, 3), arr[:, -1].reshape(-1, 3)]
        )
        assert (border == 255).all()  # margin keeps strokes off the border


def test_non_finite_positions_rejected():
    skel = chain_skeleton()
    feats = np.zeros((4, 34))
    feats[2, 5] = np.nan
    fake = SimpleNamespace(features=feats, fps=20.0)
    with pytest.raises(ValidationError):
        positions_from_motion(fake, skel)
    wrong_width = SimpleNamespace(features=np.zeros((4, 7)), fps=20.0)
    with pytest.raises(ValidationError):
        positions_from_motion(wrong_width, skel)


def test_style_and_format_validation(clip, tmp_path):
    with pytest.raises(ValidationError):
        RenderStyle(width=8)
    with pytest.raises(ValidationError):
        RenderStyle(plane="yz")
    with pytest.raises(ValidationError):
        RenderStyle(trail=-1)
    with pytest.raises(ValidationError):
        RenderStyle(margin=0.5)
    with pytest.raises(ValidationError):
        render_motion(clip, chain_skeleton(), tmp_path / "x.bmp", fmt="bmp")
    style = RenderStyle()
    assert RenderStyle.from_json(style.to_json()) == style
