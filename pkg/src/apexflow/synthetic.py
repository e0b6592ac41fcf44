"""Deterministic synthetic corpus: textured faces with class-coded local motion.

Each video warps a smooth per-subject texture by a displacement bump in the
mouth region whose direction encodes the class, while a textureless dark
"mouth opening" ellipse grows with the same temporal profile. The profile is
a tent peaking at a planted apex frame: the opening's area gives the LBP
difference signal a monotone rise to the apex, and the directional motion
makes the flow inputs separable by class. Every byte is a function of the
seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .dataset import (
    TARGET_HEIGHT,
    TARGET_WIDTH,
    DatasetId,
    EmotionClass,
    SampleRecord,
    write_manifest,
)
from .imageops import bilinear_sample

# Unit motion direction per class: right, down, diagonal up-left. The sign
# patterns are pairwise disjoint so the flow inputs separate cleanly.
CLASS_DIRECTIONS = {
    EmotionClass.NEGATIVE: (1.0, 0.0),
    EmotionClass.POSITIVE: (0.0, 1.0),
    EmotionClass.SURPRISE: (-np.sqrt(0.5), -np.sqrt(0.5)),
}

# Mouth-opening ellipse: fixed horizontal radius (fraction of width), the
# vertical radius grows with the motion profile up to this many pixels.
_OPENING_RX_FRAC = 0.10
_OPENING_RY_MAX = 8.0
_OPENING_SHADE = 0.12


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 12
    videos_per_subject: int = 6
    n_frames: int = 30
    height: int = TARGET_HEIGHT
    width: int = TARGET_WIDTH
    peak_displacement: float = 3.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_frames < 8:
            raise ValueError("n_frames must be >= 8")
        if self.n_subjects < 1 or self.videos_per_subject < 1:
            raise ValueError("corpus must contain at least one video")


@dataclass(frozen=True)
class SynthTruth:
    video_id: str
    subject_id: str
    label: EmotionClass
    apex_index: int
    direction: tuple[float, float]
    peak_scale: float


def make_base_face(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth random texture in [0.25, 0.75] standing in for a face crop."""
    noise = rng.random((height, width))
    tex = gaussian_filter(noise, sigma=3.0, mode="reflect")
    lo, hi = tex.min(), tex.max()
    return 0.25 + 0.5 * (tex - lo) / (hi - lo)


def motion_window(height: int, width: int) -> np.ndarray:
    """Gaussian spatial envelope over the mouth region, unit peak."""
    ys, xs = np.mgrid[0:height, 0:width]
    cy, cx = 0.72 * height, 0.5 * width
    sigma = min(height, width) / 5.0
    return np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma**2))


def apex_band(n_frames: int) -> tuple[int, int]:
    """Inclusive frame-index band the planted apex is drawn from.

    The apex stays in the middle of the clip so the release phase has room;
    an apex hard against the last frames starves the offset segment.
    """
    return max(2, n_frames // 3), (3 * n_frames) // 4


def displacement_profile(n_frames: int, apex_index: int, peak_scale: float) -> np.ndarray:
    """Tent profile: linear rise to the apex, linear release to 5% of peak."""
    if not 2 <= apex_index <= n_frames:
        raise ValueError("apex must lie inside the sequence")
    scale = np.empty(n_frames)
    for j in range(1, n_frames + 1):
        if j <= apex_index:
            scale[j - 1] = (j - 1) / (apex_index - 1)
        else:
            scale[j - 1] = 1.0 - 0.95 * (j - apex_index) / (n_frames - apex_index)
    return peak_scale * scale


def render_sequence(
    base: np.ndarray,
    direction: tuple[float, float],
    profile: np.ndarray,
) -> np.ndarray:
    """Render frames: windowed directional warp plus the growing mouth opening."""
    height, width = base.shape
    window = motion_window(height, width)
    grid_x, grid_y = np.meshgrid(
        np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64)
    )
    peak = max(profile.max(), 1e-12)
    cy, cx = 0.72 * height, 0.5 * width
    rx = _OPENING_RX_FRAC * width

    frames = np.empty((profile.size, height, width))
    for j, scale in enumerate(profile):
        xs = grid_x - scale * direction[0] * window
        ys = grid_y - scale * direction[1] * window
        warped = bilinear_sample(base, xs, ys)
        ry = max((scale / peak) * _OPENING_RY_MAX, 1e-6)
        ell = np.sqrt(((grid_x - cx) / rx) ** 2 + ((grid_y - cy) / ry) ** 2)
        alpha = np.clip(4.0 * (1.0 - ell), 0.0, 1.0)
        frames[j] = np.clip(warped * (1.0 - alpha) + alpha * _OPENING_SHADE, 0.0, 1.0)
    return frames


def synth_sequence(
    seed: int,
    n_frames: int = 30,
    height: int = TARGET_HEIGHT,
    width: int = TARGET_WIDTH,
    peak_displacement: float = 3.0,
) -> tuple[np.ndarray, int]:
    """One standalone sequence with a planted apex; returns (frames, apex)."""
    rng = np.random.default_rng(seed)
    base = make_base_face(rng, height, width)
    label = EmotionClass(int(rng.integers(0, 3)))
    lo, hi = apex_band(n_frames)
    apex = int(rng.integers(lo, hi + 1))
    scale = peak_displacement * (0.8 + 0.4 * rng.random())
    profile = displacement_profile(n_frames, apex, scale)
    return render_sequence(base, CLASS_DIRECTIONS[label], profile), apex


def generate_corpus(out_dir: str | Path, config: SynthConfig) -> tuple[Path, list[SynthTruth]]:
    """Write frames, manifest, and ground-truth sidecar; returns (manifest, truths).

    Videos alternate between carrying the apex index in the manifest and
    leaving it null, so downstream consumers exercise both the annotated and
    the spotting path.
    """
    out_dir = Path(out_dir)
    frames_root = out_dir / "frames"
    frames_root.mkdir(parents=True, exist_ok=True)

    records: list[SampleRecord] = []
    truths: list[SynthTruth] = []
    lo, hi = apex_band(config.n_frames)
    for s in range(config.n_subjects):
        subject_id = f"s{s + 1:02d}"
        base = make_base_face(
            np.random.default_rng([config.seed, s]), config.height, config.width
        )
        for v in range(config.videos_per_subject):
            rng = np.random.default_rng([config.seed, s, v])
            label = EmotionClass(v % 3)
            apex = int(rng.integers(lo, hi + 1))
            scale = config.peak_displacement * (0.8 + 0.4 * rng.random())
            profile = displacement_profile(config.n_frames, apex, scale)
            frames = render_sequence(base, CLASS_DIRECTIONS[label], profile)

            video_id = f"{subject_id}v{v + 1:02d}"
            frame_dir = frames_root / video_id
            frame_dir.mkdir(parents=True, exist_ok=True)
            for j in range(config.n_frames):
                img = np.clip(np.round(frames[j] * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(img).save(frame_dir / f"{j + 1:03d}.png")

            records.append(
                SampleRecord(
                    dataset_id=DatasetId.SYNTHETIC,
                    subject_id=subject_id,
                    video_id=video_id,
                    raw_label=label.name.lower(),
                    label=label,
                    onset_index=1,
                    apex_index=apex if v % 2 == 0 else None,
                    offset_index=config.n_frames,
                    frame_dir=frame_dir,
                )
            )
            truths.append(
                SynthTruth(
                    video_id=video_id,
                    subject_id=subject_id,
                    label=label,
                    apex_index=apex,
                    direction=CLASS_DIRECTIONS[label],
                    peak_scale=scale,
                )
            )

    manifest_path = out_dir / "manifest.json"
    write_manifest(records, manifest_path)
    truth_path = out_dir / "truth.json"
    truth_path.write_text(
        json.dumps(
            [
                {
                    "video": t.video_id,
                    "subject": t.subject_id,
                    "label": t.label.name.lower(),
                    "apex": t.apex_index,
                    "direction": list(t.direction),
                    "peak_scale": t.peak_scale,
                }
                for t in truths
            ],
            indent=2,
        ),
        encoding="utf-8",
    )
    return manifest_path, truths
