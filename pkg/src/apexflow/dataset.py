"""Manifest loading, emotion-label remapping, and frame-sequence decoding.

A manifest is a UTF-8 JSON array of objects with keys `dataset`, `subject`,
`video`, `raw_label`, `onset`, `apex` (nullable), `offset`, `frame_dir`.
Frames are PNG or JPEG files whose lexicographic filename order is the
temporal order. Frame indices are 1-based throughout.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

from .imageops import bilinear_resize, rgb_to_gray

log = logging.getLogger(__name__)

# All sequences are normalized to this face size (rows x cols).
TARGET_HEIGHT = 170
TARGET_WIDTH = 140


class DatasetId(Enum):
    SMIC = "SMIC"
    CASME2 = "CASME2"
    SAMM = "SAMM"
    SYNTHETIC = "SYNTHETIC"


class EmotionClass(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    SURPRISE = 2


class ManifestError(ValueError):
    """Raised when a manifest file or one of its rows is invalid."""


class FrameLoadError(RuntimeError):
    """Raised when a frame directory cannot be decoded into a sequence."""


@dataclass(frozen=True)
class SampleRecord:
    """One labeled micro-expression clip."""

    dataset_id: DatasetId
    subject_id: str
    video_id: str
    raw_label: str
    label: EmotionClass
    onset_index: int
    apex_index: int | None
    offset_index: int
    frame_dir: Path


# Native-label remapping into the three-class scheme. `None` marks labels
# that are documented for the dataset but excluded from experiments.
_NEG = EmotionClass.NEGATIVE
_POS = EmotionClass.POSITIVE
_SUR = EmotionClass.SURPRISE

_LABEL_MAPS: dict[DatasetId, dict[str, EmotionClass | None]] = {
    DatasetId.SMIC: {"negative": _NEG, "positive": _POS, "surprise": _SUR},
    DatasetId.CASME2: {
        "disgust": _NEG,
        "repression": _NEG,
        "happiness": _POS,
        "surprise": _SUR,
        "others": None,
        "sadness": None,
        "fear": None,
    },
    DatasetId.SAMM: {
        "anger": _NEG,
        "contempt": _NEG,
        "disgust": _NEG,
        "fear": _NEG,
        "sadness": _NEG,
        "happiness": _POS,
        "surprise": _SUR,
        "other": None,
    },
    DatasetId.SYNTHETIC: {"negative": _NEG, "positive": _POS, "surprise": _SUR},
}


def remap_emotion(raw_label: str, dataset_id: DatasetId) -> EmotionClass | None:
    """Map a dataset-native emotion label to the three-class scheme.

    Returns None for labels that are valid for the dataset but excluded
    from the experiments. Raises ManifestError for unknown labels.
    """
    table = _LABEL_MAPS[dataset_id]
    key = raw_label.strip().lower()
    if key not in table:
        raise ManifestError(f"unknown label {raw_label!r} for dataset {dataset_id.value}")
    return table[key]


def load_manifest(path: str | Path) -> list[SampleRecord]:
    """Parse and validate a manifest file into SampleRecords.

    Rows whose label remaps to the excluded category are dropped (the count
    is logged). Row order of the remaining records is preserved.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    try:
        rows = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {path}: {exc}") from exc
    if not isinstance(rows, list):
        raise ManifestError(f"manifest must be a JSON array: {path}")

    records: list[SampleRecord] = []
    n_excluded = 0
    for i, row in enumerate(rows, start=1):
        record = _parse_row(row, i)
        if record is None:
            n_excluded += 1
        else:
            records.append(record)
    if n_excluded:
        log.info("manifest %s: dropped %d excluded-label rows", path, n_excluded)
    return records


def _parse_row(row: object, row_num: int) -> SampleRecord | None:
    if not isinstance(row, dict):
        raise ManifestError(f"row {row_num}: expected an object")
    try:
        dataset_raw = row["dataset"]
        subject = row["subject"]
        video = row["video"]
        raw_label = row["raw_label"]
        onset = row["onset"]
        offset = row["offset"]
        frame_dir = row["frame_dir"]
    except KeyError as exc:
        raise ManifestError(f"row {row_num}: missing key {exc.args[0]!r}") from exc
    apex = row.get("apex")

    try:
        dataset_id = DatasetId(str(dataset_raw).upper())
    except ValueError:
        raise ManifestError(f"row {row_num}: unknown dataset {dataset_raw!r}") from None
    for name, value in (("onset", onset), ("offset", offset)):
        if not isinstance(value, int):
            raise ManifestError(f"row {row_num}: {name} must be an integer")
    if apex is not None and not isinstance(apex, int):
        raise ManifestError(f"row {row_num}: apex must be an integer or null")

    if onset < 1:
        raise ManifestError(f"row {row_num}: onset {onset} must be >= 1")
    if onset > offset:
        raise ManifestError(f"row {row_num}: onset {onset} > offset {offset}")
    if apex is not None and not (onset <= apex <= offset):
        raise ManifestError(
            f"row {row_num}: apex {apex} outside [onset={onset}, offset={offset}]"
        )
    if dataset_id is DatasetId.SMIC and apex is not None:
        raise ManifestError(f"row {row_num}: SMIC rows must not carry an apex index")
    if dataset_id in (DatasetId.CASME2, DatasetId.SAMM) and apex is None:
        raise ManifestError(f"row {row_num}: {dataset_id.value} rows require an apex index")

    label = remap_emotion(str(raw_label), dataset_id)
    if label is None:
        return None
    return SampleRecord(
        dataset_id=dataset_id,
        subject_id=str(subject),
        video_id=str(video),
        raw_label=str(raw_label),
        label=label,
        onset_index=onset,
        apex_index=apex,
        offset_index=offset,
        frame_dir=Path(frame_dir),
    )


def write_manifest(records: list[SampleRecord], path: str | Path) -> None:
    """Serialize records back to the manifest format (round-trips load_manifest)."""
    rows = [
        {
            "dataset": r.dataset_id.value,
            "subject": r.subject_id,
            "video": r.video_id,
            "raw_label": r.raw_label,
            "onset": r.onset_index,
            "apex": r.apex_index,
            "offset": r.offset_index,
            "frame_dir": str(r.frame_dir),
        }
        for r in records
    ]
    Path(path).write_text(json.dumps(rows, indent=2), encoding="utf-8")


FRAME_SUFFIXES = {".png", ".jpg", ".jpeg"}


def list_frame_files(frame_dir: str | Path) -> list[Path]:
    """Frame files of a directory in lexicographic (= temporal) order."""
    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise FrameLoadError(f"frame directory not found: {frame_dir}")
    return sorted(p for p in frame_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def load_frame(path: str | Path) -> np.ndarray:
    """Decode one image file to grayscale float64 in [0, 1] at native size."""
    try:
        with Image.open(path) as im:
            if im.mode == "P":
                im = im.convert("RGB")
            arr = np.asarray(im)
    except OSError as exc:
        raise FrameLoadError(f"cannot decode frame {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16:
        scale = 65535.0
    else:
        raise FrameLoadError(f"unsupported pixel type {arr.dtype} in {path}")
    values = arr.astype(np.float64) / scale
    if values.ndim == 3:
        values = rgb_to_gray(values)
    return np.clip(values, 0.0, 1.0)


def load_sequence(record: SampleRecord) -> np.ndarray:
    """Load frames 1..offset_index of a record as a (count, 170, 140) array.

    Frames are decoded, converted to grayscale, scaled to [0, 1], and
    bilinearly resized to the target face size when their dimensions differ.
    """
    files = list_frame_files(record.frame_dir)
    if len(files) < record.offset_index:
        raise FrameLoadError(
            f"{record.video_id}: frame directory {record.frame_dir} has "
            f"{len(files)} frames, offset index is {record.offset_index}"
        )
    frames = []
    for path in files[: record.offset_index]:
        img = load_frame(path)
        if img.shape != (TARGET_HEIGHT, TARGET_WIDTH):
            img = bilinear_resize(img, TARGET_HEIGHT, TARGET_WIDTH)
        frames.append(img)
    return np.stack(frames)


def class_counts(records: list[SampleRecord]) -> dict[EmotionClass, int]:
    """Exact per-class record counts (all three classes always present)."""
    counts = {cls: 0 for cls in EmotionClass}
    for record in records:
        counts[record.label] += 1
    return counts
