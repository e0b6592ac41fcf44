"""Shared generators: smooth texture pairs with known motion, unimodal signals,
and a Table-1-shaped record list for protocol tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from apexflow.dataset import DatasetId, SampleRecord


def blob_texture_pair(
    seed: int, height: int, width: int, dx: float, dy: float, n_blobs: int = 18
) -> tuple[np.ndarray, np.ndarray]:
    """Two frames of a smooth Gaussian-blob texture, the second translated
    by exactly (dx, dy). Blobs stay away from the borders so the planted
    displacement is identifiable everywhere."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    margin = 14
    cx = rng.uniform(margin, width - margin, n_blobs)
    cy = rng.uniform(margin, height - margin, n_blobs)
    sig = rng.uniform(2.5, 5.0, n_blobs)
    amp = rng.uniform(-1.0, 1.0, n_blobs)

    def render(ox: float, oy: float) -> np.ndarray:
        img = np.zeros((height, width))
        for j in range(n_blobs):
            img += amp[j] * np.exp(
                -((xs - ox - cx[j]) ** 2 + (ys - oy - cy[j]) ** 2) / (2.0 * sig[j] ** 2)
            )
        return img

    i0 = render(0.0, 0.0)
    i1 = render(dx, dy)
    lo = min(i0.min(), i1.min())
    hi = max(i0.max(), i1.max())
    return (i0 - lo) / (hi - lo), (i1 - lo) / (hi - lo)


def unimodal_bump(rng: np.random.Generator, length: int | None = None) -> tuple[np.ndarray, int]:
    """Strictly unimodal test signal (Gaussian bump over a tilted baseline is
    avoided on purpose: the bump alone keeps the peak unambiguous).
    Returns (values, argmax index)."""
    n = length or int(rng.integers(8, 48))
    peak = int(rng.integers(0, n))
    sigma = rng.uniform(1.5, n / 3.0)
    amp = rng.uniform(0.5, 4.0)
    base = rng.uniform(0.0, 0.5)
    idx = np.arange(n, dtype=np.float64)
    values = base + amp * np.exp(-((idx - peak) ** 2) / (2.0 * sigma**2))
    return values, peak


def _spread(total: int, bins: int) -> list[int]:
    base, extra = divmod(total, bins)
    return [base + (1 if i < extra else 0) for i in range(bins)]


def table1_records() -> list[SampleRecord]:
    """441 records shaped like the combined three-database corpus:
    16 + 24 + 28 subjects, per-dataset class counts (70/51/43, 88/32/25,
    91/26/15)."""
    layout = [
        (DatasetId.SMIC, 16, {"negative": 70, "positive": 51, "surprise": 43}),
        (DatasetId.CASME2, 24, {"disgust": 61, "repression": 27, "happiness": 32, "surprise": 25}),
        (
            DatasetId.SAMM,
            28,
            {
                "anger": 56,
                "contempt": 12,
                "disgust": 9,
                "fear": 8,
                "sadness": 6,
                "happiness": 26,
                "surprise": 15,
            },
        ),
    ]
    from apexflow.dataset import remap_emotion

    records = []
    for dataset_id, n_subjects, label_counts in layout:
        rows = [raw for raw, count in label_counts.items() for _ in range(count)]
        per_subject = _spread(len(rows), n_subjects)
        row_iter = iter(rows)
        for s in range(n_subjects):
            subject = f"{dataset_id.value.lower()}_sub{s + 1:02d}"
            for v in range(per_subject[s]):
                raw = next(row_iter)
                label = remap_emotion(raw, dataset_id)
                assert label is not None
                apex = None if dataset_id is DatasetId.SMIC else 5
                records.append(
                    SampleRecord(
                        dataset_id=dataset_id,
                        subject_id=subject,
                        video_id=f"{subject}_v{v + 1:02d}",
                        raw_label=raw,
                        label=label,
                        onset_index=1,
                        apex_index=apex,
                        offset_index=10,
                        frame_dir=Path("/unused") / subject,
                    )
                )
    return records


@pytest.fixture(scope="session")
def corpus_441() -> list[SampleRecord]:
    return table1_records()
