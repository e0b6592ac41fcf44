"""Apex-frame spotting from LBP texture change in three facial regions.

For each frame after the onset, a per-region difference value is computed as
one minus the Pearson correlation between the region's 256-bin LBP histogram
and the onset's. The region with the strongest peak is searched with a
divide-and-conquer descent on range means, which returns the peak frame.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .dataset import SampleRecord


class RoiRole(Enum):
    LEFT_EYEBROW = "left_eyebrow"
    RIGHT_EYEBROW = "right_eyebrow"
    MOUTH = "mouth"


class RoiBoundsError(ValueError):
    """Raised when a region does not fit the image it is applied to."""


class DegenerateHistogramError(ValueError):
    """Raised by correlation() when an input histogram has zero variance."""


class SequenceTooShortError(ValueError):
    """Raised when a sequence has too few frames for the requested operation."""


@dataclass(frozen=True)
class Roi:
    """Pixel rectangle (x, y are the top-left corner, 0-based image coords)."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self) -> None:
        if self.w < 3 or self.h < 3:
            raise RoiBoundsError(f"roi {self} smaller than 3x3")
        if self.x < 0 or self.y < 0:
            raise RoiBoundsError(f"roi {self} has a negative corner")


@dataclass(frozen=True)
class RoiSet:
    """The three facial regions used for spotting, in a fixed role order."""

    left_eyebrow: Roi
    right_eyebrow: Roi
    mouth: Roi

    ROLES = (RoiRole.LEFT_EYEBROW, RoiRole.RIGHT_EYEBROW, RoiRole.MOUTH)

    def rois(self) -> tuple[Roi, Roi, Roi]:
        return (self.left_eyebrow, self.right_eyebrow, self.mouth)

    def validate_for(self, height: int, width: int) -> None:
        for role, roi in zip(self.ROLES, self.rois()):
            if roi.x + roi.w > width or roi.y + roi.h > height:
                raise RoiBoundsError(
                    f"{role.value} roi {roi} exceeds {width}x{height} image bounds"
                )

    @classmethod
    def default_for(cls, height: int, width: int) -> "RoiSet":
        """Thirds-of-face defaults: upper-left, upper-right, lower-middle.

        Rectangles are inset one pixel from the border so every roi pixel
        has an LBP code.
        """
        rw, rh = width // 3, height // 3
        return cls(
            left_eyebrow=Roi(1, 1, rw, rh),
            right_eyebrow=Roi(width - 1 - rw, 1, rw, rh),
            mouth=Roi((width - rw) // 2, height - 1 - rh, rw, rh),
        )


@dataclass(frozen=True)
class DifferenceSignal:
    """Per-frame LBP difference values d_j for frames j = 2..count.

    `values[r, j - 2]` is the difference of region r between the onset and
    frame j; rows follow RoiSet.ROLES order.
    """

    values: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.values.shape[1] + 1


# 8-bit code layout: neighbors clockwise from top-left, top-left is the MSB.
_NEIGHBOR_OFFSETS = (
    (-1, -1, 128),  # top-left
    (-1, 0, 64),    # top
    (-1, 1, 32),    # top-right
    (0, 1, 16),     # right
    (1, 1, 8),      # bottom-right
    (1, 0, 4),      # bottom
    (1, -1, 2),     # bottom-left
    (0, -1, 1),     # left
)


def lbp_image(img: np.ndarray) -> np.ndarray:
    """Radius-1 LBP codes for every interior pixel.

    Each of the 8 neighbors is thresholded against the center with >=; the
    resulting bits are packed clockwise from the top-left neighbor, which
    occupies the most significant bit. Output shape is (h - 2, w - 2).
    """
    h, w = img.shape
    if h < 3 or w < 3:
        raise ValueError(f"image {w}x{h} too small for radius-1 codes")
    center = img[1:-1, 1:-1]
    codes = np.zeros((h - 2, w - 2), dtype=np.uint8)
    for dy, dx, weight in _NEIGHBOR_OFFSETS:
        neighbor = img[1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
        codes += np.uint8(weight) * (neighbor >= center)
    return codes


def roi_histogram(codes: np.ndarray, roi: Roi) -> np.ndarray:
    """256-bin count histogram of the codes inside a region.

    The roi is given in image coordinates and shifted by (-1, -1) into code
    coordinates; it must then lie fully inside the code image.
    """
    ch, cw = codes.shape
    x, y = roi.x - 1, roi.y - 1
    if x < 0 or y < 0 or x + roi.w > cw or y + roi.h > ch:
        raise RoiBoundsError(f"roi {roi} out of bounds for {cw}x{ch} code image")
    region = codes[y : y + roi.h, x : x + roi.w]
    return np.bincount(region.ravel(), minlength=256).astype(np.float64)


def correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two equal-length histograms."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("correlation expects two equal-length 1-D arrays")
    da = a - a.mean()
    db = b - b.mean()
    var_a = float(np.dot(da, da))
    var_b = float(np.dot(db, db))
    if var_a <= 0.0 or var_b <= 0.0:
        raise DegenerateHistogramError("zero-variance histogram")
    return float(np.dot(da, db)) / np.sqrt(var_a * var_b)


def difference_signals(seq: np.ndarray, rois: RoiSet) -> DifferenceSignal:
    """LBP-difference series of each region against the onset frame.

    Degenerate (zero-variance) histograms contribute d = 0, treating a
    featureless region as unchanged.
    """
    count = seq.shape[0]
    if count < 2:
        raise SequenceTooShortError("difference signals need at least 2 frames")
    rois.validate_for(seq.shape[1], seq.shape[2])

    roi_list = rois.rois()
    onset_hists = [roi_histogram(lbp_image(seq[0]), roi) for roi in roi_list]
    values = np.zeros((len(roi_list), count - 1))
    for j in range(1, count):
        codes = lbp_image(seq[j])
        for r, roi in enumerate(roi_list):
            try:
                values[r, j - 1] = 1.0 - correlation(onset_hists[r], roi_histogram(codes, roi))
            except DegenerateHistogramError:
                values[r, j - 1] = 0.0
    return DifferenceSignal(values=values)


def dc_peak_index(signal: np.ndarray) -> int:
    """Divide-and-conquer peak position of a 1-D signal (0-based).

    The index range is halved repeatedly, descending into the half with the
    larger mean (ties go left), until at most 3 values remain; the argmax of
    that final range is returned, ties broken to the smallest index.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1 or signal.size == 0:
        raise ValueError("signal must be a non-empty 1-D array")
    lo, hi = 0, signal.size
    while hi - lo > 3:
        mid = (lo + hi) // 2
        if signal[mid:hi].mean() > signal[lo:mid].mean():
            lo = mid
        else:
            hi = mid
    return lo + int(np.argmax(signal[lo:hi]))


def spot_apex(seq: np.ndarray, rois: RoiSet) -> int:
    """Predict the 1-based apex frame index of a sequence.

    The region whose difference signal reaches the highest peak is selected,
    and the divide-and-conquer descent locates the peak frame within it.
    """
    if seq.shape[0] < 3:
        raise SequenceTooShortError("apex spotting needs at least 3 frames")
    signal = difference_signals(seq, rois)
    best_roi = int(np.argmax(signal.values.max(axis=1)))
    return dc_peak_index(signal.values[best_roi]) + 2


def resolve_apex(record: SampleRecord, seq: np.ndarray, rois: RoiSet) -> int:
    """Ground-truth apex when annotated, otherwise the spotted apex."""
    if record.apex_index is not None:
        if not (record.onset_index <= record.apex_index <= record.offset_index):
            raise ValueError(
                f"{record.video_id}: apex {record.apex_index} outside "
                f"[{record.onset_index}, {record.offset_index}]"
            )
        return record.apex_index
    return spot_apex(seq, rois)
