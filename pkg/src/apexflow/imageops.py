"""Shared grayscale image primitives: luma conversion, bilinear sampling, resizing."""

from __future__ import annotations

import numpy as np

# ITU-R BT.601 luma weights (R, G, B).
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def rgb_to_gray(rgb: np.ndarray) -> np.ndarray:
    """Collapse an (H, W, 3+) color array to single-channel luma."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample `img` at fractional coordinates, clamping to the border.

    `xs` indexes columns and `ys` rows; both may be any broadcastable shape.
    """
    h, w = img.shape
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = (1.0 - fx) * img[y0, x0] + fx * img[y0, x1]
    bottom = (1.0 - fx) * img[y1, x0] + fx * img[y1, x1]
    return (1.0 - fy) * top + fy * bottom


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample a 2-D array to (out_h, out_w) with bilinear interpolation.

    Output pixel i maps to input coordinate i * (n_in - 1) / (n_out - 1),
    so corners are preserved and equal sizes give an exact copy.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"invalid target size {out_h}x{out_w}")
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)
    ys = _axis_coords(h, out_h)
    xs = _axis_coords(w, out_w)
    grid_x, grid_y = np.meshgrid(xs, ys)
    return bilinear_sample(np.asarray(img, dtype=np.float64), grid_x, grid_y)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def central_gradient(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient with replicated borders; returns (gx, gy)."""
    padded = np.pad(img, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return gx, gy
