"""Dense TV-L1 optical flow between onset and apex frames.

Coarse-to-fine estimation with the duality-based solver: per warp the data
residual is linearized around the current flow, a pointwise thresholding step
updates the auxiliary field, and dual variables are iterated through
forward-gradient / divergence updates until the mean squared flow update
drops below epsilon^2. A 5-point median filter stabilizes the flow after
each warp.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, median_filter

from .imageops import bilinear_sample, bilinear_resize, central_gradient

FLO_MAGIC = 202021.25

# Presmoothing strength per pyramid halving, scaled to the zoom factor.
_PYRAMID_SIGMA_SCALE = 0.6

# Pyramid levels below this size in either dimension are clipped.
_MIN_LEVEL_SIZE = 16

_MEDIAN_FOOTPRINT = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class FlowFormatError(ValueError):
    """Raised when a .flo file does not follow the expected layout."""


@dataclass(frozen=True)
class TvL1Params:
    """Solver configuration.

    lam is the data-attachment weight, theta the coupling between the flow
    and its auxiliary field, tau the dual step size. zoom is the inter-level
    scale factor of the pyramid. Iterations within a warp stop when the mean
    squared flow update falls below epsilon**2.
    """

    lam: float = 0.15
    theta: float = 0.3
    tau: float = 0.25
    n_scales: int = 5
    zoom: float = 0.5
    n_warps: int = 5
    epsilon: float = 0.01
    max_inner_iterations: int = 300

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if not 0 < self.tau <= 0.25:
            raise ValueError("tau must be in (0, 0.25]")
        if not 0 < self.zoom < 1:
            raise ValueError("zoom must be in (0, 1)")
        if self.n_scales < 1 or self.n_warps < 1:
            raise ValueError("n_scales and n_warps must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_inner_iterations < 1:
            raise ValueError("max_inner_iterations must be >= 1")


@dataclass
class FlowField:
    """Dense per-pixel motion; u is horizontal and v vertical displacement."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of the same shape")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ValueError("flow components must be finite")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


@dataclass(frozen=True)
class FlowInputPair:
    """The two 28x28 resized flow components fed to the classifier."""

    u28: np.ndarray
    v28: np.ndarray

    def __post_init__(self) -> None:
        if self.u28.shape != (28, 28) or self.v28.shape != (28, 28):
            raise ValueError("flow inputs must be 28x28")


def build_pyramid(img: np.ndarray, params: TvL1Params) -> list[np.ndarray]:
    """Fine-to-coarse image pyramid.

    Level 0 is the input; each next level is Gaussian-smoothed and bilinearly
    downsampled by the zoom factor (sizes round up). Levels that would fall
    below 16 pixels in either dimension are clipped.
    """
    h, w = img.shape
    if h < 2 or w < 2:
        raise ValueError(f"degenerate image {w}x{h}")
    sigma = _PYRAMID_SIGMA_SCALE * np.sqrt(1.0 / params.zoom**2 - 1.0)
    levels = [np.asarray(img, dtype=np.float64)]
    while len(levels) < params.n_scales:
        prev = levels[-1]
        nh = int(np.ceil(prev.shape[0] * params.zoom))
        nw = int(np.ceil(prev.shape[1] * params.zoom))
        if nh < _MIN_LEVEL_SIZE or nw < _MIN_LEVEL_SIZE:
            break
        smoothed = gaussian_filter(prev, sigma=sigma, mode="nearest")
        levels.append(bilinear_resize(smoothed, nh, nw))
    return levels


def warp(img: np.ndarray, flow: FlowField) -> np.ndarray:
    """Backward-warp an image along a flow field.

    output(x, y) samples img at (x + u, y + v) bilinearly; out-of-bounds
    coordinates clamp to the border.
    """
    h, w = img.shape
    if (h, w) != (flow.height, flow.width):
        raise ValueError("image and flow dimensions differ")
    grid_x, grid_y = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return bilinear_sample(np.asarray(img, dtype=np.float64), grid_x + flow.u, grid_y + flow.v)


def _forward_gradient(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences, zero on the last column/row."""
    gx = np.zeros_like(f)
    gy = np.zeros_like(f)
    gx[:, :-1] = f[:, 1:] - f[:, :-1]
    gy[:-1, :] = f[1:, :] - f[:-1, :]
    return gx, gy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Backward-difference divergence, the negative adjoint of _forward_gradient."""
    div = np.zeros_like(px)
    div[:, 0] = px[:, 0]
    div[:, 1:] = px[:, 1:] - px[:, :-1]
    div[0, :] += py[0, :]
    div[1:, :] += py[1:, :] - py[:-1, :]
    return div


def tvl1_level(
    i0: np.ndarray,
    i1: np.ndarray,
    init: FlowField,
    params: TvL1Params,
) -> FlowField:
    """Run the duality-based solver at a single resolution.

    Per warp: i1 and its gradient are warped along the current flow and the
    data residual is linearized there. Inner iterations then alternate the
    pointwise thresholding step on the residual (auxiliary field), the flow
    update from the dual divergence, and the dual ascent with step tau,
    stopping when the mean squared update is below epsilon**2 or the
    iteration cap is reached. u and v are median-filtered after each warp.
    """
    i0 = np.asarray(i0, dtype=np.float64)
    i1 = np.asarray(i1, dtype=np.float64)
    if i0.shape != i1.shape:
        raise ValueError("frame dimensions differ")
    if i0.shape != init.u.shape:
        raise ValueError("initial flow dimensions differ from the frames")
    h, w = i0.shape
    u = init.u.astype(np.float64, copy=True)
    v = init.v.astype(np.float64, copy=True)

    gx, gy = central_gradient(i1)
    grid_x, grid_y = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    lt = params.lam * params.theta
    taut = params.tau / params.theta
    p11 = np.zeros((h, w))
    p12 = np.zeros((h, w))
    p21 = np.zeros((h, w))
    p22 = np.zeros((h, w))

    for _ in range(params.n_warps):
        xs = grid_x + u
        ys = grid_y + v
        i1w = bilinear_sample(i1, xs, ys)
        gxw = bilinear_sample(gx, xs, ys)
        gyw = bilinear_sample(gy, xs, ys)
        grad_sq = gxw**2 + gyw**2
        grad_safe = np.where(grad_sq > 1e-12, grad_sq, 1.0)
        # Constant part of the linearized residual around the warp flow.
        rho_const = i1w - gxw * u - gyw * v - i0

        for _ in range(params.max_inner_iterations):
            rho = rho_const + gxw * u + gyw * v
            below = rho < -lt * grad_sq
            above = rho > lt * grad_sq
            middle = ~(below | above) & (grad_sq > 1e-12)
            step = np.where(below, lt, 0.0) - np.where(above, lt, 0.0)
            step = np.where(middle, -rho / grad_safe, step)
            aux_u = u + step * gxw
            aux_v = v + step * gyw

            new_u = aux_u + params.theta * _divergence(p11, p12)
            new_v = aux_v + params.theta * _divergence(p21, p22)
            err = np.mean((new_u - u) ** 2 + (new_v - v) ** 2)
            u, v = new_u, new_v

            ux, uy = _forward_gradient(u)
            vx, vy = _forward_gradient(v)
            norm_u = 1.0 + taut * np.sqrt(ux**2 + uy**2)
            norm_v = 1.0 + taut * np.sqrt(vx**2 + vy**2)
            p11 = (p11 + taut * ux) / norm_u
            p12 = (p12 + taut * uy) / norm_u
            p21 = (p21 + taut * vx) / norm_v
            p22 = (p22 + taut * vy) / norm_v

            if err < params.epsilon**2:
                break

        u = median_filter(u, footprint=_MEDIAN_FOOTPRINT, mode="nearest")
        v = median_filter(v, footprint=_MEDIAN_FOOTPRINT, mode="nearest")

    return FlowField(u=u, v=v)


def _joint_rescale(i0: np.ndarray, i1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map both frames jointly onto [0, 255].

    The default data weight is calibrated for byte-range intensities, so
    [0, 1] inputs are rescaled before solving; the flow itself is unaffected
    by a shared affine intensity change.
    """
    lo = min(i0.min(), i1.min())
    hi = max(i0.max(), i1.max())
    span = hi - lo
    if span <= 0:
        return np.zeros_like(i0), np.zeros_like(i1)
    return 255.0 * (i0 - lo) / span, 255.0 * (i1 - lo) / span


def estimate_flow(
    onset: np.ndarray,
    apex: np.ndarray,
    params: TvL1Params | None = None,
) -> FlowField:
    """Coarse-to-fine TV-L1 flow such that warp(apex, flow) approximates onset."""
    params = params or TvL1Params()
    onset = np.asarray(onset, dtype=np.float64)
    apex = np.asarray(apex, dtype=np.float64)
    if onset.shape != apex.shape:
        raise ValueError("onset and apex dimensions differ")

    i0, i1 = _joint_rescale(onset, apex)
    pyr0 = build_pyramid(i0, params)
    pyr1 = build_pyramid(i1, params)

    coarse_h, coarse_w = pyr0[-1].shape
    flow = FlowField(u=np.zeros((coarse_h, coarse_w)), v=np.zeros((coarse_h, coarse_w)))
    for level in range(len(pyr0) - 1, -1, -1):
        flow = tvl1_level(pyr0[level], pyr1[level], flow, params)
        if level > 0:
            nh, nw = pyr0[level - 1].shape
            flow = FlowField(
                u=bilinear_resize(flow.u, nh, nw) / params.zoom,
                v=bilinear_resize(flow.v, nh, nw) / params.zoom,
            )
    return flow


def resize_to_input(flow: FlowField) -> FlowInputPair:
    """Resample u and v to 28x28. Displacement values are not rescaled."""
    return FlowInputPair(
        u28=bilinear_resize(flow.u, 28, 28),
        v28=bilinear_resize(flow.v, 28, 28),
    )


def write_flo(flow: FlowField, path: str | Path) -> None:
    """Write a flow field in the Middlebury .flo layout (little-endian)."""
    interleaved = np.stack([flow.u, flow.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, flow.width, flow.height))
        fh.write(interleaved.tobytes())


def read_flo(path: str | Path) -> FlowField:
    """Read a Middlebury .flo file."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic, width, height = struct.unpack_from("<fii", data)
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic!r}")
    if width <= 0 or height <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(data) != expected:
        raise FlowFormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    payload = np.frombuffer(data, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(
        u=payload[:, :, 0].astype(np.float64),
        v=payload[:, :, 1].astype(np.float64),
    )


def flow_to_color(flow: FlowField) -> np.ndarray:
    """Render a flow field with the hue/saturation color wheel.

    Hue encodes atan2(v, u); saturation scales with magnitude normalized by
    the field's maximum, so zero motion renders white and positive rescaling
    of the field leaves the image unchanged.
    """
    magnitude = np.hypot(flow.u, flow.v)
    peak = magnitude.max()
    if peak <= 0:
        return np.full((flow.height, flow.width, 3), 255, dtype=np.uint8)
    saturation = magnitude / peak
    hue = np.mod(np.arctan2(flow.v, flow.u), 2.0 * np.pi) / (2.0 * np.pi)

    # Vectorized HSV -> RGB with value fixed at 1.
    sector = np.floor(hue * 6.0).astype(int) % 6
    frac = hue * 6.0 - np.floor(hue * 6.0)
    p = 1.0 - saturation
    q = 1.0 - saturation * frac
    t = 1.0 - saturation * (1.0 - frac)
    one = np.ones_like(saturation)
    channels = [
        np.choose(sector, [one, q, p, p, t, one]),
        np.choose(sector, [t, one, one, q, p, p]),
        np.choose(sector, [p, p, t, one, one, q]),
    ]
    rgb = np.stack(channels, axis=-1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
