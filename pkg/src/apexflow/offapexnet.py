"""Two-stream convolutional classifier over horizontal/vertical flow maps.

Each stream runs two same-padded 5x5 convolution + ReLU + 2x2 max-pool
stages; the pooled maps are flattened, concatenated (u stream first), and
passed through two ReLU+dropout fully connected layers into a 3-way output.
Forward, backward, and Adam are implemented directly on numpy arrays in
double precision, so training is a deterministic function of the seed.

Layer widths are configurable through NetArch so gradient checks can run on
shrunk instances; the defaults reproduce the published configuration.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import EmotionClass
from .tvl1flow import FlowInputPair

CHECKPOINT_MAGIC = b"AFXNCKPT"
CHECKPOINT_VERSION = 1

_LOG_CLAMP = 1e-12


class TrainingDivergedError(RuntimeError):
    """Raised when activations or the loss stop being finite."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file cannot be restored."""


@dataclass(frozen=True)
class NetArch:
    """Network layout; defaults match the published configuration."""

    input_size: int = 28
    kernel_size: int = 5
    conv1_channels: int = 6
    conv2_channels: int = 16
    fc1_units: int = 1024
    fc2_units: int = 1024
    n_classes: int = 3
    streams: tuple[str, ...] = ("u", "v")

    def __post_init__(self) -> None:
        if self.input_size < 4:
            raise ValueError("input_size must be >= 4")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if not self.streams or len(set(self.streams)) != len(self.streams):
            raise ValueError("streams must be a non-empty tuple of unique names")
        if any(s not in ("u", "v") for s in self.streams):
            raise ValueError("streams may only contain 'u' and 'v'")

    @property
    def pooled_size(self) -> int:
        once = (self.input_size + 1) // 2
        return (once + 1) // 2

    @property
    def tower_flat(self) -> int:
        return self.pooled_size**2 * self.conv2_channels

    @property
    def concat_width(self) -> int:
        return len(self.streams) * self.tower_flat


DEFAULT_ARCH = NetArch()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-4
    dropout_keep: float = 0.5
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.dropout_keep <= 1:
            raise ValueError("dropout_keep must be in (0, 1]")


def param_shapes(arch: NetArch) -> dict[str, tuple[int, ...]]:
    """Parameter shapes keyed by name, in the canonical ordering."""
    k = arch.kernel_size
    shapes: dict[str, tuple[int, ...]] = {}
    for s in arch.streams:
        shapes[f"{s}_conv1_w"] = (k, k, 1, arch.conv1_channels)
        shapes[f"{s}_conv1_b"] = (arch.conv1_channels,)
        shapes[f"{s}_conv2_w"] = (k, k, arch.conv1_channels, arch.conv2_channels)
        shapes[f"{s}_conv2_b"] = (arch.conv2_channels,)
    shapes["fc1_w"] = (arch.concat_width, arch.fc1_units)
    shapes["fc1_b"] = (arch.fc1_units,)
    shapes["fc2_w"] = (arch.fc1_units, arch.fc2_units)
    shapes["fc2_b"] = (arch.fc2_units,)
    shapes["out_w"] = (arch.fc2_units, arch.n_classes)
    shapes["out_b"] = (arch.n_classes,)
    return shapes


@dataclass
class NetworkParams:
    arch: NetArch
    values: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = param_shapes(self.arch)
        if list(self.values) != list(expected):
            raise ValueError("parameter keys do not match the architecture")
        for name, shape in expected.items():
            if self.values[name].shape != shape:
                raise ValueError(
                    f"{name}: expected shape {shape}, found {self.values[name].shape}"
                )


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.values.items()},
            v={k: np.zeros_like(a) for k, a in params.values.items()},
            t=0,
        )


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal draws re-sampled until all lie within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return std * out


def init_params(seed: int, arch: NetArch = DEFAULT_ARCH) -> NetworkParams:
    """Seeded initialization: truncated-normal weights (std 0.1), biases 0.1."""
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith("_b"):
            values[name] = np.full(shape, 0.1)
        else:
            values[name] = _truncated_normal(rng, shape, std=0.1)
    return NetworkParams(arch=arch, values=values)


# ---------------------------------------------------------------------------
# layer primitives


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, x)


def conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1, zero-padded correlation: output keeps the spatial size.

    Accepts (H, W, Cin) or batched (N, H, W, Cin) input; w is
    (k, k, Cin, Cout) and b is (Cout,).
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4 or w.ndim != 4 or xb.shape[3] != w.shape[2] or b.shape != (w.shape[3],):
        raise ValueError("conv2d_same: shapes do not conform")
    out = _conv_forward(xb.astype(np.float64), w, b)[0]
    return out[0] if single else out


def _conv_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    k = w.shape[0]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N, H, W, Cin, k, k)
    out = np.tensordot(windows, w, axes=([3, 4, 5], [2, 0, 1])) + b
    return out, xp


def _conv_backward(
    xp: np.ndarray, w: np.ndarray, dout: np.ndarray, need_dx: bool
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    k = w.shape[0]
    pad = k // 2
    n, h, wd = dout.shape[:3]
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))
    dw = np.tensordot(windows, dout, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dout.sum(axis=(0, 1, 2))
    if not need_dx:
        return dw, db, None
    dxp = np.zeros_like(xp)
    for a in range(k):
        for c in range(k):
            dxp[:, a : a + h, c : c + wd, :] += np.tensordot(dout, w[a, c], axes=([3], [1]))
    return dw, db, dxp[:, pad : pad + h, pad : pad + wd, :]


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    """Non-overlapping 2x2 max pooling; odd edges repeat the border value."""
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.ndim != 4 or xb.shape[1] < 2 or xb.shape[2] < 2:
        raise ValueError("maxpool2x2: input must be at least 2x2")
    out = _pool_forward(xb)[0]
    return out[0] if single else out


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    n, h, w, c = x.shape
    xp = x
    if h % 2:
        xp = np.concatenate([xp, xp[:, -1:, :, :]], axis=1)
    if w % 2:
        xp = np.concatenate([xp, xp[:, :, -1:, :]], axis=2)
    h2, w2 = xp.shape[1] // 2, xp.shape[2] // 2
    windows = (
        xp.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    )
    arg = windows.argmax(axis=4)
    out = np.take_along_axis(windows, arg[..., None], axis=4)[..., 0]
    return out, (arg, h, w)


def _pool_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    arg, h, w = cache
    n, h2, w2, c = dout.shape
    onehot = (arg[..., None] == np.arange(4)).astype(dout.dtype)
    dwin = dout[..., None] * onehot
    dxp = (
        dwin.reshape(n, h2, w2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, 2 * h2, 2 * w2, c)
    )
    dx = dxp[:, :h, :w, :].copy()
    if 2 * h2 > h:
        dx[:, h - 1, :, :] += dxp[:, h, :w, :]
    if 2 * w2 > w:
        dx[:, :, w - 1, :] += dxp[:, :h, w, :]
    if 2 * h2 > h and 2 * w2 > w:
        dx[:, h - 1, w - 1, :] += dxp[:, h, w, :]
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, label: EmotionClass | int) -> float:
    """Negative log-likelihood of the true class, with the log clamped."""
    return float(-np.log(max(float(probs[int(label)]), _LOG_CLAMP)))


# ---------------------------------------------------------------------------
# forward / backward


FlowMaps = FlowInputPair | tuple[np.ndarray, np.ndarray]


def _pair_arrays(pair: FlowMaps) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pair, FlowInputPair):
        return pair.u28, pair.v28
    u, v = pair
    return u, v


def _stream_inputs(pair: FlowMaps, arch: NetArch) -> dict[str, np.ndarray]:
    u, v = _pair_arrays(pair)
    maps = {"u": u, "v": v}
    out = {}
    for s in arch.streams:
        arr = np.asarray(maps[s], dtype=np.float64)
        if arr.shape != (arch.input_size, arch.input_size):
            raise ValueError(
                f"{s} input shape {arr.shape} does not match input_size {arch.input_size}"
            )
        out[s] = arr[None]
    return out


def _forward_batch(
    params: NetworkParams,
    inputs: dict[str, np.ndarray],
    dropout_masks: dict[str, np.ndarray] | None,
) -> tuple[np.ndarray, dict]:
    arch = params.arch
    pv = params.values
    caches: dict = {"params": params, "masks": dropout_masks, "streams": {}}

    flats = []
    for s in arch.streams:
        x = inputs[s][..., None]  # (N, size, size, 1)
        c1_pre, xp1 = _conv_forward(x, pv[f"{s}_conv1_w"], pv[f"{s}_conv1_b"])
        a1 = relu(c1_pre)
        p1, pool1_cache = _pool_forward(a1)
        c2_pre, xp2 = _conv_forward(p1, pv[f"{s}_conv2_w"], pv[f"{s}_conv2_b"])
        a2 = relu(c2_pre)
        p2, pool2_cache = _pool_forward(a2)
        flat = p2.reshape(p2.shape[0], -1)
        caches["streams"][s] = {
            "xp1": xp1,
            "c1_pre": c1_pre,
            "pool1": pool1_cache,
            "xp2": xp2,
            "c2_pre": c2_pre,
            "pool2": pool2_cache,
            "p2_shape": p2.shape,
        }
        flats.append(flat)

    concat = np.concatenate(flats, axis=1)
    fc1_pre = concat @ pv["fc1_w"] + pv["fc1_b"]
    fc1_out = relu(fc1_pre)
    if dropout_masks is not None:
        fc1_out = fc1_out * dropout_masks["fc1"]
    fc2_pre = fc1_out @ pv["fc2_w"] + pv["fc2_b"]
    fc2_out = relu(fc2_pre)
    if dropout_masks is not None:
        fc2_out = fc2_out * dropout_masks["fc2"]
    logits = fc2_out @ pv["out_w"] + pv["out_b"]
    if not np.isfinite(logits).all():
        raise TrainingDivergedError("non-finite activations in the forward pass")

    caches.update(
        concat=concat, fc1_pre=fc1_pre, fc1_out=fc1_out,
        fc2_pre=fc2_pre, fc2_out=fc2_out, logits=logits,
    )
    return logits, caches


def forward(
    params: NetworkParams,
    pair: FlowMaps,
    dropout_masks: dict[str, np.ndarray] | None = None,
) -> tuple[np.ndarray, dict]:
    """Single-sample forward pass; returns (logits, caches for backward).

    `pair` is a FlowInputPair or a plain (u, v) array tuple matching the
    architecture's input size. `dropout_masks`, when given, maps
    "fc1"/"fc2" to already-scaled keep masks (0 or 1/keep per unit) and
    marks training mode.
    """
    inputs = _stream_inputs(pair, params.arch)
    masks = None
    if dropout_masks is not None:
        masks = {k: np.asarray(m, dtype=np.float64).reshape(1, -1) for k, m in dropout_masks.items()}
    logits, caches = _forward_batch(params, inputs, masks)
    return logits[0], caches


def _backward_batch(caches: dict, labels: np.ndarray) -> dict[str, np.ndarray]:
    """Summed gradients of the per-sample cross-entropy losses."""
    params: NetworkParams = caches["params"]
    arch = params.arch
    pv = params.values
    masks = caches["masks"]

    probs = softmax(caches["logits"])
    dlogits = probs.copy()
    dlogits[np.arange(labels.size), labels] -= 1.0

    grads: dict[str, np.ndarray] = {}
    grads["out_w"] = caches["fc2_out"].T @ dlogits
    grads["out_b"] = dlogits.sum(axis=0)
    dfc2_out = dlogits @ pv["out_w"].T
    if masks is not None:
        dfc2_out = dfc2_out * masks["fc2"]
    dfc2_pre = dfc2_out * (caches["fc2_pre"] > 0)
    grads["fc2_w"] = caches["fc1_out"].T @ dfc2_pre
    grads["fc2_b"] = dfc2_pre.sum(axis=0)
    dfc1_out = dfc2_pre @ pv["fc2_w"].T
    if masks is not None:
        dfc1_out = dfc1_out * masks["fc1"]
    dfc1_pre = dfc1_out * (caches["fc1_pre"] > 0)
    grads["fc1_w"] = caches["concat"].T @ dfc1_pre
    grads["fc1_b"] = dfc1_pre.sum(axis=0)
    dconcat = dfc1_pre @ pv["fc1_w"].T

    width = arch.tower_flat
    for i, s in enumerate(arch.streams):
        sc = caches["streams"][s]
        dflat = dconcat[:, i * width : (i + 1) * width]
        dp2 = dflat.reshape(sc["p2_shape"])
        da2 = _pool_backward(dp2, sc["pool2"])
        dc2_pre = da2 * (sc["c2_pre"] > 0)
        dw2, db2, dp1 = _conv_backward(sc["xp2"], pv[f"{s}_conv2_w"], dc2_pre, need_dx=True)
        da1 = _pool_backward(dp1, sc["pool1"])
        dc1_pre = da1 * (sc["c1_pre"] > 0)
        dw1, db1, _ = _conv_backward(sc["xp1"], pv[f"{s}_conv1_w"], dc1_pre, need_dx=False)
        grads[f"{s}_conv1_w"] = dw1
        grads[f"{s}_conv1_b"] = db1
        grads[f"{s}_conv2_w"] = dw2
        grads[f"{s}_conv2_b"] = db2

    return {name: grads[name] for name in param_shapes(arch)}


def backward(caches: dict, label: EmotionClass | int) -> dict[str, np.ndarray]:
    """Exact gradients of cross_entropy(softmax(forward)) for one sample."""
    if "logits" not in caches:
        raise ValueError("backward requires caches produced by forward")
    return _backward_batch(caches, np.array([int(label)]))


def adam_step(
    params: NetworkParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[NetworkParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if list(grads) != list(params.values):
        raise ValueError("gradient keys do not mirror the parameters")
    t = state.t + 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    new_values: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.values.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g**2
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_values[name] = p - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
        new_m[name] = m
        new_v[name] = v
    return NetworkParams(arch=params.arch, values=new_values), AdamState(m=new_m, v=new_v, t=t)


def train(
    samples: list[tuple[FlowMaps, EmotionClass]],
    config: TrainConfig,
    arch: NetArch = DEFAULT_ARCH,
) -> tuple[NetworkParams, np.ndarray]:
    """Full-batch training; one Adam step per epoch on the mean gradients.

    Dropout masks are redrawn per sample per epoch from a generator seeded
    by config.seed, so the returned parameters and loss curve are a
    deterministic function of (samples, config).
    """
    if not samples:
        raise ValueError("no training samples")
    n = len(samples)
    stream_index = {"u": 0, "v": 1}
    arrays = [_pair_arrays(pair) for pair, _ in samples]
    inputs = {
        s: np.stack([np.asarray(a[stream_index[s]], dtype=np.float64) for a in arrays])
        for s in arch.streams
    }
    for s, batch in inputs.items():
        if batch.shape[1:] != (arch.input_size, arch.input_size):
            raise ValueError(
                f"{s} inputs {batch.shape[1:]} do not match input_size {arch.input_size}"
            )
    labels = np.array([int(label) for _, label in samples])

    params = init_params(config.seed, arch)
    state = AdamState.zeros_like(params)
    mask_rng = np.random.default_rng([config.seed, 1])
    keep = config.dropout_keep
    loss_curve = np.empty(config.epochs)

    for epoch in range(config.epochs):
        masks = None
        if keep < 1.0:
            masks = {
                "fc1": (mask_rng.random((n, arch.fc1_units)) < keep) / keep,
                "fc2": (mask_rng.random((n, arch.fc2_units)) < keep) / keep,
            }
        logits, caches = _forward_batch(params, inputs, masks)
        probs = softmax(logits)
        picked = np.maximum(probs[np.arange(n), labels], _LOG_CLAMP)
        loss = float(-np.log(picked).mean())
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
        grads = {k: g / n for k, g in _backward_batch(caches, labels).items()}
        params, state = adam_step(params, grads, state, config)
        loss_curve[epoch] = loss

    return params, loss_curve


def predict(params: NetworkParams, pair: FlowMaps) -> tuple[EmotionClass, np.ndarray]:
    """Inference without dropout; argmax class, smallest index on ties."""
    logits, _ = forward(params, pair)
    probs = softmax(logits)
    return EmotionClass(int(np.argmax(probs))), probs


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(params: NetworkParams, state: AdamState | None, path: str | Path) -> None:
    """Versioned little-endian binary dump of parameters and optimizer state."""
    arch = params.arch
    header = bytearray()
    header += CHECKPOINT_MAGIC
    header += struct.pack("<II", CHECKPOINT_VERSION, 1 if state is not None else 0)
    header += struct.pack(
        "<7I",
        arch.input_size,
        arch.kernel_size,
        arch.conv1_channels,
        arch.conv2_channels,
        arch.fc1_units,
        arch.fc2_units,
        arch.n_classes,
    )
    header += struct.pack("<I", len(arch.streams))
    for s in arch.streams:
        header += s.encode("ascii")
    header += struct.pack("<Q", state.t if state is not None else 0)
    names = list(params.values)
    header += struct.pack("<I", len(names))
    for name in names:
        encoded = name.encode("ascii")
        header += struct.pack("<H", len(encoded)) + encoded
        shape = params.values[name].shape
        header += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for name in names:
            fh.write(np.ascontiguousarray(params.values[name], dtype="<f8").tobytes())
        if state is not None:
            for buffers in (state.m, state.v):
                for name in names:
                    fh.write(np.ascontiguousarray(buffers[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, AdamState | None]:
    """Restore a checkpoint bit-exactly; rejects foreign or truncated files."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    magic = bytes(view[:8])
    pos = 8
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (magic {magic!r})")
    version, has_state = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    arch_fields = take("<7I")
    (n_streams,) = take("<I")
    if pos + n_streams > len(view):
        raise CheckpointError(f"{path}: truncated checkpoint")
    streams = tuple(chr(b) for b in view[pos : pos + n_streams])
    pos += n_streams
    arch = NetArch(
        input_size=arch_fields[0],
        kernel_size=arch_fields[1],
        conv1_channels=arch_fields[2],
        conv2_channels=arch_fields[3],
        fc1_units=arch_fields[4],
        fc2_units=arch_fields[5],
        n_classes=arch_fields[6],
        streams=streams,
    )
    (adam_t,) = take("<Q")
    (n_arrays,) = take("<I")
    shape_table: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(n_arrays):
        (name_len,) = take("<H")
        if pos + name_len > len(view):
            raise CheckpointError(f"{path}: truncated checkpoint")
        name = bytes(view[pos : pos + name_len]).decode("ascii")
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        shape_table.append((name, tuple(shape)))

    expected = param_shapes(arch)
    if dict(shape_table) != expected:
        raise CheckpointError(f"{path}: shape table does not match the declared architecture")

    def read_buffers() -> dict[str, np.ndarray]:
        nonlocal pos
        out: dict[str, np.ndarray] = {}
        for name, shape in shape_table:
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            size = 8 * count
            if pos + size > len(view):
                raise CheckpointError(f"{path}: truncated checkpoint")
            out[name] = np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += size
        return out

    values = read_buffers()
    state = None
    if has_state:
        state = AdamState(m=read_buffers(), v=read_buffers(), t=adam_t)
    if pos != len(view):
        raise CheckpointError(f"{path}: {len(view) - pos} unexpected trailing bytes")
    return NetworkParams(arch=arch, values=values), state
