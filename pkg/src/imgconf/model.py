"""Convolutional logistic propensity model, written against numpy only.

Architecture: ``depth`` blocks of (same-padded conv with K filters, ReLU, optional
max pool), then either

* ``scene`` readout: global mean over positions -> affine head -> logistic, one
  propensity per image; or
* ``pixel`` readout: the affine head applied at every position, one propensity per
  pixel. This is the dense equivalent of cutting a zero-padded patch around each
  pixel and reading the model's response at the patch centre (see
  :func:`extract_patches`); it needs a stack without pooling.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .raster import pad_same

Readout = Literal["scene", "pixel"]


@dataclass
class ConvLogisticModel:
    """Parameters of the propensity model.

    ``filters[l]`` has shape (z, z, C_in_l, K); ``pools[l]`` is the max-pool size
    after layer l (1 means no pooling; a size at least the map size pools globally).
    """

    filters: list[np.ndarray]
    pools: list[int]
    head_weights: np.ndarray
    head_bias: float = 0.0

    def __post_init__(self) -> None:
        if not self.filters:
            raise ValueError("model needs at least one conv layer")
        if len(self.pools) != len(self.filters):
            raise ValueError("one pool size per layer required")
        z, _, _, k = self.filters[0].shape
        if z < 1 or k < 1:
            raise ValueError("kernel width and filter count must be positive")
        c_prev = self.filters[0].shape[2]
        for w in self.filters:
            if w.ndim != 4 or w.shape[0] != z or w.shape[1] != z or w.shape[3] != k or w.shape[2] != c_prev:
                raise ValueError(f"inconsistent filter shape {w.shape}")
            c_prev = k
        if self.head_weights.shape != (k,):
            raise ValueError(f"head weights must have shape ({k},)")
        if any(p < 1 for p in self.pools):
            raise ValueError("pool sizes must be >= 1")
        if not all(np.all(np.isfinite(a)) for a in self.parameters()):
            raise ValueError("model parameters must be finite")

    @property
    def depth(self) -> int:
        return len(self.filters)

    @property
    def kernel_width(self) -> int:
        return self.filters[0].shape[0]

    @property
    def n_filters(self) -> int:
        return self.filters[0].shape[3]

    @property
    def in_channels(self) -> int:
        return self.filters[0].shape[2]

    def parameters(self) -> list[np.ndarray]:
        """Parameter blocks in checkpoint order (the bias as a length-1 array)."""
        return [*self.filters, self.head_weights, np.array([self.head_bias])]

    def with_parameters(self, blocks: list[np.ndarray]) -> "ConvLogisticModel":
        d = self.depth
        return ConvLogisticModel(
            filters=[np.array(b, dtype=np.float64) for b in blocks[:d]],
            pools=list(self.pools),
            head_weights=np.array(blocks[d], dtype=np.float64),
            head_bias=float(blocks[d + 1][0]),
        )

    def copy(self) -> "ConvLogisticModel":
        return self.with_parameters(self.parameters())


def init_model(
    kernel_width: int,
    n_filters: int = 4,
    in_channels: int = 1,
    depth: int = 1,
    pools: list[int] | None = None,
    rng: np.random.Generator | None = None,
) -> ConvLogisticModel:
    """Glorot-uniform filters and head weights, zero bias."""
    rng = np.random.default_rng(0) if rng is None else rng
    z = kernel_width
    filters = []
    c_in = in_channels
    for _ in range(depth):
        limit = math.sqrt(6.0 / (z * z * c_in + z * z * n_filters))
        filters.append(rng.uniform(-limit, limit, size=(z, z, c_in, n_filters)))
        c_in = n_filters
    limit = math.sqrt(6.0 / (n_filters + 1))
    head = rng.uniform(-limit, limit, size=n_filters)
    return ConvLogisticModel(filters, list(pools or [1] * depth), head, 0.0)


# -- building blocks ---------------------------------------------------------

def im2col(x: np.ndarray, z: int) -> np.ndarray:
    """N x H x W x C -> (N*H*W) x (z*z*C) matrix of same-padded windows."""
    n, h, w, c = x.shape
    win = sliding_window_view(pad_same(x, z, axes=(1, 2)), (z, z), axis=(1, 2))
    # win: N x H x W x C x z x z -> rows ordered (i, j, c) to match filters.reshape
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, z * z * c)


def col2im(cols: np.ndarray, shape: tuple[int, int, int, int], z: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add window gradients back to the input."""
    n, h, w, c = shape
    cols = cols.reshape(n, h, w, z, z, c)
    top = z // 2
    padded = np.zeros((n, h + z - 1, w + z - 1, c))
    for i in range(z):
        for j in range(z):
            padded[:, i : i + h, j : j + w, :] += cols[:, :, :, i, j, :]
    return padded[:, top : top + h, top : top + w, :]


def _pool_size(p: int, h: int, w: int) -> tuple[int, int]:
    return min(p, h), min(p, w)


def max_pool(a: np.ndarray, p: int) -> tuple[np.ndarray, tuple]:
    """Non-overlapping p x p max pooling; trailing rows/columns that do not fill a window are dropped."""
    n, h, w, k = a.shape
    ph, pw = _pool_size(p, h, w)
    ho, wo = h // ph, w // pw
    cropped = a[:, : ho * ph, : wo * pw, :]
    blocks = cropped.reshape(n, ho, ph, wo, pw, k).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, k, ph * pw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (a.shape, ph, pw, arg)


def max_pool_backward(grad: np.ndarray, cache: tuple) -> np.ndarray:
    shape, ph, pw, arg = cache
    n, h, w, k = shape
    ho, wo = grad.shape[1:3]
    blocks = np.zeros((n, ho, wo, k, ph * pw))
    np.put_along_axis(blocks, arg[..., None], grad[..., None], axis=-1)
    out = np.zeros(shape)
    out[:, : ho * ph, : wo * pw, :] = (
        blocks.reshape(n, ho, wo, k, ph, pw).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * ph, wo * pw, k)
    )
    return out


@dataclass
class _Trace:
    layers: list = field(default_factory=list)
    features: np.ndarray | None = None


def _prepare(images: np.ndarray, model: ConvLogisticModel) -> np.ndarray:
    """Batches are N x H x W x C; N x H x W is accepted for single-channel models."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3 and model.in_channels == 1:
        x = x[..., None]
    if x.ndim != 4 or x.shape[-1] != model.in_channels:
        raise ValueError(f"input of shape {np.shape(images)} does not match a {model.in_channels}-channel model")
    return x


def forward_logits(
    model: ConvLogisticModel,
    images: np.ndarray,
    readout: Readout = "scene",
    keep: bool = False,
    cols0: np.ndarray | None = None,
):
    """Logits for a batch (N in scene readout, N x H x W in pixel readout).

    ``cols0`` optionally supplies ``im2col(images, z)`` for the first layer.
    """
    x = _prepare(images, model)
    if readout == "pixel" and any(p > 1 for p in model.pools):
        raise ValueError("pixel readout needs a model without pooling")
    z = model.kernel_width
    trace = _Trace()
    a = x
    for l, (w, p) in enumerate(zip(model.filters, model.pools)):
        cols = cols0 if l == 0 and cols0 is not None else im2col(a, z)
        wm = w.reshape(-1, w.shape[3]).astype(cols.dtype, copy=False)
        pre = (cols @ wm).reshape(*a.shape[:3], w.shape[3])
        act = np.maximum(pre, 0.0)
        pool_cache = None
        if p > 1:
            act, pool_cache = max_pool(act, p)
        if keep:
            trace.layers.append((a.shape, cols, pre, pool_cache))
        a = act
    if readout == "scene":
        feats = a.mean(axis=(1, 2))
        logits = feats @ model.head_weights + model.head_bias
    elif readout == "pixel":
        feats = a
        logits = a @ model.head_weights + model.head_bias
    else:
        raise ValueError(f"unknown readout {readout!r}")
    trace.features = feats
    return (logits, trace) if keep else logits


def forward(model: ConvLogisticModel, raster, readout: Readout = "scene") -> np.ndarray | float:
    """Propensity for one raster: a float (scene readout) or an H x W grid (pixel readout)."""
    x = np.asarray(getattr(raster, "values", raster), dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ValueError(f"expected one H x W x C raster, got shape {x.shape}")
    p = expit(forward_logits(model, x[None], readout))
    return float(p[0]) if readout == "scene" else p[0]


def bce_loss(propensities, treatments) -> float:
    p = np.asarray(propensities, dtype=np.float64).ravel()
    t = np.asarray(treatments, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError("propensities and treatments must have equal length")
    if p.size == 0:
        raise ValueError("empty input")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError("propensities must lie strictly inside (0, 1)")
    return float(-np.mean(t * np.log(p) + (1 - t) * np.log1p(-p)))


def bce_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    logits = np.asarray(logits, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    return float(np.mean(np.logaddexp(0.0, logits) - t * logits))


def backward(
    model: ConvLogisticModel,
    images: np.ndarray,
    targets: np.ndarray,
    readout: Readout = "scene",
    cols0: np.ndarray | None = None,
):
    """Mean BCE and its gradient, returned as blocks matching ``model.parameters()``."""
    logits, trace = forward_logits(model, images, readout, keep=True, cols0=cols0)
    t = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    if t.size == 0:
        raise ValueError("empty batch")
    loss = bce_from_logits(logits, t)
    dlogit = (expit(logits) - t) / t.size
    g_bias = np.array([dlogit.sum()])
    feats = trace.features
    if readout == "scene":
        g_head = feats.T @ dlogit
        last_shape = _layer_output_shape(trace.layers[-1])
        da = np.broadcast_to(
            (np.outer(dlogit, model.head_weights) / (last_shape[1] * last_shape[2]))[:, None, None, :], last_shape
        ).copy()
    else:
        g_head = np.tensordot(feats, dlogit, axes=([0, 1, 2], [0, 1, 2]))
        da = dlogit[..., None] * model.head_weights
    z = model.kernel_width
    grads: list[np.ndarray] = [None] * model.depth  # type: ignore[list-item]
    for l in range(model.depth - 1, -1, -1):
        in_shape, cols, pre, pool_cache = trace.layers[l]
        w = model.filters[l]
        if pool_cache is not None:
            da = max_pool_backward(da, pool_cache)
        dpre = da * (pre > 0)
        k = w.shape[3]
        dpre2 = dpre.reshape(-1, k)
        rows = np.flatnonzero(dpre2.any(axis=1)) if pool_cache is not None else None
        if rows is not None and 4 * rows.size < dpre2.shape[0]:
            # after coarse max pooling only the winning positions carry gradient
            g = cols[rows].T @ dpre2[rows].astype(cols.dtype, copy=False)
        else:
            g = cols.T @ dpre2.astype(cols.dtype, copy=False)
        grads[l] = g.astype(np.float64, copy=False).reshape(w.shape)
        if l > 0:
            da = col2im(dpre2 @ w.reshape(-1, k).T, in_shape, z)
    return loss, [*grads, g_head, g_bias]


def _layer_output_shape(layer) -> tuple:
    in_shape, cols, pre, pool_cache = layer
    if pool_cache is None:
        return pre.shape
    shape, ph, pw, arg = pool_cache
    return arg.shape


def numerical_gradient(model: ConvLogisticModel, images, targets, readout: Readout = "scene", step: float = 1e-5):
    """Central finite differences of the mean BCE, parameter by parameter."""
    blocks = [b.copy() for b in model.parameters()]
    out = []
    for bi, block in enumerate(blocks):
        g = np.zeros_like(block)
        for idx in np.ndindex(block.shape):
            orig = block[idx]
            block[idx] = orig + step
            up = bce_from_logits(forward_logits(model.with_parameters(blocks), images, readout), targets)
            block[idx] = orig - step
            down = bce_from_logits(forward_logits(model.with_parameters(blocks), images, readout), targets)
            block[idx] = orig
            g[idx] = (up - down) / (2 * step)
        out.append(g)
    return out


def gradient_check(model, images, targets, readout: Readout = "scene", step: float = 1e-5, floor: float = 1e-8) -> float:
    """Max over parameters of |analytic - numeric| / max(|analytic| + |numeric|, floor)."""
    _, analytic = backward(model, images, targets, readout)
    numeric = numerical_gradient(model, images, targets, readout, step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)
        worst = max(worst, float(rel.max()))
    return worst


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.005
    epochs: int = 100
    batch_size: int = 32
    cosine_decay: bool = True
    augmentation: Literal["none", "reflect"] = "reflect"
    nesterov: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    precision: Literal["double", "single"] = "double"
    head_init: Literal["keep", "data"] = "keep"
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be nonnegative")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.augmentation not in ("none", "reflect"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.head_init not in ("keep", "data"):
            raise ValueError(f"unknown head_init {self.head_init!r}")
        if self.precision not in ("double", "single"):
            raise ValueError(f"unknown precision {self.precision!r}")


@dataclass
class TrainResult:
    """Trained model plus loss trace.

    Trace rows are (epoch, train loss, test loss). Row 0 holds the full-data loss
    of the initial model; later rows hold the mean minibatch loss seen during that
    epoch. ``final_loss`` is the full-data loss of the returned model.
    """

    model: ConvLogisticModel
    trace: list[tuple[int, float, float | None]]
    final_loss: float

    @property
    def initial_loss(self) -> float:
        return self.trace[0][1]


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


class _Adam:
    """ADAM, with the Nesterov (NAdam) look-ahead unless ``nesterov`` is off."""

    def __init__(self, shapes, beta1: float, beta2: float, eps: float, nesterov: bool):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.b1, self.b2, self.eps, self.nesterov = beta1, beta2, eps, nesterov
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float, decay: float = 0.0) -> None:
        self.t += 1
        b1, b2, t = self.b1, self.b2, self.t
        for i, (p, g, m, v) in enumerate(zip(params, grads, self.m, self.v)):
            if decay and i < len(params) - 1:
                # decoupled decay on weights, never on the bias
                p -= lr * decay * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.nesterov:
                m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1**t)
            else:
                m_hat = m / (1 - b1**t)
            p -= lr * m_hat / (np.sqrt(v / (1 - b2**t)) + self.eps)


def reflect(images: np.ndarray, targets: np.ndarray, flips: np.ndarray, readout: Readout):
    """Flip each example's rows and/or columns; pixel targets follow the image."""
    out_x = images.copy()
    out_t = targets.copy()
    for i, (fh, fw) in enumerate(flips):
        if fh:
            out_x[i] = out_x[i, ::-1]
            if readout == "pixel":
                out_t[i] = out_t[i, ::-1]
        if fw:
            out_x[i] = out_x[i, :, ::-1]
            if readout == "pixel":
                out_t[i] = out_t[i, :, ::-1]
    return out_x, out_t


def train(
    model: ConvLogisticModel,
    images: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig = TrainConfig(),
    readout: Readout = "scene",
    test: tuple[np.ndarray, np.ndarray] | None = None,
) -> TrainResult:
    """Minimize mean BCE with mini-batch (N)ADAM.

    ``targets`` holds one treatment per image (scene readout) or an H x W treatment
    grid per image (pixel readout). Batches are drawn over images.
    """
    x = _prepare(images, model)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape[0] != x.shape[0]:
        raise ValueError("need one target entry per image")
    if t.min() == t.max():
        raise ValueError("training data contains a single treatment class")
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    params = model.parameters()
    params[-1] = params[-1].copy()
    n = x.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = config.epochs * steps_per_epoch
    opt = _Adam([p.shape for p in params], config.beta1, config.beta2, config.epsilon, config.nesterov)

    # the head is trained on features standardized by (shift, scale); identity unless head_init="data"
    shift = np.zeros(model.n_filters)
    scale = np.ones(model.n_filters)

    def current() -> ConvLogisticModel:
        head = params[-2] / scale
        return model.with_parameters([*params[:-2], head, params[-1] - head @ shift])

    # with fixed inputs the first layer's windows can be computed once
    cached = None
    if config.augmentation == "none":
        z = model.kernel_width
        dtype = np.float32 if config.precision == "single" else np.float64
        cached = im2col(x, z).astype(dtype, copy=False).reshape(n, -1, z * z * model.in_channels)

    def first_cols(idx=None):
        if cached is None:
            return None
        c = cached if idx is None else cached[idx]
        return c.reshape(-1, c.shape[-1])

    def train_loss(m: ConvLogisticModel) -> float:
        return bce_from_logits(forward_logits(m, x, readout, cols0=first_cols()), t)

    def test_loss(m: ConvLogisticModel) -> float | None:
        if test is None:
            return None
        return bce_from_logits(forward_logits(m, test[0], readout), test[1])

    if config.head_init == "data":
        shift, scale = _feature_stats(current(), x, readout, first_cols())
        share = float(np.clip(t.mean(), 1e-6, 1 - 1e-6))
        params[-1][0] = math.log(share / (1 - share))

    trace = [(0, train_loss(current()), test_loss(current()))]
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        flips = rng.random((n, 2)) < 0.5
        seen = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            bx, bt = x[idx], t[idx]
            if config.augmentation == "reflect":
                bx, bt = reflect(bx, bt, flips[idx], readout)
            loss, grads = backward(current(), bx, bt, readout, cols0=first_cols(idx))
            grads[-2] = (grads[-2] - grads[-1][0] * shift) / scale
            seen += loss * len(idx)
            lr = cosine_lr(config.learning_rate, step, total) if config.cosine_decay else config.learning_rate
            opt.step(params, grads, lr, config.weight_decay)
            step += 1
        trace.append((epoch, seen / n, test_loss(current())))
    final = current()
    return TrainResult(final, trace, train_loss(final))


def _feature_stats(model, x, readout, cols0) -> tuple[np.ndarray, np.ndarray]:
    """Mean and spread of each pooled feature under ``model`` (spread 1 where constant)."""
    _, trace = forward_logits(model, x, readout, keep=True, cols0=cols0)
    feats = trace.features.reshape(-1, model.n_filters)
    sd = feats.std(axis=0)
    return feats.mean(axis=0), np.where(sd > 0, sd, 1.0)


def predict_propensities(model: ConvLogisticModel, images, readout: Readout = "scene", eta: float = 0.01) -> np.ndarray:
    """Propensities clipped to [eta, 1 - eta]; flattened per pixel in pixel readout."""
    if not 0 <= eta < 0.5:
        raise ValueError("eta must lie in [0, 0.5)")
    x = np.stack([getattr(r, "values", r) for r in images]) if isinstance(images, list) else images
    p = expit(forward_logits(model, x, readout)).ravel()
    return np.clip(p, eta, 1 - eta)


def extract_patches(image: np.ndarray, z: int) -> np.ndarray:
    """Zero-padded (2*(z//2)+1)-wide patch around every pixel: (H*W) x P x P x C."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    r = z // 2
    padded = np.pad(x, ((r, r), (r, r), (0, 0)))
    win = sliding_window_view(padded, (2 * r + 1, 2 * r + 1), axis=(0, 1))
    h, w, c = x.shape
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, 2 * r + 1, 2 * r + 1, c)


def channel_mean_map(model: ConvLogisticModel, image) -> np.ndarray:
    """Last conv block's activations averaged over filters, for inspection."""
    x = np.asarray(getattr(image, "values", image), dtype=np.float64)
    x = _prepare(x[None] if x.ndim == 3 else x[None, ..., None], model)
    _, trace = forward_logits(model, x, "pixel" if all(p == 1 for p in model.pools) else "scene", keep=True)
    if all(p == 1 for p in model.pools):
        return trace.features[0].mean(axis=-1)
    raise ValueError("channel map is only defined for models without pooling")


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"IMGCONF\x00"
VERSION = 1
_HEADER = struct.Struct("<8sIIIII")


def save_model(model: ConvLogisticModel, path: str | Path) -> None:
    """Header (magic, version, depth, K, z, C_in, pool sizes) then float64 LE blocks."""
    head = _HEADER.pack(MAGIC, VERSION, model.depth, model.n_filters, model.kernel_width, model.in_channels)
    pools = struct.pack(f"<{model.depth}I", *model.pools)
    body = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in model.parameters())
    Path(path).write_bytes(head + pools + body)


def load_model(path: str | Path) -> ConvLogisticModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, depth, k, z, c_in = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = _HEADER.size
    pools = list(struct.unpack_from(f"<{depth}I", data, pos))
    pos += 4 * depth
    shapes = [(z, z, c_in if l == 0 else k, k) for l in range(depth)] + [(k,), (1,)]
    blocks = []
    for shape in shapes:
        count = int(np.prod(shape))
        if pos + 8 * count > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        blocks.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after parameters")
    template = ConvLogisticModel(
        [np.zeros(s) for s in shapes[:depth]], pools, np.zeros(k), 0.0
    )
    return template.with_parameters(blocks)
