"""Raster and kernel primitives: same-size 2D convolution, neighborhoods, pooling,
normalization, and plain-text / PGM raster I/O.

Convolution here is cross-correlation (no kernel flip). A z x z kernel centred at
pixel (h, w) covers row offsets ``-z//2 .. z - 1 - z//2`` (same for columns), so for
even z the footprint sits one pixel up-left of centre. Taps that land outside the
image read zero.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DegenerateInputError(ValueError):
    """Raised when an input has no variation where variation is required."""


@dataclass(frozen=True)
class Raster:
    """One scene: an H x W x C grid of finite reals."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"raster must be H x W x C with positive sizes, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("raster values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def reduce_channels(self) -> np.ndarray:
        return self.values.mean(axis=2)


@dataclass(frozen=True)
class Kernel:
    """A square z x z filter."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] < 1:
            raise ValueError(f"kernel must be a non-empty square matrix, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class Neighborhood:
    center: tuple[int, int]
    indices: list[tuple[int, int]] = field(default_factory=list)


def _check_size(z: int) -> int:
    if isinstance(z, bool) or int(z) != z or z < 1:
        raise ValueError(f"kernel size must be a positive integer, got {z!r}")
    return int(z)


def kernel_offsets(z: int) -> range:
    """Row (or column) offsets covered by a z-wide kernel relative to its centre."""
    z = _check_size(z)
    return range(-(z // 2), z - z // 2)


def make_diagonal_kernel(z: int, normalize: bool = True) -> Kernel:
    """Ones on the main diagonal, zeros elsewhere.

    With ``normalize`` the weights are divided by sqrt(z), which gives unit output
    variance on i.i.d. unit-variance input. Exact moment matching on a real corpus
    is done afterwards by batch standardization of the convolved field
    (see :func:`imgconf.dgp.gen_confounder_pixel`).
    """
    z = _check_size(z)
    w = np.eye(z)
    if normalize:
        w = w / math.sqrt(z)
    return Kernel(w)


def neighborhood(h: int, w: int, z: int, height: int, width: int) -> Neighborhood:
    """Index set {h-z//2..h+z//2} x {w-z//2..w+z//2} clipped to the image."""
    r = _check_size(z) // 2
    rows = [i for i in range(h - r, h + r + 1) if 0 <= i < height]
    cols = [j for j in range(w - r, w + r + 1) if 0 <= j < width]
    return Neighborhood((h, w), [(i, j) for i in rows for j in cols])


def _as_grid(raster: Raster | np.ndarray) -> np.ndarray:
    if isinstance(raster, Raster):
        return raster.reduce_channels()
    a = np.asarray(raster, dtype=np.float64)
    if a.ndim == 3:
        return a.mean(axis=2)
    if a.ndim != 2:
        raise ValueError(f"expected an H x W grid, got shape {a.shape}")
    return a


def pad_same(grid: np.ndarray, z: int, axes: tuple[int, int] = (0, 1)) -> np.ndarray:
    """Zero-pad so that a z-wide kernel yields same-size output along ``axes``."""
    before, after = z // 2, z - 1 - z // 2
    pad = [(0, 0)] * grid.ndim
    for ax in axes:
        pad[ax] = (before, after)
    return np.pad(grid, pad)


def convolve2d(raster: Raster | np.ndarray, kernel: Kernel, channel_reduce: str = "mean") -> np.ndarray:
    """Same-size, zero-padded 2D cross-correlation of the channel-mean image."""
    if channel_reduce != "mean":
        raise ValueError(f"unsupported channel_reduce {channel_reduce!r}")
    grid = _as_grid(raster)
    z = kernel.size
    if z > 2 * min(grid.shape):
        raise ValueError(f"kernel of size {z} is degenerate for a {grid.shape[0]}x{grid.shape[1]} image")
    windows = sliding_window_view(pad_same(grid, z), (z, z))
    return np.einsum("hwij,ij->hw", windows, kernel.weights)


def convolve_batch(grids: np.ndarray, kernel: Kernel) -> np.ndarray:
    """:func:`convolve2d` over a stack of N x H x W grids."""
    grids = np.asarray(grids, dtype=np.float64)
    z = kernel.size
    if z > 2 * min(grids.shape[1:3]):
        raise ValueError(f"kernel of size {z} is degenerate for {grids.shape[1]}x{grids.shape[2]} images")
    windows = sliding_window_view(pad_same(grids, z, axes=(1, 2)), (z, z), axis=(1, 2))
    return np.einsum("nhwij,ij->nhw", windows, kernel.weights)


def max_pool_scene(grid: np.ndarray, region: Iterable[tuple[int, int]] | None = None) -> float:
    """Max of ``grid`` over ``region`` (the whole grid when None)."""
    grid = np.asarray(grid, dtype=np.float64)
    if region is None:
        if grid.size == 0:
            raise ValueError("cannot pool an empty region")
        return float(grid.max())
    idx = list(region)
    if not idx:
        raise ValueError("cannot pool an empty region")
    rows, cols = zip(*idx)
    return float(grid[list(rows), list(cols)].max())


def global_normalize(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Shift to mean 0 and scale to unit population variance."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("need at least two values to normalize")
    centered = v - v.mean()
    sd = math.sqrt(float(np.mean(centered**2)))
    if sd == 0.0 or sd < 1e-300:
        raise DegenerateInputError("all values are identical; normalization is undefined")
    out = centered / sd
    # one refinement pass tightens mean/variance to ~1 ulp for badly scaled input
    out -= out.mean()
    return out / math.sqrt(float(np.mean(out**2)))


# -- I/O ---------------------------------------------------------------------

_CSV_HEADER = re.compile(r"#\s*height=(\d+)\s+width=(\d+)\s+channels=(\d+)")


def write_raster_csv(raster: Raster, path: str | Path) -> None:
    """One text row per pixel row, channel values interleaved per column."""
    h, w, c = raster.values.shape
    lines = [f"# height={h} width={w} channels={c}"]
    for row in raster.values.reshape(h, w * c):
        lines.append(",".join(repr(float(x)) for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_raster_csv(path: str | Path) -> Raster:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ValueError(f"{path}: empty raster file")
    m = _CSV_HEADER.fullmatch(text[0].strip())
    if m is None:
        raise ValueError(f"{path}:1: expected '# height=H width=W channels=C' header")
    h, w, c = (int(g) for g in m.groups())
    rows = [line for line in text[1:] if line.strip()]
    if len(rows) != h:
        raise ValueError(f"{path}: header declares {h} rows, found {len(rows)}")
    data = np.array([[float(x) for x in line.split(",")] for line in rows])
    if data.shape != (h, w * c):
        raise ValueError(f"{path}: expected {w * c} values per row, got {data.shape[1]}")
    return Raster(data.reshape(h, w, c))


def write_raster_pgm(raster: Raster, path: str | Path, maxval: int = 65535) -> None:
    """Binary P5 export of a single-channel raster.

    Values are mapped linearly onto 0..maxval; the offset and scale go into a
    header comment so :func:`read_raster_pgm` restores them (up to quantization).
    """
    if raster.channels != 1:
        raise ValueError("PGM export needs a single-channel raster")
    if not 0 < maxval < 65536:
        raise ValueError("maxval must be in 1..65535")
    v = raster.values[:, :, 0]
    lo, hi = float(v.min()), float(v.max())
    scale = (hi - lo) / maxval if hi > lo else 1.0
    q = np.rint((v - lo) / scale).astype(np.int64)
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n# imgconf offset={lo!r} scale={scale!r}\n{raster.width} {raster.height}\n{maxval}\n"
    Path(path).write_bytes(header.encode("ascii") + q.astype(dtype).tobytes())


def read_raster_pgm(path: str | Path) -> Raster:
    data = Path(path).read_bytes()
    pos = 0
    tokens: list[bytes] = []
    offset, scale = 0.0, 1.0
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # header: magic, width, height, maxval, separated by whitespace and comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            m = re.search(rb"imgconf offset=(\S+) scale=(\S+)", data[pos:end])
            if m:
                offset, scale = float(m.group(1)), float(m.group(2))
            pos = end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    pix = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return Raster(offset + scale * pix.reshape(height, width).astype(np.float64))
