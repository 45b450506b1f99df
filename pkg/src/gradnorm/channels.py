"""Gradient channel features with optional scale normalization.

A :class:`ChannelStack` holds one gradient-magnitude channel and ``bins``
contrast-insensitive orientation channels, each summed over square cells.
When a normalization model is supplied, the per-pixel magnitude of a level
at scale ``s`` is multiplied by ``g(s)`` before orientation binning, so the
correction carries into every histogram channel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import SchemaError
from .gradient import gradient_components
from .imageio import Image
from .pyramid import REFERENCE_SCALE, ScaleSet, build_pyramid

DUMP_MAGIC = b"GSCH"
DUMP_VERSION = 1
_HEADER = struct.Struct("<4sIdIIII")


@dataclass(frozen=True, eq=False)
class ChannelStack:
    """Cell-aggregated channels, shape ``(1 + bins, cells_h, cells_w)``.

    Plane 0 is magnitude; planes 1..bins are orientation bins.
    """

    scale: float
    cell_size: int
    channels: np.ndarray
    g: float = 1.0

    @property
    def bins(self) -> int:
        return self.channels.shape[0] - 1

    @property
    def cells_h(self) -> int:
        return self.channels.shape[1]

    @property
    def cells_w(self) -> int:
        return self.channels.shape[2]

    @property
    def magnitude(self) -> np.ndarray:
        return self.channels[0]

    @property
    def orientation(self) -> np.ndarray:
        return self.channels[1:]

    def __eq__(self, other):
        if not isinstance(other, ChannelStack):
            return NotImplemented
        return (
            self.scale == other.scale
            and self.cell_size == other.cell_size
            and self.channels.shape == other.channels.shape
            and bool(np.array_equal(self.channels, other.channels))
        )


def normalization_factor(model, scale: float) -> float:
    """``g(scale)``; exactly 1 at the reference scale or without a model."""
    if model is None or scale == REFERENCE_SCALE:
        return 1.0
    g = float(model.g(scale))
    if not (math.isfinite(g) and g > 0):
        raise ValueError(f"normalization g({scale}) = {g} is not positive")
    return g


def _cell_sum(field: np.ndarray, cs: int, ch: int, cw: int) -> np.ndarray:
    return field[: ch * cs, : cw * cs].reshape(ch, cs, cw, cs).sum(axis=(1, 3))


def compute_channels(
    img: Image,
    scale: float = 1.0,
    model=None,
    cell_size: int = 4,
    bins: int = 6,
) -> ChannelStack:
    """Magnitude and soft-binned orientation channels of one pyramid level.

    ``scale`` is the level's scale relative to the reference image and only
    selects ``g(scale)``; ``img`` is used as given.
    """
    cell_size = int(cell_size)
    bins = int(bins)
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if cell_size < 1:
        raise ValueError(f"cell_size must be >= 1, got {cell_size}")
    if img.width < cell_size or img.height < cell_size:
        raise ValueError(
            f"image {img.width}x{img.height} is smaller than one {cell_size}x{cell_size} cell"
        )

    gx, gy = gradient_components(img)
    mag = np.hypot(gx, gy)
    g = normalization_factor(model, scale)
    if g != 1.0:
        mag = mag * g

    theta = np.arctan2(gy, gx)
    theta = np.where(mag > 0, np.mod(theta, math.pi), 0.0)
    # bin k is centred on (k + 0.5) * pi / bins; wraps around pi
    pos = theta * (bins / math.pi) - 0.5
    lo = np.floor(pos)
    w_hi = pos - lo
    k_lo = lo.astype(np.intp) % bins
    k_hi = (k_lo + 1) % bins

    ch = img.height // cell_size
    cw = img.width // cell_size
    out = np.zeros((bins + 1, ch, cw))
    out[0] = _cell_sum(mag, cell_size, ch, cw)
    w_lo_mag = mag * (1.0 - w_hi)
    w_hi_mag = mag * w_hi
    for k in range(bins):
        plane = np.where(k_lo == k, w_lo_mag, 0.0) + np.where(k_hi == k, w_hi_mag, 0.0)
        out[k + 1] = _cell_sum(plane, cell_size, ch, cw)
    return ChannelStack(float(scale), cell_size, out, g)


def normalized_channel_pyramid(
    img: Image,
    scales: ScaleSet,
    model=None,
    cell_size: int = 4,
    bins: int = 6,
) -> list[ChannelStack]:
    pyr = build_pyramid(img, scales)
    return [compute_channels(lv.image, lv.scale, model, cell_size, bins) for lv in pyr.levels]


# -- cross-scale comparison --------------------------------------------------


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` matrix of fractional cell overlaps."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = edges_out[i], edges_out[i + 1]
        j0, j1 = int(math.floor(a)), min(int(math.ceil(b)), n_in)
        for j in range(j0, j1):
            w[i, j] = min(b, j + 1) - max(a, j)
        w[i] /= w[i].sum()
    return w


def block_average(field: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-weighted downsizing of a 2-D field; plain block means when the
    sizes divide evenly."""
    h, w = field.shape
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ValueError(f"cannot block-average {h}x{w} to {out_h}x{out_w}")
    return _area_weights(h, out_h) @ field @ _area_weights(w, out_w).T


def reduce_to_grid(stack: ChannelStack, cells_h: int, cells_w: int) -> ChannelStack:
    if (stack.cells_h, stack.cells_w) == (cells_h, cells_w):
        return stack
    planes = np.stack([block_average(p, cells_h, cells_w) for p in stack.channels])
    return ChannelStack(stack.scale, stack.cell_size, planes, stack.g)


def common_grid(stacks: Sequence[ChannelStack]) -> list[ChannelStack]:
    """Block-average every stack down to the coarsest grid among them."""
    ch = min(s.cells_h for s in stacks)
    cw = min(s.cells_w for s in stacks)
    return [reduce_to_grid(s, ch, cw) for s in stacks]


@dataclass(frozen=True)
class VarianceReport:
    mean_variance: float
    magnitude_variance: float
    per_channel: tuple[float, ...]
    n_objects: int
    n_cells: int


def cross_scale_variance(
    stacks_per_object: Sequence[tuple[str, Sequence[ChannelStack]]],
) -> VarianceReport:
    """Population variance of each cell value across scales, averaged.

    ``mean_variance`` pools every channel; ``magnitude_variance`` uses
    plane 0 only. All stacks of one object must share their grid.
    """
    if not stacks_per_object:
        raise ValueError("no objects")
    per_obj = []
    n_cells = 0
    for obj_id, stacks in stacks_per_object:
        stacks = list(stacks)
        if len(stacks) < 2:
            raise ValueError(f"object {obj_id!r}: need >= 2 scales, got {len(stacks)}")
        shapes = {s.channels.shape for s in stacks}
        if len(shapes) != 1:
            raise ValueError(f"object {obj_id!r}: mismatched channel grids {sorted(shapes)}")
        cube = np.stack([s.channels for s in stacks])
        # centring on one scale keeps identical levels at exactly zero
        per_obj.append((cube - cube[0]).var(axis=0))
        n_cells += cube.shape[2] * cube.shape[3]

    n_planes = {v.shape[0] for v in per_obj}
    if len(n_planes) != 1:
        raise ValueError("objects disagree on channel count")
    per_channel = tuple(
        float(np.mean([v[k].mean() for v in per_obj])) for k in range(n_planes.pop())
    )
    return VarianceReport(
        mean_variance=float(np.mean([v.mean() for v in per_obj])),
        magnitude_variance=per_channel[0],
        per_channel=per_channel,
        n_objects=len(per_obj),
        n_cells=n_cells,
    )


# -- binary dump -------------------------------------------------------------


def dump_bytes(stack: ChannelStack) -> bytes:
    header = _HEADER.pack(
        DUMP_MAGIC, DUMP_VERSION, float(stack.scale), stack.cell_size,
        stack.bins, stack.cells_w, stack.cells_h,
    )
    return header + np.ascontiguousarray(stack.channels, dtype="<f4").tobytes()


def write_channel_dump(stack: ChannelStack, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_bytes(stack))


def read_channel_dump(path) -> ChannelStack:
    """Inverse of :func:`write_channel_dump` (channel values come back as f32)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        raise SchemaError("channel dump: truncated header")
    magic, version, scale, cell_size, bins, cw, ch = _HEADER.unpack_from(buf)
    if magic != DUMP_MAGIC:
        raise SchemaError(f"channel dump: bad magic {magic!r}")
    if version != DUMP_VERSION:
        raise SchemaError(f"channel dump: unsupported version {version}")
    n = (bins + 1) * ch * cw
    body = buf[_HEADER.size:]
    if len(body) != 4 * n:
        raise SchemaError(f"channel dump: expected {4 * n} payload bytes, got {len(body)}")
    planes = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(bins + 1, ch, cw)
    return ChannelStack(scale, cell_size, planes)
