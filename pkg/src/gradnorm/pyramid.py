"""Bilinear resampling and scale-indexed image pyramids.

Two resamplers live here. :func:`resample_bilinear` is the production path
(half-pixel centred, clamp-to-edge). :func:`upsample_integer_grid` inserts
``z`` linearly interpolated samples between neighbours of a 1-D sequence and
keeps the original samples in place; it exists so closed-form gradient
expectations can be checked exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .imageio import Image

REFERENCE_SCALE = 1.0


def scaled_size(n: int, scale: float) -> int:
    """Round-half-up of ``n * scale``.

    The product is rounded to 9 decimals first so that e.g. ``35 * 0.3``
    (10.499999999999998 in binary) lands on 11 rather than 10.
    """
    return int(math.floor(round(n * scale, 9) + 0.5))


@dataclass(frozen=True)
class ScaleSet:
    """Strictly increasing positive scales containing exactly one 1.0."""

    scales: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(s) for s in self.scales)
        if not vals:
            raise ValueError("scale set is empty")
        for s in vals:
            if not math.isfinite(s) or s <= 0:
                raise ValueError(f"scales must be finite and > 0, got {s}")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ValueError("scales must be strictly increasing")
        if vals.count(REFERENCE_SCALE) != 1:
            raise ValueError("scale set must contain the reference scale 1.0")
        object.__setattr__(self, "scales", vals)

    @classmethod
    def grid(cls, start: float = 0.1, stop: float = 2.0, step: float = 0.1) -> "ScaleSet":
        """Evenly spaced scales from ``start`` to ``stop`` inclusive.

        Grid points are rounded to 12 decimals to remove accumulation noise.
        The point within 1e-9 of 1.0 is snapped to exactly 1.0; a grid without
        such a point is rejected.
        """
        if step <= 0:
            raise ValueError(f"scale step must be > 0, got {step}")
        if start <= 0 or stop < start:
            raise ValueError(f"invalid scale range [{start}, {stop}]")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        vals = [round(start + i * step, 12) for i in range(n)]
        hits = [i for i, v in enumerate(vals) if abs(v - REFERENCE_SCALE) <= 1e-9]
        if not hits:
            raise ValueError(
                f"scale grid start={start} step={step} does not pass through 1.0"
            )
        vals[hits[0]] = REFERENCE_SCALE
        return cls(tuple(vals))

    def __iter__(self) -> Iterator[float]:
        return iter(self.scales)

    def __len__(self) -> int:
        return len(self.scales)


@dataclass(frozen=True)
class PyramidLevel:
    scale: float
    image: Image


@dataclass(frozen=True)
class Pyramid:
    reference: Image
    levels: tuple[PyramidLevel, ...]

    @property
    def scales(self) -> tuple[float, ...]:
        return tuple(lv.scale for lv in self.levels)

    def level(self, scale: float) -> Image:
        for lv in self.levels:
            if lv.scale == scale:
                return lv.image
        raise KeyError(scale)


def _axis_weights(n_in: int, n_out: int, scale: float):
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    return i0, i1, frac


def resample_bilinear(img: Image, scale: float) -> Image:
    """Resize ``img`` by ``scale`` with bilinear interpolation.

    Output size is ``round(height * scale) x round(width * scale)``. Output
    pixel ``x`` samples the source at ``(x + 0.5) / scale - 0.5``, clamped to
    the image bounds, and blends the four surrounding pixels.

    Raises
    ------
    ValueError
        If ``scale <= 0`` or either output dimension rounds to zero.
    """
    scale = float(scale)
    if not math.isfinite(scale) or scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    if scale == REFERENCE_SCALE:
        return Image(img.data)
    h_out = scaled_size(img.height, scale)
    w_out = scaled_size(img.width, scale)
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"scale {scale} maps {img.width}x{img.height} to {w_out}x{h_out}"
        )

    src = img.data
    y0, y1, fy = _axis_weights(img.height, h_out, scale)
    x0, x1, fx = _axis_weights(img.width, w_out, scale)

    rows = src[y0, :] * (1.0 - fy)[:, None] + src[y1, :] * fy[:, None]
    out = rows[:, x0] * (1.0 - fx)[None, :] + rows[:, x1] * fx[None, :]
    # blends are convex, so only rounding can leave [0, 1]
    return Image(np.clip(out, src.min(), src.max()))


def upsample_integer_grid(row: Sequence[float], z: int) -> np.ndarray:
    """Insert ``z`` linearly interpolated samples between each adjacent pair.

    The original samples are kept at positions ``0, z+1, 2(z+1), ...``; the
    sample ``d`` steps right of an original ``f(x)`` is
    ``((z + 1 - d) f(x) + d f(x+1)) / (z + 1)``. Output length is
    ``(n - 1) z + n``.
    """
    f = np.asarray(row, dtype=np.float64)
    if f.ndim != 1 or f.size < 2:
        raise ValueError("row must be 1-D with at least 2 samples")
    z = int(z)
    if z < 0:
        raise ValueError(f"z must be >= 0, got {z}")
    if z == 0:
        return f.copy()
    k = z + 1
    d = np.arange(k, dtype=np.float64)
    seg = ((k - d)[None, :] * f[:-1, None] + d[None, :] * f[1:, None]) / k
    seg[:, 0] = f[:-1]
    return np.concatenate([seg.ravel(), f[-1:]])


def build_pyramid(img: Image, scales: ScaleSet) -> Pyramid:
    """Resample ``img`` at every scale in ``scales``.

    The level at 1.0 is the reference image itself.
    """
    levels = []
    for s in scales:
        level_img = img if s == REFERENCE_SCALE else resample_bilinear(img, s)
        levels.append(PyramidLevel(s, level_img))
    return Pyramid(img, tuple(levels))
