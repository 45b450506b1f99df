"""Finite differences and gradient-expectation statistics.

The 1-D statistics use unhalved differences: the central difference is
``|f(x+1) - f(x-1)|`` and the intermediate difference ``|f(x+1) - f(x)|``.
Only ratios of these expectations feed the normalization model, so the
missing factor of 1/2 on the central difference is immaterial there. The
per-pixel magnitude field used for features does halve its differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .imageio import Image


def _as_row(row) -> np.ndarray:
    f = np.asarray(row, dtype=np.float64)
    if f.ndim != 1:
        raise ValueError("row must be one-dimensional")
    return f


def central_diff(row: Sequence[float], x: int) -> float:
    """``|f(x+1) - f(x-1)|`` at the 1-based interior index ``x``."""
    f = _as_row(row)
    if not 2 <= x <= f.size - 1:
        raise IndexError(f"interior index {x} outside 2..{f.size - 1}")
    return abs(float(f[x]) - float(f[x - 2]))


def intermediate_diff(row: Sequence[float], x: int) -> float:
    """``|f(x+1) - f(x)|`` at the 1-based index ``x``."""
    f = _as_row(row)
    if not 1 <= x <= f.size - 1:
        raise IndexError(f"index {x} outside 1..{f.size - 1}")
    return abs(float(f[x]) - float(f[x - 1]))


def central_diffs(row) -> np.ndarray:
    """All interior central differences of a row (length ``n - 2``)."""
    f = _as_row(row)
    return np.abs(f[2:] - f[:-2])


def intermediate_diffs(row) -> np.ndarray:
    """All adjacent differences of a row (length ``n - 1``)."""
    f = _as_row(row)
    return np.abs(f[1:] - f[:-1])


def mean_central_diff(row) -> float:
    f = _as_row(row)
    if f.size < 3:
        raise ValueError("need at least 3 samples for a central difference")
    return float(np.mean(central_diffs(f)))


def mean_intermediate_diff(row) -> float:
    f = _as_row(row)
    if f.size < 2:
        raise ValueError("need at least 2 samples for an intermediate difference")
    return float(np.mean(intermediate_diffs(f)))


@dataclass(frozen=True)
class GradientStats:
    """Pooled gradient expectations of one image.

    ``c`` is ``None`` when ``e_phi`` is zero (e.g. constant images); callers
    aggregating over a corpus skip such entries.
    """

    e_phi: float
    e_phi_tilde: float
    c: Optional[float]
    n_terms_phi: int
    n_terms_phi_tilde: int

    def __post_init__(self):
        for name in ("e_phi", "e_phi_tilde"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @property
    def c_defined(self) -> bool:
        return self.c is not None


def stats_from_row(row) -> GradientStats:
    """Gradient statistics of a single 1-D sequence."""
    f = _as_row(row)
    if f.size < 3:
        raise ValueError("need at least 3 samples")
    phi = central_diffs(f)
    tilde = intermediate_diffs(f)
    e_phi = float(phi.mean())
    e_tilde = float(tilde.mean())
    c = e_tilde / e_phi if e_phi > 0 else None
    return GradientStats(e_phi, e_tilde, c, phi.size, tilde.size)


def image_gradient_stats(img: Image) -> GradientStats:
    """Gradient expectations pooled over every row and every column.

    Absolute differences from both axes are summed into one pool per
    operator and divided by the pooled term count; ``c`` is the ratio of the
    two pooled means.
    """
    if img.width < 3 or img.height < 3:
        raise ValueError(f"image must be at least 3x3, got {img.width}x{img.height}")
    a = img.data
    phi_sum = float(np.abs(a[:, 2:] - a[:, :-2]).sum()) + float(np.abs(a[2:, :] - a[:-2, :]).sum())
    tilde_sum = float(np.abs(a[:, 1:] - a[:, :-1]).sum()) + float(np.abs(a[1:, :] - a[:-1, :]).sum())
    h, w = a.shape
    n_phi = h * (w - 2) + w * (h - 2)
    n_tilde = h * (w - 1) + w * (h - 1)
    e_phi = phi_sum / n_phi
    e_tilde = tilde_sum / n_tilde
    c = e_tilde / e_phi if e_phi > 0 else None
    return GradientStats(e_phi, e_tilde, c, n_phi, n_tilde)


def gradient_components(img: Image) -> tuple[np.ndarray, np.ndarray]:
    """Halved central differences ``(gx, gy)`` with clamp-to-edge borders."""
    if img.width < 3 or img.height < 3:
        raise ValueError(f"image must be at least 3x3, got {img.width}x{img.height}")
    p = np.pad(img.data, 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5
    return gx, gy


def gradient_magnitude_field(img: Image) -> np.ndarray:
    """Per-pixel ``sqrt(gx**2 + gy**2)``, same shape as the image."""
    gx, gy = gradient_components(img)
    return np.hypot(gx, gy)
