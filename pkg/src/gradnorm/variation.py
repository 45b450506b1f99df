"""Closed-form gradient variation under linear interpolation.

For a sequence upsampled by inserting ``z = s - 1`` interpolated samples
between neighbours, the mean central difference of the result is an exact
function of the source's mean central and intermediate differences
(:func:`expected_gradient_finite`). Its large-``n`` limit and the ratio to
the reference expectation depend on the source only through
``c = E[intermediate] / E[central]``.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateDataError
from .gradient import GradientStats

C_MIN = 0.5
# slack for c computed from ramps, which lands on 0.5 only up to rounding
C_TOL = 1e-9


def _check_c(c: float) -> float:
    c = float(c)
    if not math.isfinite(c) or c < C_MIN - C_TOL:
        raise ValueError(f"c must be finite and >= {C_MIN}, got {c}")
    return c


@dataclass(frozen=True)
class VariationModel:
    """Corpus-level constant ``c`` with its spread."""

    c: float
    stdev: float = 0.0
    count: int = 1
    skipped: int = 0

    def __post_init__(self):
        _check_c(self.c)

    def rho(self, s: float) -> float:
        return rho(s, self.c)


def expected_gradient_finite(row: Sequence[float], z: int) -> float:
    """Mean central difference of ``row`` after inserting ``z`` samples per gap.

    Computed from the source row alone::

        [ sum_{x=2}^{n-1} |f(x+1) - f(x-1)| / (z+1)
          + sum_{x=1}^{n-1} 2z |f(x+1) - f(x)| / (z+1) ] / ((z+1) n - z - 2)
    """
    f = np.asarray(row, dtype=np.float64)
    if f.ndim != 1 or f.size < 3:
        raise ValueError("row must be 1-D with at least 3 samples")
    z = int(z)
    if z < 0:
        raise ValueError(f"z must be >= 0, got {z}")
    n = f.size
    k = z + 1
    central = float(np.abs(f[2:] - f[:-2]).sum())
    adjacent = float(np.abs(f[1:] - f[:-1]).sum())
    return (central / k + 2 * z * adjacent / k) / (k * n - z - 2)


def limit_expectation(e_phi_ref: float, e_phi_tilde_ref: float, s: float) -> float:
    """Large-sequence limit ``(E[phi] + 2 (s - 1) E[phi~]) / s**2``."""
    if e_phi_ref < 0 or e_phi_tilde_ref < 0:
        raise ValueError("expectations must be >= 0")
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    return (e_phi_ref + 2.0 * (s - 1.0) * e_phi_tilde_ref) / (s * s)


def rho_exact_upsample(s: float, c: float) -> float:
    """Upsampling ratio ``(2cs - 2c + 1) / s**2`` before degree reduction."""
    c = _check_c(c)
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    return (2.0 * c * s - 2.0 * c + 1.0) / (s * s)


def rho_downsample(s: float, c: float) -> float:
    """Downsampling ratio ``1 / ((1 - 2c) s**2 + 2cs)`` for ``0 < s <= 1``."""
    c = _check_c(c)
    if not 0 < s <= 1:
        raise ValueError(f"s must lie in (0, 1], got {s}")
    denom = (1.0 - 2.0 * c) * s * s + 2.0 * c * s
    if denom <= 0:
        raise ArithmeticError(f"non-positive denominator at s={s}, c={c}")
    return 1.0 / denom


def rho(s: float, c: float) -> float:
    """Ratio of resampled to reference gradient expectation.

    ``2c / s`` above the reference scale (the upsampling form with the
    ``1 - 2c`` term dropped) and ``1 / ((1 - 2c) s**2 + 2cs)`` at or below it.
    The two branches do not meet at ``s = 1`` unless ``c = 0.5``.
    """
    s = float(s)
    if not math.isfinite(s) or s <= 0:
        raise ValueError(f"s must be > 0, got {s}")
    c = _check_c(c)
    if s > 1:
        return 2.0 * c / s
    return rho_downsample(s, c)


def rho_exact(s: float, c: float) -> float:
    """Continuous piecewise ratio: exact upsampling form above 1."""
    if s > 1:
        return rho_exact_upsample(s, c)
    return rho_downsample(s, c)


def c_statistics(corpus: Iterable[GradientStats]) -> dict:
    """Mean and population stdev of the defined per-image ``c`` values."""
    values = []
    skipped = 0
    for st in corpus:
        if st.c_defined:
            values.append(st.c)
        else:
            skipped += 1
    if not values:
        raise DegenerateDataError(f"all {skipped} images have undefined c")
    return {
        "mean": statistics.fmean(values),
        "stdev": statistics.pstdev(values) if len(values) > 1 else 0.0,
        "count": len(values),
        "skipped": skipped,
    }


def estimate_c(corpus: Iterable[GradientStats]) -> VariationModel:
    """Corpus constant ``c`` as the unweighted mean over images.

    Images with undefined ``c`` are counted in ``skipped``.
    """
    st = c_statistics(corpus)
    if st["mean"] < C_MIN - C_TOL:
        raise DegenerateDataError(
            f"corpus mean c = {st['mean']:.6g} is below {C_MIN}; "
            "pooled 2-D statistics of strongly non-square images can do this"
        )
    return VariationModel(st["mean"], st["stdev"], st["count"], st["skipped"])
