"""Fitting the scale normalization function.

``g(s)`` multiplies the gradient expectation measured at scale ``s`` so that
it matches the reference image. It is linear above the reference scale and
quadratic at or below it::

    g(s) = a1 s + b1                 s > 1
    g(s) = a2 s**2 + b2 s + c2       s <= 1

Each branch minimises ``sum (e_scaled * g(s) - e_ref)**2`` over its samples
subject to ``g(1) = 1``. The constraint is imposed through a Lagrange
multiplier and the stationarity conditions are solved as one bordered
linear system.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateDataError, IdentifiabilityError, SchemaError
from .gradient import image_gradient_stats
from .imageio import Image, read_csv, write_csv
from .pyramid import REFERENCE_SCALE, ScaleSet, resample_bilinear

log = logging.getLogger(__name__)

MODEL_VERSION = 1
SAMPLE_COLUMNS = ("image_id", "scale", "e_phi_scaled", "e_phi_ref")
CONSTRAINT_TOL = 1e-9


@dataclass(frozen=True)
class ScaleSample:
    """Gradient expectation of one image at one scale, with its reference."""

    image_id: str
    scale: float
    e_phi_scaled: float
    e_phi_ref: float

    def __post_init__(self):
        if not math.isfinite(self.scale) or self.scale <= 0:
            raise ValueError(f"scale must be finite and > 0, got {self.scale}")
        for name in ("e_phi_scaled", "e_phi_ref"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    @property
    def degenerate(self) -> bool:
        return self.e_phi_ref <= 0 or self.e_phi_scaled <= 0

    @property
    def target_ratio(self) -> float:
        """``e_ref / e_scaled``, the value ``g`` should reproduce."""
        return self.e_phi_ref / self.e_phi_scaled


def usable(samples: Iterable[ScaleSample]) -> list[ScaleSample]:
    return [s for s in samples if not s.degenerate]


def _arrays(samples: Sequence[ScaleSample]):
    s = np.array([x.scale for x in samples], dtype=np.float64)
    e = np.array([x.e_phi_scaled for x in samples], dtype=np.float64)
    r = np.array([x.e_phi_ref for x in samples], dtype=np.float64)
    return s, e, r


@dataclass(frozen=True)
class PowerLawModel:
    """``g(s) = amp * s**exponent``."""

    amp: float
    exponent: float
    rmse: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.amp) and self.amp > 0):
            raise ValueError(f"power-law amplitude must be > 0, got {self.amp}")
        if not math.isfinite(self.exponent):
            raise ValueError("power-law exponent must be finite")

    def g(self, s):
        return self.amp * np.power(np.asarray(s, dtype=np.float64), self.exponent)

    __call__ = g


@dataclass(frozen=True)
class NormalizationModel:
    a1: float
    b1: float
    a2: float
    b2: float
    c2: float
    lambda_u: float = 0.0
    lambda_d: float = 0.0
    rmse_up: float = 0.0
    rmse_down: float = 0.0
    rmse_total: float = 0.0
    c_used: float = 0.5
    power_law: Optional[PowerLawModel] = field(default=None, compare=True)

    def __post_init__(self):
        coeffs = (self.a1, self.b1, self.a2, self.b2, self.c2)
        if not all(math.isfinite(v) for v in coeffs):
            raise ValueError("model coefficients must be finite")
        if abs(self.a1 + self.b1 - 1.0) >= CONSTRAINT_TOL:
            raise ValueError(f"up branch violates g(1) = 1: a1 + b1 = {self.a1 + self.b1!r}")
        if abs(self.a2 + self.b2 + self.c2 - 1.0) >= CONSTRAINT_TOL:
            raise ValueError(
                f"down branch violates g(1) = 1: a2 + b2 + c2 = {self.a2 + self.b2 + self.c2!r}"
            )

    @property
    def up(self) -> tuple[float, float]:
        return (self.a1, self.b1)

    @property
    def down(self) -> tuple[float, float, float]:
        return (self.a2, self.b2, self.c2)

    def g(self, s):
        """Evaluate the piecewise polynomial; accepts scalars or arrays."""
        s_arr = np.asarray(s, dtype=np.float64)
        up = self.a1 * s_arr + self.b1
        down = (self.a2 * s_arr + self.b2) * s_arr + self.c2
        out = np.where(s_arr > REFERENCE_SCALE, up, down)
        return float(out) if out.ndim == 0 else out

    __call__ = g

    @classmethod
    def identity(cls) -> "NormalizationModel":
        return cls(0.0, 1.0, 0.0, 0.0, 1.0)


# -- fitting -----------------------------------------------------------------


def _solve_bordered(s, e, r, degree: int):
    """Equality-constrained least squares for one polynomial branch.

    Returns ``(beta, lam, kkt)`` with ``beta`` highest power first.
    """
    X = e[:, None] * np.vander(s, degree + 1)
    C = np.ones((1, degree + 1))
    n = degree + 1
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = 2.0 * X.T @ X
    K[:n, n] = C[0]
    K[n, :n] = C[0]
    rhs = np.concatenate([2.0 * X.T @ r, [1.0]])

    if np.linalg.matrix_rank(K) < n + 1:
        raise IdentifiabilityError(f"degree-{degree} branch: bordered system is rank deficient")
    sol = np.linalg.solve(K, rhs)
    beta, lam = sol[:n], float(sol[n])
    return beta, lam, _kkt_norm(X, r, beta)


def _kkt_norm(X, y, beta) -> float:
    grad = 2.0 * X.T @ (X @ beta - y)
    ones = np.ones(beta.size)
    proj = grad - ones * (ones @ grad) / (ones @ ones)
    scale = float(np.linalg.norm(2.0 * X.T @ y))
    return float(np.linalg.norm(proj)) / (scale if scale > 0 else 1.0)


def check_identifiable(samples: Sequence[ScaleSample]) -> None:
    """Require two distinct scales above 1 and three at or below 1."""
    scales = {x.scale for x in usable(samples)}
    n_up = sum(1 for v in scales if v > REFERENCE_SCALE)
    n_down = sum(1 for v in scales if v <= REFERENCE_SCALE)
    missing = []
    if n_up < 2:
        missing.append(f"need >= 2 distinct scales > 1 (have {n_up})")
    if n_down < 3:
        missing.append(f"need >= 3 distinct scales <= 1 (have {n_down})")
    if missing:
        raise IdentifiabilityError("insufficient scale coverage: " + "; ".join(missing))


def fit_constrained(samples: Sequence[ScaleSample], c: Optional[float] = None) -> NormalizationModel:
    """Fit both branches of ``g`` with ``g(1) = 1`` enforced.

    Samples at the reference scale enter both branch fits. ``c`` is stored
    on the model for reference; when omitted it is read off the fitted
    quadratic as ``b2 / 2``, the value the closed-form downsampling model
    would imply.

    Raises
    ------
    IdentifiabilityError
        Too few distinct scales per branch, or a singular system.
    DegenerateDataError
        The fitted ``g`` is not positive at every sampled scale.
    """
    data = usable(samples)
    if not data:
        raise DegenerateDataError("no non-degenerate samples to fit")
    check_identifiable(data)
    s, e, r = _arrays(data)
    up_m = s >= REFERENCE_SCALE
    down_m = s <= REFERENCE_SCALE

    beta_u, lam_u, _ = _solve_bordered(s[up_m], e[up_m], r[up_m], 1)
    beta_d, lam_d, _ = _solve_bordered(s[down_m], e[down_m], r[down_m], 2)

    model = NormalizationModel(
        a1=float(beta_u[0]), b1=float(beta_u[1]),
        a2=float(beta_d[0]), b2=float(beta_d[1]), c2=float(beta_d[2]),
        lambda_u=lam_u, lambda_d=lam_d,
        c_used=float(c) if c is not None else float(beta_d[1]) / 2.0,
    )
    g = model.g(np.unique(s))
    if np.any(g <= 0):
        raise DegenerateDataError("fitted normalization is not positive on the sampled scales")

    model = replace(
        model,
        rmse_up=residual_rmse(model, [x for x, m in zip(data, up_m) if m]),
        rmse_down=residual_rmse(model, [x for x, m in zip(data, down_m) if m]),
        rmse_total=residual_rmse(model, data),
    )
    return model


def kkt_residual(model: NormalizationModel, samples: Sequence[ScaleSample]) -> float:
    """Largest relative norm of the objective gradient off the constraint.

    At a constrained optimum the gradient of the squared residual is
    parallel to the constraint row, so its projection onto the constraint's
    null space vanishes.
    """
    s, e, r = _arrays(usable(samples))
    worst = 0.0
    for mask, beta in (
        (s >= REFERENCE_SCALE, np.array(model.up)),
        (s <= REFERENCE_SCALE, np.array(model.down)),
    ):
        if mask.any():
            X = e[mask, None] * np.vander(s[mask], beta.size)
            worst = max(worst, _kkt_norm(X, r[mask], beta))
    return worst


def fit_power_law(samples: Sequence[ScaleSample]) -> PowerLawModel:
    """Least-squares line through ``(log s, log(e_ref / e_scaled))``.

    The stored ``rmse`` uses the linear residual ``e_scaled * g(s) - e_ref``
    so it is comparable with :attr:`NormalizationModel.rmse_total`.
    """
    data = usable(samples)
    if len({x.scale for x in data}) < 2:
        raise IdentifiabilityError("power-law fit needs >= 2 distinct scales")
    s, e, r = _arrays(data)
    A = np.column_stack([np.ones_like(s), np.log(s)])
    coef, *_ = np.linalg.lstsq(A, np.log(r / e), rcond=None)
    pl = PowerLawModel(amp=float(np.exp(coef[0])), exponent=float(coef[1]))
    return replace(pl, rmse=residual_rmse(pl, data))


# -- evaluation --------------------------------------------------------------


def objective(model, samples: Sequence[ScaleSample]) -> float:
    """Sum of squared residuals ``e_scaled * g(s) - e_ref``."""
    s, e, r = _arrays(usable(samples))
    res = e * np.asarray(model.g(s)) - r
    return float(res @ res)


def residual_rmse(model, samples: Sequence[ScaleSample]) -> float:
    data = usable(samples)
    if not data:
        raise ValueError("empty sample set")
    return math.sqrt(objective(model, data) / len(data))


def evaluate_rmse(model, samples: Sequence[ScaleSample]) -> float:
    """RMSE between ``g(s)`` and the per-sample target ratio ``e_ref / e_scaled``."""
    data = usable(samples)
    if not data:
        raise ValueError("empty sample set")
    s, e, r = _arrays(data)
    d = np.asarray(model.g(s)) - r / e
    return math.sqrt(float(d @ d) / d.size)


def per_scale_mean_ratio(samples: Sequence[ScaleSample]) -> dict[float, float]:
    """Mean target ratio at each distinct scale, in increasing scale order."""
    acc: dict[float, list[float]] = {}
    for x in usable(samples):
        acc.setdefault(x.scale, []).append(x.target_ratio)
    return {k: math.fsum(v) / len(v) for k, v in sorted(acc.items())}


# -- data collection ---------------------------------------------------------


def _samples_for_image(item, scales: ScaleSet) -> list[ScaleSample]:
    image_id, img = item
    ref = image_gradient_stats(img).e_phi
    out = []
    for s in scales:
        level = img if s == REFERENCE_SCALE else resample_bilinear(img, s)
        if level.width < 3 or level.height < 3:
            raise ValueError(
                f"image {image_id!r} is {level.width}x{level.height} at scale {s}; need >= 3x3"
            )
        e = ref if s == REFERENCE_SCALE else image_gradient_stats(level).e_phi
        out.append(ScaleSample(str(image_id), float(s), e, ref))
    return out


def collect_samples(
    corpus: Sequence[tuple[str, Image]],
    scales: ScaleSet,
    jobs: int = 1,
) -> list[ScaleSample]:
    """One sample per (image, scale), in corpus order then scale order.

    Images whose reference gradient expectation is zero yield samples
    flagged :attr:`ScaleSample.degenerate`, which the fitting routines skip.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_image = list(pool.map(lambda item: _samples_for_image(item, scales), corpus))
    else:
        per_image = [_samples_for_image(item, scales) for item in corpus]
    samples = [x for group in per_image for x in group]
    n_bad = sum(1 for x in samples if x.degenerate)
    if n_bad == len(samples):
        raise DegenerateDataError("all samples degenerate (zero gradient expectation)")
    if n_bad:
        log.info("%d of %d samples flagged degenerate", n_bad, len(samples))
    return samples


def write_samples_csv(samples: Sequence[ScaleSample], path) -> None:
    rows = [
        {"image_id": x.image_id, "scale": x.scale,
         "e_phi_scaled": x.e_phi_scaled, "e_phi_ref": x.e_phi_ref}
        for x in samples
    ]
    write_csv(rows, path, SAMPLE_COLUMNS)


def read_samples_csv(path) -> list[ScaleSample]:
    header, rows = read_csv(path)
    if tuple(header) != SAMPLE_COLUMNS:
        raise SchemaError(f"samples CSV header must be {','.join(SAMPLE_COLUMNS)}, got {','.join(header)}")
    out = []
    for i, row in enumerate(rows, start=2):
        try:
            out.append(ScaleSample(
                row["image_id"], float(row["scale"]),
                float(row["e_phi_scaled"]), float(row["e_phi_ref"]),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"samples CSV line {i}: {exc}") from None
    return out


# -- model files -------------------------------------------------------------


def model_to_dict(model: NormalizationModel) -> dict:
    doc = {
        "version": MODEL_VERSION,
        "c": model.c_used,
        "up": {"a1": model.a1, "b1": model.b1},
        "down": {"a2": model.a2, "b2": model.b2, "c2": model.c2},
        "lambda": {"up": model.lambda_u, "down": model.lambda_d},
        "rmse": {"up": model.rmse_up, "down": model.rmse_down, "total": model.rmse_total},
        "power_law": None,
    }
    if model.power_law is not None:
        pl = model.power_law
        doc["power_law"] = {"amp": pl.amp, "exponent": pl.exponent, "rmse": pl.rmse}
    return doc


def _num(obj, key, where, default=None) -> float:
    if key not in obj:
        if default is None:
            raise SchemaError(f"model file: missing {where}.{key}")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"model file: {where}.{key} must be a number")
    return float(v)


def _section(doc, key, required=True):
    sec = doc.get(key)
    if sec is None:
        if required:
            raise SchemaError(f"model file: missing section {key!r}")
        return {}
    if not isinstance(sec, dict):
        raise SchemaError(f"model file: section {key!r} must be an object")
    return sec


def model_from_dict(doc) -> NormalizationModel:
    if not isinstance(doc, dict):
        raise SchemaError("model file: top level must be an object")
    if "version" not in doc:
        raise SchemaError("model file: missing version tag")
    if doc["version"] != MODEL_VERSION:
        raise SchemaError(f"model file: unsupported version {doc['version']!r} (expected {MODEL_VERSION})")
    up = _section(doc, "up")
    down = _section(doc, "down")
    lam = _section(doc, "lambda", required=False)
    rmse = _section(doc, "rmse", required=False)
    a2, b2 = _num(down, "a2", "down"), _num(down, "b2", "down")
    kwargs = dict(
        a1=_num(up, "a1", "up"), b1=_num(up, "b1", "up"),
        a2=a2, b2=b2, c2=_num(down, "c2", "down"),
        lambda_u=_num(lam, "up", "lambda", 0.0), lambda_d=_num(lam, "down", "lambda", 0.0),
        rmse_up=_num(rmse, "up", "rmse", 0.0), rmse_down=_num(rmse, "down", "rmse", 0.0),
        rmse_total=_num(rmse, "total", "rmse", 0.0),
        c_used=_num(doc, "c", "", b2 / 2.0),
    )
    pl = doc.get("power_law")
    if pl is not None:
        if not isinstance(pl, dict):
            raise SchemaError("model file: power_law must be an object or null")
        try:
            kwargs["power_law"] = PowerLawModel(
                _num(pl, "amp", "power_law"), _num(pl, "exponent", "power_law"),
                _num(pl, "rmse", "power_law", 0.0),
            )
        except ValueError as exc:
            raise SchemaError(f"model file: {exc}") from None
    try:
        return NormalizationModel(**kwargs)
    except ValueError as exc:
        raise SchemaError(f"model file: {exc}") from None


def save_model(model: NormalizationModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, allow_nan=False)
        fh.write("\n")


def load_model(path) -> NormalizationModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file {path!s} is not valid JSON: {exc}") from None
    return model_from_dict(doc)
