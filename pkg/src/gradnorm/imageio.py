"""Grayscale image container, PNG/PGM loading, and CSV output."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

from .errors import ImageFormatError

# BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable grayscale raster with intensities in [0, 1].

    ``data`` is a read-only float64 array of shape ``(height, width)``.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image must be at least 1x1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image intensities must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Image):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Image(width={self.width}, height={self.height})"


def _scale_integer_array(arr: np.ndarray, maxval: int) -> np.ndarray:
    return arr.astype(np.float64) / float(maxval)


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """Weighted channel sum of an ``(H, W, 3)`` array."""
    w = np.asarray(LUMA_WEIGHTS, dtype=np.float64)
    return rgb[..., 0] * w[0] + rgb[..., 1] * w[1] + rgb[..., 2] * w[2]


# -- PGM ---------------------------------------------------------------------


def _pgm_tokens(buf: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def _decode_pgm(buf: bytes) -> np.ndarray:
    magic = buf[:2]
    if magic not in (b"P2", b"P5"):
        raise ImageFormatError(f"not a grayscale PGM (magic {magic!r})")
    try:
        tokens, pos = _pgm_tokens(buf, 3, 2)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"malformed PGM header: {exc}") from None
    if width < 1 or height < 1:
        raise ImageFormatError(f"zero-dimension image ({width}x{height})")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"PGM maxval out of range: {maxval}")
    npix = width * height
    if magic == b"P5":
        # exactly one whitespace byte separates maxval from the raster
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = buf[pos:pos + npix * dtype.itemsize]
        if len(raw) < npix * dtype.itemsize:
            raise ImageFormatError("truncated PGM raster")
        arr = np.frombuffer(raw, dtype=dtype).astype(np.int64)
    else:
        body = buf[pos:].split()
        if len(body) < npix:
            raise ImageFormatError("truncated PGM raster")
        try:
            arr = np.array([int(v) for v in body[:npix]], dtype=np.int64)
        except ValueError:
            raise ImageFormatError("non-integer sample in ASCII PGM") from None
    if arr.max(initial=0) > maxval:
        raise ImageFormatError("PGM sample exceeds maxval")
    return _scale_integer_array(arr.reshape(height, width), maxval)


def write_pgm(img: Image, path, maxval: int = 255, binary: bool = True) -> None:
    """Write ``img`` as a PGM, quantizing intensities to ``0..maxval``."""
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval must be in 1..65535, got {maxval}")
    q = np.floor(img.data * maxval + 0.5).astype(np.int64)
    header = f"{'P5' if binary else 'P2'}\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            dtype = ">u2" if maxval > 255 else "u1"
            fh.write(q.astype(dtype).tobytes())
        else:
            for row in q:
                fh.write((" ".join(str(v) for v in row) + "\n").encode("ascii"))


# -- PNG ---------------------------------------------------------------------


def _decode_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.array(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot decode PNG {os.fspath(path)!r}: {exc}") from None

    if mode == "1":
        return arr.astype(np.float64)
    if mode in ("L", "LA"):
        gray = arr if arr.ndim == 2 else arr[..., 0]
        return _scale_integer_array(gray, 255)
    if mode.startswith("I;16"):
        return _scale_integer_array(arr, 65535)
    if mode == "I":
        # Pillow widens some 16-bit files to int32
        return _scale_integer_array(arr, 65535)
    if mode in ("RGB", "RGBA"):
        return rgb_to_luma(_scale_integer_array(arr[..., :3], 255))
    raise ImageFormatError(f"unsupported PNG pixel mode {mode!r}")


def load_image(path) -> Image:
    """Load a PNG or PGM file as a grayscale :class:`Image`.

    8- and 16-bit samples are divided by their maximum value; RGB pixels are
    reduced to BT.601 luma.

    Raises
    ------
    ImageFormatError
        If the file cannot be read, is not PNG/PGM, or has zero size.
    """
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {os.fspath(path)!r}: {exc.strerror}") from None

    if buf.startswith(PNG_SIGNATURE):
        data = _decode_png(path)
    elif buf[:2] in (b"P2", b"P5"):
        data = _decode_pgm(buf)
    else:
        raise ImageFormatError(f"unsupported image format: {os.fspath(path)!r}")

    if data.ndim != 2 or data.size == 0:
        raise ImageFormatError(f"zero-dimension image: {os.fspath(path)!r}")
    return Image(np.clip(data, 0.0, 1.0))


# -- CSV ---------------------------------------------------------------------


def format_real(x: float) -> str:
    """Deterministic text form of a real with at least 9 significant digits.

    Values with magnitude at least 0.1 use nine decimals when that is an
    exact round trip; everything else falls back to 17 significant digits.
    """
    x = float(x)
    if math.isnan(x) or math.isinf(x):
        return repr(x)
    if x == 0.0:
        return "0.000000000"
    if 0.1 <= abs(x) < 1e9:
        fixed = f"{x:.9f}"
        if float(fixed) == x:
            return fixed
    return f"{x:#.17g}"


def _cell(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (float, np.floating)):
        return format_real(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(
    rows: Iterable[Mapping[str, object]],
    path,
    columns: Sequence[str] | None = None,
) -> None:
    """Write rows of named columns as CSV with a header line.

    ``columns`` fixes the schema; it is required when ``rows`` is empty and
    otherwise defaults to the keys of the first row.
    """
    rows = list(rows)
    if columns is None:
        if not rows:
            raise ValueError("columns must be given for an empty table")
        columns = list(rows[0].keys())
    columns = list(columns)
    for i, row in enumerate(rows):
        if list(row.keys()) != columns and set(row.keys()) != set(columns):
            raise ValueError(f"row {i} does not match the column schema {columns}")

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    """Return ``(header, rows)`` with every value left as a string."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return [], []
        rows = [dict(zip(header, rec)) for rec in reader if rec]
    return header, rows
