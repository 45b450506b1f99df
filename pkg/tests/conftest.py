import os
from pathlib import Path

import numpy as np
import pytest
from PIL import Image as PILImage

from gradnorm.imageio import Image, write_pgm

NATURAL_SOURCES = (
    "astronaut", "brick", "camera", "chelsea", "coffee", "coins",
    "grass", "gravel", "moon", "motorcycle_left", "motorcycle_right",
)
CROP = 128


def ramp_image(size, slope=1.0, axis=1):
    """Square ramp ``slope * x / (size - 1)`` along ``axis``."""
    row = np.linspace(0.0, slope, size)
    arr = np.tile(row, (size, 1))
    return Image(arr if axis == 1 else arr.T)


@pytest.fixture(scope="session")
def natural_dir(tmp_path_factory):
    """At least 100 PNG crops cut from the photographs bundled with scikit-image."""
    skdata = pytest.importorskip("skimage.data")
    src_dir = Path(os.path.dirname(skdata.__file__))
    out = tmp_path_factory.mktemp("natural")
    n = 0
    for name in NATURAL_SOURCES:
        path = src_dir / f"{name}.png"
        if not path.exists():
            continue
        with PILImage.open(path) as im:
            im = im.convert("RGB") if im.mode not in ("L", "RGB") else im.copy()
        w, h = im.size
        for y in range(0, h - CROP + 1, CROP):
            for x in range(0, w - CROP + 1, CROP):
                # alternate crops so the corpus is ~110 images, not 150
                if n % 4 != 3:
                    im.crop((x, y, x + CROP, y + CROP)).save(out / f"{name}_{y:03d}_{x:03d}.png")
                n += 1
    if len(list(out.iterdir())) < 100:
        pytest.skip("scikit-image sample photographs unavailable")
    return out


def write_ramp_pgm(path, size, slope=1.0, axis=1):
    """16-bit PGM whose maxval makes every ramp sample an exact integer."""
    write_pgm(ramp_image(size, slope, axis), path, maxval=(size - 1) * 1000)


@pytest.fixture(scope="session")
def ramp_dir(tmp_path_factory):
    """Six square ramps of different size, slope and direction."""
    out = tmp_path_factory.mktemp("ramps")
    specs = [(64, 1.0, 1), (64, 0.5, 0), (41, 0.8, 1), (56, 1.0, 0), (48, 0.6, 1), (60, 0.9, 0)]
    for i, (size, slope, axis) in enumerate(specs):
        write_ramp_pgm(out / f"ramp_{i}.pgm", size, slope, axis)
    return out


# -- acceptance report ---------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(id, passed, detail)`` prints and records one verdict line."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(cid, passed, detail=""):
        status = {True: "PASS", False: "FAIL", None: "N/A"}[passed]
        line = f"[acceptance] criterion {cid}: {status} {detail}".rstrip()
        print(line)
        results.setdefault(str(cid).split("[")[0], []).append((passed, line))

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results, key=lambda k: int(k) if k.isdigit() else k):
        for _, line in results[cid]:
            terminalreporter.write_line(line)
