"""End-to-end acceptance criteria, one test and one verdict line each.

Run with ``pytest -m acceptance -s`` to see verdicts inline; they are also
collected in the terminal summary.
"""

import json
import time

import numpy as np
import pytest

from gradnorm.cli import main
from gradnorm.gradient import image_gradient_stats, mean_central_diff, stats_from_row
from gradnorm.normfit import ScaleSample, fit_constrained, kkt_residual
from gradnorm.pyramid import ScaleSet, upsample_integer_grid
from gradnorm.variation import expected_gradient_finite, rho

from conftest import ramp_image

pytestmark = pytest.mark.acceptance

GRID = ScaleSet.grid().scales
MONOTONE_C = (0.5, 0.62, 0.8, 1.0, 1.2)


def test_closed_form_matches_brute_force(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        row = rng.uniform(size=int(rng.integers(4, 65)))
        for z in (1, 2, 3):
            brute = mean_central_diff(upsample_integer_grid(row, z))
            worst = max(worst, abs(expected_gradient_finite(row, z) - brute))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 1.0
    criterion(1, ok, f"max_abs_error={worst:.2e} runtime={elapsed:.3f}s")
    assert ok


def test_worked_example(criterion):
    row = [3, 1, 4, 1]
    up = upsample_integer_grid(row, 1)
    interior = [float(abs(up[x + 1] - up[x - 1])) for x in range(1, up.size - 1)]
    value = expected_gradient_finite(row, 1)
    ok = value == 1.7 and interior == [2, 0.5, 3, 0, 3]
    criterion(2, ok, f"value={value!r} interior={interior}")
    assert ok


def test_ramp_law(criterion):
    worst_c, worst_ratio = 0.0, 0.0
    for n in (8, 20, 64):
        row = np.arange(n) * (0.7 / (n - 1))
        worst_c = max(worst_c, abs(stats_from_row(row).c - 0.5))
        for z in range(1, 8):
            ratio = mean_central_diff(upsample_integer_grid(row, z)) / mean_central_diff(row)
            worst_ratio = max(worst_ratio, abs(ratio - 1 / (z + 1)), abs(ratio - rho(z + 1, 0.5)))
        for axis in (0, 1):
            worst_c = max(worst_c, abs(image_gradient_stats(ramp_image(n, 0.7, axis)).c - 0.5))
    ok = worst_c < 1e-9 and worst_ratio < 1e-9
    criterion(3, ok, f"max|c-0.5|={worst_c:.2e} max|ratio-1/s|={worst_ratio:.2e}")
    assert ok


def _random_samples(rng, coeffs=None, noise=0.0):
    samples = []
    for k in range(4):
        for s in GRID:
            e = rng.uniform(0.05, 0.5)
            if coeffs is None:
                g = s ** rng.uniform(0.5, 1.0)
            else:
                a1, b1, a2, b2, c2 = coeffs
                g = a1 * s + b1 if s > 1 else a2 * s * s + b2 * s + c2
            samples.append(ScaleSample(str(k), s, e, e * g * (1 + noise * rng.uniform(-1, 1))))
    return samples


def test_constraint_on_every_fit(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for trial in range(200):
        m = fit_constrained(_random_samples(rng, noise=0.2 * (trial % 5)))
        worst = max(worst, abs(m.a1 + m.b1 - 1), abs(m.a2 + m.b2 + m.c2 - 1))
    ok = worst < 1e-9
    criterion(4, ok, f"fits=200 max_constraint_violation={worst:.2e}")
    assert ok


def test_fit_recovery(criterion):
    rng = np.random.default_rng(9)
    worst_coef, worst_kkt, trials = 0.0, 0.0, 0
    while trials < 50:
        a1, a2, b2 = rng.uniform(0.3, 1.5), rng.uniform(-0.8, 0.2), rng.uniform(0.6, 1.8)
        coeffs = (a1, 1 - a1, a2, b2, 1 - a2 - b2)
        if min(a1 * s + 1 - a1 if s > 1 else a2 * s * s + b2 * s + 1 - a2 - b2 for s in GRID) <= 0.05:
            continue
        samples = _random_samples(rng, coeffs)
        m = fit_constrained(samples)
        worst_coef = max(worst_coef, float(np.max(np.abs(np.array(m.up + m.down) - coeffs))))
        worst_kkt = max(worst_kkt, kkt_residual(m, samples))
        trials += 1
    ok = worst_coef < 1e-9 and worst_kkt < 1e-6
    criterion(5, ok, f"trials={trials} max_coef_error={worst_coef:.2e} max_kkt={worst_kkt:.2e}")
    assert ok


@pytest.fixture(scope="module")
def natural_fit(natural_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("natural_fit")
    n = len(list(natural_dir.iterdir()))
    t0 = time.perf_counter()
    assert main(["measure", "--input", str(natural_dir), "--output", str(out / "samples.csv"),
                 "--scale-min", "0.1", "--scale-max", "2.0", "--scale-step", "0.1"]) == 0
    assert main(["fit", "--input", str(out / "samples.csv"), "--output", str(out / "model.json")]) == 0
    elapsed = time.perf_counter() - t0
    report = json.loads((out / "model_report.json").read_text())
    return out, n, elapsed, report


def test_polynomial_beats_power_law(natural_fit, criterion):
    _, n, elapsed, rep = natural_fit
    ok = n >= 100 and rep["rmse_poly"] < rep["rmse_powerlaw"] and elapsed < 120
    criterion(6, ok, f"images={n} rmse_poly={rep['rmse_poly']:.4f} "
                     f"rmse_powerlaw={rep['rmse_powerlaw']:.4f} runtime={elapsed:.1f}s")
    assert ok


def _variance_ratio(input_dir, model, out):
    assert main(["experiment-variance", "--input", str(input_dir), "--model", str(model),
                 "--output", str(out)]) == 0
    return json.loads(out.read_text())["ratio"]


def test_variance_reduction(natural_fit, natural_dir, ramp_dir, tmp_path, criterion):
    out, _, _, _ = natural_fit
    natural = _variance_ratio(natural_dir, out / "model.json", tmp_path / "natural_var.json")

    assert main(["measure", "--input", str(ramp_dir), "--output", str(tmp_path / "ramp.csv")]) == 0
    assert main(["fit", "--input", str(tmp_path / "ramp.csv"), "--output", str(tmp_path / "ramp.json")]) == 0
    ramp = _variance_ratio(ramp_dir, tmp_path / "ramp.json", tmp_path / "ramp_var.json")

    ok = natural < 1 and ramp < 0.05
    criterion(7, ok, f"natural_ratio={natural:.4f} ramp_ratio={ramp:.4f}")
    assert ok


def test_rho_strictly_decreasing(criterion):
    # known to fail for c > 0.5: the reduced upsampling branch 2c/s starts at
    # 2c > 1 just above s = 1, and for c > 1 the downsampling branch peaks
    # below s = 1 (see the project decisions ledger)
    failing = {}
    for c in MONOTONE_C:
        values = np.array([rho(s, c) for s in GRID])
        rises = [f"{GRID[i]}->{GRID[i + 1]}" for i in np.nonzero(np.diff(values) >= 0)[0]]
        if rises:
            failing[c] = rises
    ok = not failing
    detail = "all c decreasing" if ok else "non-decreasing steps " + "; ".join(
        f"c={c}: {','.join(r)}" for c, r in failing.items())
    criterion(8, ok, detail)
    assert ok, detail


def test_detector_benchmarks_not_reproduced(criterion):
    criterion(9, None, "detector, pose and detection benchmarks need external datasets "
                       "and training pipelines; not executed")
    pytest.skip("detector benchmark numbers are not reproducible without external datasets")
