import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradnorm.errors import DegenerateDataError, IdentifiabilityError, SchemaError
from gradnorm.imageio import Image
from gradnorm.normfit import (
    NormalizationModel,
    PowerLawModel,
    ScaleSample,
    collect_samples,
    evaluate_rmse,
    fit_constrained,
    fit_power_law,
    kkt_residual,
    load_model,
    model_to_dict,
    objective,
    per_scale_mean_ratio,
    read_samples_csv,
    residual_rmse,
    save_model,
    write_samples_csv,
)
from gradnorm.pyramid import ScaleSet

from conftest import ramp_image

GRID = ScaleSet.grid().scales


def g_true(s, coeffs):
    a1, b1, a2, b2, c2 = coeffs
    return a1 * s + b1 if s > 1 else a2 * s * s + b2 * s + c2


def forward(coeffs, scales=GRID, e=None, copies=1, rng=None):
    out = []
    for k in range(copies):
        for s in scales:
            ek = e if e is not None else rng.uniform(0.05, 0.5)
            out.append(ScaleSample(f"k{k}", s, ek, ek * g_true(s, coeffs)))
    return out


def nullspace_fit(s, e, r, degree):
    """Constrained LS by substituting the constraint: the last coefficient
    is 1 minus the others, leaving an unconstrained problem."""
    V = e[:, None] * np.vander(s, degree + 1)
    A = V[:, :-1] - V[:, -1:]
    y = r - V[:, -1]
    free, *_ = np.linalg.lstsq(A, y, rcond=None)
    return np.append(free, 1.0 - free.sum())


def test_recovers_known_coefficients():
    coeffs = (0.8, 0.2, -0.24, 1.24, 0.0)
    m = fit_constrained(forward(coeffs, e=1.0))
    np.testing.assert_allclose([m.a1, m.b1, m.a2, m.b2, m.c2], coeffs, atol=1e-9)
    assert abs(m.lambda_u) < 1e-9 and abs(m.lambda_d) < 1e-9
    assert m.c_used == pytest.approx(0.62)


def test_identity_data():
    samples = [ScaleSample("a", s, 0.3, 0.3) for s in GRID]
    m = fit_constrained(samples)
    assert objective(m, samples) < 1e-20
    assert m.g(1.0) == pytest.approx(1.0, abs=1e-12)
    assert evaluate_rmse(m, samples) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_recovery_and_constraint_random(seed):
    rng = np.random.default_rng(seed)
    a1 = rng.uniform(0.3, 1.5)
    a2, b2 = rng.uniform(-0.8, 0.2), rng.uniform(0.6, 1.8)
    coeffs = (a1, 1 - a1, a2, b2, 1 - a2 - b2)
    if min(g_true(s, coeffs) for s in GRID) <= 0.05:
        return
    samples = forward(coeffs, copies=3, rng=rng)
    m = fit_constrained(samples)
    np.testing.assert_allclose([m.a1, m.b1, m.a2, m.b2, m.c2], coeffs, atol=1e-9)
    assert abs(m.a1 + m.b1 - 1) < 1e-9 and abs(m.a2 + m.b2 + m.c2 - 1) < 1e-9
    assert kkt_residual(m, samples) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_nullspace_oracle_on_noisy_data(seed):
    rng = np.random.default_rng(seed)
    samples = []
    for k in range(5):
        for s in GRID:
            e = rng.uniform(0.05, 0.5)
            samples.append(ScaleSample(str(k), s, e, e * s ** 0.7 * rng.uniform(0.9, 1.1)))
    m = fit_constrained(samples)
    s, e, r = (np.array(v) for v in zip(*[(x.scale, x.e_phi_scaled, x.e_phi_ref) for x in samples]))
    up, down = s >= 1, s <= 1
    np.testing.assert_allclose(m.up, nullspace_fit(s[up], e[up], r[up], 1), atol=1e-9)
    np.testing.assert_allclose(m.down, nullspace_fit(s[down], e[down], r[down], 2), atol=1e-9)
    assert kkt_residual(m, samples) < 1e-6


def test_optimal_against_perturbed_candidates():
    rng = np.random.default_rng(11)
    samples = []
    for k in range(6):
        for s in GRID:
            e = rng.uniform(0.05, 0.5)
            samples.append(ScaleSample(str(k), s, e, e * s ** 0.6 * rng.uniform(0.85, 1.15)))
    m = fit_constrained(samples)
    best = objective(m, samples)
    for _ in range(100):
        d = rng.normal(scale=0.05, size=5)
        a1 = m.a1 + d[0]
        a2, b2 = m.a2 + d[2], m.b2 + d[3]
        cand = NormalizationModel(a1, 1 - a1, a2, b2, 1 - a2 - b2)
        assert objective(cand, samples) >= best


def test_reference_samples_in_both_branches():
    # a large residual at s=1 would be visible in both branch rmse values
    coeffs = (0.8, 0.2, -0.24, 1.24, 0.0)
    m = fit_constrained(forward(coeffs, e=1.0))
    assert m.g(1.0) == pytest.approx(1.0, abs=1e-12)
    assert m.rmse_up < 1e-9 and m.rmse_down < 1e-9 and m.rmse_total < 1e-9


def test_identifiability_errors():
    only_up = [ScaleSample("a", s, 1.0, s) for s in (1.0, 1.5, 2.0)]
    with pytest.raises(IdentifiabilityError, match="scales <= 1"):
        fit_constrained(only_up)
    one_up = [ScaleSample("a", s, 1.0, s) for s in (0.3, 0.6, 1.0, 1.5)]
    with pytest.raises(IdentifiabilityError, match="scales > 1"):
        fit_constrained(one_up)


def test_degenerate_samples_ignored():
    coeffs = (0.8, 0.2, -0.24, 1.24, 0.0)
    samples = forward(coeffs, e=1.0) + [ScaleSample("flat", s, 0.0, 0.0) for s in GRID]
    assert all(x.degenerate for x in samples[-len(GRID):])
    m = fit_constrained(samples)
    np.testing.assert_allclose([m.a1, m.b1], coeffs[:2], atol=1e-9)


def test_all_degenerate():
    with pytest.raises(DegenerateDataError):
        fit_constrained([ScaleSample("flat", s, 0.0, 0.0) for s in GRID])


def test_model_constraint_enforced():
    with pytest.raises(ValueError):
        NormalizationModel(1.0, 0.1, 0.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        NormalizationModel(1.0, 0.0, 0.0, 0.5, 0.4)


def test_power_law_exact_cases():
    pl = fit_power_law([ScaleSample("a", s, 1.0, s) for s in GRID])
    assert pl.amp == pytest.approx(1.0, abs=1e-12) and pl.exponent == pytest.approx(1.0, abs=1e-12)
    assert pl.rmse < 1e-12
    pl = fit_power_law([ScaleSample("a", s, 0.4, 0.4) for s in GRID])
    assert pl.amp == pytest.approx(1.0, abs=1e-12) and pl.exponent == pytest.approx(0.0, abs=1e-12)


def test_power_law_rmse_is_residual_space():
    rng = np.random.default_rng(2)
    samples = [ScaleSample("a", s, e, e * s * rng.uniform(0.9, 1.1))
               for s in GRID for e in rng.uniform(0.1, 0.5, size=3)]
    pl = fit_power_law(samples)
    assert pl.rmse == pytest.approx(residual_rmse(pl, samples))


def test_power_law_needs_two_scales():
    with pytest.raises(IdentifiabilityError):
        fit_power_law([ScaleSample("a", 1.0, 1.0, 1.0)])


def test_evaluate_rmse_examples():
    one = NormalizationModel.identity()
    samples = [ScaleSample("a", 0.5, 1.0, 0.9), ScaleSample("b", 0.5, 1.0, 1.1)]
    assert evaluate_rmse(one, samples) == pytest.approx(0.1, abs=1e-12)
    coeffs = (0.8, 0.2, -0.24, 1.24, 0.0)
    data = forward(coeffs, e=0.3)
    assert evaluate_rmse(fit_constrained(data), data) < 1e-9
    with pytest.raises(ValueError):
        evaluate_rmse(one, [])


def test_collect_samples_reference_only():
    img = ramp_image(16)
    (sample,) = collect_samples([("r", img)], ScaleSet((1.0,)))
    assert sample.e_phi_scaled == sample.e_phi_ref > 0


def test_collect_samples_ramp_ratios():
    samples = collect_samples([("r", ramp_image(64))], ScaleSet((0.5, 1.0, 2.0)))
    variation = [x.e_phi_scaled / x.e_phi_ref for x in samples]
    assert variation[1] == 1.0
    assert variation[0] == pytest.approx(2.0, rel=0.05)
    assert variation[2] == pytest.approx(0.5, rel=0.05)


def test_collect_samples_flags_constant():
    corpus = [("r", ramp_image(32)), ("flat", Image(np.full((32, 32), 0.5)))]
    samples = collect_samples(corpus, ScaleSet((0.5, 1.0, 2.0)))
    assert [x.degenerate for x in samples] == [False] * 3 + [True] * 3
    with pytest.raises(DegenerateDataError):
        collect_samples(corpus[1:], ScaleSet((0.5, 1.0)))
    with pytest.raises(ValueError):
        collect_samples([], ScaleSet((1.0,)))


def test_collect_samples_parallel_matches_serial():
    rng = np.random.default_rng(5)
    corpus = [(str(i), Image(rng.uniform(size=(40, 40)))) for i in range(6)]
    sset = ScaleSet.grid()
    assert collect_samples(corpus, sset, jobs=4) == collect_samples(corpus, sset)


def test_ramp_corpus_power_law_exponent():
    corpus = [(str(n), ramp_image(n)) for n in (48, 64, 80)]
    pl = fit_power_law(collect_samples(corpus, ScaleSet.grid()))
    assert pl.exponent == pytest.approx(1.0, abs=0.1)


def test_per_scale_mean_ratio():
    samples = [ScaleSample("a", 0.5, 1.0, 0.4), ScaleSample("b", 0.5, 1.0, 0.6),
               ScaleSample("a", 1.0, 1.0, 1.0)]
    assert per_scale_mean_ratio(samples) == {0.5: 0.5, 1.0: 1.0}


def test_samples_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    samples = [ScaleSample(f"img,{i}", s, float(rng.uniform()), float(rng.uniform()))
               for i in range(3) for s in (0.1, 1.0, 1.7)]
    p = tmp_path / "s.csv"
    write_samples_csv(samples, p)
    assert p.read_text().splitlines()[0] == "image_id,scale,e_phi_scaled,e_phi_ref"
    assert read_samples_csv(p) == samples


def test_samples_csv_bad_header(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("scale,ratio\n1,1\n")
    with pytest.raises(SchemaError):
        read_samples_csv(p)


def _fitted():
    rng = np.random.default_rng(4)
    samples = [ScaleSample(str(k), s, e, e * s ** 0.7 * rng.uniform(0.9, 1.1))
               for k in range(4) for s in GRID for e in [rng.uniform(0.1, 0.5)]]
    m = fit_constrained(samples)
    from dataclasses import replace
    return replace(m, power_law=fit_power_law(samples))


def test_model_round_trip(tmp_path):
    m = _fitted()
    p = tmp_path / "m.json"
    save_model(m, p)
    assert load_model(p) == m
    doc = json.loads(p.read_text())
    assert list(doc) == ["version", "c", "up", "down", "lambda", "rmse", "power_law"]
    assert doc["version"] == 1


def test_model_unknown_version(tmp_path):
    doc = model_to_dict(_fitted())
    doc["version"] = 7
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(SchemaError, match="7"):
        load_model(p)


@pytest.mark.parametrize("mutate", [
    lambda d: d.pop("down"),
    lambda d: d["down"].pop("c2"),
    lambda d: d["up"].update(a1="x"),
    lambda d: d["up"].update(a1=5.0),
    lambda d: d.pop("version"),
    lambda d: d.update(power_law={"amp": -1.0, "exponent": 1.0}),
])
def test_model_schema_errors(tmp_path, mutate):
    doc = model_to_dict(_fitted())
    mutate(doc)
    p = tmp_path / "m.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(SchemaError):
        load_model(p)


def test_model_malformed_json(tmp_path):
    p = tmp_path / "m.json"
    p.write_text("{not json")
    with pytest.raises(SchemaError):
        load_model(p)


def test_minimal_hand_written_model(tmp_path):
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"version": 1, "up": {"a1": 0, "b1": 1}, "down": {"a2": 0, "b2": 0, "c2": 1}}))
    m = load_model(p)
    assert m.up == (0, 1) and m.down == (0, 0, 1)
    assert m.c_used == 0.0  # defaults to b2/2
    assert m.g(0.3) == 1.0 and m.g(1.7) == 1.0


def test_model_g_branches():
    m = NormalizationModel(0.8, 0.2, -0.24, 1.24, 0.0)
    assert m.g(2.0) == pytest.approx(1.8)
    assert m.g(0.5) == pytest.approx(-0.06 + 0.62)
    np.testing.assert_allclose(m.g(np.array([0.5, 2.0])), [0.56, 1.8])
    assert math.isclose(m.g(1.0), 1.0, abs_tol=1e-12)


def test_power_law_model_validation():
    with pytest.raises(ValueError):
        PowerLawModel(0.0, 1.0)
