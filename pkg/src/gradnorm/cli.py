"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error,
4 numerical or identifiability error. Every failure writes a single line
``gradnorm: error[<category>]: <message>`` to stderr.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import click

from .channels import (
    common_grid,
    compute_channels,
    cross_scale_variance,
    normalization_factor,
    write_channel_dump,
)
from .errors import DegenerateDataError, GradNormError
from .gradient import image_gradient_stats
from .imageio import load_image, write_csv
from .normfit import (
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
    save_model,
    usable,
    write_samples_csv,
)
from .pyramid import REFERENCE_SCALE, ScaleSet, build_pyramid, resample_bilinear, scaled_size
from .variation import c_statistics, rho
from .verify import report as verify_report
from .verify import run_verification

log = logging.getLogger("gradnorm")

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

VARIANCE_PROTOCOL = (
    "per image: bilinear pyramid; channels with and without g(s); every level's "
    "cell grid block-averaged (area-weighted) to the coarsest grid of that image; "
    "population variance across scales per channel cell; mean over cells, channels "
    "and images"
)


def _write_json(doc, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False)
        fh.write("\n")


def _sibling(path: str, suffix: str) -> str:
    p = Path(path)
    return str(p.with_name(p.stem + suffix))


def _parse_scales(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals:
        raise click.BadParameter("empty scale list")
    return sorted(set(vals))


def scale_set_from(scales, scale_min, scale_max, scale_step) -> ScaleSet:
    if scales:
        return ScaleSet(tuple(_parse_scales(scales)))
    return ScaleSet.grid(scale_min, scale_max, scale_step)


def scale_options(f):
    f = click.option("--scales", default=None, help="Explicit comma-separated scales; overrides the grid.")(f)
    f = click.option("--scale-step", type=float, default=0.1, show_default=True)(f)
    f = click.option("--scale-max", type=float, default=2.0, show_default=True)(f)
    f = click.option("--scale-min", type=float, default=0.1, show_default=True)(f)
    return f


def feature_options(f):
    f = click.option("--bins", type=int, default=6, show_default=True, help="Orientation bins.")(f)
    f = click.option("--cell-size", type=int, default=4, show_default=True)(f)
    return f


jobs_option = click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True,
                           help="Worker threads for per-image work.")


def load_corpus(input_dir, min_side: int = 1):
    """Readable images in ``input_dir`` sorted by file name.

    Unreadable files and images with a side shorter than ``min_side`` are
    skipped and counted.
    """
    root = Path(input_dir)
    if not root.is_dir():
        raise OSError(f"input directory not found: {input_dir}")
    corpus, skipped = [], 0
    for p in sorted(root.iterdir()):
        if not p.is_file() or p.name.startswith("."):
            continue
        try:
            img = load_image(p)
        except GradNormError as exc:
            log.debug("skipping %s: %s", p.name, exc)
            skipped += 1
            continue
        if min(img.width, img.height) < min_side:
            log.debug("skipping %s: smaller than %d px", p.name, min_side)
            skipped += 1
            continue
        corpus.append((p.stem, img))
    if skipped:
        log.warning("skipped %d unreadable or undersized file(s) in %s", skipped, input_dir)
    if not corpus:
        raise OSError(f"no loadable images in {input_dir}")
    return corpus, skipped


def _min_side_for(scales, at_least: int) -> int:
    """Smallest reference side whose rounded size is >= ``at_least`` at every scale."""
    n = at_least
    while any(scaled_size(n, s) < at_least for s in scales):
        n += 1
    return n


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging on stderr.")
def cli(verbose):
    """Measure, fit and apply scale normalization of image gradients."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.option("--input", "input_dir", required=True, help="Directory of PNG/PGM images.")
@click.option("--output", required=True, help="Samples CSV to write.")
@click.option("--summary", default=None, help="Summary JSON (default: <output>_summary.json).")
@scale_options
@jobs_option
def measure(input_dir, output, summary, scales, scale_min, scale_max, scale_step, jobs):
    """Gradient expectations of every image at every scale."""
    sset = scale_set_from(scales, scale_min, scale_max, scale_step)
    corpus, skipped = load_corpus(input_dir, _min_side_for(sset, 3))

    ref_stats = [image_gradient_stats(img) for _, img in corpus]
    if not any(st.c_defined for st in ref_stats):
        raise DegenerateDataError("all images degenerate")
    samples = collect_samples(corpus, sset, jobs=jobs)
    cst = c_statistics(ref_stats)

    per_scale = []
    for s in sset:
        at = [x for x in usable(samples) if x.scale == s]
        per_scale.append({
            "scale": s,
            "n": len(at),
            "mean_ratio": sum(x.e_phi_scaled / x.e_phi_ref for x in at) / len(at) if at else None,
            "mean_target": sum(x.target_ratio for x in at) / len(at) if at else None,
        })

    write_samples_csv(samples, output)
    _write_json({
        "images": len(corpus),
        "skipped_files": skipped,
        "samples": len(samples),
        "degenerate_samples": len(samples) - len(usable(samples)),
        "scales": list(sset.scales),
        "c_mean": cst["mean"],
        "c_stdev": cst["stdev"],
        "c_count": cst["count"],
        "c_skipped": cst["skipped"],
        "per_scale": per_scale,
    }, summary or _sibling(output, "_summary.json"))
    return EXIT_OK


@cli.command()
@click.option("--input", "samples_csv", required=True, help="Samples CSV from `measure`.")
@click.option("--output", required=True, help="Model JSON to write.")
@click.option("--report", "report_path", default=None, help="Fit report JSON (default: <output>_report.json).")
@click.option("--plot", "plot_path", default=None, help="Plot data CSV (default: <output>_plot.csv).")
def fit(samples_csv, output, report_path, plot_path):
    """Fit the constrained piecewise polynomial and a power-law baseline."""
    samples = read_samples_csv(samples_csv)
    model = fit_constrained(samples)
    pl = fit_power_law(samples)
    model = replace(model, power_law=pl)
    save_model(model, output)

    observed = per_scale_mean_ratio(samples)
    rows = [
        {"scale": s, "observed_mean_ratio": y,
         "g_poly": float(model.g(s)), "g_powerlaw": float(pl.g(s))}
        for s, y in observed.items()
    ]
    write_csv(rows, plot_path or _sibling(output, "_plot.csv"),
              ("scale", "observed_mean_ratio", "g_poly", "g_powerlaw"))
    _write_json({
        "samples": len(samples),
        "usable_samples": len(usable(samples)),
        "rmse_poly": evaluate_rmse(model, samples),
        "rmse_powerlaw": evaluate_rmse(pl, samples),
        "residual_rmse_poly": model.rmse_total,
        "residual_rmse_powerlaw": pl.rmse,
        "objective_poly": objective(model, samples),
        "objective_powerlaw": objective(pl, samples),
        "kkt_residual": kkt_residual(model, samples),
        "model": model_to_dict(model),
        "per_scale": rows,
    }, report_path or _sibling(output, "_report.json"))
    return EXIT_OK


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--output", default=None, help="Report JSON (default: stdout).")
@click.option("--corrupt-rho", is_flag=True, hidden=True)
def verify(seed, output, corrupt_rho):
    """Run the closed-form vs brute-force oracle suites."""
    # negative control: an increasing ratio must trip the monotonicity suite
    rho_fn = (lambda s, c: s * c) if corrupt_rho else rho
    results = run_verification(seed, rho_fn)
    doc = verify_report(results, seed)
    text = json.dumps(doc, indent=2)
    if output:
        with open(output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)
    for r in results:
        click.echo(f"{'PASS' if r.passed else 'FAIL'} {r.name} max_error={r.max_error:.3e}", err=True)
    return EXIT_OK if doc["passed"] else EXIT_VERIFY


@cli.command()
@click.option("--input", "image_path", required=True, help="Image to featurize.")
@click.option("--model", "model_path", default=None, help="Model JSON; omit for raw channels.")
@click.option("--output", "out_dir", required=True, help="Directory for channel dumps.")
@scale_options
@feature_options
def normalize(image_path, model_path, out_dir, scales, scale_min, scale_max, scale_step, cell_size, bins):
    """Write normalized channel dumps for one image at each scale."""
    img = load_image(image_path)
    model = load_model(model_path) if model_path else None
    if scales:
        scale_list = _parse_scales(scales)
    else:
        scale_list = list(ScaleSet.grid(scale_min, scale_max, scale_step))
    os.makedirs(out_dir, exist_ok=True)
    levels = []
    for i, s in enumerate(scale_list):
        level = img if s == REFERENCE_SCALE else resample_bilinear(img, s)
        stack = compute_channels(level, s, model, cell_size, bins)
        name = f"level_{i:03d}.gsch"
        write_channel_dump(stack, os.path.join(out_dir, name))
        levels.append({"file": name, "scale": s, "g": normalization_factor(model, s),
                       "cells_w": stack.cells_w, "cells_h": stack.cells_h})
    _write_json({
        "image": str(image_path),
        "model": str(model_path) if model_path else None,
        "cell_size": cell_size,
        "bins": bins,
        "levels": levels,
    }, os.path.join(out_dir, "index.json"))
    return EXIT_OK


def _variance_pair(item, sset, model, cell_size, bins):
    image_id, img = item
    pyr = build_pyramid(img, sset)
    raw = [compute_channels(lv.image, lv.scale, None, cell_size, bins) for lv in pyr.levels]
    nrm = [compute_channels(lv.image, lv.scale, model, cell_size, bins) for lv in pyr.levels]
    return (image_id, common_grid(raw)), (image_id, common_grid(nrm))


@cli.command("experiment-variance")
@click.option("--input", "input_dir", required=True, help="Directory of PNG/PGM images.")
@click.option("--model", "model_path", required=True, help="Model JSON from `fit`.")
@click.option("--output", required=True, help="Variance report JSON.")
@scale_options
@feature_options
@jobs_option
def experiment_variance(input_dir, model_path, output, scales, scale_min, scale_max, scale_step,
                        cell_size, bins, jobs):
    """Cross-scale feature variance with and without normalization."""
    sset = scale_set_from(scales, scale_min, scale_max, scale_step)
    if len(sset) < 3:
        raise click.UsageError(f"need >= 3 scales, got {len(sset)}")
    model = load_model(model_path)
    corpus, skipped = load_corpus(input_dir, _min_side_for(sset, max(cell_size, 3)))
    if len(corpus) < 5:
        raise click.UsageError(f"need >= 5 images, got {len(corpus)}")

    def work(item):
        return _variance_pair(item, sset, model, cell_size, bins)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            pairs = list(pool.map(work, corpus))
    else:
        pairs = [work(item) for item in corpus]
    raw = cross_scale_variance([p[0] for p in pairs])
    nrm = cross_scale_variance([p[1] for p in pairs])

    _write_json({
        "protocol": VARIANCE_PROTOCOL,
        "images": len(corpus),
        "skipped_files": skipped,
        "scales": list(sset.scales),
        "cell_size": cell_size,
        "bins": bins,
        "mean_variance_raw": raw.mean_variance,
        "mean_variance_normalized": nrm.mean_variance,
        "ratio": nrm.mean_variance / raw.mean_variance if raw.mean_variance > 0 else None,
        "magnitude_variance_raw": raw.magnitude_variance,
        "magnitude_variance_normalized": nrm.magnitude_variance,
        "magnitude_ratio": (nrm.magnitude_variance / raw.magnitude_variance
                            if raw.magnitude_variance > 0 else None),
    }, output)
    return EXIT_OK


def _fail(category: str, message: str, code: int) -> int:
    first = str(message).strip().splitlines()[0] if str(message).strip() else category
    click.echo(f"gradnorm: error[{category}]: {first}", err=True)
    return code


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="gradnorm", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        return _fail("usage", "aborted", EXIT_USAGE)
    except click.ClickException as exc:
        return _fail("usage", exc.format_message(), EXIT_USAGE)
    except GradNormError as exc:
        code = EXIT_IO if exc.category == "io" else EXIT_NUMERICAL
        return _fail(exc.category, str(exc), code)
    except OSError as exc:
        msg = f"{exc.strerror}: {exc.filename}" if exc.filename else str(exc)
        return _fail("io", msg, EXIT_IO)
    except ArithmeticError as exc:
        return _fail("numerical", str(exc), EXIT_NUMERICAL)
    except ValueError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    return rv if isinstance(rv, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
