"""``tcspc`` command-line front end.

Exit status is 0 on success, 1 for invalid input (config, files, arguments)
and 2 when a simulation, fit or study fails.  Failures also leave an
``error.json`` record in the output directory.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io
from .core import GaussianIRF, irf_from_histogram, pretrigger_window
from .fitting import FitError, fit_lifetime, weighted_residuals
from .simulate import SampleMode, simulate_experiment, synthesize_segments
from .studies import (
    BIAS_THRESHOLD,
    StudyError,
    bias_knee,
    drift_inflation,
    min_lifetime_scan,
    photon_budget,
    scaling_study,
)

log = logging.getLogger("tcspc")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO,
              "debug": logging.DEBUG}


class UsageError(ValueError):
    pass


def _setup_logging():
    name = os.environ.get("TCSPC_LOG", "warn").strip().lower()
    level = LOG_LEVELS.get(name, logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    if name not in LOG_LEVELS:
        log.warning("unknown TCSPC_LOG value %r, using 'warn'", name)


def _experiment(settings, args):
    exp = settings.experiment
    if args.seed is not None:
        exp = replace(exp, rng_seed=args.seed)
    return exp


def _write_run(out, settings, exp):
    """Snapshot of the effective config (seed override applied)."""
    io.save_config(replace(settings, experiment=exp), out / "config.yaml")


def _simulate(args, settings, out, mode=None, stem="histogram"):
    exp = _experiment(settings, args)
    if mode is not None:
        exp = replace(exp, sample=replace(exp.sample, mode=mode))
    _write_run(out, settings, exp)
    res = simulate_experiment(exp, workers=args.workers)
    path = out / f"{stem}.csv"
    io.write_histogram(res.histogram, path)
    truth = dict(res.ground_truth, name=settings.name)
    io.write_json(truth, io.sidecar_path(path))
    if args.segments:
        seg_dir = out / "segments"
        seg_dir.mkdir(exist_ok=True)
        for i, h in enumerate(res.segments):
            io.write_histogram(h, seg_dir / f"segment_{i:05d}.csv")
    log.info("wrote %s (%d coincidences)", path, res.histogram.n_counts)


def cmd_simulate(args, settings, out):
    _simulate(args, settings, out)


def cmd_irf(args, settings, out):
    _simulate(args, settings, out, mode=SampleMode.MIRROR, stem="irf")


def _load_irf(args, settings, exp, hist):
    if args.irf is None:
        return exp.irf()
    h = io.read_histogram(args.irf)
    fwhm = exp.irf_fwhm
    peak = h.axis.centers[int(np.argmax(np.convolve(h.counts, np.ones(64), mode="same")))]
    window = pretrigger_window(h.axis, peak, fwhm)
    irf = irf_from_histogram(
        h, half_width=settings.fit.irf_half_width,
        background_window=window if window[1] > window[0] else None,
    )
    if irf.axis != hist.axis:
        log.info("IRF and histogram axes differ; the IRF is resampled by the model")
    return irf


def cmd_fit(args, settings, out):
    if args.histogram is None:
        raise UsageError("fit needs --histogram")
    exp = _experiment(settings, args)
    _write_run(out, settings, exp)
    h = io.read_histogram(args.histogram)
    irf = _load_irf(args, settings, exp, h)
    fs = settings.fit
    res = fit_lifetime(h, irf, weighting=fs.weighting, min_peak_counts=fs.min_peak_counts,
                       variance_floor=fs.variance_floor, max_iter=fs.max_iter)
    extra = {"name": settings.name, "histogram": str(args.histogram),
             "irf": "parametric" if args.irf is None else str(args.irf)}
    sidecar = io.sidecar_path(args.histogram)
    if sidecar.exists():
        truth = io.read_json(sidecar)
        extra["true_tau_s"] = truth.get("lifetime_s")
        extra["name"] = settings.name or truth.get("name", "")
    io.write_json(io.fit_record(res, **extra), out / "fit.json")
    full = weighted_residuals(h.counts, res.expected)
    io.write_histogram(replace_counts(h, full), out / "residuals.csv")
    if res.converged:
        io.emit_plot_data(res, h, irf, out / "plot.csv")
    else:
        raise FitError(f"fit did not converge in {res.n_iterations} iterations")
    log.info("tau = %.6g s, reduced chi2 = %.4f", res.params.tau, res.reduced_chi2)


def replace_counts(h, values):
    return type(h)(h.axis, np.asarray(values, dtype=float), h.total_starts, h.live_time)


def cmd_scaling(args, settings, out):
    exp = _experiment(settings, args)
    _write_run(out, settings, exp)
    sc = settings.studies.scaling
    segments = synthesize_segments(exp, sc.n_segments, drift=sc.drift)
    res = scaling_study(segments, exp.irf(), sc.interval_lengths, rebin=sc.rebin,
                        workers=args.workers)
    io.write_table(
        {"interval_s": res.interval_lengths, "n_groups": res.subset_counts,
         "mean_coincidences": res.mean_coincidences, "lifetime_spread_s": res.lifetime_spreads},
        out / "scaling.csv",
    )
    drift = drift_inflation(segments, exp.irf())
    io.write_table(
        {"time_s": drift.times, "centroid_s": drift.centroids,
         "centroid_error_s": drift.centroid_errors},
        out / "drift.csv",
    )
    io.write_json(
        {"exponent": res.exponent, "exponent_std_error": res.exponent_std_error,
         "excluded_groups": res.excluded_groups, "n_segments": len(segments),
         "drift_enabled": sc.drift, "drift_std_s": drift.drift_std,
         "drift_raw_std_s": drift.raw_std, "drift_window_s": drift.window,
         "drift_excluded_segments": drift.excluded},
        out / "scaling.json",
    )
    log.info("exponent %.3f +- %.3f", res.exponent, res.exponent_std_error)


def cmd_budget(args, settings, out):
    exp = _experiment(settings, args)
    _write_run(out, settings, exp)
    b = settings.studies.budget
    irf = GaussianIRF(b.irf_fwhm, 0.0)
    rel = [photon_budget(n, irf, b.lifetime, b.replicates, [exp.rng_seed, n], args.workers)
           for n in b.n_coincidences]
    ideal = [1.0 / math.sqrt(n) for n in b.n_coincidences]
    io.write_table(
        {"n_coincidences": b.n_coincidences, "relative_uncertainty": rel, "ideal": ideal},
        out / "budget.csv",
    )
    io.write_json(
        {"lifetime_s": b.lifetime, "irf_fwhm_s": b.irf_fwhm, "replicates": b.replicates,
         "points": [{"n": n, "relative_uncertainty": r, "ideal": i}
                    for n, r, i in zip(b.n_coincidences, rel, ideal)]},
        out / "budget.json",
    )


def cmd_scan(args, settings, out):
    exp = _experiment(settings, args)
    _write_run(out, settings, exp)
    s = settings.studies.scan
    pts = min_lifetime_scan(
        exp.irf(), s.lifetimes, s.n_coincidences, s.replicates, exp.rng_seed,
        drift_rms=exp.irf_drift_rms, acquisition_time=s.acquisition_time,
        segment_length=exp.segment_length, workers=args.workers,
    )
    io.write_table(
        {"tau_s": [p.tau for p in pts], "bias_s": [p.bias for p in pts],
         "relative_bias": [p.relative_bias for p in pts], "spread_s": [p.spread for p in pts],
         "n_fits": [p.n_fits for p in pts]},
        out / "scan.csv",
    )
    io.write_json(
        {"irf_fwhm_s": exp.irf_fwhm, "threshold": BIAS_THRESHOLD,
         "knee_tau_s": bias_knee(pts), "knee_fraction_of_irf": (
             None if bias_knee(pts) is None else bias_knee(pts) / exp.irf_fwhm)},
        out / "scan.json",
    )


def cmd_report(args, settings, out):
    if not args.inputs:
        raise UsageError("report needs --inputs with one or more fit output directories")
    rows = []
    for d in args.inputs:
        path = Path(d) / "fit.json"
        if not path.exists():
            raise UsageError(f"no fit.json in {d}")
        rec = io.read_json(path)
        rows.append({
            "solvent": rec.get("name") or Path(d).name,
            "true_tau_s": rec.get("true_tau_s"),
            "fitted_tau_s": rec["params"]["tau_s"],
            "tau_std_error_s": rec["std_errors"]["tau_s"],
            "reduced_chi2": rec["reduced_chi2"],
        })
    names = list(rows[0])
    io.write_table({n: [_blank(r[n]) for r in rows] for n in names}, out / "report.csv")
    lines = ["| Solvent | True lifetime (ns) | Fitted lifetime (ns) | Std. error (ns) | Reduced chi2 |",
             "|---|---|---|---|---|"]
    for r in rows:
        lines.append("| {} | {} | {} | {} | {} |".format(
            r["solvent"], _ns(r["true_tau_s"]), _ns(r["fitted_tau_s"]),
            _ns(r["tau_std_error_s"]), "" if r["reduced_chi2"] is None else f"{r['reduced_chi2']:.3f}",
        ))
    (out / "report.md").write_text("\n".join(lines) + "\n")


def _blank(v):
    return "" if v is None else v


def _ns(v):
    return "" if v is None else f"{v * 1e9:.3f}"


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "irf": cmd_irf,
    "scaling": cmd_scaling,
    "budget": cmd_budget,
    "scan": cmd_scan,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad arguments are a validation error
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="tcspc", description="Heralded TCSPC simulation and lifetime fitting.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="YAML config; defaults apply to absent keys")
    p.add_argument("--out", required=True, help="output directory (created if absent)")
    p.add_argument("--seed", type=int, help="override rng_seed")
    p.add_argument("--workers", type=int, default=1, help="worker processes (outputs do not depend on it)")
    p.add_argument("--histogram", help="fit: histogram file")
    p.add_argument("--irf", help="fit: measured IRF histogram (default: parametric IRF from the config)")
    p.add_argument("--inputs", nargs="*", help="report: fit output directories")
    p.add_argument("--segments", action="store_true", help="simulate/irf: also write per-segment histograms")
    return p


def run_pipeline(manifest, args):
    """Run one command; returns the process exit status."""
    out = Path(manifest.output_dir)
    try:
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        settings = io.load_settings(manifest.config_path) if manifest.config_path else io.RunSettings()
        out.mkdir(parents=True, exist_ok=True)
        io.write_json(manifest.record(), out / "manifest.json")
        COMMANDS[manifest.command](args, settings, out)
    except (io.ConfigError, io.FileFormatError, UsageError, ValueError) as e:
        return _fail(out, manifest, e, 1)
    except (FitError, StudyError, RuntimeError, ArithmeticError, OSError) as e:
        return _fail(out, manifest, e, 2)
    return 0


def _fail(out, manifest, exc, code):
    log.error("%s: %s", type(exc).__name__, exc)
    try:
        out.mkdir(parents=True, exist_ok=True)
        io.write_json({"command": manifest.command, "error": type(exc).__name__,
                       "message": str(exc), "exit_code": code}, out / "error.json")
    except OSError:
        pass
    return code


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    manifest = io.RunManifest(
        command=args.command, config_path=args.config or "", output_dir=args.out,
        seed_override=args.seed,
    )
    return run_pipeline(manifest, args)


if __name__ == "__main__":
    sys.exit(main())
