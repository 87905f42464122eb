"""Statistical studies: precision scaling, photon budget, lifetime floor, drift."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import Histogram, TimeAxis, merge_histograms, pretrigger_window
from .fitting import DegenerateFitError, FitError, auto_initialize, fit_lifetime
from .simulate import DRIFT_INTERVAL, DRIFT_RMS, sample_arrivals

log = logging.getLogger(__name__)

MAX_EXCLUDED_GROUPS = 0.20
MAX_FAILED_REPLICATES = 0.10
BIAS_THRESHOLD = 0.10


class StudyError(RuntimeError):
    pass


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
    return [fn(x) for x in items]


def _tau_or_none(args):
    """Fitted lifetime, or None when the fit failed or did not converge."""
    h, irf, kwargs = args
    try:
        res = fit_lifetime(h, irf, **kwargs)
    except DegenerateFitError as e:
        # error bars are undefined but the estimate itself is still usable
        res = e.result
    except FitError as e:
        log.debug("fit failed: %s", e)
        return None
    return res.params.tau if res.converged else None


@dataclass(frozen=True)
class ScalingResult:
    interval_lengths: list
    lifetime_spreads: list
    subset_counts: list
    exponent: float
    exponent_std_error: float
    mean_coincidences: list
    excluded_groups: int

    def rows(self):
        return list(zip(self.interval_lengths, self.subset_counts,
                        self.mean_coincidences, self.lifetime_spreads))


def power_law_fit(x, y):
    """OLS slope of log(y) on log(x) and its standard error."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    n = lx.size
    if n < 2:
        raise StudyError("need at least two points for a power-law fit")
    A = np.column_stack([lx, np.ones(n)])
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    if n == 2:
        return float(coef[0]), math.nan
    resid = ly - A @ coef
    s2 = resid @ resid / (n - 2)
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[0]), float(math.sqrt(cov[0, 0]))


def scaling_study(segments, irf, interval_lengths, *, rebin=16, workers=1, **fit_kwargs):
    """Spread of fitted lifetimes against integration time.

    Consecutive segments are summed into disjoint groups covering each
    interval length (seconds), every group is fitted, and the standard
    deviation of the lifetimes per interval is regressed on the interval in
    log-log space.  A leftover partial group is dropped.

    Groups are rebinned by ``rebin`` before fitting.  At 4 ps a one-minute
    histogram has well under one count per bin, where the unit variance
    floor discards most of the Poisson weighting and the spread stops
    following the counting statistics.

    Raises
    ------
    StudyError
        If the segments are too few, or more than 20% of group fits fail.
    """
    if not segments:
        raise StudyError("no segments given")
    seg_len = float(segments[0].live_time)
    if not seg_len > 0:
        raise StudyError("segments must carry their live_time")
    intervals = sorted(float(x) for x in interval_lengths)
    if any(b <= a for a, b in zip(intervals, intervals[1:])):
        raise StudyError("interval_lengths must be distinct")
    total = seg_len * len(segments)
    if total < 10 * intervals[-1] * (1 - 1e-9):
        raise StudyError(
            f"segments cover {total:g} s, need at least 10x the largest interval ({intervals[-1]:g} s)"
        )

    groups, owner = [], []
    for j, interval in enumerate(intervals):
        k = max(1, int(round(interval / seg_len)))
        for g in range(len(segments) // k):
            groups.append(merge_histograms(segments[g * k:(g + 1) * k]).rebinned(rebin))
            owner.append(j)
    taus = _map(_tau_or_none, [(h, irf, fit_kwargs) for h in groups], workers)

    failed = sum(t is None for t in taus)
    if failed > MAX_EXCLUDED_GROUPS * len(taus):
        raise StudyError(f"{failed} of {len(taus)} group fits failed (limit 20%)")
    owner = np.array(owner)
    spreads, counts, mean_n = [], [], []
    for j in range(len(intervals)):
        idx = np.flatnonzero(owner == j)
        t = np.array([taus[i] for i in idx if taus[i] is not None])
        if t.size < 2:
            raise StudyError(f"fewer than two usable groups at interval {intervals[j]:g} s")
        spreads.append(float(np.std(t, ddof=1)))
        counts.append(int(t.size))
        mean_n.append(float(np.mean([groups[i].n_counts for i in idx])))
    exponent, se = power_law_fit(intervals, spreads)
    return ScalingResult(intervals, spreads, counts, exponent, se, mean_n, failed)


def _budget_axis(irf, tau):
    lo = irf.support()[0] - 0.5e-9
    hi = max(irf.support()[1], irf.centroid) + 15.0 * tau
    return TimeAxis.spanning(lo, hi, 4e-12)


def _budget_fit(args):
    h, irf, centroid_shift = args
    init = auto_initialize(h, irf)
    init = replace(init, shift=centroid_shift, baseline=0.0)
    try:
        res = fit_lifetime(h, irf, init, min_peak_counts=0, variance_floor=1e-6,
                           fixed=("shift", "baseline"))
    except DegenerateFitError as e:
        res = e.result
    except FitError:
        return None
    return res.params.tau if res.converged else None


def budget_estimates(n_coincidences, irf, tau, replicates, rng_seed, workers=1):
    """Fitted lifetimes from ``replicates`` histograms of exactly ``n_coincidences``.

    The histograms are background-free and the IRF position is known, so only
    the lifetime and amplitude are fitted.  Weights use a variance floor of
    1e-6 counts, which keeps the Poisson weighting efficient when almost every
    bin is empty.  Failed fits come back as NaN.
    """
    if n_coincidences < 20:
        raise ValueError("n_coincidences must be >= 20")
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    axis = _budget_axis(irf, tau)
    seeds = np.random.SeedSequence(rng_seed).spawn(replicates)
    hists = []
    for s in seeds:
        rng = np.random.default_rng(s)
        t = sample_arrivals(irf, tau, int(n_coincidences), rng)
        k = axis.index(t)
        c = np.bincount(k[(k >= 0) & (k < axis.n_bins)], minlength=axis.n_bins)
        hists.append(Histogram(axis, c.astype(np.int64), int(n_coincidences)))
    taus = _map(_budget_fit, [(h, irf, 0.0) for h in hists], workers)
    return np.array([math.nan if t is None else t for t in taus])


def photon_budget(n_coincidences, irf, tau, replicates=500, rng_seed=0, workers=1):
    """Relative lifetime uncertainty std(tau_hat)/tau at a fixed photon count.

    Raises
    ------
    StudyError
        If more than 10% of the replicate fits fail.
    """
    if replicates < 100:
        raise ValueError("replicates must be >= 100")
    est = budget_estimates(n_coincidences, irf, tau, replicates, rng_seed, workers)
    ok = est[np.isfinite(est)]
    if ok.size < (1 - MAX_FAILED_REPLICATES) * est.size:
        raise StudyError(f"{est.size - ok.size} of {est.size} replicate fits failed (limit 10%)")
    return float(np.std(ok, ddof=1) / tau)


@dataclass(frozen=True)
class ScanPoint:
    tau: float
    bias: float
    spread: float
    n_fits: int

    @property
    def relative_bias(self):
        return self.bias / self.tau


def _scan_hist(irf, tau, n, axis, walk, rng):
    t = sample_arrivals(irf, tau, n, rng)
    if walk.size:
        t = t + walk[rng.integers(walk.size, size=n)]
    k = axis.index(t)
    c = np.bincount(k[(k >= 0) & (k < axis.n_bins)], minlength=axis.n_bins)
    return Histogram(axis, c.astype(np.int64), n)


def min_lifetime_scan(irf, tau_grid, n_coincidences=300_000, replicates=100, rng_seed=0, *,
                      axis=None, drift_rms=DRIFT_RMS, acquisition_time=6 * 3600.0,
                      segment_length=60.0, workers=1):
    """Bias and spread of fitted lifetimes across a grid of true lifetimes.

    Each replicate spreads its coincidences uniformly over an acquisition in
    which the IRF centroid follows the drift random walk, and is then fitted
    with the static ``irf``.  The walk's mean is absorbed by the free shift,
    but its spread broadens the measured response, which the fit can only
    explain by lengthening the lifetime.  That systematic is negligible for
    lifetimes well above the IRF width and dominates once the lifetime is a
    small fraction of it.  ``drift_rms=0`` gives the purely statistical scan.

    Returns
    -------
    list of ScanPoint
        One per grid value, with ``bias = mean(tau_hat) - tau`` and
        ``spread = std(tau_hat)``.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if any(not t > 0 for t in tau_grid):
        raise ValueError("tau_grid values must be > 0")
    if axis is None:
        lo = irf.support()[0] - 0.5e-9
        hi = irf.support()[1] + 15.0 * max(tau_grid)
        axis = TimeAxis.spanning(lo, hi, 16e-12)
    n_seg = max(1, int(round(acquisition_time / segment_length)))
    step = drift_rms * math.sqrt(segment_length / DRIFT_INTERVAL)
    out = []
    for tau, ss in zip(tau_grid, np.random.SeedSequence(rng_seed).spawn(len(tau_grid))):
        hists = []
        for s in ss.spawn(replicates):
            rng = np.random.default_rng(s)
            walk = np.cumsum(rng.normal(0.0, step, n_seg)) if step > 0 else np.zeros(0)
            hists.append(_scan_hist(irf, float(tau), int(n_coincidences), axis, walk, rng))
        taus = _map(_tau_or_none, [(h, irf, {}) for h in hists], workers)
        ok = np.array([t for t in taus if t is not None])
        if ok.size < (1 - MAX_FAILED_REPLICATES) * len(taus) or ok.size < 2:
            raise StudyError(
                f"{len(taus) - ok.size} of {len(taus)} fits failed at tau={tau:g} s (limit 10%)"
            )
        out.append(ScanPoint(float(tau), float(ok.mean() - tau), float(ok.std(ddof=1)), int(ok.size)))
    return out


def bias_knee(points, threshold=BIAS_THRESHOLD):
    """Smallest lifetime above which every point has |bias|/tau <= threshold."""
    knee = None
    for p in sorted(points, key=lambda p: p.tau, reverse=True):
        if abs(p.relative_bias) > threshold:
            break
        knee = p.tau
    return knee


@dataclass(frozen=True)
class DriftResult:
    times: np.ndarray
    centroids: np.ndarray
    centroid_errors: np.ndarray
    drift_std: float
    raw_std: float
    window: float
    excluded: int


def _peak_region(total, irf_fwhm):
    ax = total.axis
    width = max(1, int(round(irf_fwhm / ax.bin_width / 4)))
    smooth = np.convolve(total.counts, np.ones(width), mode="same")
    t_peak = ax.centers[int(np.argmax(smooth))]
    lo = max(0, int(ax.index(t_peak - 3 * irf_fwhm)))
    hi = min(ax.n_bins, int(ax.index(t_peak + 3 * irf_fwhm)) + 1)
    return t_peak, lo, hi


def drift_inflation(segments, irf, window=DRIFT_INTERVAL):
    """Per-segment peak centroids and the centroid drift over ``window`` seconds.

    The centroid of each segment is the background-subtracted count-weighted
    mean over +-3 IRF widths around the peak of the summed histogram.  The
    drift statistic is the spread of centroid differences between segments
    ``window`` apart, i.e. the std a random walk accumulates over that time.
    The statistical centroid noise of both segments is subtracted in
    quadrature (``drift_std``); ``raw_std`` keeps it in.
    """
    if len(segments) < 20:
        raise StudyError("drift analysis needs at least 20 segments")
    seg_len = float(segments[0].live_time)
    if not seg_len > 0:
        raise StudyError("segments must carry their live_time")
    lag = int(round(window / seg_len))
    if lag < 1 or lag >= len(segments):
        raise StudyError(f"window of {window:g} s does not fit in {len(segments)} segments")
    fwhm = irf.fwhm
    t_peak, lo, hi = _peak_region(merge_histograms(segments), fwhm)
    bg_lo, bg_hi = pretrigger_window(segments[0].axis, t_peak, fwhm)
    t = segments[0].axis.centers[lo:hi]

    cent = np.full(len(segments), np.nan)
    err = np.full(len(segments), np.nan)
    for i, s in enumerate(segments):
        c = s.counts.astype(float)
        b = c[bg_lo:bg_hi].mean() if bg_hi > bg_lo else 0.0
        y = c[lo:hi] - b
        n = y.sum()
        if not n > 0:
            continue
        mu = float(t @ y / n)
        cent[i] = mu
        # Poisson counts: var(mu) = sum(c_k (t_k - mu)^2) / n^2
        err[i] = math.sqrt(float(c[lo:hi] @ (t - mu) ** 2)) / n
    excluded = int(np.isnan(cent).sum())
    d = cent[lag:] - cent[:-lag]
    noise = err[lag:] ** 2 + err[:-lag] ** 2
    good = np.isfinite(d)
    if good.sum() < 2:
        raise StudyError("too few usable segment pairs for the drift statistic")
    # walk increments have zero mean, so no mean is removed
    raw_var = float(np.mean(d[good] ** 2))
    drift_var = raw_var - float(np.mean(noise[good]))
    times = seg_len * (np.arange(len(segments)) + 0.5)
    return DriftResult(times, cent, err, math.sqrt(max(drift_var, 0.0)), math.sqrt(raw_var),
                       window, excluded)
