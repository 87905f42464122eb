"""Decay models, instrument responses, histograms and the forward convolution.

All times are in seconds.  A histogram bin ``k`` spans
``[origin + k*bin_width, origin + (k+1)*bin_width)`` and model curves are
evaluated at bin centers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy import signal, special

FWHM_PER_SIGMA = math.sqrt(8.0 * math.log(2.0))

# Gaussian densities underflow to exactly 0.0 beyond ~38.6 sigma.
_UNDERFLOW_SIGMAS = 40.0
_GL_ORDER = 4
_MAX_SUBINTERVALS = 32


class AxisTooShortError(ValueError):
    """The time axis does not contain the support of the instrument response."""


def fwhm_to_sigma(fwhm):
    return fwhm / FWHM_PER_SIGMA


def sigma_to_fwhm(sigma):
    return sigma * FWHM_PER_SIGMA


@dataclass(frozen=True)
class TimeAxis:
    """Uniform binning of the start-stop time difference."""

    bin_width: float
    n_bins: int
    origin: float = 0.0

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ValueError(f"bin_width must be > 0, got {self.bin_width!r}")
        if int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise ValueError(f"n_bins must be a positive integer, got {self.n_bins!r}")
        object.__setattr__(self, "n_bins", int(self.n_bins))

    @classmethod
    def spanning(cls, start, stop, bin_width):
        """Axis starting at ``start`` with enough bins to reach ``stop``."""
        n = int(math.ceil((stop - start) / bin_width - 1e-9))
        return cls(bin_width=bin_width, n_bins=max(n, 1), origin=start)

    @property
    def end(self):
        return self.origin + self.n_bins * self.bin_width

    @property
    def edges(self):
        return self.origin + self.bin_width * np.arange(self.n_bins + 1)

    @property
    def centers(self):
        return self.origin + self.bin_width * (np.arange(self.n_bins) + 0.5)

    def index(self, t):
        """Bin index containing ``t`` (may fall outside ``[0, n_bins)``)."""
        return np.floor((np.asarray(t) - self.origin) / self.bin_width).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Histogram:
    """Counts of start-stop differences on a :class:`TimeAxis`.

    Raw histograms hold integer counts.  Background-subtracted histograms
    hold real values and may go negative.
    """

    axis: TimeAxis
    counts: np.ndarray
    total_starts: int = 0
    live_time: float = 0.0

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 1 or counts.size != self.axis.n_bins:
            raise ValueError(
                f"counts has shape {counts.shape}, axis expects ({self.axis.n_bins},)"
            )
        if np.issubdtype(counts.dtype, np.integer):
            counts = counts.astype(np.int64)
            if counts.min() < 0:
                raise ValueError("raw counts must be non-negative")
            if counts.sum() > self.total_starts:
                raise ValueError(
                    f"sum(counts)={counts.sum()} exceeds total_starts={self.total_starts}"
                )
        else:
            counts = counts.astype(np.float64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "total_starts", int(self.total_starts))
        object.__setattr__(self, "live_time", float(self.live_time))

    @property
    def n_counts(self):
        return self.counts.sum()

    def __add__(self, other):
        if not isinstance(other, Histogram):
            return NotImplemented
        if other.axis != self.axis:
            raise ValueError("cannot add histograms on different axes")
        return Histogram(
            self.axis,
            self.counts + other.counts,
            self.total_starts + other.total_starts,
            self.live_time + other.live_time,
        )

    def __eq__(self, other):
        if not isinstance(other, Histogram):
            return NotImplemented
        return (
            self.axis == other.axis
            and self.total_starts == other.total_starts
            and self.live_time == other.live_time
            and self.counts.dtype == other.counts.dtype
            and np.array_equal(self.counts, other.counts)
        )

    __hash__ = None

    def centroid(self, lo=None, hi=None):
        """Count-weighted mean time over bins ``[lo, hi)``."""
        sl = slice(lo, hi)
        w = self.counts[sl].astype(float)
        total = w.sum()
        if total <= 0:
            raise ValueError("no counts in centroid region")
        return float(np.dot(self.axis.centers[sl], w) / total)

    def rebinned(self, factor):
        """Sum runs of ``factor`` adjacent bins; a trailing partial run is dropped."""
        factor = int(factor)
        if factor < 1:
            raise ValueError("rebin factor must be >= 1")
        n = self.axis.n_bins // factor
        if n < 1:
            raise ValueError(f"cannot rebin {self.axis.n_bins} bins by {factor}")
        counts = self.counts[: n * factor].reshape(n, factor).sum(axis=1)
        axis = TimeAxis(self.axis.bin_width * factor, n, self.axis.origin)
        return Histogram(axis, counts, self.total_starts, self.live_time)


def merge_histograms(histograms):
    """Bin-wise sum of histograms sharing one axis."""
    histograms = list(histograms)
    if not histograms:
        raise ValueError("nothing to merge")
    out = histograms[0]
    for h in histograms[1:]:
        out = out + h
    return out


@dataclass(frozen=True)
class DecayModel:
    """Causal single-exponential sample response ``A*exp(-t/tau)``."""

    lifetime: float
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.lifetime > 0:
            raise ValueError(f"lifetime must be > 0, got {self.lifetime!r}")
        if not self.amplitude >= 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude!r}")

    def __call__(self, t):
        return eval_decay(self, t)


def eval_decay(model, t):
    t = np.asarray(t, dtype=float)
    # where() still evaluates exp on negative t; clip the argument to keep it finite
    out = model.amplitude * np.exp(-np.maximum(t, 0.0) / model.lifetime)
    out = np.where(t >= 0, out, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GaussianIRF:
    """Parametric instrument response: a unit-area Gaussian."""

    fwhm: float
    centroid: float = 0.0

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ValueError(f"fwhm must be > 0, got {self.fwhm!r}")

    @property
    def sigma(self):
        return fwhm_to_sigma(self.fwhm)

    @property
    def std(self):
        return self.sigma

    def shifted(self, dt):
        return GaussianIRF(self.fwhm, self.centroid + dt)

    def support(self, n_sigma=5.0):
        return self.centroid - n_sigma * self.sigma, self.centroid + n_sigma * self.sigma

    def density(self, t):
        z = (np.asarray(t, dtype=float) - self.centroid) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2.0 * math.pi))


@dataclass(frozen=True, eq=False)
class TabulatedIRF:
    """Instrument response sampled on its own axis, piecewise constant per bin.

    ``density`` is per second; after :func:`normalize` it integrates to one.
    """

    axis: TimeAxis
    density: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.density, dtype=np.float64)
        if d.shape != (self.axis.n_bins,):
            raise ValueError(f"density has shape {d.shape}, expected ({self.axis.n_bins},)")
        if not np.all(np.isfinite(d)) or d.min() < 0:
            raise ValueError("density must be finite and non-negative")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "density", d)

    def __eq__(self, other):
        if not isinstance(other, TabulatedIRF):
            return NotImplemented
        return self.axis == other.axis and np.array_equal(self.density, other.density)

    __hash__ = None

    @property
    def area(self):
        return float(self.density.sum() * self.axis.bin_width)

    @property
    def centroid(self):
        return float(np.dot(self.axis.centers, self.density) / self.density.sum())

    @property
    def std(self):
        c = self.axis.centers
        w = self.density / self.density.sum()
        mu = np.dot(c, w)
        # piecewise-constant bins add bin_width**2/12 of variance
        return float(math.sqrt(np.dot((c - mu) ** 2, w) + self.axis.bin_width**2 / 12))

    @property
    def fwhm(self):
        return sigma_to_fwhm(self.std)

    def support(self, mass=1e-9):
        """Edges enclosing all but ``mass`` (fraction) of the area on each side."""
        edges = self.axis.edges
        cum = np.concatenate([[0.0], np.cumsum(self.density)])
        total = cum[-1]
        i_lo = max(int(np.searchsorted(cum, mass * total, side="right")) - 1, 0)
        i_hi = min(int(np.searchsorted(cum, (1.0 - mass) * total, side="left")), self.axis.n_bins)
        return float(edges[i_lo]), float(edges[i_hi])

    def cdf(self, t):
        """Cumulative mass at times ``t`` (linear inside each bin)."""
        edges = self.axis.edges
        cum = np.concatenate([[0.0], np.cumsum(self.density) * self.axis.bin_width])
        return np.interp(t, edges, cum, left=0.0, right=cum[-1])

    def shifted(self, dt):
        ax = self.axis
        return TabulatedIRF(TimeAxis(ax.bin_width, ax.n_bins, ax.origin + dt), self.density)


IRFModel = Union[GaussianIRF, TabulatedIRF]


def normalize(irf):
    """Scale a tabulated response to unit area; Gaussians are returned as is."""
    if isinstance(irf, GaussianIRF):
        return irf
    total = irf.density.sum() * irf.axis.bin_width
    if not total > 0:
        raise ValueError("cannot normalize an instrument response with zero area")
    return TabulatedIRF(irf.axis, irf.density / total)


def irf_from_histogram(h, half_width=None, background_window=None):
    """Tabulated IRF from a measured (mirror) histogram.

    The flat background is estimated from ``background_window`` (bin range) if
    given and removed; negative bins are clipped.  With ``half_width`` the
    response is cropped to ``centroid +/- half_width`` to drop stray counts.
    """
    counts = np.asarray(h.counts, dtype=float)
    if background_window is not None:
        counts = subtract_background(h, background_window)[0].counts
    counts = np.clip(counts, 0.0, None)
    if half_width is not None:
        peak = h.axis.centers[np.argmax(_smooth(counts, 25))]
        # second pass re-centers on the count-weighted mean of the peak region
        for _ in range(2):
            keep = np.abs(h.axis.centers - peak) <= half_width
            peak = np.dot(h.axis.centers[keep], counts[keep]) / max(counts[keep].sum(), 1e-300)
        counts = np.where(np.abs(h.axis.centers - peak) <= half_width, counts, 0.0)
    return normalize(TabulatedIRF(h.axis, counts / h.axis.bin_width))


def _smooth(y, width):
    width = max(1, min(int(width), y.size))
    return np.convolve(y, np.ones(width) / width, mode="same")


def emg_closed_form(tau, sigma, t0, t):
    """Unit-area exponentially modified Gaussian density.

    Convolution of ``exp(-t/tau)/tau`` (t >= 0) with a Gaussian of width
    ``sigma`` centred on ``t0``.  Uses the scaled complementary error function
    where the plain form would overflow (``sigma/tau`` large or far left tail).
    """
    x = np.asarray(t, dtype=float) - t0
    z = sigma / (tau * math.sqrt(2.0)) - x / (sigma * math.sqrt(2.0))
    with np.errstate(over="ignore", under="ignore"):
        # z > 0: exp(s^2/2tau^2 - x/tau) * erfc(z) == exp(-x^2/2s^2) * erfcx(z)
        scaled = np.exp(-0.5 * (x / sigma) ** 2) * special.erfcx(np.maximum(z, 0.0))
        direct = np.exp(0.5 * (sigma / tau) ** 2 - x / tau) * special.erfc(np.minimum(z, 0.0))
    out = np.where(z > 0, scaled, direct) / (2.0 * tau)
    return float(out) if out.ndim == 0 else out


def _composite_gauss_legendre(n_sub):
    """Nodes in (0, 1) and weights summing to 1 for ``n_sub`` equal pieces."""
    x, w = np.polynomial.legendre.leggauss(_GL_ORDER)
    x = (x + 1) / 2
    w = w / 2
    nodes = ((np.arange(n_sub)[:, None] + x[None, :]) / n_sub).ravel()
    weights = np.tile(w, n_sub) / n_sub
    return nodes, weights


def gaussian_response(tau, sigma, centroid, axis, derivatives=False):
    """Unit-amplitude exponential convolved with a unit-area Gaussian.

    Returns ``R(t_k) = int exp(-(t_k-u)/tau) g(u) du`` at each bin center of
    ``axis``.  The integral is carried from bin center to bin center by the
    exact exponential recurrence ``R_k = a R_{k-1} + I_k`` with
    ``a = exp(-h/tau)``; the local term ``I_k`` is integrated by composite
    Gauss-Legendre quadrature.  The grid is extended to the left until the
    Gaussian underflows so the recurrence starts from an exact zero.

    With ``derivatives=True`` also returns ``dR/dtau`` and ``dR/dcentroid`` of
    the same discrete scheme.
    """
    h = axis.bin_width
    first_center = axis.origin + 0.5 * h
    left = centroid - _UNDERFLOW_SIGMAS * sigma
    pad = max(0, int(math.ceil((first_center - left) / h)))
    n = axis.n_bins + pad
    centers = first_center + h * (np.arange(n) - pad)

    n_sub = min(_MAX_SUBINTERVALS, max(1, int(math.ceil(4.0 * h / min(sigma, tau)))))
    x, w = _composite_gauss_legendre(n_sub)
    a = math.exp(-h / tau)
    decay = np.exp(-(1.0 - x) * h / tau)
    wd = w * decay * h

    # quadrature nodes u between center k-1 and center k
    u = (centers - h)[:, None] + x[None, :] * h
    zu = (u - centroid) / sigma
    with np.errstate(under="ignore"):
        g = np.exp(-0.5 * zu * zu) / (sigma * math.sqrt(2.0 * math.pi))
    g[0] = 0.0
    local = g @ wd
    R = signal.lfilter([1.0], [1.0, -a], local)
    if not derivatives:
        return R[pad:]

    d_local_c = (g * (zu / sigma)) @ wd
    dR_dc = signal.lfilter([1.0], [1.0, -a], d_local_c)
    j_local = g @ (wd * (1.0 - x) * h)
    prev = np.concatenate([[0.0], R[:-1]])
    D = signal.lfilter([1.0], [1.0, -a], a * h * prev + j_local)
    dR_dtau = D / tau**2
    return R[pad:], dR_dtau[pad:], dR_dc[pad:]


def tabulated_response(tau, irf, axis):
    """Unit-amplitude exponential convolved with a piecewise-constant IRF.

    The IRF mass is re-binned onto the target grid through its cumulative
    distribution (so arbitrary sub-bin shifts are mass conserving), then the
    exponential is integrated exactly across each bin.
    """
    h = axis.bin_width
    lo, _ = irf.support(mass=0.0)
    pad = max(0, int(math.ceil((axis.origin - lo) / h)))
    n = axis.n_bins + pad
    edges = axis.origin + h * (np.arange(n + 1) - pad)
    mass = np.diff(irf.cdf(edges))
    density = mass / h

    a = math.exp(-h / tau)
    half = math.exp(-0.5 * h / tau)
    # contribution of a full earlier bin, and of the left half of the current bin
    prev = np.concatenate([[0.0], density[:-1]]) * tau * (1.0 - a) * half
    Q = signal.lfilter([1.0], [1.0, -a], prev)
    R = Q + density * tau * (1.0 - half)
    return R[pad:]


def check_axis_covers(irf, axis, tolerance=0.0):
    lo, hi = irf.support()
    if lo < axis.origin - tolerance or hi > axis.end + tolerance:
        raise AxisTooShortError(
            f"IRF support [{lo:.6g}, {hi:.6g}] s exceeds axis "
            f"[{axis.origin:.6g}, {axis.end:.6g}] s by more than {tolerance:.3g} s"
        )


def convolve(decay, irf, axis, tolerance=0.0):
    """Expected curve ``R = S * IRF`` at the bin centers of ``axis``.

    For a unit-area IRF, ``sum(curve) * bin_width`` approaches
    ``amplitude * lifetime`` when the axis holds the whole tail.

    Raises :class:`AxisTooShortError` if the IRF support (5 sigma for a
    Gaussian) leaves the axis by more than ``tolerance`` seconds.
    """
    check_axis_covers(irf, axis, tolerance)
    if isinstance(irf, GaussianIRF):
        r = gaussian_response(decay.lifetime, irf.sigma, irf.centroid, axis)
    else:
        r = tabulated_response(decay.lifetime, irf, axis)
    return decay.amplitude * r


def pretrigger_window(axis, peak_time, irf_fwhm):
    """Bin range ``(0, stop)`` ending 5 IRF widths before ``peak_time``."""
    stop = int(axis.index(peak_time - 5.0 * irf_fwhm))
    return 0, max(0, min(stop, axis.n_bins))


def subtract_background(h, window):
    """Remove a flat background estimated over the bin range ``window``.

    Returns the background-subtracted histogram (real counts, negatives kept)
    and the background in counts per bin.  Intended for display only; the fit
    floats its own baseline.
    """
    lo, hi = window
    lo, hi = max(int(lo), 0), min(int(hi), h.axis.n_bins)
    if hi <= lo:
        raise ValueError(f"empty background window [{lo}, {hi})")
    rate = float(np.mean(h.counts[lo:hi]))
    out = Histogram(h.axis, h.counts.astype(float) - rate, h.total_starts, h.live_time)
    return out, rate
