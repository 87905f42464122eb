"""Lifetime recovery by iterative reconvolution.

The model histogram is ``A * (exp(-t/tau) (*) IRF(t - t0)) + b`` on the bin
centers.  Parameters are found by Levenberg-Marquardt on the Poisson-weighted
sum of squares ``sum((o - m)**2 / v)`` over the fit range, with the variance
``v = max(m, 1)`` re-evaluated after every accepted step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    GaussianIRF,
    check_axis_covers,
    gaussian_response,
    pretrigger_window,
    sigma_to_fwhm,
    tabulated_response,
)

log = logging.getLogger(__name__)

PARAM_NAMES = ("tau", "amplitude", "shift", "baseline")
TAU_MIN = 1e-12
VARIANCE_FLOOR = 1.0
CHI2_MIN_EXPECTED = 1.0


class FitError(RuntimeError):
    pass


class NoPeakError(FitError):
    pass


class DegenerateFitError(FitError):
    """Covariance cannot be formed; ``result`` holds the best parameters found."""

    def __init__(self, parameter, result=None):
        super().__init__(f"covariance is singular: {parameter!r} is not determined by the data")
        self.parameter = parameter
        self.result = result


@dataclass(frozen=True)
class FitParams:
    tau: float
    amplitude: float
    shift: float = 0.0
    baseline: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau!r}")
        if not self.amplitude >= 0:
            raise ValueError(f"amplitude must be >= 0, got {self.amplitude!r}")
        if not self.baseline >= 0:
            raise ValueError(f"baseline must be >= 0, got {self.baseline!r}")

    def as_array(self):
        return np.array([self.tau, self.amplitude, self.shift, self.baseline], dtype=float)

    @classmethod
    def from_array(cls, theta):
        return cls(*(float(v) for v in theta))


@dataclass(eq=False)
class FitResult:
    params: FitParams
    reduced_chi2: float
    std_errors: dict
    weighted_residuals: np.ndarray
    covariance: np.ndarray
    n_iterations: int
    converged: bool
    fit_range: tuple = (0, 0)
    expected: np.ndarray = field(default=None, repr=False)

    @property
    def tau(self):
        return self.params.tau


def _response(theta, irf, axis, derivatives=False):
    """Unit-amplitude response and, optionally, d/dtau and d/dshift."""
    tau, _, shift, _ = theta
    if isinstance(irf, GaussianIRF):
        return gaussian_response(tau, irf.sigma, irf.centroid + shift, axis, derivatives)
    R = tabulated_response(tau, irf.shifted(shift), axis)
    if not derivatives:
        return R
    # piecewise-linear in the shift: central differences
    dtau = 1e-4 * tau
    ds = 0.1 * irf.axis.bin_width
    dR_dtau = (
        tabulated_response(tau + dtau, irf.shifted(shift), axis)
        - tabulated_response(tau - dtau, irf.shifted(shift), axis)
    ) / (2 * dtau)
    dR_ds = (
        tabulated_response(tau, irf.shifted(shift + ds), axis)
        - tabulated_response(tau, irf.shifted(shift - ds), axis)
    ) / (2 * ds)
    return R, dR_dtau, dR_ds


def model_histogram(p, irf, axis):
    """Expected counts per bin for parameters ``p``; the shift moves the IRF."""
    theta = p.as_array() if isinstance(p, FitParams) else np.asarray(p, dtype=float)
    return theta[1] * _response(theta, irf, axis) + theta[3]


def weighted_residuals(observed, expected):
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(expected, dtype=float)
    if observed.shape != expected.shape:
        raise ValueError("observed and expected differ in length")
    return (observed - expected) / np.sqrt(np.maximum(expected, 1.0))


def chi_squared_reduced(observed, expected, n_free_params, min_expected=CHI2_MIN_EXPECTED,
                        variance_floor=VARIANCE_FLOOR):
    """Pearson chi-square per degree of freedom.

    Bins whose expectation is below ``min_expected`` are left out of both the
    sum and the degree-of-freedom count.
    """
    observed = np.asarray(observed, dtype=float)
    expected = np.asarray(expected, dtype=float)
    if observed.shape != expected.shape:
        raise ValueError("observed and expected differ in length")
    use = expected >= min_expected
    dof = int(use.sum()) - n_free_params
    if dof < 1:
        raise ValueError(
            f"{int(use.sum())} usable bins cannot support {n_free_params} free parameters"
        )
    o, e = observed[use], expected[use]
    return float(np.sum((o - e) ** 2 / np.maximum(e, variance_floor)) / dof)


class FitProblem:
    """Weighted least-squares objective for one histogram over a bin range.

    The Poisson variance is the model expectation floored at 1.  Objective and
    gradient take that variance as a fixed argument; the optimizer refreshes
    it from the current parameters after every accepted step.
    """

    def __init__(self, observed, irf, axis, fit_range=None, weighting="poisson",
                 variance_floor=VARIANCE_FLOOR):
        if weighting not in ("poisson", "uniform"):
            raise ValueError(f"unknown weighting {weighting!r}")
        self.observed_full = np.asarray(observed, dtype=float)
        self.irf = irf
        self.axis = axis
        lo, hi = fit_range if fit_range is not None else (0, axis.n_bins)
        self.fit_range = (int(lo), int(hi))
        self.observed = self.observed_full[lo:hi]
        self.weighting = weighting
        self.variance_floor = variance_floor

    def model_full(self, theta):
        return model_histogram(theta, self.irf, self.axis)

    def model(self, theta):
        lo, hi = self.fit_range
        return self.model_full(theta)[lo:hi]

    def model_jacobian(self, theta):
        lo, hi = self.fit_range
        R, dR_dtau, dR_ds = _response(theta, self.irf, self.axis, derivatives=True)
        A = theta[1]
        m = A * R[lo:hi] + theta[3]
        J = np.column_stack(
            [A * dR_dtau[lo:hi], R[lo:hi], A * dR_ds[lo:hi], np.ones(hi - lo)]
        )
        return m, J

    def variance_of(self, m):
        if self.weighting == "uniform":
            return np.ones_like(m)
        return np.maximum(m, self.variance_floor)

    def variance(self, theta):
        return self.variance_of(self.model(np.asarray(theta, dtype=float)))

    def objective(self, theta, variance):
        d = self.observed - self.model(np.asarray(theta, dtype=float))
        return float(np.sum(d * d / variance))

    def residuals_jacobian(self, theta, variance):
        m, Jm = self.model_jacobian(np.asarray(theta, dtype=float))
        s = np.sqrt(variance)
        return (self.observed - m) / s, -Jm / s[:, None]

    def gradient(self, theta, variance):
        r, Jr = self.residuals_jacobian(theta, variance)
        return 2.0 * (Jr.T @ r)


def _scale(theta, irf):
    # absolute floors so shift ~ 0 and baseline ~ 0 still get a sensible relative step
    return np.abs(theta) + np.array([TAU_MIN, 1e-12, 1e-3 * irf.std, 1e-6])


def _bounds(problem):
    """tau >= 1 ps, A >= 0, b >= 0; the shifted IRF centroid stays on the axis."""
    ax, c = problem.axis, problem.irf.centroid
    lower = np.array([TAU_MIN, 0.0, ax.origin - c, 0.0])
    upper = np.array([np.inf, np.inf, ax.end - c, np.inf])
    return lower, upper


def _gauss_newton_gain(r, Jr, free):
    """Objective decrease an undamped Gauss-Newton step would predict."""
    g = (Jr.T @ r)[free]
    H = (Jr.T @ Jr)[np.ix_(free, free)]
    try:
        return float(g @ np.linalg.lstsq(H, g, rcond=None)[0])
    except np.linalg.LinAlgError:
        return math.inf


def levenberg_marquardt(problem, theta0, max_iter=500, ftol=1e-10, xtol=1e-8, lam0=1e-3,
                        fixed=None):
    """Minimise the weighted sum of squares with tau >= 1 ps, A >= 0, b >= 0.

    Weights are held fixed while a step is tried and refreshed from the model
    once it is accepted, so the fixed point solves the Poisson-weighted normal
    equations.  Marquardt scaling (damping proportional to diag(J^T J)) keeps
    the steps independent of the SI units of the parameters.

    ``fixed`` is an optional boolean mask of parameters held at ``theta0``.
    Returns ``(theta, n_iterations, converged)``.
    """
    lower, upper = _bounds(problem)
    held = np.zeros(len(PARAM_NAMES), bool) if fixed is None else np.asarray(fixed, bool)
    theta = np.clip(np.asarray(theta0, dtype=float), lower, upper)
    v = problem.variance(theta)
    r, Jr = problem.residuals_jacobian(theta, v)
    F = float(r @ r)
    lam = lam0
    it = 0
    while it < max_iter:
        it += 1
        g = Jr.T @ r
        H = Jr.T @ Jr
        diag = np.diag(H).copy()
        diag[diag <= 0] = 1e-300
        # parameters pinned at a bound that the gradient pushes outward stay put
        free = ~(((theta <= lower) & (g > 0)) | ((theta >= upper) & (g < 0)) | held)
        Hf = H[np.ix_(free, free)]
        while True:
            step = np.zeros_like(theta)
            try:
                step[free] = np.linalg.solve(Hf + lam * np.diag(diag[free]), -g[free])
            except np.linalg.LinAlgError:
                pass
            trial = np.clip(theta + step, lower, upper)
            small = np.all(np.abs(trial - theta) <= xtol * _scale(theta, problem.irf))
            if small:
                return theta, it, True
            F_trial = problem.objective(trial, v)
            if F_trial < F and np.isfinite(F_trial):
                rel = (F - F_trial) / max(F, 1e-300)
                theta = trial
                v = problem.variance(theta)
                r, Jr = problem.residuals_jacobian(theta, v)
                F = float(r @ r)
                lam = max(lam / 10.0, 1e-12)
                g = Jr.T @ r
                pinned = ((theta <= lower) & (g > 0)) | ((theta >= upper) & (g < 0))
                if rel < ftol and _gauss_newton_gain(r, Jr, ~(pinned | held)) < ftol * max(F, 1e-300):
                    return theta, it, True
                break
            lam *= 10.0
            if lam > 1e20:
                return theta, it, False
    return theta, it, False


def _smoothed(counts, width):
    width = max(1, int(width))
    return np.convolve(counts, np.ones(width) / width, mode="same")


def _peak_index(h, irf):
    width = max(1, int(round(irf.std / (4.0 * h.axis.bin_width))))
    return int(np.argmax(_smoothed(h.counts.astype(float), width))), width


def peak_counts(h, irf):
    """Height of the coincidence peak at the IRF's resolution (bins merged to sigma/4)."""
    k, width = _peak_index(h, irf)
    return float(_smoothed(h.counts.astype(float), width)[k] * width)


def _tail_lifetime(counts, centers, bin_width, k0, b, min_block=20):
    """Lifetime from the log-slope of the tail beyond bin ``k0``.

    Tail bins are merged into blocks of at least ``min_block`` counts so the
    slope is usable on sparse data; blocks not clearly above 5x background
    end the tail.  Returns ``None`` when fewer than three blocks survive.
    """
    t, y, wts = [], [], []
    k = k0
    n = counts.size
    while k < n:
        c = 0.0
        j = k
        while j < n and c < min_block:
            c += counts[j]
            j += 1
        nb = j - k
        excess = c - nb * b
        if c < min_block or excess <= 5.0 * nb * b or excess <= 0:
            break
        t.append(centers[k:j].mean())
        y.append(math.log(excess / (nb * bin_width)))
        wts.append(excess)
        k = j
    if len(t) < 3:
        return None
    slope = np.polyfit(np.array(t), np.array(y), 1, w=np.sqrt(np.array(wts)))[0]
    span = centers[-1] - centers[0]
    return -1.0 / slope if slope < 0 and -1.0 / slope < span else None


def auto_initialize(h, irf):
    """Starting parameters from simple features of the histogram.

    The baseline is the pre-trigger mean (the late tail when the peak sits too
    close to the axis start).  The lifetime is the tail log-slope; when the
    tail is too short it falls back to the variance the peak adds to the IRF,
    and it is clamped to 1 ps when the peak is no broader than the IRF.  The
    shift is the centroid offset between data and IRF, and the amplitude
    follows from the peak height.
    """
    ax = h.axis
    counts = h.counts.astype(float)
    centers = ax.centers
    sigma = irf.std
    fwhm = sigma_to_fwhm(sigma)
    kp, width = _peak_index(h, irf)
    t_peak = centers[kp]
    smooth = _smoothed(counts, width)

    lo, hi = pretrigger_window(ax, t_peak, fwhm)
    if hi - lo < 10:
        # no room before the peak: the last tenth of the axis stands in
        lo = max(int(0.9 * ax.n_bins), int(ax.index(t_peak + 5.0 * fwhm)) + 1)
        hi = ax.n_bins
    b = float(counts[lo:hi].mean()) if hi - lo >= 10 else 0.0

    tau = _tail_lifetime(counts, centers, ax.bin_width, int(ax.index(t_peak + 2.0 * fwhm)) + 1, b)
    region = (centers >= t_peak - 3.0 * fwhm) & (centers <= t_peak + 3.0 * fwhm + 5.0 * (tau or fwhm))
    excess = np.clip(counts[region] - b, 0.0, None)
    if excess.sum() > 0:
        mean = np.dot(centers[region], excess) / excess.sum()
        var = np.dot((centers[region] - mean) ** 2, excess) / excess.sum()
        if var - sigma**2 <= 0:
            tau = TAU_MIN
        elif tau is None:
            log.debug("tail too short for a slope; lifetime from the excess variance")
            tau = math.sqrt(var - sigma**2)
    if tau is None:
        tau = fwhm
    if excess.sum() > 0:
        shift = mean - irf.centroid - tau
    else:
        shift = t_peak - irf.centroid
    tau = max(tau, TAU_MIN)
    shift = min(max(shift, ax.origin - irf.centroid), ax.end - irf.centroid)

    R = _response(np.array([tau, 1.0, shift, 0.0]), irf, ax)
    A = max(smooth[kp] - b, 0.0) / R.max() if R.max() > 0 else 0.0
    return FitParams(tau=float(tau), amplitude=float(A), shift=float(shift), baseline=max(b, 0.0))


def default_fit_range(h, irf, init):
    """From 5 IRF sigmas before the model peak to the last bin."""
    R = _response(init.as_array(), irf, h.axis)
    t_peak = h.axis.centers[int(np.argmax(R))]
    lo = int(h.axis.index(t_peak - 5.0 * irf.std))
    return max(lo, 0), h.axis.n_bins


def _covariance(Jm, w, chi2, free):
    """Parameter covariance from the weighted normal matrix, scaled by chi2.

    Rows and columns of held parameters are zero.
    """
    names = [n for n, f in zip(PARAM_NAMES, free) if f]
    Jw = Jm[:, free] / np.sqrt(w)[:, None]
    H = Jw.T @ Jw
    d = np.sqrt(np.diag(H))
    if np.any(d == 0):
        return None, names[int(np.argmin(d))]
    C = H / np.outer(d, d)
    evals, evecs = np.linalg.eigh(C)
    if evals[0] <= 1e-12 * evals[-1]:
        return None, names[int(np.argmax(np.abs(evecs[:, 0])))]
    cov = np.zeros((len(PARAM_NAMES),) * 2)
    cov[np.ix_(free, free)] = np.linalg.inv(C) / np.outer(d, d) * chi2
    return cov, None


def fit_lifetime(h, irf, init=None, *, weighting="poisson", min_peak_counts=50,
                 fit_range=None, max_iter=500, variance_floor=VARIANCE_FLOOR, fixed=()):
    """Fit a single-exponential decay to ``h`` by iterative reconvolution.

    Parameters
    ----------
    h : Histogram
        Raw coincidence histogram.
    irf : GaussianIRF or TabulatedIRF
        Instrument response; should have unit area.
    init : FitParams, optional
        Starting point; :func:`auto_initialize` is used when omitted.
    weighting : {"poisson", "uniform"}
        Variance model: expected counts floored at ``variance_floor``, or
        plain least squares.  A floor well below 1 makes the Poisson weighting
        efficient on very sparse histograms.
    min_peak_counts : float
        Minimum peak height (at the IRF's resolution) to attempt a fit.
    fixed : iterable of str
        Names from ``PARAM_NAMES`` held at their initial values.  They get
        zero standard error and do not count as free in the chi-square.

    Returns
    -------
    FitResult
        ``converged`` is False when the iteration budget ran out; the best
        parameters found are still reported.

    Raises
    ------
    NoPeakError
        If the histogram has no coincidence peak.
    DegenerateFitError
        If the covariance matrix is singular.
    """
    check_axis_covers(irf, h.axis)
    if peak_counts(h, irf) < min_peak_counts:
        raise NoPeakError(
            f"peak holds {peak_counts(h, irf):.1f} counts, below the minimum {min_peak_counts}"
        )
    if init is None:
        init = auto_initialize(h, irf)
    if fit_range is None:
        fit_range = default_fit_range(h, irf, init)
    unknown = set(fixed) - set(PARAM_NAMES)
    if unknown:
        raise ValueError(f"unknown parameter names in fixed: {sorted(unknown)}")
    held = np.array([n in fixed for n in PARAM_NAMES])
    problem = FitProblem(h.counts, irf, h.axis, fit_range, weighting, variance_floor)
    theta, n_iter, converged = levenberg_marquardt(
        problem, init.as_array(), max_iter=max_iter, fixed=held
    )
    if not converged:
        log.warning("fit did not converge in %d iterations", n_iter)

    params = FitParams.from_array(theta)
    expected_full = problem.model_full(theta)
    lo, hi = problem.fit_range
    expected = expected_full[lo:hi]
    try:
        chi2 = chi_squared_reduced(problem.observed, expected, int((~held).sum()))
    except ValueError:
        # too sparse for a chi-square; errors then rest on Poisson variances alone
        chi2 = math.nan
    _, Jm = problem.model_jacobian(theta)
    scale = 1.0 if math.isnan(chi2) else chi2
    cov, bad = _covariance(Jm, problem.variance_of(expected), scale, ~held)
    result = FitResult(
        params=params,
        reduced_chi2=chi2,
        std_errors={},
        weighted_residuals=weighted_residuals(problem.observed, expected),
        covariance=cov,
        n_iterations=n_iter,
        converged=converged,
        fit_range=problem.fit_range,
        expected=expected_full,
    )
    if cov is None:
        raise DegenerateFitError(bad, result)
    result.std_errors = dict(zip(PARAM_NAMES, np.sqrt(np.diag(cov)).tolist()))
    return result
