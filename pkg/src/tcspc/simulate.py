"""Monte Carlo simulation of a heralded pair-source TCSPC experiment.

A stationary Poisson pair source feeds two arms.  One photon of each pair is
detected directly and starts the timer (the herald); the other excites the
sample, whose emission is detected on the second arm and stops the timer.  The
coincidence circuit runs in forward start-stop mode with a fixed electronic
delay on the stop arm.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from .core import (
    FWHM_PER_SIGMA,
    DecayModel,
    GaussianIRF,
    Histogram,
    TimeAxis,
    fwhm_to_sigma,
    merge_histograms,
    sigma_to_fwhm,
)

log = logging.getLogger(__name__)

MIN_BIN_WIDTH = 4e-12
IRF_FWHM = 3.65e-9
ELECTRICAL_RESOLUTION = 12e-12
DEAD_TIME = 43e-9
ELECTRONIC_DELAY = 30e-9
DRIFT_RMS = 50e-12
DRIFT_INTERVAL = 1200.0
# total IRF split equally between the two detectors, electronics in quadrature
DETECTOR_JITTER_FWHM = math.sqrt((IRF_FWHM**2 - ELECTRICAL_RESOLUTION**2) / 2.0)


class SampleMode(str, Enum):
    FLUORESCENCE = "fluorescence"
    MIRROR = "mirror"


@dataclass(frozen=True)
class SourceSpec:
    pair_rate: float = 1e6
    correlation_jitter: float = 30e-15

    def __post_init__(self):
        if not self.pair_rate > 0:
            raise ValueError(f"pair_rate must be > 0, got {self.pair_rate!r}")
        if not self.correlation_jitter >= 0:
            raise ValueError(f"correlation_jitter must be >= 0, got {self.correlation_jitter!r}")


@dataclass(frozen=True)
class DetectorSpec:
    """Single-photon detector; ``efficiency`` folds in every optical loss on the arm."""

    efficiency: float = 0.5
    jitter_fwhm: float = DETECTOR_JITTER_FWHM
    dead_time: float = DEAD_TIME
    dark_rate: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency!r}")
        for name in ("jitter_fwhm", "dead_time", "dark_rate"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)!r}")


@dataclass(frozen=True)
class SampleSpec:
    decay: DecayModel = field(default_factory=lambda: DecayModel(0.97e-9))
    emission_probability: float = 1e-3
    mode: SampleMode = SampleMode.FLUORESCENCE

    def __post_init__(self):
        if not 0.0 <= self.emission_probability <= 1.0:
            raise ValueError(
                f"emission_probability must lie in [0, 1], got {self.emission_probability!r}"
            )
        object.__setattr__(self, "mode", SampleMode(self.mode))


@dataclass(frozen=True)
class TcspcSpec:
    axis: TimeAxis = field(default_factory=lambda: TimeAxis(4e-12, 12500, 0.0))
    electronic_delay: float = ELECTRONIC_DELAY
    electrical_jitter_rms: float = ELECTRICAL_RESOLUTION / FWHM_PER_SIGMA

    def __post_init__(self):
        if self.axis.bin_width < MIN_BIN_WIDTH * (1 - 1e-9):
            raise ValueError(
                f"bin_width {self.axis.bin_width!r} is below the {MIN_BIN_WIDTH} s hardware floor"
            )
        if not self.electrical_jitter_rms >= 0:
            raise ValueError("electrical_jitter_rms must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a simulated acquisition."""

    source: SourceSpec = field(default_factory=SourceSpec)
    herald_detector: DetectorSpec = field(default_factory=lambda: DetectorSpec(efficiency=0.1))
    signal_detector: DetectorSpec = field(default_factory=DetectorSpec)
    sample: SampleSpec = field(default_factory=SampleSpec)
    circuit: TcspcSpec = field(default_factory=TcspcSpec)
    acquisition_time: float = 600.0
    segment_length: float = 60.0
    irf_drift_rms: float = DRIFT_RMS
    rng_seed: int = 0

    def __post_init__(self):
        if not self.acquisition_time > 0:
            raise ValueError(f"acquisition_time must be > 0, got {self.acquisition_time!r}")
        if not self.segment_length > 0:
            raise ValueError(f"segment_length must be > 0, got {self.segment_length!r}")
        if not self.irf_drift_rms >= 0:
            raise ValueError(f"irf_drift_rms must be >= 0, got {self.irf_drift_rms!r}")
        if int(self.rng_seed) != self.rng_seed or not 0 <= self.rng_seed < 2**64:
            raise ValueError(f"rng_seed must be an unsigned 64-bit integer, got {self.rng_seed!r}")
        object.__setattr__(self, "rng_seed", int(self.rng_seed))

    @property
    def segment_durations(self):
        n_full = int(math.floor(self.acquisition_time / self.segment_length + 1e-12))
        durations = [self.segment_length] * n_full
        rest = self.acquisition_time - n_full * self.segment_length
        if rest > 1e-9 * self.segment_length:
            durations.append(rest)
        return durations

    @property
    def drift_step(self):
        """Random-walk step per segment giving ``irf_drift_rms`` over 20 minutes."""
        return self.irf_drift_rms * math.sqrt(self.segment_length / DRIFT_INTERVAL)

    @property
    def irf_fwhm(self):
        """FWHM of the combined Gaussian timing response of both arms."""
        elec = sigma_to_fwhm(self.circuit.electrical_jitter_rms)
        return math.sqrt(
            self.herald_detector.jitter_fwhm**2 + self.signal_detector.jitter_fwhm**2 + elec**2
        )

    def irf(self):
        """Parametric IRF implied by the configured jitters, centred on the delay."""
        return GaussianIRF(self.irf_fwhm, self.circuit.electronic_delay)

    def to_dict(self):
        d = asdict(self)
        d["sample"]["mode"] = self.sample.mode.value
        return d


def expected_rates(config):
    """Analytic singles, coincidence and accidental rates (per second).

    Dead time is treated as non-paralyzable; ``accidentals_per_bin`` is the
    flat background each histogram bin collects per second of acquisition.
    """
    src, hd, sd, smp = config.source, config.herald_detector, config.signal_detector, config.sample
    herald_raw = src.pair_rate * hd.efficiency + hd.dark_rate
    signal_raw = src.pair_rate * smp.emission_probability * sd.efficiency + sd.dark_rate
    herald = herald_raw / (1.0 + herald_raw * hd.dead_time)
    signal = signal_raw / (1.0 + signal_raw * sd.dead_time)
    live_h = herald / herald_raw if herald_raw > 0 else 1.0
    live_s = signal / signal_raw if signal_raw > 0 else 1.0
    coincidences = src.pair_rate * hd.efficiency * smp.emission_probability * sd.efficiency
    coincidences *= live_h * live_s
    return {
        "herald_singles": herald,
        "signal_singles": signal,
        "coincidences": coincidences,
        "accidentals_per_bin": herald * signal * config.circuit.axis.bin_width,
    }


def generate_pair_times(source, duration, rng):
    """Sorted pair emission times of a Poisson process on ``[0, duration)``."""
    if not duration > 0:
        raise ValueError("duration must be > 0")
    mean = source.pair_rate * duration
    chunk = int(mean + 6.0 * math.sqrt(mean) + 16)
    pieces = []
    last = 0.0
    while True:
        t = last + np.cumsum(rng.exponential(1.0 / source.pair_rate, size=chunk))
        if t[-1] >= duration:
            pieces.append(t[: np.searchsorted(t, duration, side="left")])
            break
        pieces.append(t)
        last = t[-1]
    return np.concatenate(pieces)


def dead_time_filter(times, dead_time):
    """Keep an event only if it follows the previous kept event by ``dead_time``."""
    times = np.asarray(times, dtype=float)
    if dead_time <= 0 or times.size < 2:
        return times
    close = np.flatnonzero(np.diff(times) < dead_time) + 1
    if close.size == 0:
        return times
    keep = np.ones(times.size, dtype=bool)
    ref = times[0]
    # events whose predecessor gap is >= dead_time are always kept; only
    # the clustered ones need the sequential rule
    for i in close:
        if keep[i - 1]:
            ref = times[i - 1]
        if times[i] - ref < dead_time:
            keep[i] = False
        else:
            ref = times[i]
    return times[keep]


def detect(times, det, duration, rng):
    """Apply one detector to a sorted photon stream.

    Order: efficiency thinning, merge of dark counts on ``[0, duration)``,
    Gaussian jitter, re-sort, dead-time filter.
    """
    t = np.asarray(times, dtype=float)
    if det.efficiency < 1.0:
        t = t[rng.random(t.size) < det.efficiency]
    if det.dark_rate > 0:
        dark = rng.uniform(0.0, duration, size=rng.poisson(det.dark_rate * duration))
        t = np.concatenate([t, dark])
    if det.jitter_fwhm > 0:
        t = t + rng.normal(0.0, fwhm_to_sigma(det.jitter_fwhm), size=t.size)
    t = np.sort(t)
    return dead_time_filter(t, det.dead_time)


def emit_fluorescence(excitation_times, sample, rng):
    """Emission times for a sorted stream of excitation photons."""
    t = np.asarray(excitation_times, dtype=float)
    if sample.emission_probability < 1.0:
        t = t[rng.random(t.size) < sample.emission_probability]
    if sample.mode is SampleMode.FLUORESCENCE:
        t = t + rng.exponential(sample.decay.lifetime, size=t.size)
    return np.sort(t)


def tcspc_forward_start_stop(starts, stops, spec, rng=None, live_time=0.0):
    """Histogram start-stop differences in forward start-stop mode.

    Each start takes the first not-yet-consumed stop whose delayed difference
    ``stop + electronic_delay - start`` falls inside the axis; each stop is
    consumed at most once.
    """
    starts = np.asarray(starts, dtype=float)
    stops = np.asarray(stops, dtype=float)
    axis = spec.axis
    counts = np.zeros(axis.n_bins, dtype=np.int64)
    if stops.size and starts.size:
        offset = starts - spec.electronic_delay
        lo = np.searchsorted(stops, offset + axis.origin, side="left")
        hi = np.searchsorted(stops, offset + axis.end, side="left")
        start_idx, stop_idx = [], []
        last = -1
        for i in np.flatnonzero(lo < hi):
            j = max(lo[i], last + 1)
            if j < hi[i]:
                start_idx.append(i)
                stop_idx.append(j)
                last = j
        if start_idx:
            d = stops[stop_idx] + spec.electronic_delay - starts[start_idx]
            if spec.electrical_jitter_rms > 0:
                if rng is None:
                    raise ValueError("electrical jitter requires an rng")
                d = d + rng.normal(0.0, spec.electrical_jitter_rms, size=d.size)
            k = axis.index(d)
            k = k[(k >= 0) & (k < axis.n_bins)]
            counts += np.bincount(k, minlength=axis.n_bins)
    return Histogram(axis, counts, starts.size, live_time)


@dataclass(eq=False)
class SimulationResult:
    histogram: Histogram
    segments: list
    ground_truth: dict


def _segment_seeds(seed, n_segments):
    children = np.random.SeedSequence(seed).spawn(n_segments + 1)
    return children[0], children[1:]


def drift_offsets(config, n_segments=None):
    """Per-segment IRF centroid offsets: a Gaussian random walk starting at 0."""
    n = len(config.segment_durations) if n_segments is None else n_segments
    drift_seed, _ = _segment_seeds(config.rng_seed, n)
    steps = np.random.default_rng(drift_seed).normal(0.0, config.drift_step, size=n)
    return np.concatenate([[0.0], np.cumsum(steps[:-1])]) if n else np.zeros(0)


def simulate_segment(config, duration, offset, seed):
    """One acquisition segment; ``offset`` shifts the stop arm (IRF drift)."""
    rng = np.random.default_rng(seed)
    src, hd, sd, smp = config.source, config.herald_detector, config.signal_detector, config.sample
    p_h = hd.efficiency
    p_s = smp.emission_probability * sd.efficiency
    p_any = 1.0 - (1.0 - p_h) * (1.0 - p_s)

    # Pairs lost on both arms never reach the circuit, so draw only pairs that
    # survive on at least one arm and assign arms conditionally.
    herald_photons = signal_photons = np.zeros(0)
    if p_any > 0:
        pairs = generate_pair_times(replace(src, pair_rate=src.pair_rate * p_any), duration, rng)
        u = rng.random(pairs.size) * p_any
        both = p_h * p_s
        only_h = p_h * (1.0 - p_s)
        h_mask = u < only_h + both
        s_mask = u >= only_h
        herald_photons = pairs[h_mask]
        partner = pairs + src.correlation_jitter * rng.standard_normal(pairs.size)
        signal_photons = np.sort(partner[s_mask])

    starts = detect(herald_photons, replace(hd, efficiency=1.0), duration, rng)
    emitted = emit_fluorescence(signal_photons, replace(smp, emission_probability=1.0), rng)
    stops = detect(emitted, replace(sd, efficiency=1.0), duration, rng)
    return tcspc_forward_start_stop(starts, stops + offset, config.circuit, rng, live_time=duration)


def _run_segment(args):
    return simulate_segment(*args)


def check_peak_in_axis(config):
    axis = config.circuit.axis
    delay = config.circuit.electronic_delay
    if not axis.origin <= delay < axis.end:
        raise ValueError(
            f"electronic_delay {delay!r} s lies outside the histogram axis "
            f"[{axis.origin!r}, {axis.end!r}) s; the coincidence peak cannot be recorded"
        )


def simulate_experiment(config, workers=1):
    """Simulate every segment of an acquisition.

    Segments use independent child seeds of ``config.rng_seed`` and the drift
    walk is drawn up front, so the result does not depend on ``workers``.
    """
    check_peak_in_axis(config)
    durations = config.segment_durations
    _, seeds = _segment_seeds(config.rng_seed, len(durations))
    offsets = drift_offsets(config, len(durations))
    tasks = [(config, d, float(o), s) for d, o, s in zip(durations, offsets, seeds)]
    log.info("simulating %d segments with %d worker(s)", len(tasks), workers)
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            segments = list(pool.map(_run_segment, tasks))
    else:
        segments = [_run_segment(t) for t in tasks]
    truth = {
        "lifetime_s": config.sample.decay.lifetime if config.sample.mode is SampleMode.FLUORESCENCE else 0.0,
        "mode": config.sample.mode.value,
        "irf_fwhm_s": config.irf_fwhm,
        "irf_centroid_s": config.circuit.electronic_delay,
        "n_segments": len(segments),
        "drift_offsets_s": [float(o) for o in offsets],
        "expected_rates": expected_rates(config),
        "config": config.to_dict(),
    }
    return SimulationResult(merge_histograms(segments), segments, truth)


def sample_arrivals(irf, lifetime, n, rng):
    """``n`` start-stop differences drawn from IRF (+) Exp(lifetime)."""
    if isinstance(irf, GaussianIRF):
        t = rng.normal(irf.centroid, irf.sigma, size=n)
    else:
        cum = np.cumsum(irf.density)
        k = np.searchsorted(cum, rng.random(n) * cum[-1], side="right")
        t = irf.axis.origin + (k + rng.random(n)) * irf.axis.bin_width
    if lifetime:
        t = t + rng.exponential(lifetime, size=n)
    return t


def synthesize_histogram(irf, lifetime, axis, coincidences, rng, background_per_bin=0.0,
                         offset=0.0, exact=False):
    """Histogram drawn directly from the convolution model.

    ``coincidences`` is the Poisson mean (or the exact count with
    ``exact=True``); a flat Poisson background is added per bin.
    """
    n = int(coincidences) if exact else int(rng.poisson(coincidences))
    t = sample_arrivals(irf, lifetime, n, rng) + offset
    k = axis.index(t)
    counts = np.bincount(k[(k >= 0) & (k < axis.n_bins)], minlength=axis.n_bins)
    if background_per_bin > 0:
        counts = counts + rng.poisson(background_per_bin, size=axis.n_bins)
    return Histogram(axis, counts.astype(np.int64), int(counts.sum()), 0.0)


def synthesize_segments(config, n_segments, drift=True):
    """Fast per-segment histograms with the rates of ``config``.

    Coincidences are drawn straight from the model instead of event by event,
    with the same expected coincidence and accidental rates and the same IRF
    drift walk.  Meant for long statistical studies.
    """
    rates = expected_rates(config)
    L = config.segment_length
    lifetime = config.sample.decay.lifetime if config.sample.mode is SampleMode.FLUORESCENCE else 0.0
    irf = config.irf()
    offsets = drift_offsets(config, n_segments) if drift else np.zeros(n_segments)
    _, seeds = _segment_seeds(config.rng_seed, n_segments)
    out = []
    for off, seed in zip(offsets, seeds):
        rng = np.random.default_rng(seed)
        h = synthesize_histogram(
            irf, lifetime, config.circuit.axis, rates["coincidences"] * L, rng,
            background_per_bin=rates["accidentals_per_bin"] * L, offset=off,
        )
        starts = max(int(rates["herald_singles"] * L), int(h.counts.sum()))
        out.append(Histogram(h.axis, h.counts, starts, L))
    return out


def background_rejection_ratio(config, ambient_rate, window=4e-9):
    """Uncorrelated background rejected by coincidence gating, per herald.

    With ambient photons arriving as a Poisson stream at ``ambient_rate``, the
    chance that at least one lands in a gate of width ``w`` is
    ``p = 1 - exp(-ambient_rate*w)``.  The ratio of background falling outside
    versus inside the gate is ``(1 - p)/p = 1/expm1(ambient_rate*w)``, which is
    ``1/(ambient_rate*w)`` at low rates.  Returns ``inf`` for no ambient light.
    """
    if not window > 0:
        raise ValueError(f"coincidence window must be > 0, got {window!r}")
    if ambient_rate < 0:
        raise ValueError("ambient_rate must be >= 0")
    x = ambient_rate * window
    return math.inf if x == 0 else 1.0 / math.expm1(x)


def simulate_rejection_ratio(config, ambient_rate, n_heralds, window=4e-9, seed=0):
    """Monte Carlo estimate of :func:`background_rejection_ratio`."""
    rng = np.random.default_rng(seed)
    rate = expected_rates(config)["herald_singles"]
    heralds = np.cumsum(rng.exponential(1.0 / rate, size=n_heralds))
    duration = heralds[-1] + config.circuit.electronic_delay + window
    ambient = np.sort(rng.uniform(0.0, duration, size=rng.poisson(ambient_rate * duration)))
    centre = heralds + config.circuit.electronic_delay
    inside = np.searchsorted(ambient, centre + window / 2) - np.searchsorted(ambient, centre - window / 2)
    p = np.mean(inside > 0)
    return math.inf if p == 0 else float((1.0 - p) / p)
