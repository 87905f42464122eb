"""Configuration files, histogram files, result records and plot data."""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
import math
import os
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import yaml

from .core import GaussianIRF, Histogram, TimeAxis
from .simulate import ExperimentConfig

TOOL_VERSION = "0.1.0"
COMMANDS = ("simulate", "fit", "irf", "scaling", "budget", "scan", "report")


class ConfigError(ValueError):
    pass


class FileFormatError(ValueError):
    pass


# --- run settings that live next to the experiment in a config file ---------


@dataclass(frozen=True)
class FitSettings:
    weighting: str = "poisson"
    min_peak_counts: float = 50.0
    variance_floor: float = 1.0
    max_iter: int = 500
    irf_half_width: float = 11e-9

    def __post_init__(self):
        if self.weighting not in ("poisson", "uniform"):
            raise ValueError(f"weighting must be 'poisson' or 'uniform', got {self.weighting!r}")
        if not self.min_peak_counts >= 0:
            raise ValueError("min_peak_counts must be >= 0")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.irf_half_width > 0:
            raise ValueError("irf_half_width must be > 0")


@dataclass(frozen=True)
class ScalingSettings:
    n_segments: int = 2400
    interval_lengths: list[float] = field(
        default_factory=lambda: [60.0, 120.0, 180.0, 300.0, 600.0, 900.0, 1200.0, 1800.0, 3600.0]
    )
    drift: bool = True
    rebin: int = 16

    def __post_init__(self):
        if self.n_segments < 20:
            raise ValueError("n_segments must be >= 20")
        if not self.interval_lengths or min(self.interval_lengths) <= 0:
            raise ValueError("interval_lengths must be positive")
        if self.rebin < 1:
            raise ValueError("rebin must be >= 1")


@dataclass(frozen=True)
class BudgetSettings:
    n_coincidences: list[int] = field(default_factory=lambda: [100, 200, 400, 800, 1600])
    lifetime: float = 1e-9
    irf_fwhm: float = 1e-11
    replicates: int = 500

    def __post_init__(self):
        if not self.n_coincidences or min(self.n_coincidences) < 20:
            raise ValueError("n_coincidences entries must be >= 20")
        if not self.lifetime > 0 or not self.irf_fwhm > 0:
            raise ValueError("lifetime and irf_fwhm must be > 0")
        if self.replicates < 100:
            raise ValueError("replicates must be >= 100")


@dataclass(frozen=True)
class ScanSettings:
    lifetimes: list[float] = field(
        default_factory=lambda: [0.05e-9, 0.1e-9, 0.2e-9, 0.365e-9, 0.5e-9, 1e-9, 2e-9]
    )
    n_coincidences: int = 300_000
    replicates: int = 100
    acquisition_time: float = 6 * 3600.0

    def __post_init__(self):
        if not self.lifetimes or min(self.lifetimes) <= 0:
            raise ValueError("lifetimes must be > 0")
        if self.n_coincidences < 20 or self.replicates < 2:
            raise ValueError("n_coincidences must be >= 20 and replicates >= 2")
        if not self.acquisition_time > 0:
            raise ValueError("acquisition_time must be > 0")


@dataclass(frozen=True)
class StudySettings:
    scaling: ScalingSettings = field(default_factory=ScalingSettings)
    budget: BudgetSettings = field(default_factory=BudgetSettings)
    scan: ScanSettings = field(default_factory=ScanSettings)


@dataclass(frozen=True)
class RunSettings:
    """A config file: the experiment plus optional label, fit and study settings."""

    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    name: str = ""
    fit: FitSettings = field(default_factory=FitSettings)
    studies: StudySettings = field(default_factory=StudySettings)


_EXPERIMENT_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)}


def _coerce(value, hint, where):
    origin = typing.get_origin(hint)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        (inner,) = typing.get_args(hint)
        return [_coerce(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    if isinstance(hint, type) and issubclass(hint, Enum):
        try:
            return hint(value)
        except ValueError:
            choices = ", ".join(repr(m.value) for m in hint)
            raise ConfigError(f"{where}: must be one of {choices}, got {value!r}") from None
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint in (int, float):
        # YAML reads exponents without a dot (4e-12) as strings
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        try:
            x = float(value)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if hint is int:
            if isinstance(value, int):
                return value
            if not x.is_integer():
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
            return int(x)
        return x
    raise TypeError(f"unsupported config field type {hint!r}")


def _build(cls, data, where):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in names:
            raise ConfigError(f"unknown key {path!r}")
        kwargs[key] = _coerce(value, hints[key], path)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{where or 'config'}: {e}") from None


def settings_from_dict(data):
    """Build :class:`RunSettings` from a parsed config mapping."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(RunSettings)
    kwargs = {}
    for key, value in data.items():
        if key in _EXPERIMENT_KEYS:
            continue
        if key not in hints or key == "experiment":
            raise ConfigError(f"unknown key {key!r}")
        kwargs[key] = _coerce(value, hints[key], key)
    exp = {k: v for k, v in data.items() if k in _EXPERIMENT_KEYS}
    return RunSettings(experiment=_build(ExperimentConfig, exp, ""), **kwargs)


def load_settings(path):
    """Parse a YAML config file into :class:`RunSettings`.

    Missing keys take their defaults, so an empty file is the default
    instrument.  Unknown keys are rejected.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {str(path)!r}: {e.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = f" at line {mark.line + 1}" if mark is not None else ""
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"{path}: parse error{line}: {problem}") from None
    return settings_from_dict(data)


def load_config(path):
    """The :class:`ExperimentConfig` part of a config file."""
    return load_settings(path).experiment


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def settings_to_dict(settings):
    if isinstance(settings, ExperimentConfig):
        return _plain(settings)
    d = _plain(settings.experiment)
    d.update({k: _plain(getattr(settings, k)) for k in ("name", "fit", "studies")})
    return d


def save_config(settings, path):
    """Write an :class:`ExperimentConfig` or :class:`RunSettings` as YAML."""
    text = yaml.safe_dump(settings_to_dict(settings), sort_keys=False, default_flow_style=False)
    Path(path).write_text(text)


# --- histogram files ---------------------------------------------------------

_HEADER_KEYS = ("bin_width_s", "origin_s", "total_starts", "live_time_s")


def _num(x):
    return repr(float(x))


def format_histogram(h):
    ax = h.axis
    lines = [
        f"# bin_width_s={_num(ax.bin_width)} origin_s={_num(ax.origin)} "
        f"total_starts={int(h.total_starts)} live_time_s={_num(h.live_time)}",
        "# time_s,counts",
    ]
    integer = np.issubdtype(h.counts.dtype, np.integer)
    for t, c in zip(ax.centers, h.counts):
        lines.append(f"{_num(t)},{int(c) if integer else _num(c)}")
    return "\n".join(lines) + "\n"


def write_histogram(h, path):
    Path(path).write_text(format_histogram(h))


def read_histogram(path):
    """Read a histogram file; integer counts come back as int64, others as float."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise FileFormatError(f"cannot read histogram {str(path)!r}: {e.strerror}") from None
    if not lines or not lines[0].startswith("#"):
        raise FileFormatError(f"{path}: missing '# bin_width_s=...' header line")
    meta = {}
    for item in lines[0][1:].split():
        key, sep, value = item.partition("=")
        if not sep:
            raise FileFormatError(f"{path}: malformed header item {item!r}")
        meta[key] = value
    missing = [k for k in _HEADER_KEYS if k not in meta]
    if missing:
        raise FileFormatError(f"{path}: header lacks {', '.join(missing)}")
    rows = [ln for ln in lines[1:] if ln.strip() and not ln.startswith("#")]
    raw = []
    for i, ln in enumerate(rows):
        parts = ln.split(",")
        if len(parts) != 2:
            raise FileFormatError(f"{path}: row {i + 1} should have two columns: {ln!r}")
        raw.append(parts[1].strip())
    try:
        axis = TimeAxis(float(meta["bin_width_s"]), len(rows), float(meta["origin_s"]))
        if all(_is_int(v) for v in raw):
            counts = np.array([int(v) for v in raw], dtype=np.int64)
        else:
            counts = np.array([float(v) for v in raw])
        return Histogram(axis, counts, int(meta["total_starts"]), float(meta["live_time_s"]))
    except ValueError as e:
        raise FileFormatError(f"{path}: {e}") from None


def _is_int(s):
    return s.lstrip("-").isdigit()


# --- structured records ------------------------------------------------------


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, Enum):
        return obj.value
    return obj


def write_json(obj, path):
    text = json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def fit_record(result, **extra):
    """Plain-data form of a FitResult, all times in seconds."""
    p = result.params
    rec = {
        "params": {"tau_s": p.tau, "amplitude": p.amplitude, "shift_s": p.shift,
                   "baseline_per_bin": p.baseline},
        "std_errors": {
            "tau_s": result.std_errors.get("tau"),
            "amplitude": result.std_errors.get("amplitude"),
            "shift_s": result.std_errors.get("shift"),
            "baseline_per_bin": result.std_errors.get("baseline"),
        },
        "reduced_chi2": result.reduced_chi2,
        "converged": bool(result.converged),
        "n_iterations": int(result.n_iterations),
        "fit_range_bins": list(result.fit_range),
        "covariance": result.covariance,
    }
    rec.update(extra)
    return rec


def sidecar_path(histogram_path):
    p = Path(histogram_path)
    return p.with_name(p.stem + ".truth.json")


# --- manifest ----------------------------------------------------------------


def run_timestamp():
    """UTC ISO-8601 time, pinned by SOURCE_DATE_EPOCH when that is set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        t = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        t = _dt.datetime.now(tz=_dt.timezone.utc).replace(microsecond=0)
    return t.isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class RunManifest:
    command: str
    config_path: str
    output_dir: str
    seed_override: int | None = None
    timestamp: str = field(default_factory=run_timestamp)
    tool_version: str = TOOL_VERSION

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"command must be one of {', '.join(COMMANDS)}, got {self.command!r}")

    def record(self):
        # outputs are written relative to the manifest's own directory
        d = dataclasses.asdict(self)
        d["output_dir"] = "."
        return d


# --- plot data ---------------------------------------------------------------


def _irf_on_axis(irf, axis):
    if isinstance(irf, GaussianIRF):
        return irf.density(axis.centers)
    return np.diff(irf.cdf(axis.edges)) / axis.bin_width


def plot_columns(fit, h, irf):
    """Aligned plot columns for a fitted histogram.

    Counts and fit share one scale: the fitted baseline is removed and the
    fitted curve's peak is set to 1.  The IRF is drawn at the fitted shift
    and scaled to its own peak.  Residuals are Poisson-weighted over every bin.
    """
    p = fit.params
    expected = np.asarray(fit.expected, dtype=float)
    scale = float(np.max(expected - p.baseline))
    if not scale > 0:
        raise ValueError("fitted curve is flat; nothing to normalize")
    g = _irf_on_axis(irf.shifted(p.shift), h.axis)
    counts = h.counts.astype(float)
    return {
        "time_s": h.axis.centers,
        "normalized_counts": (counts - p.baseline) / scale,
        "normalized_irf": g / g.max() if g.max() > 0 else g,
        "normalized_fit": (expected - p.baseline) / scale,
        "weighted_residual": (counts - expected) / np.sqrt(np.maximum(expected, 1.0)),
    }


def decay_columns(fit, h, irf):
    """Pure sample response exp(-(t - t0)/tau) with t0 the shifted IRF centroid."""
    t0 = irf.centroid + fit.params.shift
    t = h.axis.centers
    x = np.maximum(t - t0, 0.0) / fit.params.tau
    return {"time_s": t, "decay": np.where(t >= t0, np.exp(-x), 0.0)}


def write_table(columns, path, comment=None):
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    lines = [f"# {comment}"] if comment else []
    lines.append(",".join(names))
    for row in zip(*cols):
        lines.append(",".join(_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _cell(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _num(v)
    return str(v)


def read_table(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    names = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    return {n: np.array([float(r[i]) for r in rows]) for i, n in enumerate(names)}


def emit_plot_data(fit, h, irf, path):
    """Write the plot columns to ``path`` and the pure decay next to it.

    Returns the two paths written.
    """
    path = Path(path)
    decay_path = path.with_name(path.stem + "_decay" + path.suffix)
    write_table(plot_columns(fit, h, irf), path)
    write_table(decay_columns(fit, h, irf), decay_path)
    return path, decay_path

