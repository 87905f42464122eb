from dataclasses import replace

import numpy as np
import pytest

from tcspc.core import GaussianIRF
from tcspc.simulate import ExperimentConfig, synthesize_segments
from tcspc.studies import (
    ScanPoint,
    StudyError,
    bias_knee,
    budget_estimates,
    drift_inflation,
    min_lifetime_scan,
    photon_budget,
    power_law_fit,
    scaling_study,
)

NS = 1e-9
PS = 1e-12
BUDGET_IRF = GaussianIRF(0.01 * NS)


def _segments(n, drift_rms, seed=0):
    cfg = replace(ExperimentConfig(), irf_drift_rms=drift_rms, rng_seed=seed)
    return cfg, synthesize_segments(cfg, n, drift=drift_rms > 0)


# power law

def test_power_law_exact():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    slope, se = power_law_fit(x, 3.0 * x**-0.5)
    assert slope == pytest.approx(-0.5)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_power_law_two_points_has_no_error():
    slope, se = power_law_fit([1.0, 4.0], [2.0, 1.0])
    assert slope == pytest.approx(-0.5)
    assert np.isnan(se)


def test_power_law_needs_two_points():
    with pytest.raises(StudyError):
        power_law_fit([1.0], [1.0])


# scaling

def test_doubling_interval_shrinks_spread_by_root_two():
    cfg, segs = _segments(600, 0.0, seed=5)
    res = scaling_study(segs, cfg.irf(), [60.0, 120.0])
    ratio = res.lifetime_spreads[1] / res.lifetime_spreads[0]
    assert 0.6 <= ratio <= 0.8
    assert res.subset_counts == [600, 300]
    assert res.mean_coincidences[1] == pytest.approx(2 * res.mean_coincidences[0], rel=0.02)


def test_scaling_rejects_empty_input():
    with pytest.raises(StudyError, match="no segments"):
        scaling_study([], GaussianIRF(3.65 * NS), [60.0])


def test_scaling_needs_ten_groups_of_longest_interval():
    cfg, segs = _segments(30, 0.0)
    with pytest.raises(StudyError, match="10x"):
        scaling_study(segs, cfg.irf(), [60.0, 300.0])


def test_scaling_rejects_repeated_intervals():
    cfg, segs = _segments(30, 0.0)
    with pytest.raises(StudyError, match="distinct"):
        scaling_study(segs, cfg.irf(), [60.0, 60.0])


# photon budget

@pytest.fixture(scope="module")
def budget_curve():
    return {n: photon_budget(n, BUDGET_IRF, NS, replicates=100, rng_seed=1)
            for n in (100, 200, 400, 800, 1600)}


def test_budget_falls_with_photons(budget_curve):
    values = [budget_curve[n] for n in sorted(budget_curve)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_budget_follows_counting_statistics(budget_curve):
    assert budget_curve[800] / budget_curve[200] == pytest.approx(0.5, abs=0.1)


def test_budget_is_deterministic_across_workers():
    a = budget_estimates(200, BUDGET_IRF, NS, 8, rng_seed=4, workers=1)
    b = budget_estimates(200, BUDGET_IRF, NS, 8, rng_seed=4, workers=2)
    assert np.array_equal(a, b)


def test_budget_input_checks():
    with pytest.raises(ValueError, match="replicates"):
        photon_budget(200, BUDGET_IRF, NS, replicates=50)
    with pytest.raises(ValueError, match="n_coincidences"):
        budget_estimates(10, BUDGET_IRF, NS, 5, rng_seed=0)


# lifetime scan

def test_scan_unbiased_at_one_nanosecond():
    irf = GaussianIRF(3.65 * NS, 30 * NS)
    (p,) = min_lifetime_scan(irf, [NS], replicates=20, rng_seed=2)
    assert abs(p.bias) < 0.02 * NS
    assert p.n_fits == 20


def test_scan_rejects_bad_grid():
    with pytest.raises(ValueError):
        min_lifetime_scan(GaussianIRF(3.65 * NS), [0.0])


def test_bias_knee():
    pts = [ScanPoint(t * NS, b * t * NS, 0.0, 10)
           for t, b in [(0.1, 0.3), (0.2, 0.12), (0.5, 0.05), (1.0, -0.01), (2.0, 0.0)]]
    assert bias_knee(pts) == pytest.approx(0.5 * NS)
    assert bias_knee(pts[:1]) is None


# drift

@pytest.fixture(scope="module")
def drift_estimates():
    out = {}
    for rms in (0.0, 50 * PS, 100 * PS):
        cfg, segs = _segments(2400, rms, seed=3)
        out[rms] = drift_inflation(segs, cfg.irf())
    return out


def test_drift_recovered(drift_estimates):
    assert drift_estimates[50 * PS].drift_std == pytest.approx(50 * PS, rel=0.3)


def test_drift_doubles(drift_estimates):
    ratio = drift_estimates[100 * PS].drift_std / drift_estimates[50 * PS].drift_std
    assert 1.5 <= ratio <= 2.5


def test_no_drift_gives_small_statistic(drift_estimates):
    r = drift_estimates[0.0]
    assert r.drift_std < 20 * PS
    assert r.raw_std > r.drift_std
    assert r.excluded == 0


def test_drift_needs_enough_segments():
    cfg, segs = _segments(10, 50 * PS)
    with pytest.raises(StudyError, match="20 segments"):
        drift_inflation(segs, cfg.irf())


def test_drift_window_must_fit():
    cfg, segs = _segments(20, 50 * PS)
    with pytest.raises(StudyError, match="does not fit"):
        drift_inflation(segs, cfg.irf())
