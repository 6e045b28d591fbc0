import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pairsync.correlation import CorrelationHistogram, NoPeakError, normalize
from pairsync.estimation import (
    FitError,
    OffsetSeries,
    PeakEstimate,
    build_template,
    fit_drift,
    fit_peak,
    min_resolvable_separation,
    offset_from_peaks,
    stability,
    sum_histograms,
    white_pm_tdev,
)
from pairsync.timebase import PS_PER_S

BW = 62.5
NB = 512


def gaussian_hist(center, fwhm=900.0, area=2e5, background=100.0, rng=None, tau_start=-16000.0,
                  nbins=NB):
    """Histogram with a Gaussian peak of ``area`` coincidences over a flat background."""
    edges = tau_start + BW * np.arange(nbins + 1)
    sigma = fwhm / 2.354820045
    cdf = 0.5 * (1 + np.vectorize(math.erf)((edges - center) / (sigma * math.sqrt(2))))
    mean = background + area * np.diff(cdf)
    counts = rng.poisson(mean) if rng is not None else np.rint(mean)
    # pick stream sizes and duration so the accidental level equals ``background``
    n = 10**6
    duration = int(round(n * n * BW / background))
    return CorrelationHistogram(tau_start, BW, counts.astype(np.int64), n, n, duration)


# --------------------------------------------------------------------------
# templates


def test_template_fwhm_and_center():
    tpl = build_template(normalize(gaussian_hist(0.0)))
    assert tpl.fwhm == pytest.approx(900.0, rel=0.05)
    assert tpl.shape.sum() == pytest.approx(1.0)
    # centroid of the profile sits on the template origin
    assert abs(np.dot(tpl.offsets, tpl.shape)) < 1.0
    assert tpl.counts == pytest.approx(2e5, rel=0.01)


def test_template_of_flat_histogram_fails():
    h = gaussian_hist(0.0, area=0.0)
    with pytest.raises(NoPeakError):
        build_template(normalize(h))


def test_template_too_close_to_edge():
    h = gaussian_hist(15500.0)
    with pytest.raises(NoPeakError):
        build_template(normalize(h))


def test_template_center_error_matches_scatter():
    rng = np.random.default_rng(3)
    centers, errs = [], []
    for _ in range(40):
        tpl = build_template(normalize(gaussian_hist(0.0, area=2e4, rng=rng)))
        # support edges sit on the bin grid, so edge0 fixes the centre modulo a bin
        centers.append((-tpl.edge0 + BW / 2) % BW - BW / 2)
        errs.append(tpl.center_err)
    assert np.std(centers) == pytest.approx(np.median(errs), rel=0.4)


# --------------------------------------------------------------------------
# peak fitting


def test_self_match_shifted_by_whole_bins():
    tpl = build_template(normalize(gaussian_hist(0.0)))
    est = fit_peak(normalize(gaussian_hist(7 * BW)), tpl)
    assert abs(est.position - 7 * BW) < 0.05 * BW
    assert est.amplitude == pytest.approx(2e5, rel=0.02)


@given(st.floats(-4000.0, 4000.0))
def test_fit_follows_subbin_shifts(shift):
    tpl = build_template(normalize(gaussian_hist(0.0, area=1e7)))
    est = fit_peak(normalize(gaussian_hist(shift, area=1e7)), tpl)
    assert abs(est.position - shift) < 0.1 * BW


def test_fit_error_is_calibrated():
    rng = np.random.default_rng(11)
    tpl = build_template(normalize(gaussian_hist(0.0, area=1e7)))
    pos, err = [], []
    for _ in range(60):
        est = fit_peak(normalize(gaussian_hist(250.0, area=3e4, rng=rng)), tpl)
        pos.append(est.position)
        err.append(est.position_err)
    pull = (np.array(pos) - 250.0) / np.array(err)
    assert abs(np.mean(pull)) < 0.5
    assert 0.6 < np.std(pull) < 1.5


def test_peak_at_window_edge_raises():
    tpl = build_template(normalize(gaussian_hist(0.0)))
    with pytest.raises(FitError):
        fit_peak(normalize(gaussian_hist(15900.0)), tpl)


def test_no_peak_raises():
    rng = np.random.default_rng(5)
    tpl = build_template(normalize(gaussian_hist(0.0)))
    with pytest.raises((NoPeakError, FitError)):
        fit_peak(normalize(gaussian_hist(0.0, area=0.0, rng=rng)), tpl)


def test_bin_width_mismatch():
    tpl = build_template(normalize(gaussian_hist(0.0)))
    h = gaussian_hist(0.0)
    h2 = CorrelationHistogram(h.tau_start, 2 * BW, h.counts[:256], h.n_left, h.n_right, h.duration)
    with pytest.raises(ValueError):
        fit_peak(normalize(h2), tpl)


def test_equal_scores_prefer_smallest_position():
    # two identical peaks symmetric about zero
    a = gaussian_hist(-3000.0, area=1e6)
    b = gaussian_hist(3000.0, area=1e6)
    both = CorrelationHistogram(a.tau_start, BW, a.counts + b.counts - 100, a.n_left, a.n_right,
                                a.duration)
    tpl = build_template(normalize(gaussian_hist(0.0, area=1e6)))
    est = fit_peak(normalize(both), tpl)
    assert abs(abs(est.position) - 3000.0) < 0.1 * BW


def test_sum_histograms():
    h = gaussian_hist(0.0)
    s = sum_histograms([h, h])
    assert np.array_equal(s.counts, 2 * h.counts)
    assert s.duration == 2 * h.duration
    shifted = CorrelationHistogram(h.tau_start + BW / 3, BW, h.counts, 1, 1, 1)
    with pytest.raises(ValueError):
        sum_histograms([h, shifted])
    with pytest.raises(ValueError):
        sum_histograms([])


# --------------------------------------------------------------------------
# offset from the two peaks


def _pk(x, e=0.0):
    return PeakEstimate(float(x), float(e), 1.0, 900.0, 1.0)


def test_offset_examples():
    assert offset_from_peaks(_pk(5000), _pk(10000))[0] == 0.0
    d, e = offset_from_peaks(_pk(51_650_500), _pk(103_300_000))
    assert d == 500.0
    d, e = offset_from_peaks(_pk(0, 3.0), _pk(0, 8.0))
    assert e == pytest.approx(5.0)


@given(st.floats(-1e9, 1e9), st.floats(0, 2e9), st.floats(-1e6, 1e6))
def test_offset_invariant_under_symmetric_delay(ab, aa, extra):
    d0, _ = offset_from_peaks(_pk(ab), _pk(aa))
    d1, _ = offset_from_peaks(_pk(ab + extra), _pk(aa + 2 * extra))
    assert abs(d1 - d0) < 1.0


@given(st.floats(-1e9, 1e9), st.floats(0, 2e9), st.floats(-1e6, 1e6))
def test_offset_linear_in_clock_offset(ab, aa, delta):
    d0, _ = offset_from_peaks(_pk(ab), _pk(aa))
    d1, _ = offset_from_peaks(_pk(ab + delta), _pk(aa))
    assert abs(d1 - d0 - delta) < 1.0


# --------------------------------------------------------------------------
# drift fit


def _series(t_s, delta, err=1.0):
    return OffsetSeries.from_arrays(np.rint(np.asarray(t_s) * PS_PER_S), delta, err)


def test_drift_exact_parabola():
    t = np.arange(0, 3000, 3.0)
    # 3e-12 ps/s^2 aging and 1e-10 frequency in ps units
    y = 3e-12 * PS_PER_S * t ** 2 + 1e-10 * PS_PER_S * t + 7.0
    fit = fit_drift(_series(t, y), noise="white")
    assert fit.aging == pytest.approx(3e-12, rel=1e-6)
    assert fit.freq == pytest.approx(1e-10, rel=1e-6)
    assert fit.bias == pytest.approx(7.0, abs=1e-3)
    assert np.max(np.abs(fit.residuals)) < 1e-3


def test_drift_recovers_noisy_frequency():
    rng = np.random.default_rng(1)
    t = np.arange(0, 3600, 3.0)
    d = 5.1654e-11
    y = d * PS_PER_S * t + 500 + rng.normal(0, 16, t.size)
    fit = fit_drift(_series(t, y, 16.0))
    a, f, b = fit.errors
    assert abs(fit.freq - d) < 3 * f
    assert abs(fit.bias - 500) < 3 * b
    assert fit.dof == t.size - 3


def test_drift_random_walk_inflates_errors():
    rng = np.random.default_rng(2)
    t = np.arange(0, 3000, 3.0)
    y = np.cumsum(rng.normal(0, 10, t.size)) + rng.normal(0, 5, t.size)
    white = fit_drift(_series(t, y, 5.0), noise="white")
    rw = fit_drift(_series(t, y, 5.0), noise="random_walk")
    assert rw.cov_method == "random_walk"
    assert rw.fm_noise > 0
    assert rw.errors[1] > white.errors[1]


@pytest.mark.filterwarnings("ignore:fewer than 10")
def test_drift_rejects_degenerate_input():
    with pytest.raises(ValueError):
        fit_drift(_series([1.0, 1.0, 1.0, 1.0], [0, 1, 2, 3]))
    with pytest.raises(ValueError):
        fit_drift(_series([1.0, 2.0], [0, 1]))
    with pytest.raises(ValueError):
        fit_drift(_series([0, 1, 2, 3], [0, 1, 2, 3], 0.0))
    with pytest.raises(ValueError):
        fit_drift(_series(np.arange(20.0), np.zeros(20)), noise="pink")
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        fit_drift(_series(np.arange(5.0), np.arange(5.0)))
    assert any(issubclass(x.category, RuntimeWarning) for x in w)


# --------------------------------------------------------------------------
# stability


def test_adev_of_constant_and_linear_phase_is_zero():
    t = np.arange(0, 3000, 3) * PS_PER_S
    for x in (np.full(t.size, 42.0), 1e-9 * t.astype(float), 5.1654e-11 * t + 500.0):
        rep = stability(t, x)
        assert np.all(rep.adev == 0.0)


def test_white_pm_tdev():
    rng = np.random.default_rng(4)
    t = np.arange(0, 30000, 3) * PS_PER_S
    x = rng.normal(0, 16, t.size)
    rep = stability(t, x)
    for tau, d in zip(rep.taus, rep.tdev):
        m = int(round(tau / 3))
        if t.size / (3 * m) < 50:
            continue    # too few independent averages for a 20% comparison
        assert d == pytest.approx(white_pm_tdev(16, m), rel=0.2)


def test_stability_rounds_taus_and_drops_short_records():
    t = np.arange(0, 600, 3) * PS_PER_S
    x = np.random.default_rng(0).normal(0, 1, t.size)
    rep = stability(t, x, taus=[100, 250])
    assert list(rep.taus) == [99.0]
    assert rep.cadence == 3.0
    with pytest.raises(ValueError):
        stability(t[:2], x[:2])


def test_stability_skips_gaps():
    rng = np.random.default_rng(8)
    t = np.arange(0, 6000, 3) * PS_PER_S
    keep = np.ones(t.size, bool)
    keep[500:520] = False
    rep = stability(t[keep], rng.normal(0, 10, t.size)[keep])
    assert rep.taus.size > 3
    assert np.all(np.isfinite(rep.tdev))


# --------------------------------------------------------------------------
# resolvable separation


def test_min_resolvable_separation():
    assert min_resolvable_separation(1000.0, 1.0) == pytest.approx(0.299792458)
    assert min_resolvable_separation(16.0) * 1e3 == pytest.approx(3.2675, rel=1e-3)
    assert min_resolvable_separation(0.0) == 0.0
    with pytest.raises(ValueError):
        min_resolvable_separation(-1.0)
