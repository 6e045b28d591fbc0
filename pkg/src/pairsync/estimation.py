"""Peak positions, clock offset, drift parabola and residual stability.

Peaks are located by matching a fixed empirical template, built once from a
longer stretch of data, against each short-window histogram.  The offset of
Bob's clock relative to Alice's follows from the single-trip peak ``tau_ab``
and the round-trip peak ``tau_aa`` as ``tau_ab - tau_aa/2``.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .correlation import (CorrelationHistogram, NoPeakError, NormalizedHistogram, car, normalize,
                          peak_window)

PS_PER_S = 1e12


class FitError(RuntimeError):
    """A peak could not be fitted inside its histogram window."""


# --------------------------------------------------------------------------
# templates and peak fits


@dataclass
class PeakTemplate:
    """Background-subtracted peak profile with unit sum.

    ``shape[k]`` belongs to the bin whose lower edge sits at
    ``edge0 + k*bin_width`` relative to the template centre (its centroid).
    """

    shape: np.ndarray
    bin_width: float
    edge0: float
    fwhm: float
    source_duration: float
    counts: float = 0.0     # background-subtracted coincidences in the profile
    smoothed: bool = False
    center_err: float = 0.0  # Poisson uncertainty of the centroid, ps

    @property
    def offsets(self):
        """Bin-centre offsets from the template centre, ps."""
        return self.edge0 + self.bin_width * (np.arange(self.shape.size) + 0.5)

    def to_dict(self):
        return {"bin_width_ps": self.bin_width, "edge0_ps": self.edge0, "fwhm_ps": self.fwhm,
                "source_duration_s": self.source_duration, "counts": self.counts,
                "smoothed": self.smoothed, "center_err_ps": self.center_err,
                "shape": self.shape.tolist()}


@dataclass
class PeakEstimate:
    position: float
    position_err: float
    amplitude: float
    fwhm: float
    car: float
    score: float = float("nan")


def _box(y, n=3):
    if n <= 1:
        return y.astype(np.float64)
    return np.convolve(y, np.ones(n) / n, mode="same")


def _fwhm(x, y):
    """Full width at half maximum of a sampled peak (linear interpolation)."""
    k = int(np.argmax(y))
    half = y[k] / 2.0
    lo = k
    while lo > 0 and y[lo] > half:
        lo -= 1
    hi = k
    while hi < y.size - 1 and y[hi] > half:
        hi += 1
    if y[lo] > half or y[hi] > half:
        return float("nan")
    xl = x[lo] + (half - y[lo]) * (x[lo + 1] - x[lo]) / (y[lo + 1] - y[lo])
    xr = x[hi - 1] + (half - y[hi - 1]) * (x[hi] - x[hi - 1]) / (y[hi] - y[hi - 1])
    return float(xr - xl)


def _significant_peak(nh, significance):
    """Index of the (lightly smoothed) maximum if it stands out from the background."""
    excess = nh.excess
    k = int(np.argmax(_box(excess, 5)))
    sigma = math.sqrt(max(nh.background_level, 1.0))
    if excess[k] < significance * sigma:
        raise NoPeakError(f"highest bin is {excess[k] / sigma:.1f} sigma above background")
    return k


def _centroid_weights(x, c, halfwidth, bw):
    return np.clip((np.minimum(x + bw / 2, c + halfwidth) - np.maximum(x - bw / 2, c - halfwidth))
                   / bw, 0.0, 1.0)


def _centroid(x, y, start, halfwidth, bw, iterations=100):
    """Self-consistent centroid of ``y`` over ``c +- halfwidth``.

    Bins straddling the window edge enter with their overlapping fraction so
    the centroid moves continuously with ``c``; a hard cut lets whole bins flip
    in and out and biases the fixed point by a sizeable fraction of a bin.
    """
    c = float(start)
    for _ in range(iterations):
        w = _centroid_weights(x, c, halfwidth, bw) * y
        if w.sum() <= 0:
            raise NoPeakError("peak centroid is undefined")
        new = float(np.dot(w, x) / w.sum())
        if abs(new - c) < 1e-7:
            return new
        c = new
    return c


def _centroid_slope(x, y, c, halfwidth, bw):
    """Derivative of the windowed centroid with respect to the window centre."""
    def step(cc):
        w = _centroid_weights(x, cc, halfwidth, bw) * y
        return float(np.dot(w, x) / w.sum())
    h = bw / 2
    try:
        return (step(c + h) - step(c - h)) / (2 * h)
    except ZeroDivisionError:
        return 0.0


def build_template(nh, support=2.5, centroid_halfwidth=0.5, smooth=False, significance=5.0,
                   source_duration=None):
    """Peak template from a normalized histogram.

    The profile is the background-subtracted histogram over ``support`` FWHMs
    either side of the peak; its centre is the centroid of the bins within
    ``centroid_halfwidth`` FWHMs of the centre, iterated to self-consistency.
    ``smooth`` applies a 3-bin moving average (off by default; it widens the
    peak slightly).  Raises :class:`NoPeakError` for a flat histogram.
    """
    hist = nh.base
    x = hist.centers
    k = _significant_peak(nh, significance)
    y = nh.excess.astype(np.float64)
    if smooth:
        y = _box(y, 3)
    fwhm = _fwhm(x, _box(y, 3))
    if not fwhm > 0:
        raise NoPeakError("peak has no resolvable half-maximum width inside the histogram")
    center = _centroid(x, y, x[k], centroid_halfwidth * fwhm, hist.bin_width)
    f = _centroid_weights(x, center, centroid_halfwidth * fwhm, hist.bin_width)
    center_err = math.sqrt(float(np.sum(f * f * nh.variance * (x - center) ** 2))) / float(np.sum(f * y))
    # the window follows the centroid, which amplifies noise by 1/(1 - slope of the map)
    gain = _centroid_slope(x, _box(y, 3), center, centroid_halfwidth * fwhm, hist.bin_width)
    center_err /= 1.0 - min(max(gain, 0.0), 0.9)
    sel = np.flatnonzero(np.abs(x - center) <= support * fwhm)
    if sel[0] == 0 or sel[-1] == hist.nbins - 1:
        raise NoPeakError("template support extends past the histogram window")
    shape = y[sel]
    total = float(shape.sum())
    if total <= 0:
        raise NoPeakError("template integrates to a non-positive value")
    edge0 = float(hist.tau_start + sel[0] * hist.bin_width - center)
    if source_duration is None:
        source_duration = hist.duration / PS_PER_S
    return PeakTemplate(shape / total, hist.bin_width, edge0, fwhm, float(source_duration),
                        total, smooth, center_err)


def _match(y, t):
    """Matched-filter output ``M[s] = sum_k t[k] * y[k + s]`` over full-overlap shifts."""
    return np.correlate(y, t, mode="valid")


def fit_peak(nh, template, significance=5.0):
    """Locate ``template`` in a normalized histogram.

    The score is the normalized cross-correlation between the template and the
    background-subtracted histogram, evaluated at integer-bin shifts; the
    maximum is refined by a least-squares parabola over a few bins either side
    (about 0.15 FWHM), which keeps the curvature estimate stable on noisy data.  Equal scores
    resolve to the shift whose peak position is smallest in magnitude.

    ``position_err`` is the matched-filter error: the score derivative has
    Poisson variance ``sum(T'[k]**2 * counts[k + s])`` and the position error is
    its standard deviation over the score curvature.

    Raises :class:`FitError` if the best shift lies on the window edge, and
    :class:`NoPeakError` if the fitted amplitude is not ``significance`` sigma.
    """
    hist = nh.base
    if not math.isclose(hist.bin_width, template.bin_width, rel_tol=1e-12):
        raise ValueError("histogram and template bin widths differ")
    t = template.shape
    nt = t.size
    if hist.nbins < nt + 2:
        raise FitError("histogram window is narrower than the template")
    y = nh.excess.astype(np.float64)
    n = nh.variance.astype(np.float64)
    m = _match(y, t)
    ynorm = math.sqrt(float(np.dot(y, y))) or 1.0
    score = m / (math.sqrt(float(np.dot(t, t))) * ynorm)
    bw = hist.bin_width
    pos0 = hist.tau_start - template.edge0       # template centre at shift 0
    best = np.flatnonzero(score == score.max())
    s = int(best[np.argmin(np.abs(pos0 + best * bw))])
    w = max(1, int(0.15 * template.fwhm / bw))
    if s - w < 0 or s + w > m.size - 1:
        raise FitError("template match is maximal at the window edge (peak outside window)")
    # least-squares parabola through the score around its maximum
    u = np.arange(-w, w + 1, dtype=np.float64)
    c2, c1, _ = np.polyfit(u, m[s - w:s + w + 1], 2)
    curv = 2.0 * c2
    if not curv < 0:
        raise FitError("match score is not peaked")
    frac = -c1 / curv
    if abs(frac) > w:
        raise FitError("match score vertex lies outside the interpolation range")
    position = pos0 + (s + frac) * bw
    b = m[s]

    tg = np.gradient(t)
    var_d = float(np.dot(tg * tg, n[s:s + nt]))
    err = math.sqrt(max(var_d, 1e-300)) / abs(curv) * bw

    tt = float(np.dot(t, t))
    amplitude = float(b / tt)
    amp_err = math.sqrt(max(float(np.dot(t * t, n[s:s + nt])), 1e-300)) / tt
    if amplitude < significance * amp_err:
        raise NoPeakError(f"fitted peak amplitude is only {amplitude / amp_err:.1f} sigma")
    try:
        ratio = car(hist, peak_window(hist, position, template.fwhm))
    except ValueError:
        ratio = float("nan")
    return PeakEstimate(float(position), float(err), amplitude, template.fwhm, ratio,
                        float(score[s]))


def offset_from_peaks(tau_ab, tau_aa):
    """Clock offset (Bob minus Alice) and its error from the two peak estimates."""
    delta = tau_ab.position - tau_aa.position / 2.0
    err = math.sqrt(tau_ab.position_err ** 2 + tau_aa.position_err ** 2 / 4.0)
    return delta, err


def sum_histograms(hists):
    """Sum histograms that share a bin width and a common grid phase.

    Ranges may differ; the result covers their union.  Event counts and
    durations add.
    """
    hists = list(hists)
    if not hists:
        raise ValueError("nothing to sum")
    bw = hists[0].bin_width
    kind = hists[0].kind
    step = hists[0].lag_step
    starts = []
    for h in hists:
        if h.bin_width != bw or h.kind != kind or h.lag_step != step:
            raise ValueError("histograms differ in bin width, kind or lag step")
        k = (h.tau_start - hists[0].tau_start) / bw
        if abs(k - round(k)) > 1e-9:
            raise ValueError("histogram bins are not on a common grid")
        starts.append(int(round(k)))
    lo = min(starts)
    hi = max(s + h.nbins for s, h in zip(starts, hists))
    counts = np.zeros(hi - lo, dtype=np.int64)
    for s, h in zip(starts, hists):
        counts[s - lo:s - lo + h.nbins] += h.counts
    return CorrelationHistogram(hists[0].tau_start + lo * bw, bw, counts,
                                sum(h.n_left for h in hists), sum(h.n_right for h in hists),
                                sum(h.duration for h in hists), kind, step)


def stack_normalized(nhs, shifts):
    """Sum lattice-corrected histograms after moving each by ``shifts[i]`` bins.

    The result carries the summed densities as its counts and unit exposure;
    bins not covered by every input are unreliable at the edges.
    """
    nhs = list(nhs)
    bw = nhs[0].bin_width
    t0 = nhs[0].base.tau_start
    starts = [int(round((nh.base.tau_start - t0) / bw)) + int(s) for nh, s in zip(nhs, shifts)]
    lo = min(starts)
    hi = max(k + nh.base.nbins for k, nh in zip(starts, nhs))
    dens = np.zeros(hi - lo)
    for k, nh in zip(starts, nhs):
        dens[k - lo:k - lo + nh.base.nbins] += nh.density
    bg = float(sum(nh.background_level for nh in nhs))
    base = CorrelationHistogram(t0 + lo * bw, bw, dens, sum(nh.base.n_left for nh in nhs),
                                sum(nh.base.n_right for nh in nhs),
                                sum(nh.base.duration for nh in nhs), nhs[0].base.kind)
    return NormalizedHistogram(base, bg, dens / bg, np.ones(dens.size))


def stacked_template(hists, passes=2, **kwargs):
    """Template from several short histograms of a peak that may wander.

    Each histogram is shifted by whole bins onto the first before summing, so
    slow drift over the template period does not widen the profile.  Shifts
    start from each histogram's maximum and are then refined by fitting the
    provisional template.
    """
    nhs = [normalize(h) for h in hists]
    if len(nhs) == 1:
        return build_template(nhs[0], **kwargs)
    ref = None
    shifts = []
    for nh in nhs:
        k = int(np.argmax(_box(nh.excess, 5)))
        c = nh.centers[k]
        ref = c if ref is None else ref
        shifts.append(int(round((ref - c) / nh.bin_width)))
    duration = sum(h.duration for h in hists) / PS_PER_S
    tpl = None
    for _ in range(passes):
        tpl = build_template(stack_normalized(nhs, shifts), source_duration=duration, **kwargs)
        ref = None
        new = []
        for nh in nhs:
            try:
                p = fit_peak(nh, tpl, significance=0.0).position
            except (FitError, NoPeakError):
                p = None
            new.append(p)
        good = [p for p in new if p is not None]
        if not good:
            break
        ref = good[0]
        shifts = [s if p is None else int(round((ref - p) / tpl.bin_width))
                  for s, p in zip(shifts, new)]
    return build_template(stack_normalized(nhs, shifts), source_duration=duration, **kwargs)


# --------------------------------------------------------------------------
# offset series and drift fit


@dataclass
class OffsetSeries:
    """Offset samples, one per single-trip window.

    ``t_mid`` is Alice's local time (ps) at the window centre.  ``round_index``
    identifies the round-trip window whose ``tau_aa`` a sample shares, and
    ``segment`` the channel configuration it was taken in.
    """

    t_mid: np.ndarray
    delta: np.ndarray
    delta_err: np.ndarray
    tau_ab: np.ndarray
    tau_ab_err: np.ndarray
    tau_aa: np.ndarray
    tau_aa_err: np.ndarray
    round_index: np.ndarray
    segment: np.ndarray
    window_single: float
    window_round: float
    gaps: list = field(default_factory=list)   # (t_start_ps, t_end_ps, reason)

    COLUMNS = ("t_mid_ps", "delta_ps", "delta_err_ps", "tau_ab_ps", "tau_ab_err_ps",
               "tau_aa_ps", "tau_aa_err_ps", "round_index", "segment")

    def __len__(self):
        return self.t_mid.size

    @property
    def t_seconds(self):
        return self.t_mid / PS_PER_S

    def columns(self):
        return dict(zip(self.COLUMNS, (self.t_mid, self.delta, self.delta_err, self.tau_ab,
                                       self.tau_ab_err, self.tau_aa, self.tau_aa_err,
                                       self.round_index, self.segment)))

    def select(self, mask):
        cols = [c[mask] for c in self.columns().values()]
        return OffsetSeries(*cols, self.window_single, self.window_round, list(self.gaps))

    @classmethod
    def from_arrays(cls, t_mid, delta, delta_err, window_single=3.0, window_round=90.0):
        """Series without peak detail (each sample its own round-trip window)."""
        t_mid = np.asarray(t_mid, dtype=np.int64)
        delta = np.asarray(delta, dtype=np.float64)
        err = np.broadcast_to(np.asarray(delta_err, dtype=np.float64), delta.shape).copy()
        n = delta.size
        nan = np.full(n, np.nan)
        return cls(t_mid, delta, err, nan, err.copy(), nan.copy(), np.zeros(n),
                   np.arange(n), np.zeros(n, dtype=np.int64), window_single, window_round)


@dataclass
class DriftFit:
    """``delta(t) = aging*t**2 + freq*t`` (t in s, scaled to ps) ``+ bias``.

    ``cov`` is the covariance of ``(aging [1/s], freq, bias [ps])``.  With
    ``cov_method == "white"`` it is the weighted-least-squares covariance
    scaled by the reduced chi-square; with ``"random_walk"`` it is the sandwich
    covariance of the same estimate under a fitted white-plus-random-walk phase
    noise model (``fm_noise`` in ps**2/s).
    """

    aging: float
    freq: float
    bias: float
    cov: np.ndarray
    t: np.ndarray           # s
    residuals: np.ndarray   # ps
    chi2: float
    dof: int
    cov_method: str = "white"
    fm_noise: float = 0.0

    @property
    def errors(self):
        return np.sqrt(np.diag(self.cov))

    def model(self, t_s):
        t_s = np.asarray(t_s, dtype=np.float64)
        return (self.aging * t_s * t_s + self.freq * t_s) * PS_PER_S + self.bias

    def to_dict(self):
        ea, ed, eb = (float(x) for x in self.errors)
        return {"aging_per_s": self.aging, "aging_err": ea, "freq_offset": self.freq,
                "freq_offset_err": ed, "bias_ps": self.bias, "bias_err_ps": eb,
                "cov": self.cov.tolist(), "chi2": self.chi2, "dof": self.dof,
                "cov_method": self.cov_method, "fm_noise_ps2_per_s": self.fm_noise,
                "n_samples": int(self.t.size),
                "residual_rms_ps": float(np.sqrt(np.mean(self.residuals ** 2)))}


def _white_cov(series, err):
    """Measurement covariance: own tau_ab error plus the tau_aa error shared per window."""
    v = np.diag(series.tau_ab_err ** 2) if np.all(np.isfinite(series.tau_ab)) else np.diag(err ** 2)
    if np.all(np.isfinite(series.tau_aa_err)) and np.any(series.tau_aa_err > 0):
        same = series.round_index[:, None] == series.round_index[None, :]
        share = series.tau_aa_err / 2.0
        v = v + same * np.outer(share, share)
    return v


def _rw_likelihood(log_lam, x, r, d_mat, k_mat):
    lam = math.exp(log_lam)
    v = d_mat + lam * k_mat
    try:
        cf = linalg.cho_factor(v, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return np.inf, None
    vx = linalg.cho_solve(cf, x, check_finite=False)
    a = x.T @ vx
    beta = np.linalg.solve(a, vx.T @ r)
    e = r - x @ beta
    q = float(e @ linalg.cho_solve(cf, e, check_finite=False))
    n, p = x.shape
    s2 = q / (n - p)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    nll = 0.5 * ((n - p) * math.log(s2) + logdet + np.linalg.slogdet(a)[1])
    return nll, s2


def fit_drift(series, noise="auto", max_gls=4000):
    """Weighted least-squares parabola through an :class:`OffsetSeries`.

    Weights are ``1/delta_err**2``.  ``noise`` selects the covariance:
    ``"white"`` scales the WLS covariance by the reduced chi-square;
    ``"random_walk"`` fits (restricted maximum likelihood) a phase random walk
    on top of the measurement errors and propagates it through the WLS
    estimator; ``"auto"`` uses the random-walk model when it is preferred by
    the likelihood and the series is not too long for a dense solve.
    """
    t = series.t_seconds.astype(np.float64)
    y = series.delta.astype(np.float64)
    err = series.delta_err.astype(np.float64)
    if t.size < 3:
        raise ValueError("a parabola needs at least three offset samples")
    if np.ptp(t) == 0:
        raise ValueError("rank-deficient design: all sample times are equal")
    if t.size < 10:
        warnings.warn("fewer than 10 offset samples; the parabola is poorly constrained",
                      RuntimeWarning)
    if np.any(~(err > 0)):
        raise ValueError("offset errors must be positive")
    t0 = 0.5 * (t.min() + t.max())
    scale = 0.5 * np.ptp(t)
    u = (t - t0) / scale
    x = np.column_stack([u * u, u, np.ones_like(u)])
    w = 1.0 / err
    coef, _, rank, _ = np.linalg.lstsq(x * w[:, None], y * w, rcond=None)
    if rank < 3:
        raise ValueError("rank-deficient design: need at least three distinct sample times")
    # back to polynomial coefficients in absolute t
    ca, cb, cc = coef
    a = ca / scale ** 2
    b = cb / scale - 2.0 * ca * t0 / scale ** 2
    c = cc - cb * t0 / scale + ca * t0 ** 2 / scale ** 2
    jac = np.array([[1 / scale ** 2, 0.0, 0.0],
                    [-2.0 * t0 / scale ** 2, 1 / scale, 0.0],
                    [t0 ** 2 / scale ** 2, -t0 / scale, 1.0]])
    resid = y - (a * t * t + b * t + c)
    chi2 = float(np.sum((resid * w) ** 2))
    dof = t.size - 3

    xw = x * (w * w)[:, None]
    bread = np.linalg.inv(x.T @ xw)
    method = "white"
    fm = 0.0
    cov_u = bread * (chi2 / dof if dof > 0 else 1.0)
    if noise not in ("auto", "white", "random_walk"):
        raise ValueError(f"unknown noise model {noise!r}")
    if noise != "white" and dof > 3:
        if t.size > max_gls:
            if noise == "random_walk":
                raise ValueError(f"random-walk covariance limited to {max_gls} samples")
            warnings.warn("series too long for the random-walk covariance; using white",
                          RuntimeWarning)
        else:
            d_mat = _white_cov(series, err)
            k_mat = np.minimum.outer(t - t.min(), t - t.min())
            nll0, s20 = _rw_likelihood(-60.0, x, y, d_mat, k_mat)
            scale_k = float(np.mean(np.diag(d_mat))) / max(np.ptp(t), 1e-9)
            lo, hi = math.log(scale_k) - 12, math.log(scale_k) + 16
            grid = np.linspace(lo, hi, 29)
            vals = [_rw_likelihood(g, x, y, d_mat, k_mat)[0] for g in grid]
            g0 = int(np.argmin(vals))
            best = grid[g0]
            if 0 < g0 < grid.size - 1:
                res = optimize.minimize_scalar(
                    lambda g: _rw_likelihood(g, x, y, d_mat, k_mat)[0],
                    bounds=(grid[g0 - 1], grid[g0 + 1]), method="bounded",
                    options={"xatol": 1e-3})
                best = float(res.x)
            nll1, s21 = _rw_likelihood(best, x, y, d_mat, k_mat)
            # likelihood-ratio preference (one extra parameter)
            if noise == "random_walk" or nll0 - nll1 > 2.0:
                method = "random_walk"
                fm = s21 * math.exp(best)
                v = s21 * (d_mat + math.exp(best) * k_mat)
                mid = xw.T @ v @ xw
                cov_u = bread @ mid @ bread
    cov = jac @ cov_u @ jac.T
    # coefficients are ps/s^2 and ps/s; report aging and frequency as fractions
    unit = np.array([1 / PS_PER_S, 1 / PS_PER_S, 1.0])
    cov = cov * np.outer(unit, unit)
    return DriftFit(a / PS_PER_S, b / PS_PER_S, c, cov, t, resid, chi2, dof, method, fm)


# --------------------------------------------------------------------------
# stability


@dataclass
class StabilityReport:
    taus: np.ndarray        # s
    adev: np.ndarray
    tdev: np.ndarray        # ps
    n_terms: np.ndarray     # second-difference terms entering each ADEV point
    cadence: float          # s

    def at(self, tau):
        """Values at the reported tau nearest ``tau``."""
        k = int(np.argmin(np.abs(self.taus - tau)))
        return float(self.taus[k]), float(self.adev[k]), float(self.tdev[k])

    def to_dict(self):
        return {"cadence_s": self.cadence, "tau_s": self.taus.tolist(),
                "adev": self.adev.tolist(), "tdev_ps": self.tdev.tolist(),
                "n_terms": self.n_terms.tolist()}


def phase_grid(t_ps, x, cadence=None, tolerance=0.1):
    """Place irregular samples on a uniform grid, with NaN where samples are missing."""
    t = np.asarray(t_ps, dtype=np.float64) / PS_PER_S
    x = np.asarray(x, dtype=np.float64)
    if t.size < 2:
        raise ValueError("need at least two samples")
    if cadence is None:
        cadence = float(np.median(np.diff(t)))
    if not cadence > 0:
        raise ValueError("cadence must be positive")
    idx = np.rint((t - t[0]) / cadence).astype(np.int64)
    if np.any(np.abs(t - t[0] - idx * cadence) > tolerance * cadence):
        raise ValueError("samples are not uniformly spaced at the cadence")
    if np.any(np.diff(idx) <= 0):
        raise ValueError("two samples fall in one cadence slot")
    grid = np.full(idx[-1] + 1, np.nan)
    grid[idx] = x
    return grid, cadence


def _window_sums(v, m):
    """Sums of m consecutive values, and whether each window is free of NaN."""
    bad = ~np.isfinite(v)
    cz = np.concatenate(([0.0], np.cumsum(np.where(bad, 0.0, v))))
    cb = np.concatenate(([0], np.cumsum(bad)))
    return cz[m:] - cz[:-m], (cb[m:] - cb[:-m]) == 0


def _second_differences(x, m):
    """``x[i+2m] - 2x[i+m] + x[i]`` with rounding-level values set to zero.

    A linear phase (pure frequency offset) then gives exactly zero instead of
    a few ulps of the phase magnitude.
    """
    d2 = x[2 * m:] - 2.0 * x[m:-m] + x[:-2 * m]
    scale = np.fmax(np.fmax(np.abs(x[2 * m:]), np.abs(x[m:-m])), np.abs(x[:-2 * m]))
    d2[np.abs(d2) <= 16 * np.finfo(np.float64).eps * scale] = 0.0
    return d2


def overlapping_adev(x, m, tau0):
    """Overlapping Allan deviation at ``tau = m*tau0`` from phase ``x`` (ps)."""
    if x.size < 2 * m + 1:
        return float("nan"), 0
    d2 = _second_differences(x, m)
    d2 = d2[np.isfinite(d2)]
    if d2.size == 0:
        return float("nan"), 0
    tau = m * tau0
    return math.sqrt(np.mean(d2 * d2) / (2.0 * tau * tau)) / PS_PER_S, int(d2.size)


def time_deviation(x, m, tau0):
    """TDEV (ps) at ``tau = m*tau0`` via the modified Allan variance."""
    if x.size < 3 * m:
        return float("nan"), 0
    d2 = _second_differences(x, m)
    s, ok = _window_sums(d2, m)
    s = s[ok]
    if s.size == 0:
        return float("nan"), 0
    tau = m * tau0
    mvar = np.mean(s * s) / (2.0 * m * m * tau * tau)
    return math.sqrt(tau * tau / 3.0 * mvar), int(s.size)


def stability(t_ps, r, taus=None, cadence=None, min_terms=4):
    """Overlapping ADEV and TDEV of residual phase ``r`` (ps) sampled at times ``t_ps``.

    Taus are rounded to whole multiples of the sample cadence (default: octave
    spacing up to a quarter of the record); points with fewer than
    ``min_terms`` usable terms are omitted.  Gaps in the record are skipped.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.size < 3:
        raise ValueError("stability needs at least three phase points")
    x, tau0 = phase_grid(t_ps, r, cadence)
    if taus is None:
        ms = 2 ** np.arange(0, int(np.log2(max(x.size // 4, 1))) + 1)
    else:
        ms = np.unique(np.maximum(1, np.rint(np.asarray(taus, dtype=np.float64) / tau0)).astype(int))
    out_t, out_a, out_d, out_n = [], [], [], []
    for m in ms:
        a, na = overlapping_adev(x, int(m), tau0)
        d, nd = time_deviation(x, int(m), tau0)
        if na < min_terms or nd < min_terms:
            continue
        out_t.append(m * tau0)
        out_a.append(a)
        out_d.append(d)
        out_n.append(na)
    return StabilityReport(np.array(out_t), np.array(out_a), np.array(out_d),
                           np.array(out_n, dtype=np.int64), tau0)


def white_pm_tdev(sigma, m):
    """Expected TDEV of white phase noise ``sigma`` at ``m`` samples (ps)."""
    return sigma / math.sqrt(m)


def min_resolvable_separation(delta_err, group_index=1.468):
    """Fiber length (m) corresponding to a time uncertainty ``delta_err`` (ps)."""
    if delta_err < 0:
        raise ValueError("delta_err must be non-negative")
    return delta_err * 1e-12 * 299_792_458.0 / group_index

