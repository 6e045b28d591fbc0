"""Coincidence histograms between timestamp streams.

``cross_histogram`` counts ordered pairs ``(t in left, t' in right)`` by lag
``t' - t``; ``auto_histogram`` counts pairs within one stream at positive lag.
Both run a two-pointer sweep (``O(N + M + matches)``) and are exact.  Bin
edges are kept on a 1/16 ps grid so a 62.5 ps bin is represented without
rounding; bins are half-open ``[lower, upper)``.
"""
from dataclasses import dataclass
import math
from fractions import Fraction

import numpy as np
from scipy import signal

from . import _kernels
from ._kernels import SUBPS

DEFAULT_BIN_WIDTH = 62.5
DEFAULT_HALF_WINDOW = 16_000
COARSE_TIERS = (1_000_000, 1_000)


class NoPeakError(RuntimeError):
    """No lag stands out from the accidental background."""


def _sub(x, what):
    """ps value -> integer count of 1/16 ps, refusing anything off that grid."""
    f = Fraction(x).limit_denominator(1 << 20) * SUBPS
    if f.denominator != 1:
        raise ValueError(f"{what}={x} ps is not a multiple of 1/{SUBPS} ps")
    return int(f)


def check_sorted(stream, name="stream"):
    stream = np.asarray(stream)
    if stream.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if stream.size > 1 and np.any(stream[1:] < stream[:-1]):
        raise ValueError(f"{name} is not sorted")
    return np.ascontiguousarray(stream, dtype=np.int64)


@dataclass
class CorrelationHistogram:
    tau_start: float
    bin_width: float
    counts: np.ndarray
    n_left: int
    n_right: int
    duration: int
    kind: str = "cross"
    lag_step: int = 1       # lags only take multiples of this (timestamp resolution)

    @property
    def nbins(self):
        return self.counts.shape[0]

    @property
    def tau_end(self):
        return self.tau_start + self.nbins * self.bin_width

    @property
    def edges(self):
        return self.tau_start + self.bin_width * np.arange(self.nbins + 1)

    @property
    def centers(self):
        return self.tau_start + self.bin_width * (np.arange(self.nbins) + 0.5)

    def exposure(self):
        """Relative number of attainable lags per bin (mean 1).

        Timestamps on a ``lag_step`` grid give lags on that grid, so a bin
        whose width is not a multiple of it holds one lattice point more or
        less than its neighbours; e.g. 62.5 ps bins over 4 ps steps alternate
        between 15 and 16.  Background and signal are both modulated by this
        comb.
        """
        q = SUBPS * int(self.lag_step)
        s16 = int(round(self.tau_start * SUBPS))
        w16 = int(round(self.bin_width * SUBPS))
        edges = s16 + w16 * np.arange(self.nbins + 1, dtype=np.int64)
        first = -((-edges) // q)
        return np.diff(first) * (q / w16)

    def background(self):
        """Expected accidental coincidences per bin for uncorrelated Poisson streams.

        For auto histograms the right-hand count includes each left event
        itself, so the pairing count is ``n_left * (n_right - 1)``, i.e.
        ``n*(n-1)`` for a whole stream.
        """
        if self.duration <= 0:
            raise ValueError("histogram has no duration")
        if self.kind == "auto":
            pairs = self.n_left * max(self.n_right - 1, 0)
        else:
            pairs = self.n_left * self.n_right
        return pairs * self.bin_width / self.duration

    def __add__(self, other):
        if (other.tau_start, other.bin_width, other.nbins, other.kind, other.lag_step) != \
                (self.tau_start, self.bin_width, self.nbins, self.kind, self.lag_step):
            raise ValueError("histograms have different binning")
        return CorrelationHistogram(self.tau_start, self.bin_width, self.counts + other.counts,
                                    self.n_left + other.n_left, self.n_right + other.n_right,
                                    self.duration + other.duration, self.kind, self.lag_step)


@dataclass
class NormalizedHistogram:
    """Histogram scaled by its accidental background.

    ``normalized[i] = counts[i] / (background_level * exposure[i])``; the
    exposure is 1 everywhere when the bin width is a multiple of the lag step.
    """

    base: CorrelationHistogram
    background_level: float
    normalized: np.ndarray
    exposure: np.ndarray = None

    def __post_init__(self):
        if self.exposure is None:
            self.exposure = np.ones(self.base.nbins)

    @property
    def centers(self):
        return self.base.centers

    @property
    def bin_width(self):
        return self.base.bin_width

    @property
    def density(self):
        """Counts corrected for the lag lattice."""
        return self.base.counts / self.exposure

    @property
    def excess(self):
        """Background-subtracted, lattice-corrected counts."""
        return self.density - self.background_level

    @property
    def variance(self):
        """Poisson variance of :attr:`density`."""
        return self.base.counts / self.exposure ** 2


def _geometry(tau_start, tau_end, bin_width):
    s16, e16, w16 = _sub(tau_start, "tau_start"), _sub(tau_end, "tau_end"), _sub(bin_width, "bin_width")
    if w16 <= 0:
        raise ValueError("bin_width must be positive")
    if e16 <= s16:
        raise ValueError("tau_end must exceed tau_start")
    if (e16 - s16) % w16:
        raise ValueError("bin_width must divide the lag range")
    return s16, w16, (e16 - s16) // w16


def infer_lag_step(*streams, n=4096):
    """Common grid of the timestamps (gcd of the first ``n`` of each stream), 1 if none."""
    g = 0
    for s in streams:
        s = np.asarray(s[:n], dtype=np.int64)
        if s.size:
            g = math.gcd(g, int(np.gcd.reduce(np.abs(s))))
    return max(g, 1)


def _span(*streams):
    lo = min((s[0] for s in streams if s.size), default=0)
    hi = max((s[-1] for s in streams if s.size), default=0)
    return int(hi - lo) + 1


def cross_histogram(left, right, tau_start, tau_end, bin_width=DEFAULT_BIN_WIDTH, duration=None,
                    lag_step=None, use_numba=None):
    """Counts of ``right - left`` lags in ``[tau_start, tau_end)``.

    ``duration`` (ps) is the span over which the right stream's density holds;
    it defaults to the combined extent of both streams and only matters for
    normalization.  ``lag_step`` (the timestamp resolution) is inferred from
    the data when not given.
    """
    left = check_sorted(left, "left")
    right = check_sorted(right, "right")
    s16, w16, nbins = _geometry(tau_start, tau_end, bin_width)
    counts = _kernels.pair_counts(left, right, s16, w16, nbins, use_numba=use_numba)
    if duration is None:
        duration = _span(left, right)
    if lag_step is None:
        lag_step = infer_lag_step(left, right)
    return CorrelationHistogram(s16 / SUBPS, w16 / SUBPS, counts, int(left.size), int(right.size),
                                int(duration), "cross", int(lag_step))


def auto_histogram(stream, tau_start, tau_end, bin_width=DEFAULT_BIN_WIDTH, duration=None,
                   lag_step=None, use_numba=None):
    """Counts of positive lags ``t_j - t_i`` (j after i) within one stream."""
    stream = check_sorted(stream)
    s16, w16, nbins = _geometry(tau_start, tau_end, bin_width)
    counts = _kernels.auto_counts(stream, s16, w16, nbins, use_numba=use_numba)
    if duration is None:
        duration = _span(stream)
    if lag_step is None:
        lag_step = infer_lag_step(stream)
    return CorrelationHistogram(s16 / SUBPS, w16 / SUBPS, counts, int(stream.size),
                                int(stream.size), int(duration), "auto", int(lag_step))


def normalize(hist):
    bg = hist.background()
    if not bg > 0:
        raise ValueError("zero accidental background: a stream is empty")
    w = hist.exposure()
    return NormalizedHistogram(hist, bg, hist.counts / (bg * w), w)


def peak_window(hist, center, width):
    """Bin index range ``(i0, i1)`` of bins whose centres lie within ``center +- width/2``."""
    c = hist.centers
    idx = np.flatnonzero(np.abs(c - center) <= width / 2)
    if idx.size == 0:
        raise ValueError("peak window does not overlap the histogram")
    return int(idx[0]), int(idx[-1]) + 1


def car(hist, peak_window):
    """Coincidence-to-accidental ratio in bins ``peak_window = (i0, i1)``."""
    i0, i1 = peak_window
    if not 0 <= i0 < i1 <= hist.nbins:
        raise ValueError("peak window outside the histogram")
    accidental = hist.background() * float(hist.exposure()[i0:i1].sum())
    if not accidental > 0:
        raise ValueError("no expected accidentals in the peak window")
    return float((hist.counts[i0:i1].sum() - accidental) / accidental)


# --------------------------------------------------------------------------
# coarse acquisition


def _binned_correlation(left, right, width, lag_lo, lag_hi, max_len=1 << 24):
    """Pair counts at lags ``k*width`` (k in [lag_lo, lag_hi]) from binned intensities.

    A pair with true lag ``d`` lands at ``k = floor(d/w)`` or ``k+1``, so peaks
    are spread over two neighbouring lags.
    """
    t0 = min(left[0], right[0])
    end = min(left[-1], right[-1] + lag_hi * width)
    n = int((end - t0) // width) + 1
    n = min(n, max_len)
    lb = (left - t0) // width
    rb = (right - t0) // width
    a = np.bincount(lb[lb < n], minlength=n).astype(np.float64)
    b = np.bincount(rb[(rb >= 0) & (rb < n + lag_hi)], minlength=n + lag_hi).astype(np.float64)
    # xc[m] = sum_i b[i + m - (n-1)] a[i]
    xc = signal.correlate(b, a, mode="full", method="fft")
    lags = np.arange(xc.shape[0]) - (n - 1)
    sel = (lags >= lag_lo) & (lags <= lag_hi)
    return lags[sel], np.rint(xc[sel])


def _tier_histogram(left, right, auto, center, half, width, use_numba):
    nb = int(np.ceil(2 * half / width)) + 1
    start = int(round(center - nb * width / 2))
    s16, w16 = start * SUBPS, _sub(width, "bin width")
    if auto:
        counts = _kernels.auto_counts(left, s16, w16, nb, use_numba=use_numba)
    else:
        counts = _kernels.pair_counts(left, right, s16, w16, nb, use_numba=use_numba)
    centers = start + width * (np.arange(nb) + 0.5)
    return centers, counts


def coarse_acquire(left, right=None, search_half_range=1_000_000_000, coarse_bin=1_000,
                   center=0, tiers=COARSE_TIERS, significance=5.0, use_numba=None):
    """Locate the dominant correlation lag, to within about ``coarse_bin`` ps.

    The lag range ``center +- search_half_range`` is scanned with the coarsest
    useful tier (binned FFT correlation when the direct pair count would be
    large), then each finer tier re-histograms a few coarse bins around the
    maximum.  ``right=None`` searches the auto-correlation of ``left`` at
    positive lags.  Raises :class:`NoPeakError` when the coarse maximum is not
    ``significance`` Poisson sigmas above the mean bin.
    """
    auto = right is None
    left = check_sorted(left, "left")
    right = left if auto else check_sorted(right, "right")
    if left.size == 0 or right.size == 0:
        raise NoPeakError("empty stream")
    half = int(search_half_range)
    ladder = [w for w in tiers if w > coarse_bin and 2 * half / w >= 8] + [coarse_bin]

    w0 = ladder[0]
    span = _span(left, right)
    est_pairs = left.size * right.size * (2.0 * half) / span
    if est_pairs > 2e7 and w0 == int(w0) and span / w0 < 1 << 24:
        w0 = int(w0)
        lag_lo = int(np.floor((center - half) / w0))
        lag_hi = int(np.ceil((center + half) / w0))
        lags, counts = _binned_correlation(left, right, w0, lag_lo, lag_hi)
        centers = lags * float(w0)
        if auto:
            keep = lags > 0
            centers, counts = centers[keep], counts[keep]
    else:
        centers, counts = _tier_histogram(left, right, auto, center, half, w0, use_numba)
        if auto:
            keep = centers - w0 / 2 > 0
            centers, counts = centers[keep], counts[keep]
    if counts.size == 0:
        raise NoPeakError("empty search range")
    k = int(np.argmax(counts))
    mean = float(np.mean(counts))
    if counts[k] - mean < significance * np.sqrt(max(mean, 1.0)):
        raise NoPeakError(
            f"no lag within {center} +- {half} ps exceeds the background by {significance} sigma")
    best = float(centers[k])
    prev = w0
    for w in ladder[1:]:
        centers, counts = _tier_histogram(left, right, auto, best, 2 * prev, w, use_numba)
        best = float(centers[int(np.argmax(counts))])
        prev = w
    return int(round(best))
