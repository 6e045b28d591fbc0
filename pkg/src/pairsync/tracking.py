"""Windowed offset tracking over streamed timestamp data.

Tracking runs in two stages.  :class:`OffsetTracker` consumes Alice's and
Bob's streams chunk by chunk and keeps, for every single-trip window, a
cross-correlation histogram around the single-trip peak and a piece of the
auto-correlation histogram around the round-trip peak (the round-trip
histogram of a longer window is the sum of its pieces).  Only these small
histograms are retained, so arbitrarily long runs fit in memory.
:func:`analyze_windows` then builds the peak templates and fits every window.

Windows are laid out on Alice's local time axis.  Data may be split into
segments (for example at fiber swaps); each segment restarts its window grid
and acquires its peaks afresh.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .correlation import (DEFAULT_BIN_WIDTH, DEFAULT_HALF_WINDOW, CorrelationHistogram,
                          NoPeakError, check_sorted, coarse_acquire, cross_histogram,
                          infer_lag_step, normalize)
from .estimation import (FitError, OffsetSeries, _box, _significant_peak, build_template, fit_peak,
                         offset_from_peaks, stacked_template, sum_histograms)

PS_PER_S = 10**12


@dataclass
class WindowRecord:
    segment: int
    index: int              # window number within its segment
    start: int              # Alice local time, ps
    end: int
    cross: CorrelationHistogram | None = None
    auto: CorrelationHistogram | None = None
    note: str = ""


@dataclass
class WindowHistograms:
    window: float           # s
    bin_width: float
    segments: list          # (start_ps, end_ps) local
    records: list = field(default_factory=list)

    def by_segment(self, k):
        return [r for r in self.records if r.segment == k]


class _Buffer:
    """Append-only sorted event buffer that can discard its head."""

    def __init__(self):
        self.parts = []
        self.data = np.zeros(0, dtype=np.int64)
        self.horizon = None

    def push(self, x):
        x = check_sorted(x)
        if x.size == 0:
            return
        if self.horizon is not None and x[0] < self.horizon:
            raise ValueError("chunks must continue the stream in time order")
        self.parts.append(x)
        self.horizon = int(x[-1])

    def array(self):
        if self.parts:
            self.data = np.concatenate([self.data] + self.parts)
            self.parts = []
        return self.data

    def range(self, lo, hi):
        a = self.array()
        i0, i1 = np.searchsorted(a, [lo, hi], side="left")
        return a[i0:i1]

    def drop_before(self, t):
        a = self.array()
        self.data = a[np.searchsorted(a, t, side="left"):]


def _grid_start(center, half, bw):
    """Histogram range ``[lo, lo + 2*half)`` with ``lo`` on the global bin grid."""
    k = math.floor((center - half) / bw + 0.5)
    return k * bw


class OffsetTracker:
    """Stream two timestamp sequences into per-window peak histograms.

    ``round_trip_prior`` is the approximately known round-trip lag (ps); the
    round-trip peak is searched within ``+- prior_half_range`` of it, because
    its low contrast makes a blind search over milliseconds hopeless with
    seconds of data.  Without a prior the auto-correlation is searched blind
    over ``search_half_range``.  The single-trip peak is always searched blind
    over ``single_center +- search_half_range``.

    ``segments`` lists ``(start_ps, end_ps)`` in Alice's local time; by default
    one segment starts at Alice's first event.
    """

    def __init__(self, window=3.0, bin_width=DEFAULT_BIN_WIDTH, half_window=DEFAULT_HALF_WINDOW,
                 round_trip_prior=None, prior_half_range=1_000_000, single_center=0,
                 search_half_range=1_000_000_000, segments=None, recenter_threshold=4_000,
                 max_pending=64, use_numba=None):
        self.window_ps = int(round(window * PS_PER_S))
        if self.window_ps <= 0:
            raise ValueError("window must be positive")
        self.bw = float(bin_width)
        self.half = int(half_window)
        self.prior = round_trip_prior
        self.prior_half = int(prior_half_range)
        self.single_center = int(single_center)
        self.search_half = int(search_half_range)
        self.recenter = recenter_threshold
        self.max_pending = max_pending
        self.use_numba = use_numba
        self.lag_step = None
        self.segments = None if segments is None else [(int(a), int(b)) for a, b in segments]
        self.alice = _Buffer()
        self.bob = _Buffer()
        self.result = WindowHistograms(window, self.bw, [])
        self._seg = 0
        self._w = 0
        self._done = False
        self._reset_segment()

    # -- state ---------------------------------------------------------------

    def _reset_segment(self):
        self.center_ab = None
        self.misses_ab = 0
        if self.prior is not None:
            self.prior_aa = int(self.prior)
        self.center_aa = None
        self.pending = []           # records whose auto piece is still wide
        self.auto_since = []        # auto pieces since last recentre check

    def _segment_bounds(self):
        if self.segments is None:
            if self.alice.horizon is None:
                return None
            if not self.result.segments:
                start = int(self.alice.array()[0])
                self.result.segments.append((start, None))
            return self.result.segments[0][0], None
        if self._seg >= len(self.segments):
            return None
        if len(self.result.segments) <= self._seg:
            self.result.segments.append(self.segments[self._seg])
        return self.segments[self._seg]

    def _lag_reach(self):
        """Largest lags (single, round) a window needs beyond its end."""
        if self.center_ab is None:
            ab = self.single_center + self.search_half
        else:
            ab = self.center_ab + self.half
        if self.center_aa is not None:
            aa = self.center_aa + self.half
        elif self.prior is not None:
            aa = self.prior_aa + self.prior_half
        else:
            aa = self.search_half
        return ab, aa

    # -- public API ----------------------------------------------------------

    def feed(self, alice, bob):
        if self._done:
            raise RuntimeError("tracker already finished")
        self.alice.push(alice)
        self.bob.push(bob)
        self._process(final=False)

    def finish(self):
        self._process(final=True)
        self._done = True
        for rec in self.pending:
            rec.note = rec.note or "round-trip peak not acquired"
        self.pending = []
        return self.result

    # -- window loop ---------------------------------------------------------

    def _process(self, final):
        while True:
            bounds = self._segment_bounds()
            if bounds is None:
                return
            s0, s1 = bounds
            ws = s0 + self._w * self.window_ps
            we = ws + self.window_ps
            if s1 is not None and we > s1:
                self._next_segment()
                continue
            if self.alice.horizon is None or self.bob.horizon is None:
                return
            ab, aa = self._lag_reach()
            ready = self.alice.horizon >= we + max(aa, 0) and self.bob.horizon >= we + max(ab, 0)
            if not ready:
                # at the end of the data a window may stop just short of its edge
                if not final or self.alice.horizon < we - self.window_ps // 100:
                    if final:
                        self._abandon_pending()
                    return
            self._window(ws, we)
            self._w += 1
            self._trim(we)

    def _next_segment(self):
        self._abandon_pending()
        self._seg += 1
        self._w = 0
        last_aa = self.center_aa
        self._reset_segment()
        if last_aa is not None:
            self.prior_aa = int(last_aa)

    def _abandon_pending(self):
        for rec in self.pending:
            rec.note = rec.note or "round-trip peak not acquired"
        self.pending = []

    def _trim(self, t):
        ab_lo = self.single_center - self.search_half if self.center_ab is None \
            else self.center_ab - self.half
        self.alice.drop_before(t)
        self.bob.drop_before(t + min(ab_lo, 0))

    def _window(self, ws, we):
        rec = WindowRecord(self._seg, self._w, ws, we)
        self.result.records.append(rec)
        left = self.alice.range(ws, we)
        if self.lag_step is None:
            self.lag_step = infer_lag_step(left, self.bob.range(ws, we))
        self._single(rec, left, ws, we)
        self._round(rec, left, ws, we)

    def _hist(self, left, source, ws, we, center, half, kind):
        lo = _grid_start(center, half, self.bw)
        hi = lo + 2 * half
        r0 = ws + math.floor(lo)
        r1 = we + math.ceil(hi)
        right = source.range(r0, r1)
        h = cross_histogram(left, right, lo, hi, self.bw, duration=r1 - r0,
                            lag_step=self.lag_step, use_numba=self.use_numba)
        h.kind = kind
        return h

    def _single(self, rec, left, ws, we):
        if self.center_ab is None:
            c0, h = self.single_center, self.search_half
            try:
                est = coarse_acquire(left, self.bob.range(ws + c0 - h, we + c0 + h), h, 1_000,
                                     center=c0, use_numba=self.use_numba)
            except NoPeakError as e:
                rec.note = f"single-trip acquisition failed: {e}"
                return
            self.center_ab = est
        rec.cross = self._hist(left, self.bob, ws, we, self.center_ab, self.half, "cross")
        try:
            k = _significant_peak(normalize(rec.cross), 5.0)
        except (NoPeakError, ValueError):
            self.misses_ab += 1
            if self.misses_ab >= 2:
                self.center_ab = None
            return
        self.misses_ab = 0
        peak = rec.cross.centers[k]
        if abs(peak - self.center_ab) > self.recenter:
            self.center_ab = int(round(peak))

    def _round(self, rec, left, ws, we):
        if self.center_aa is not None:
            rec.auto = self._hist(left, self.alice, ws, we, self.center_aa, self.half, "auto")
            self._check_auto_drift(rec.auto)
            return
        if self.prior is None:
            try:
                est = coarse_acquire(left, None, self.search_half, 1_000, use_numba=self.use_numba)
            except NoPeakError as e:
                rec.note = rec.note or f"round-trip acquisition failed: {e}"
                return
            self.center_aa = est
            rec.auto = self._hist(left, self.alice, ws, we, est, self.half, "auto")
            return
        # wide search around the prior, accumulated until the peak is significant
        rec.auto = self._hist(left, self.alice, ws, we, self.prior_aa, self.prior_half, "auto")
        self.pending.append(rec)
        total = sum_histograms(r.auto for r in self.pending)
        center = _locate_wide(total)
        if center is None:
            if len(self.pending) >= self.max_pending:
                warnings.warn("round-trip peak not found near the prior", RuntimeWarning)
                self._abandon_pending()
            return
        self.center_aa = center
        lo = _grid_start(center, self.half, self.bw)
        for r in self.pending:
            r.auto = _slice(r.auto, lo, lo + 2 * self.half)
        self.pending = []

    def _check_auto_drift(self, piece):
        self.auto_since.append(piece)
        total = sum_histograms(self.auto_since)
        try:
            k = _significant_peak(normalize(total), 8.0)
        except (NoPeakError, ValueError):
            return
        peak = total.centers[k]
        if abs(peak - self.center_aa) > self.recenter:
            self.center_aa = int(round(peak))
            self.auto_since = []


def _slice(h, lo, hi):
    i0 = int(round((lo - h.tau_start) / h.bin_width))
    i1 = int(round((hi - h.tau_start) / h.bin_width))
    if i0 < 0 or i1 > h.nbins:
        raise ValueError("slice outside histogram")
    return CorrelationHistogram(lo, h.bin_width, h.counts[i0:i1].copy(), h.n_left, h.n_right,
                                h.duration, h.kind, h.lag_step)


def _locate_wide(total, coarse=16, significance=5.0):
    """Peak of a wide histogram if significant after rebinning by ``coarse`` bins."""
    n = (total.nbins // coarse) * coarse
    if n == 0:
        return None
    c = total.counts[:n].reshape(-1, coarse).sum(axis=1)
    try:
        bg = total.background() * coarse
    except ValueError:
        return None
    if bg <= 0:
        return None
    k = int(np.argmax(c))
    if c[k] - bg < significance * math.sqrt(bg):
        return None
    # refine on the fine grid within the coarse bin and its neighbours
    i0 = max(0, (k - 1) * coarse)
    i1 = min(total.nbins, (k + 2) * coarse)
    fine = _box(total.counts[i0:i1].astype(np.float64), 5)
    j = i0 + int(np.argmax(fine))
    return int(round(total.centers[j]))


# --------------------------------------------------------------------------
# fitting stage


@dataclass
class TrackResult:
    series: OffsetSeries
    templates: tuple        # (single-trip, round-trip)
    cross_fits: list        # (WindowRecord, PeakEstimate | None)
    round_fits: list        # (segment, round index, start, end, hist, PeakEstimate | None)


def template_windows(wh, template_duration=100.0):
    """Number of leading windows that make up the template period."""
    return max(1, int(math.ceil(template_duration * PS_PER_S / round(wh.window * PS_PER_S) - 1e-9)))


def build_templates(wh, template_duration=100.0, **kwargs):
    """Single- and round-trip templates from the first ``template_duration`` s of data."""
    n = template_windows(wh, template_duration)
    recs = [r for r in wh.records if r.segment == wh.records[0].segment][:n] if wh.records else []
    cross = [r.cross for r in recs if r.cross is not None]
    auto = [r.auto for r in recs if r.auto is not None]
    if not cross or not auto:
        raise NoPeakError("no acquired peaks in the template period")
    t_ab = stacked_template(cross, **kwargs)
    total = sum_histograms(auto)
    t_aa = build_template(normalize(total), **kwargs)
    return t_ab, t_aa


def analyze_windows(wh, window_round=90.0, templates=None, template_duration=100.0):
    """Fit every window and pair each single-trip peak with its round-trip window.

    Without given ``templates`` they are built from the first
    ``template_duration`` seconds, and only the data after that period is
    fitted; the round-trip window grid of the first segment starts there.
    """
    ratio = window_round / wh.window
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-9:
        raise ValueError("window_round must be an integer multiple of the single-trip window")
    skip = 0
    if templates is None:
        templates = build_templates(wh, template_duration)
        skip = template_windows(wh, template_duration)
    t_ab, t_aa = templates
    cols = {k: [] for k in ("t", "d", "e", "ab", "abe", "aa", "aae", "ri", "seg")}
    gaps = []
    cross_fits, round_fits = [], []
    round_index = 0
    segs = sorted({rec.segment for rec in wh.records})
    for k in segs:
        recs = wh.by_segment(k)
        first = skip if k == segs[0] else 0
        groups = {}
        for rec in recs:
            if rec.index >= first:
                groups.setdefault((rec.index - first) // r, []).append(rec)
        for g in sorted(groups):
            members = groups[g]
            # a round-trip window must be complete
            pieces = [m.auto for m in members if m.auto is not None]
            aa = None
            hist = None
            if len(members) == r and len(pieces) == r:
                try:
                    hist = sum_histograms(pieces)
                    aa = fit_peak(normalize(hist), t_aa)
                except (FitError, NoPeakError, ValueError) as e:
                    gaps.append((members[0].start, members[-1].end, f"round-trip fit: {e}"))
            else:
                gaps.append((members[0].start, members[-1].end, "incomplete round-trip window"))
            round_fits.append((k, round_index, members[0].start, members[-1].end, hist, aa))
            for m in members:
                est = None
                if m.cross is not None:
                    try:
                        est = fit_peak(normalize(m.cross), t_ab)
                    except (FitError, NoPeakError, ValueError) as e:
                        gaps.append((m.start, m.end, f"single-trip fit: {e}"))
                elif m.note:
                    gaps.append((m.start, m.end, m.note))
                cross_fits.append((m, est))
                if est is None or aa is None:
                    continue
                d, de = offset_from_peaks(est, aa)
                for key, v in zip(cols, ((m.start + m.end) // 2, d, de, est.position,
                                         est.position_err, aa.position, aa.position_err,
                                         round_index, k)):
                    cols[key].append(v)
            round_index += 1
    f = np.asarray
    series = OffsetSeries(f(cols["t"], dtype=np.int64), f(cols["d"], dtype=float),
                          f(cols["e"], dtype=float), f(cols["ab"], dtype=float),
                          f(cols["abe"], dtype=float), f(cols["aa"], dtype=float),
                          f(cols["aae"], dtype=float), f(cols["ri"], dtype=np.int64),
                          f(cols["seg"], dtype=np.int64), wh.window, window_round, gaps)
    _check_stationarity(series, t_ab)
    return TrackResult(series, templates, cross_fits, round_fits)


def _check_stationarity(series, template):
    if len(series) < 2:
        return
    same = np.diff(series.segment) == 0
    step = np.abs(np.diff(series.tau_ab))[same]
    if step.size and step.max() > template.fwhm:
        warnings.warn("single-trip peak moves by more than its FWHM between windows; "
                      "windows are too long for the clock drift", RuntimeWarning)


def track_offsets(alice, bob, window_single=3.0, window_round=90.0, templates=None,
                  template_duration=100.0, **tracker_kwargs):
    """Offset series from two complete timestamp streams (see :class:`OffsetTracker`)."""
    tracker = OffsetTracker(window_single, **tracker_kwargs)
    tracker.feed(alice, bob)
    wh = tracker.finish()
    return analyze_windows(wh, window_round, templates, template_duration).series
