"""Full pipeline: simulate a scenario, track offsets, fit, and report.

:func:`run_scenario` streams the simulation chunk by chunk into an
:class:`~pairsync.tracking.OffsetTracker`, so memory stays bounded for long
runs, then fits every window and writes a report bundle.  The summary JSON is
a pure function of the scenario and seed (no timings, sorted keys), so two runs
give byte-identical files.
"""
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__, io
from .correlation import NoPeakError, normalize
from .estimation import (FitError, fit_drift, fit_peak, min_resolvable_separation,
                         offset_from_peaks, stability, sum_histograms)
from .photonsim import SimTruth, _segments_bounds, iter_chunks
from .timebase import PS_PER_S, clock_read
from .tracking import OffsetTracker, analyze_windows, build_templates, template_windows

log = logging.getLogger(__name__)

# local segment bounds are rounded to this grid so window grids line up
BOUND_GRID = 1_000_000_000


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class _TagCounts:
    """Stands in for a per-event truth record when only tag totals are kept."""

    def __init__(self, totals):
        self.totals = totals

    def counts(self):
        return dict(self.totals)


@dataclass
class RunResult:
    summary: dict
    track: object           # TrackResult
    drift: object           # DriftFit | None
    stability: object       # StabilityReport | None
    windows: object         # WindowHistograms
    truth: SimTruth
    files: list


# --------------------------------------------------------------------------
# simulation and tracking


def local_bounds(scenario):
    """Segment bounds on Alice's clock (ps), rounded to ``BOUND_GRID``."""
    out = []
    for a, b, _ in _segments_bounds(scenario.sim_segments()):
        la, lb = (clock_read(scenario.clock_alice, int(x)) for x in (a, b))
        out.append((int(round(la / BOUND_GRID)) * BOUND_GRID,
                    int(round(lb / BOUND_GRID)) * BOUND_GRID))
    return out


def _tracker(scenario, window=None, segments=None):
    a = scenario.analysis
    return OffsetTracker(
        a["window_single"] if window is None else window, bin_width=a["bin_width"],
        half_window=a["half_window"], round_trip_prior=scenario.round_trip_prior(),
        prior_half_range=a["prior_half_range"], search_half_range=a["search_half_range"],
        segments=local_bounds(scenario) if segments is None else segments)


class _TimestampSink:
    """Writes Alice's and Bob's streams (all, or only the first window) to files."""

    def __init__(self, out_dir, scenario):
        self.mode = scenario.analysis["timestamps"]
        self.limit = None
        if self.mode == "first":
            self.limit = int(round(scenario.analysis["window_single"] * PS_PER_S))
        self.clocks = (scenario.clock_alice, scenario.clock_bob)
        self.paths = (Path(out_dir) / "alice.pts", Path(out_dir) / "bob.pts")
        self.writers = [None, None]
        self.files = []

    def add(self, chunk):
        if self.mode == "none":
            return
        if self.limit is not None and chunk.true_start >= self.limit:
            return
        for i, t in enumerate((chunk.alice, chunk.bob)):
            if t.size == 0:
                continue
            if self.writers[i] is None:
                self.writers[i] = io.TimestampWriter(self.paths[i], i, self.clocks[i].resolution)
                self.files.append(self.paths[i].name)
            self.writers[i].write(t)

    def close(self):
        for w in self.writers:
            if w is not None:
                w.close()


def simulate_and_track(scenario, tracker, sink=None, duration=None):
    """Stream the scenario simulation into ``tracker``; returns (WindowHistograms, SimTruth)."""
    segs = scenario.sim_segments()
    if duration is not None:
        segs = _truncate(segs, duration)
    al, ar, b = scenario.detectors
    counts = {"alice": {}, "bob": {}}
    chunks = iter_chunks(scenario.pair_rate, segs, al, ar, b, scenario.clock_alice,
                         scenario.clock_bob, scenario.seed, scenario.analysis["chunk"],
                         detail=False)
    while True:
        try:
            c = next(chunks)
        except StopIteration:
            break
        except Exception as e:
            raise StageError("simulate", e) from e
        for side, tr in (("alice", c.alice_truth), ("bob", c.bob_truth)):
            for k, v in tr.counts().items():
                counts[side][k] = counts[side].get(k, 0) + v
        if sink is not None:
            sink.add(c)
        try:
            tracker.feed(c.alice, c.bob)
        except Exception as e:
            raise StageError("track", e) from e
    try:
        wh = tracker.finish()
    except Exception as e:
        raise StageError("track", e) from e
    return wh, SimTruth(scenario.clock_alice, scenario.clock_bob, _segments_bounds(segs),
                        _TagCounts(counts["alice"]), _TagCounts(counts["bob"]), scenario.pair_rate)


def _truncate(segs, duration):
    out, left = [], float(duration)
    for d, ch in segs:
        if left <= 0:
            break
        out.append((min(d, left), ch))
        left -= d
    return out


# --------------------------------------------------------------------------
# statistics


def _pooled_std(groups, ddof_per_group):
    ss, dof = 0.0, 0
    for r in groups:
        ss += float(np.sum(r * r))
        dof += max(r.size - ddof_per_group, 0)
    return math.sqrt(ss / dof) if dof > 0 else float("nan")


def _detrended(t, y):
    if y.size < 3:
        return y - y.mean()
    c = np.polyfit(t - t.mean(), y, 1)
    return y - np.polyval(c, t - t.mean())


def _segment_stats(series, k):
    s = series.select(series.segment == k)
    n = len(s)
    out = {"segment": int(k), "n_samples": n}
    if n == 0:
        return out, s
    rounds = np.unique(s.round_index)
    means = np.array([s.delta[s.round_index == r].mean() for r in rounds])
    # propagated: own tau_ab errors, and each window's shared tau_aa error
    var = float(np.sum(s.tau_ab_err ** 2)) / n ** 2
    for r in rounds:
        m = s.round_index == r
        var += (np.count_nonzero(m) / n * s.tau_aa_err[m][0] / 2.0) ** 2
    se_prop = math.sqrt(var)
    se_block = float(np.std(means, ddof=1) / math.sqrt(means.size)) if means.size > 1 else 0.0
    out.update({
        "n_round_windows": int(rounds.size),
        "delta_mean_ps": float(s.delta.mean()),
        "delta_mean_err_ps": max(se_prop, se_block),
        "delta_mean_err_propagated_ps": se_prop,
        "delta_mean_err_blocks_ps": se_block,
        "delta_std_ps": float(np.std(s.delta, ddof=1)) if n > 1 else float("nan"),
        "delta_err_median_ps": float(np.median(s.delta_err)),
        "tau_ab_mean_ps": float(s.tau_ab.mean()),
        "tau_aa_mean_ps": float(np.mean(s.tau_aa[np.unique(s.round_index, return_index=True)[1]])),
    })
    return out, s


def _consistency(stats):
    """Segment means against their weighted common value."""
    use = [s for s in stats if s.get("n_samples", 0) > 0 and s["delta_mean_err_ps"] > 0]
    if len(use) < 2:
        return None
    m = np.array([s["delta_mean_ps"] for s in use])
    e = np.array([s["delta_mean_err_ps"] for s in use])
    w = 1.0 / e ** 2
    common = float(np.sum(w * m) / np.sum(w))
    common_err = float(1.0 / math.sqrt(np.sum(w)))
    z = (m - common) / np.sqrt(np.maximum(e ** 2 - common_err ** 2, 1e-300))
    pairs = []
    for i in range(len(use)):
        for j in range(i + 1, len(use)):
            d = m[j] - m[i]
            pairs.append({"segments": [use[i]["segment"], use[j]["segment"]], "diff_ps": float(d),
                          "diff_err_ps": float(math.hypot(e[i], e[j]))})
    return {"common_delta_ps": common, "common_delta_err_ps": common_err,
            "z_scores": z.tolist(), "max_abs_z": float(np.max(np.abs(z))),
            "chi2": float(np.sum(((m - common) / e) ** 2)), "dof": len(use) - 1,
            "within_3sigma": bool(np.all(np.abs(z) <= 3.0)), "pairwise": pairs}


def _suppression(stats, scenario):
    """|mean offset shift| per unit of one-way delay change, against segment 0."""
    if len(stats) < 2 or stats[0].get("n_samples", 0) == 0:
        return None
    ch0 = scenario.segments[0].channel
    rows = []
    for st, seg in zip(stats[1:], scenario.segments[1:]):
        if st.get("n_samples", 0) == 0:
            continue
        ch = seg.channel
        change = ((ch.delay_ab - ch0.delay_ab) + (ch.delay_ba - ch0.delay_ba)) / 2.0
        shift = st["delta_mean_ps"] - stats[0]["delta_mean_ps"]
        err = math.hypot(st["delta_mean_err_ps"], stats[0]["delta_mean_err_ps"])
        row = {"segment": st["segment"], "one_way_delay_change_ps": change, "shift_ps": shift,
               "shift_err_ps": err}
        if change != 0:
            row["factor"] = abs(shift) / abs(change)
            row["factor_err"] = err / abs(change)
        rows.append(row)
    rated = [r for r in rows if "factor" in r]
    if not rated:
        return {"per_segment": rows}
    top = max(rated, key=lambda r: abs(r["one_way_delay_change_ps"]))
    return {"factor": top["factor"], "factor_err": top["factor_err"],
            "reference_segment": 0, "segment": top["segment"], "per_segment": rows}


def _swaps(series, drift, scenario):
    """Jumps of tau_ab, tau_aa and of the drift residual across segment boundaries."""
    if drift is None:
        return []
    resid = drift.residuals
    model = drift.model(series.t_seconds)
    fm = drift.fm_noise
    out = []
    for k in range(len(scenario.segments) - 1):
        a = np.flatnonzero(series.segment == k)
        b = np.flatnonzero(series.segment == k + 1)
        if a.size == 0 or b.size == 0:
            continue
        i, j = a[-1], b[0]
        dt = (series.t_mid[j] - series.t_mid[i]) / PS_PER_S
        c0, c1 = scenario.segments[k].channel, scenario.segments[k + 1].channel
        ab = (series.tau_ab[j] - model[j]) - (series.tau_ab[i] - model[i])
        aa = series.tau_aa[j] - series.tau_aa[i]
        step = resid[j] - resid[i]
        sig = math.sqrt(series.delta_err[i] ** 2 + series.delta_err[j] ** 2 + fm * dt)
        out.append({
            "boundary": [k, k + 1], "gap_s": float(dt),
            "configured_ab_change_ps": int(c1.delay_ab - c0.delay_ab),
            "configured_round_trip_change_ps": int(c1.delay_ab + c1.delay_ba
                                                   - c0.delay_ab - c0.delay_ba),
            "tau_ab_jump_ps": float(ab),
            "tau_ab_jump_err_ps": float(math.sqrt(series.tau_ab_err[i] ** 2
                                                  + series.tau_ab_err[j] ** 2 + fm * dt)),
            "tau_aa_jump_ps": float(aa),
            "tau_aa_jump_err_ps": float(math.hypot(series.tau_aa_err[i], series.tau_aa_err[j])),
            "delta_step_ps": float(step), "delta_step_err_ps": sig,
            "delta_step_sigma": float(abs(step) / sig) if sig > 0 else float("nan"),
        })
    return out


def _precision(series, k_segments):
    ab, aa, dl = [], [], []
    for k in k_segments:
        s = series.select(series.segment == k)
        if len(s) == 0:
            continue
        t = s.t_seconds
        ab.append(_detrended(t, s.tau_ab))
        dl.append(_detrended(t, s.delta))
        first = np.unique(s.round_index, return_index=True)[1]
        v = s.tau_aa[first]
        aa.append(v - v.mean())
    med = (lambda x: float(np.median(x)) if x.size else float("nan"))
    first_all = np.unique(series.round_index, return_index=True)[1]
    offset_spread = _pooled_std(dl, 2)
    return {
        "definition": "pooled within-segment standard deviation; tau_ab and delta about a "
                      "per-segment linear trend, tau_aa about the segment mean",
        "single_trip": {"window_s": series.window_single, "spread_ps": _pooled_std(ab, 2),
                        "median_err_ps": med(series.tau_ab_err)},
        "round_trip": {"window_s": series.window_round, "spread_ps": _pooled_std(aa, 1),
                       "median_err_ps": med(series.tau_aa_err[first_all])},
        "offset": {"window_s": series.window_single, "spread_ps": offset_spread,
                   "median_err_ps": med(series.delta_err)},
    }


def _median_car(values):
    v = np.array([x for x in values if x is not None and np.isfinite(x)])
    return float(np.median(v)) if v.size else float("nan")


def default_taus(cadence, span):
    """Octaves of the cadence up to a quarter of the span, plus 100 s when it fits."""
    taus, m = [], 1
    while m * cadence <= span / 4.0:
        taus.append(m * cadence)
        m *= 2
    if 100.0 <= span / 4.0:
        taus.append(100.0)
    return sorted(set(taus))


# --------------------------------------------------------------------------
# report


def _write_hist(out, name, hist, files):
    if hist is None:
        return
    io.write_histogram_csv(out / name, hist)
    files.append(name)


def run_scenario(scenario, out_dir=None, write=True):
    """Simulate and analyse ``scenario``; write the report bundle into ``out_dir``.

    Bundle files: ``summary.json``; ``offsets.csv`` (one row per offset
    sample); ``windows.csv`` (every single-trip window fit); ``drift.json`` and
    ``residuals.csv``; ``stability.json`` and ``stability.csv``;
    ``templates.json``; raw and normalized histograms of the first window of
    each segment (``hist_seg<k>_single.csv`` and, for the first complete
    round-trip window, ``hist_seg<k>_round.csv``); and the timestamp files
    ``alice.pts`` and ``bob.pts`` per the scenario's ``timestamps`` policy.
    """
    out = None
    if write:
        if out_dir is None:
            raise ValueError("out_dir is required when writing a report")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    a = scenario.analysis
    sink = _TimestampSink(out, scenario) if write else None
    tracker = _tracker(scenario)
    try:
        wh, truth = simulate_and_track(scenario, tracker, sink)
    finally:
        if sink is not None:
            sink.close()
    files = list(sink.files) if sink is not None else []

    try:
        res = analyze_windows(wh, a["window_round"], None, a["template_duration"])
    except Exception as e:
        raise StageError("fit", e) from e
    series = res.series
    t_ab, t_aa = res.templates

    drift = None
    drift_note = ""
    try:
        drift = fit_drift(series)
    except ValueError as e:
        drift_note = str(e)
    except Exception as e:
        raise StageError("drift", e) from e

    stab = None
    stab_note = ""
    if drift is not None:
        span = float(np.ptp(series.t_seconds))
        taus = a["stability_taus"] or default_taus(series.window_single, span)
        try:
            stab = stability(series.t_mid, drift.residuals, taus)
        except ValueError as e:
            stab_note = str(e)
        except Exception as e:
            raise StageError("stability", e) from e

    nseg = len(scenario.segments)
    stats = []
    for k in range(nseg):
        st, _ = _segment_stats(series, k)
        seg = scenario.segments[k]
        st.update({"label": seg.label, "duration_s": seg.duration,
                   "delay_ab_ps": int(seg.channel.delay_ab),
                   "delay_ba_ps": int(seg.channel.delay_ba)})
        stats.append(st)

    tpl_err = math.sqrt(t_ab.center_err ** 2 + (t_aa.center_err / 2.0) ** 2)
    overall = {"n_samples": len(series)}
    if len(series):
        whole, _ = _segment_stats(series.select(np.ones(len(series), bool)), 0)
        stat_err = whole["delta_mean_err_ps"]
        overall.update({
            "delta_mean_ps": whole["delta_mean_ps"],
            "delta_mean_err_statistical_ps": stat_err,
            "template_center_err_ps": tpl_err,
            "delta_mean_err_ps": math.hypot(stat_err, tpl_err),
            "delta_std_ps": whole["delta_std_ps"],
        })

    precision = _precision(series, range(nseg)) if len(series) else None
    if precision is not None:
        sep = precision["offset"]["spread_ps"]
        precision["min_resolvable_separation_mm"] = (
            min_resolvable_separation(sep, a["group_index"]) * 1e3 if np.isfinite(sep) else None)
        precision["group_index"] = a["group_index"]

    cars = {
        "window_fwhm": 1.0,
        "single_trip_median": _median_car(e.car for _, e in res.cross_fits if e is not None),
        "round_trip_median": _median_car(f[5].car for f in res.round_fits if f[5] is not None),
    }

    gaps = [{"start_ps": int(g[0]), "end_ps": int(g[1]), "reason": g[2]} for g in series.gaps]
    summary = {
        "software": {"name": "pairsync", "version": __version__},
        "scenario": scenario.to_dict(),
        "simulation": {
            "pair_rate_per_s": scenario.pair_rate,
            "duration_s": scenario.duration,
            "event_counts": {"alice": truth.alice.counts(), "bob": truth.bob.counts()},
            "local_segment_bounds_ps": [list(b) for b in wh.segments],
        },
        "templates": {"single_trip": _tpl_summary(t_ab), "round_trip": _tpl_summary(t_aa),
                      "template_windows": template_windows(wh, a["template_duration"])},
        "offset": overall,
        "segments": stats,
        "segment_consistency": _consistency(stats),
        "suppression": _suppression(stats, scenario),
        "swaps": _swaps(series, drift, scenario),
        "car": cars,
        "precision": precision,
        "drift_fit": drift.to_dict() if drift is not None else {"error": drift_note},
        "stability": stab.to_dict() if stab is not None else {"error": stab_note},
        "gaps": {"count": len(gaps), "list": gaps},
        "truth": truth.to_dict(),
    }
    if stab is not None and stab.taus.size:
        tau, adev, tdev = stab.at(100.0)
        summary["stability"]["near_100s"] = {"tau_s": tau, "adev": adev, "tdev_ps": tdev}

    if write:
        try:
            _write_bundle(out, summary, res, wh, drift, stab, files)
        except OSError as e:
            raise StageError("report", e) from e
    return RunResult(summary, res, drift, stab, wh, truth, files)


def _tpl_summary(t):
    d = t.to_dict()
    d.pop("shape")
    return d


def _write_bundle(out, summary, res, wh, drift, stab, files):
    series = res.series
    io.write_offsets(out / "offsets.csv", series)
    files.append("offsets.csv")
    cols = {k: [] for k in ("segment", "index", "start_ps", "end_ps", "tau_ab_ps",
                            "tau_ab_err_ps", "car", "score")}
    for rec, est in res.cross_fits:
        for key, v in zip(cols, (rec.segment, rec.index, rec.start, rec.end)):
            cols[key].append(v)
        for key, v in zip(("tau_ab_ps", "tau_ab_err_ps", "car", "score"),
                          (est.position, est.position_err, est.car, est.score) if est is not None
                          else (np.nan,) * 4):
            cols[key].append(v)
    io.write_table(out / "windows.csv", {k: np.array(v, dtype=np.int64 if k in (
        "segment", "index", "start_ps", "end_ps") else np.float64) for k, v in cols.items()})
    files.append("windows.csv")
    io.write_json(out / "templates.json", {"single_trip": res.templates[0].to_dict(),
                                           "round_trip": res.templates[1].to_dict()})
    files.append("templates.json")
    if drift is not None:
        io.write_json(out / "drift.json", drift.to_dict())
        io.write_table(out / "residuals.csv", {"t_s": drift.t, "residual_ps": drift.residuals})
        files += ["drift.json", "residuals.csv"]
    if stab is not None:
        io.write_json(out / "stability.json", stab.to_dict())
        io.write_table(out / "stability.csv", {"tau_s": stab.taus, "adev": stab.adev,
                                               "tdev_ps": stab.tdev, "n_terms": stab.n_terms})
        files += ["stability.json", "stability.csv"]
    segs = sorted({r.segment for r in wh.records})
    for k in segs:
        recs = wh.by_segment(k)
        first = next((r for r in recs if r.cross is not None), None)
        _write_hist(out, f"hist_seg{k}_single.csv", first.cross if first else None, files)
        rnd = next((f[4] for f in res.round_fits if f[0] == k and f[4] is not None), None)
        _write_hist(out, f"hist_seg{k}_round.csv", rnd, files)
    summary["files"] = sorted(files + ["summary.json"])
    io.write_json(out / "summary.json", summary)


# --------------------------------------------------------------------------
# precision sweep


def _gcd_seconds(times):
    fr = [Fraction(t).limit_denominator(1000) for t in times]
    g = fr[0]
    for f in fr[1:]:
        g = Fraction(math.gcd(g.numerator * f.denominator, f.numerator * g.denominator),
                     g.denominator * f.denominator)
    return float(g)


def precision_sweep(scenario, acquisition_times=None, repeats=None, out_dir=None):
    """Spread of repeated peak positions and offsets against acquisition time.

    For every ``T_a`` the data after the template period are cut into
    ``repeats`` consecutive windows of ``T_a`` seconds; each window yields one
    single-trip position, one round-trip position and one offset.  Windows are
    assembled from base windows (``sweep.base_window``, by default the greatest
    common divisor of the times), so one tracking pass serves every ``T_a``.
    Only the first segment is used.

    Returns a list of rows, one per ``T_a``, with the standard deviations
    (``ddof=1``) and median reported errors.
    """
    sw = scenario.sweep
    times = [float(t) for t in (acquisition_times or sw["acquisition_times"])]
    repeats = int(repeats or sw["repeats"])
    if repeats < 10:
        raise ValueError("precision sweep needs at least 10 repeats per acquisition time")
    if not times or min(times) <= 0:
        raise ValueError("acquisition times must be positive")
    base = float(sw["base_window"] or _gcd_seconds(times))
    for t in times:
        r = t / base
        if abs(r - round(r)) > 1e-9:
            raise ValueError(f"acquisition time {t} s is not a multiple of the base window {base} s")
    tpl_s = scenario.analysis["template_duration"]
    seg0 = scenario.segments[0].duration
    usable = seg0 - tpl_s
    for t in times:
        if t * repeats > usable + 1e-9:
            raise ValueError(
                f"T_a = {t:g} s x {repeats} repeats exceeds the {usable:g} s available after the "
                f"{tpl_s:g} s template period of a {seg0:g} s scenario")
    n_tpl = int(math.ceil(tpl_s / base - 1e-9))
    need = n_tpl * base + max(times) * repeats + base
    duration = min(seg0, need)
    bounds = local_bounds(scenario)[:1]
    tracker = _tracker(scenario, window=base, segments=bounds)
    wh, _ = simulate_and_track(scenario, tracker, None, duration)
    try:
        t_ab, t_aa = build_templates(wh, tpl_s)
    except Exception as e:
        raise StageError("template", e) from e
    recs = wh.by_segment(0)
    skip = template_windows(wh, tpl_s)
    rows = []
    for t in sorted(times):
        n = int(round(t / base))
        ab, aa, dl, e_ab, e_aa, e_dl = [], [], [], [], [], []
        failed = 0
        for g in range(repeats):
            grp = recs[skip + g * n: skip + (g + 1) * n]
            try:
                if len(grp) < n or any(r.cross is None or r.auto is None for r in grp):
                    raise FitError("incomplete window")
                x = fit_peak(normalize(sum_histograms(r.cross for r in grp)), t_ab)
                y = fit_peak(normalize(sum_histograms(r.auto for r in grp)), t_aa)
            except (FitError, NoPeakError, ValueError):
                failed += 1
                continue
            d, de = offset_from_peaks(x, y)
            ab.append(x.position)
            aa.append(y.position)
            dl.append(d)
            e_ab.append(x.position_err)
            e_aa.append(y.position_err)
            e_dl.append(de)

        def sd(v):
            return float(np.std(v, ddof=1)) if len(v) > 1 else float("nan")

        def md(v):
            return float(np.median(v)) if v else float("nan")

        rows.append({"acquisition_time_s": t, "repeats": repeats, "fitted": len(ab),
                     "failed": failed, "single_trip_std_ps": sd(ab), "round_trip_std_ps": sd(aa),
                     "offset_std_ps": sd(dl), "single_trip_err_ps": md(e_ab),
                     "round_trip_err_ps": md(e_aa), "offset_err_ps": md(e_dl)})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        io.write_table(out / "sweep.csv", {k: [r[k] for r in rows] for k in rows[0]})
        io.write_json(out / "sweep.json", {"scenario": scenario.to_dict(), "base_window_s": base,
                                           "rows": rows})
    return rows
