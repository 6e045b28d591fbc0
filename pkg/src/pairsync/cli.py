"""Command-line interface.

Subcommands::

    pairsync simulate  SCENARIO --out DIR           timestamp files + truth.json
    pairsync correlate ALICE [BOB] --out HIST       cross (or --auto) histogram
    pairsync fit       HIST... --template HIST      peak positions as JSON
    pairsync track     ALICE BOB --out DIR          offset series per window
    pairsync stability OFFSETS.csv --out DIR        drift fit, ADEV and TDEV
    pairsync run       SCENARIO --out DIR           full pipeline report
    pairsync sweep     SCENARIO --out DIR           precision against acquisition time

``SCENARIO`` is a YAML file or the name of a bundled scenario.  Scenario
flags (``--seed``, ``--window-single`` ...) fill fields the scenario file does
not set; values in the file take precedence.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from . import scenario as sc
from .correlation import (DEFAULT_BIN_WIDTH, DEFAULT_HALF_WINDOW, NoPeakError, auto_histogram,
                          car, coarse_acquire, cross_histogram, normalize, peak_window)
from .estimation import (FitError, PeakTemplate, build_template, fit_drift, fit_peak, stability)
from .photonsim import iter_chunks
from .runner import StageError, default_taus, local_bounds, precision_sweep, run_scenario
from .timebase import PS_PER_S, polynomial_offset
from .tracking import OffsetTracker, analyze_windows

log = logging.getLogger("pairsync")

# CLI flag -> scenario field (dotted path)
SCENARIO_FLAGS = {
    "seed": "seed",
    "window_single": "analysis.window_single",
    "window_round": "analysis.window_round",
    "bin_width": "analysis.bin_width",
    "half_window": "analysis.half_window",
    "template_duration": "analysis.template_duration",
    "round_trip_prior": "analysis.round_trip_prior",
    "group_index": "analysis.group_index",
    "timestamps": "analysis.timestamps",
}


def _scenario_args(p):
    p.add_argument("scenario", help="scenario YAML file or bundled scenario name")
    g = p.add_argument_group("scenario fields (used where the file leaves them unset)")
    g.add_argument("--seed", type=int)
    g.add_argument("--window-single", type=float, help="single-trip window, s")
    g.add_argument("--window-round", type=float, help="round-trip window, s")
    g.add_argument("--bin-width", type=float, help="histogram bin width, ps")
    g.add_argument("--half-window", type=int, help="histogram half width around a peak, ps")
    g.add_argument("--template-duration", type=float, help="template period, s")
    g.add_argument("--round-trip-prior", type=int, help="approximate round-trip lag, ps")
    g.add_argument("--group-index", type=float)
    g.add_argument("--timestamps", choices=("none", "first", "all"))


def _load_scenario(args):
    import yaml

    path = Path(args.scenario)
    if path.exists():
        doc = yaml.safe_load(path.read_text())
    elif args.scenario in sc.bundled_names():
        doc = sc.bundled(args.scenario).to_dict()
    else:
        raise sc.ScenarioError(f"no scenario file or bundled scenario named {args.scenario!r}")
    flags = {path: getattr(args, key, None) for key, path in SCENARIO_FLAGS.items()}
    return sc.from_dict(sc.apply_flags(doc, flags))


def _emit(obj):
    sys.stdout.write(io.dumps(obj))


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    s = _load_scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    al, ar, b = s.detectors
    wa = io.TimestampWriter(out / "alice.pts", io.CHANNEL_ALICE, s.clock_alice.resolution,
                            args.start_time)
    wb = io.TimestampWriter(out / "bob.pts", io.CHANNEL_BOB, s.clock_bob.resolution,
                            args.start_time)
    tags = {"alice": {}, "bob": {}}
    with wa, wb:
        for c in iter_chunks(s.pair_rate, s.sim_segments(), al, ar, b, s.clock_alice, s.clock_bob,
                             s.seed, s.analysis["chunk"], detail=False):
            wa.write(c.alice)
            wb.write(c.bob)
            for side, tr in (("alice", c.alice_truth), ("bob", c.bob_truth)):
                for k, v in tr.counts().items():
                    tags[side][k] = tags[side].get(k, 0) + v
    truth = {
        "scenario": s.to_dict(),
        "pair_rate_per_s": s.pair_rate,
        "offset_polynomial": dict(zip(("aging_per_s", "freq_offset", "bias_ps"),
                                      polynomial_offset(s.clock_alice, s.clock_bob))),
        "local_segment_bounds_ps": [list(x) for x in local_bounds(s)],
        "segments": [{"label": g.label, "duration_s": g.duration,
                      "delay_ab_ps": g.channel.delay_ab, "delay_ba_ps": g.channel.delay_ba}
                     for g in s.segments],
        "event_counts": tags,
    }
    io.write_json(out / "truth.json", truth)
    _emit({"alice_events": wa.header.n_events, "bob_events": wb.header.n_events,
           "out": str(out)})
    return 0


def cmd_correlate(args):
    left, _ = io.read_timestamps(args.alice)
    if args.auto:
        right = None
    else:
        if args.bob is None:
            raise SystemExit("correlate: BOB file required unless --auto")
        right, _ = io.read_timestamps(args.bob)
    center = args.center
    if center is None:
        center = coarse_acquire(left, right, args.search, 1_000)
        log.info("acquired peak near %d ps", center)
    lo = center - args.half_window
    hi = center + args.half_window
    if args.auto:
        h = auto_histogram(left, max(lo, 0), hi, args.bin_width)
    else:
        h = cross_histogram(left, right, lo, hi, args.bin_width)
    out = Path(args.out)
    if out.suffix == ".json":
        io.write_histogram_binary(out, h)
    else:
        io.write_histogram_csv(out, h)
    info = {"kind": h.kind, "tau_start_ps": h.tau_start, "bin_width_ps": h.bin_width,
            "nbins": h.nbins, "total_counts": int(h.counts.sum()), "center_ps": center}
    try:
        nh = normalize(h)
        k = int(np.argmax(nh.excess))
        info["max_bin_ps"] = float(h.centers[k])
        if args.fwhm:
            info["car"] = car(h, peak_window(h, float(h.centers[k]), args.fwhm))
    except ValueError:
        pass
    _emit(info)
    return 0


def _template_from(args):
    if args.templates:
        d = json.loads(Path(args.templates).read_text())[args.which]
        return PeakTemplate(np.asarray(d["shape"]), d["bin_width_ps"], d["edge0_ps"], d["fwhm_ps"],
                            d["source_duration_s"], d.get("counts", 0.0), d.get("smoothed", False),
                            d.get("center_err_ps", 0.0))
    if args.template:
        return build_template(normalize(io.read_histogram(args.template)), smooth=args.smooth)
    raise SystemExit("fit: give --template HIST or --templates templates.json")


def cmd_fit(args):
    tpl = _template_from(args)
    rows = []
    for path in args.hist:
        row = {"file": str(path)}
        try:
            est = fit_peak(normalize(io.read_histogram(path)), tpl)
            row.update({"position_ps": est.position, "position_err_ps": est.position_err,
                        "amplitude": est.amplitude, "fwhm_ps": est.fwhm, "car": est.car,
                        "score": est.score})
        except (FitError, NoPeakError, ValueError) as e:
            row["error"] = str(e)
        rows.append(row)
    out = {"template": {k: v for k, v in tpl.to_dict().items() if k != "shape"}, "fits": rows}
    if args.out:
        io.write_json(args.out, out)
    _emit(out)
    return 0 if all("error" not in r for r in rows) else 1


def _feed_files(tracker, a, b, step):
    """Feed two complete streams to a tracker in slices of ``step`` ps of Alice time."""
    if a.size == 0:
        return
    t = int(a[0])
    ia = ib = 0
    while ia < a.size or ib < b.size:
        t += step
        ja = int(np.searchsorted(a, t))
        jb = int(np.searchsorted(b, t))
        tracker.feed(a[ia:ja], b[ib:jb])
        ia, ib = ja, jb


def cmd_track(args):
    a, _ = io.read_timestamps(args.alice, mmap=True)
    b, _ = io.read_timestamps(args.bob, mmap=True)
    segments = None
    if args.truth:
        segments = json.loads(Path(args.truth).read_text()).get("local_segment_bounds_ps")
    tracker = OffsetTracker(args.window_single, bin_width=args.bin_width,
                            half_window=args.half_window, round_trip_prior=args.round_trip_prior,
                            segments=segments)
    _feed_files(tracker, a, b, int(PS_PER_S))
    wh = tracker.finish()
    res = analyze_windows(wh, args.window_round, None, args.template_duration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_offsets(out / "offsets.csv", res.series)
    io.write_json(out / "templates.json", {"single_trip": res.templates[0].to_dict(),
                                           "round_trip": res.templates[1].to_dict()})
    s = res.series
    _emit({"samples": len(s), "gaps": len(s.gaps),
           "delta_mean_ps": float(s.delta.mean()) if len(s) else None,
           "delta_std_ps": float(s.delta.std(ddof=1)) if len(s) > 1 else None,
           "out": str(out)})
    return 0


def cmd_stability(args):
    series = io.read_offsets(args.offsets, args.window_single)
    fit = fit_drift(series, noise=args.noise)
    span = float(np.ptp(series.t_seconds))
    taus = args.taus or default_taus(series.window_single, span)
    rep = stability(series.t_mid, fit.residuals, taus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "drift.json", fit.to_dict())
    io.write_table(out / "residuals.csv", {"t_s": fit.t, "residual_ps": fit.residuals})
    io.write_json(out / "stability.json", rep.to_dict())
    io.write_table(out / "stability.csv", {"tau_s": rep.taus, "adev": rep.adev,
                                           "tdev_ps": rep.tdev, "n_terms": rep.n_terms})
    d = fit.to_dict()
    d.pop("cov")
    _emit({"drift_fit": d, "stability": rep.to_dict()})
    return 0


def cmd_run(args):
    s = _load_scenario(args)
    r = run_scenario(s, args.out)
    sm = r.summary
    brief = {"scenario": s.name, "out": str(args.out), "offset": sm["offset"],
             "car": sm["car"], "gaps": sm["gaps"]["count"]}
    if sm["suppression"] and "factor" in sm["suppression"]:
        brief["suppression_factor"] = sm["suppression"]["factor"]
    if "freq_offset" in sm["drift_fit"]:
        brief["freq_offset"] = [sm["drift_fit"]["freq_offset"], sm["drift_fit"]["freq_offset_err"]]
    _emit(brief)
    return 0


def cmd_sweep(args):
    s = _load_scenario(args)
    rows = precision_sweep(s, args.times, args.repeats, args.out)
    _emit(rows)
    return 0


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="pairsync", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"pairsync {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("simulate", help="simulate a scenario into timestamp files")
    _scenario_args(q)
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--start-time", type=int, help="file start time, ps (default: first event)")
    q.set_defaults(func=cmd_simulate)

    q = sub.add_parser("correlate", help="cross- or auto-correlation histogram of timestamp files")
    q.add_argument("alice")
    q.add_argument("bob", nargs="?")
    q.add_argument("--auto", action="store_true", help="auto-correlation of ALICE")
    q.add_argument("--center", type=int, help="histogram centre lag, ps (default: acquire)")
    q.add_argument("--search", type=int, default=1_000_000_000,
                   help="acquisition search half range, ps")
    q.add_argument("--half-window", type=int, default=DEFAULT_HALF_WINDOW)
    q.add_argument("--bin-width", type=float, default=DEFAULT_BIN_WIDTH)
    q.add_argument("--fwhm", type=float, help="peak FWHM for a CAR estimate, ps")
    q.add_argument("--out", required=True, help="histogram file (.csv, or .json + .bin)")
    q.set_defaults(func=cmd_correlate)

    q = sub.add_parser("fit", help="fit histogram peaks against a template")
    q.add_argument("hist", nargs="+")
    q.add_argument("--template", help="histogram to build the template from")
    q.add_argument("--templates", help="templates.json from a track or run bundle")
    q.add_argument("--which", choices=("single_trip", "round_trip"), default="single_trip")
    q.add_argument("--smooth", action="store_true", help="3-bin moving average on the template")
    q.add_argument("--out", help="write the fits to this JSON file")
    q.set_defaults(func=cmd_fit)

    q = sub.add_parser("track", help="offset series from timestamp files")
    q.add_argument("alice")
    q.add_argument("bob")
    q.add_argument("--window-single", type=float, default=3.0)
    q.add_argument("--window-round", type=float, default=90.0)
    q.add_argument("--bin-width", type=float, default=DEFAULT_BIN_WIDTH)
    q.add_argument("--half-window", type=int, default=DEFAULT_HALF_WINDOW)
    q.add_argument("--template-duration", type=float, default=100.0)
    q.add_argument("--round-trip-prior", type=int, help="approximate round-trip lag, ps")
    q.add_argument("--truth", help="truth.json from simulate, for segment bounds")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_track)

    q = sub.add_parser("stability", help="drift fit and ADEV/TDEV of an offset table")
    q.add_argument("offsets")
    q.add_argument("--window-single", type=float, default=3.0)
    q.add_argument("--taus", type=float, nargs="+", help="averaging times, s")
    q.add_argument("--noise", choices=("auto", "white", "random_walk"), default="auto")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_stability)

    q = sub.add_parser("run", help="full pipeline and report bundle")
    _scenario_args(q)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_run)

    q = sub.add_parser("sweep", help="precision against acquisition time")
    _scenario_args(q)
    q.add_argument("--times", type=float, nargs="+", help="acquisition times, s")
    q.add_argument("--repeats", type=int)
    q.add_argument("--out")
    q.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as e:
        print(f"pairsync {args.command}: {e}", file=sys.stderr)
        return 1
    except (sc.ScenarioError, io.FormatError, NoPeakError, FitError, ValueError, OSError) as e:
        print(f"pairsync {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
