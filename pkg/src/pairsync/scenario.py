"""Declarative scenario documents (YAML) and their validation.

A scenario fixes everything a run needs: source and detectors (either given
directly or calibrated from target rates), the fiber channel, an ordered list
of segments (fiber swaps are segment boundaries), both clocks, the seed, and
the analysis settings.  Schema, with defaults::

    name: str
    description: str                     # optional
    seed: int
    source:                              # either
      pair_rate: float                   #   pairs per second
    detectors:                           #   ... with explicit detectors
      alice_local:  {efficiency, jitter_sigma, dead_time, dark_rate}
      alice_return: {...}
      bob:          {...}
    calibrate:                           # or calibration targets
      single_trip_rate: 8900             #   detected coincidences per second
      round_trip_rate: 160
      fwhm: [905, 950]                   #   ps
      car: [8.9, 0.13]
      car_window: 1.0                    #   in FWHMs
      local_jitter: 40.0                 #   ps sigma
      dark_rates: [100, 1000]            #   Alice, Bob per second
      dead_times: [50000, 50000]         #   ps
    channel: {delay_ab, delay_ba, transmit_efficiency, return_efficiency,
              reflectance, delay_ab_drift, delay_ba_drift}
    segments:                            # at least one
      - duration: 282                    #   s
        label: "L0"
        extra_delay: 0                   #   ps added to both directions
        extra_delay_ab: 0                #   ps, one direction only
        extra_delay_ba: 0
        delay_ab_drift: null             #   ps/s, overrides the channel
        delay_ba_drift: null
    clocks:
      alice: {bias, freq_offset, aging, white_pm, white_fm, resolution, pm_cadence}
      bob:   {...}
    analysis:
      window_single: 3.0                 # s
      window_round: 90.0                 # s
      bin_width: 62.5                    # ps
      half_window: 16000                 # ps, histogram half width
      template_duration: 100.0           # s
      round_trip_prior: null             # ps; null: nominal from the channel
      prior_half_range: 1000000          # ps
      search_half_range: 1000000000      # ps
      group_index: 1.468
      stability_taus: null               # s; null: octaves of the cadence plus 100 s
      timestamps: first                  # none | first | all
      chunk: 1.0                         # s of simulated time per chunk
    sweep:                               # optional, for precision sweeps
      acquisition_times: [3, 10, 30, 90]
      repeats: 20
      base_window: null                  # s; null: gcd of the times

Clock fields use ps for ``bias``, ``white_pm``, ``resolution`` and
``pm_cadence``; ``freq_offset`` and ``white_fm`` are dimensionless and
``aging`` is per second.
"""
import copy
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import yaml

from .photonsim import ChannelConfig, DetectorConfig, calibrate_rates, with_extra_delay
from .timebase import ClockModel


class ScenarioError(ValueError):
    pass


ANALYSIS_DEFAULTS = {
    "window_single": 3.0,
    "window_round": 90.0,
    "bin_width": 62.5,
    "half_window": 16_000,
    "template_duration": 100.0,
    "round_trip_prior": None,
    "prior_half_range": 1_000_000,
    "search_half_range": 1_000_000_000,
    "group_index": 1.468,
    "stability_taus": None,
    "timestamps": "first",
    "chunk": 1.0,
}

CALIBRATE_DEFAULTS = {
    "single_trip_rate": 8900.0,
    "round_trip_rate": 160.0,
    "fwhm": [905.0, 950.0],
    "car": [8.9, 0.13],
    "car_window": 1.0,
    "local_jitter": 40.0,
    "dark_rates": [100.0, 1000.0],
    "dead_times": [50_000, 50_000],
}

SWEEP_DEFAULTS = {"acquisition_times": [3.0, 10.0, 30.0, 90.0], "repeats": 20, "base_window": None}

_TOP = {"name", "description", "seed", "source", "detectors", "calibrate", "channel", "segments",
        "clocks", "analysis", "sweep"}
_SEG = {"duration", "label", "extra_delay", "extra_delay_ab", "extra_delay_ba", "delay_ab_drift",
        "delay_ba_drift"}


def _keys(section, given, allowed):
    extra = set(given) - set(allowed)
    if extra:
        raise ScenarioError(f"{section}: unknown field(s) {sorted(extra)}")


def _build(cls, section, d):
    names = {f.name for f in fields(cls)}
    _keys(section, d, names)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ScenarioError(f"{section}: {e}") from None


@dataclass
class Segment:
    duration: float
    channel: ChannelConfig
    label: str = ""


@dataclass
class Scenario:
    name: str
    seed: int
    pair_rate: float
    detectors: tuple            # (alice_local, alice_return, bob)
    channel: ChannelConfig
    segments: list
    clock_alice: ClockModel
    clock_bob: ClockModel
    analysis: dict
    sweep: dict
    description: str = ""
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def duration(self):
        return float(sum(s.duration for s in self.segments))

    def sim_segments(self):
        return [(s.duration, s.channel) for s in self.segments]

    def round_trip_prior(self):
        """Analysis prior for the round-trip lag (ps)."""
        p = self.analysis["round_trip_prior"]
        if p is not None:
            return int(p)
        return int(self.channel.delay_ab + self.channel.delay_ba)

    def replace(self, **overrides):
        """New scenario from the raw document with top-level or dotted-path overrides."""
        doc = copy.deepcopy(self.raw)
        for key, v in overrides.items():
            node = doc
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = v
        return from_dict(doc)

    def to_dict(self):
        return copy.deepcopy(self.raw)


def from_dict(doc):
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a mapping")
    _keys("scenario", doc, _TOP)
    raw = copy.deepcopy(doc)
    name = str(doc.get("name", "scenario"))
    try:
        seed = int(doc.get("seed", 0))
    except (TypeError, ValueError):
        raise ScenarioError("seed must be an integer") from None

    channel = _build(ChannelConfig, "channel", dict(doc.get("channel") or {}))

    segs = doc.get("segments")
    if not segs:
        raise ScenarioError("at least one segment is required")
    segments = []
    for i, s in enumerate(segs):
        where = f"segments[{i}]"
        _keys(where, s, _SEG)
        if "duration" not in s:
            raise ScenarioError(f"{where}: duration is required")
        dur = float(s["duration"])
        if not dur > 0:
            raise ScenarioError(f"{where}: duration must be positive")
        both = int(s.get("extra_delay", 0))
        ch = with_extra_delay(channel, both + int(s.get("extra_delay_ab", 0)),
                              both + int(s.get("extra_delay_ba", 0)))
        drift = {k: float(s[k]) for k in ("delay_ab_drift", "delay_ba_drift") if s.get(k) is not None}
        if drift:
            ch = _build(ChannelConfig, where, {**ch.__dict__, **drift})
        segments.append(Segment(dur, ch, str(s.get("label", f"segment {i}"))))

    clocks = doc.get("clocks") or {}
    _keys("clocks", clocks, {"alice", "bob"})
    ca = _build(ClockModel, "clocks.alice", dict(clocks.get("alice") or {}))
    cb = _build(ClockModel, "clocks.bob", dict(clocks.get("bob") or {}))

    analysis = dict(ANALYSIS_DEFAULTS)
    a_in = doc.get("analysis") or {}
    _keys("analysis", a_in, ANALYSIS_DEFAULTS)
    analysis.update(a_in)
    _check_analysis(analysis)

    sweep = dict(SWEEP_DEFAULTS)
    s_in = doc.get("sweep") or {}
    _keys("sweep", s_in, SWEEP_DEFAULTS)
    sweep.update(s_in)

    pair_rate, dets = _source(doc, channel)
    return Scenario(name, seed, pair_rate, dets, channel, segments, ca, cb, analysis, sweep,
                    str(doc.get("description", "")), raw)


def _check_analysis(a):
    ratio = a["window_round"] / a["window_single"]
    if a["window_single"] <= 0 or ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
        raise ScenarioError("analysis: window_round must be a positive integer multiple of "
                            "window_single")
    if a["bin_width"] <= 0 or a["half_window"] <= 0:
        raise ScenarioError("analysis: bin_width and half_window must be positive")
    if a["timestamps"] not in ("none", "first", "all"):
        raise ScenarioError("analysis: timestamps must be one of none, first, all")
    if a["group_index"] <= 0:
        raise ScenarioError("analysis: group_index must be positive")


def _source(doc, channel):
    src = doc.get("source") or {}
    _keys("source", src, {"pair_rate"})
    cal = doc.get("calibrate")
    if cal is not None and "pair_rate" in src:
        raise ScenarioError("give either source.pair_rate with detectors or calibrate, not both")
    if cal is not None:
        _keys("calibrate", cal, CALIBRATE_DEFAULTS)
        c = {**CALIBRATE_DEFAULTS, **cal}
        try:
            s, al, ar, b = calibrate_rates(
                c["single_trip_rate"], c["round_trip_rate"], c["fwhm"], channel,
                target_car=tuple(c["car"]), car_window=c["car_window"],
                local_jitter=c["local_jitter"], dark_rates=tuple(c["dark_rates"]),
                dead_times=tuple(int(x) for x in c["dead_times"]))
        except ValueError as e:
            raise ScenarioError(f"calibrate: {e}") from None
        return s.pair_rate, (al, ar, b)
    if "pair_rate" not in src:
        raise ScenarioError("scenario needs source.pair_rate or a calibrate section")
    dets = doc.get("detectors") or {}
    _keys("detectors", dets, {"alice_local", "alice_return", "bob"})
    built = tuple(_build(DetectorConfig, f"detectors.{k}", dict(dets.get(k) or {}))
                  for k in ("alice_local", "alice_return", "bob"))
    rate = float(src["pair_rate"])
    if not rate > 0:
        raise ScenarioError("source.pair_rate must be positive")
    return rate, built


def load(path):
    """Load a scenario from a YAML file, or a bundled scenario by name."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and str(path) in bundled_names():
        return bundled(str(path))
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ScenarioError(f"{path}: invalid YAML: {e}") from None
    return from_dict(doc)


def bundled_names():
    root = resources.files("pairsync") / "scenarios"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".yaml"))


def bundled(name):
    f = resources.files("pairsync") / "scenarios" / f"{name}.yaml"
    if not f.is_file():
        raise ScenarioError(f"no bundled scenario {name!r}; have {bundled_names()}")
    return from_dict(yaml.safe_load(f.read_text()))


def dump(scenario_or_doc):
    doc = scenario_or_doc.to_dict() if isinstance(scenario_or_doc, Scenario) else scenario_or_doc
    return yaml.safe_dump(doc, sort_keys=False)


def apply_flags(doc, flags):
    """Fill ``doc`` from CLI flag values where the document does not set the field.

    ``flags`` maps dotted paths to values; ``None`` values are ignored.  The
    document wins over flags.
    """
    doc = copy.deepcopy(doc)
    for key, v in flags.items():
        if v is None:
            continue
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
        if node.get(parts[-1]) is None:
            node[parts[-1]] = v
    return doc

