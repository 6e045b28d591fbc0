"""Timestamp streams for the single-source bidirectional pair protocol.

Each created pair leaves one photon at Alice's local detector and sends its
partner down the fiber, where it is either detected by Bob or Fresnel-reflected
at the far end face and detected back at Alice.  Alice's local and returning
photons share one timestamp stream.

Pairs are a homogeneous Poisson process.  Every created pair independently
falls into one of the outcome classes (local detected or not) x (partner at
Bob, back at Alice, lost); a thinned Poisson process is again Poisson, so each
class with at least one detection is generated directly at its own rate and
the undetected majority is never materialised.

Generation runs in chunks of true time so hour-long runs at the calibrated count
rates stream through bounded memory (see :func:`iter_chunks`).
"""
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .timebase import PS_PER_S, ClockModel, NoiseState, clock_read, polynomial_offset

LOCAL, TRANSMITTED, REFLECTED, DARK = 0, 1, 2, 3
TAG_NAMES = {LOCAL: "local", TRANSMITTED: "transmitted", REFLECTED: "reflected", DARK: "dark"}

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
# Gaussian jitter is truncated here (in sigmas) so chunk boundaries are exact
JITTER_CLIP = 10.0


@dataclass(frozen=True)
class SourceConfig:
    pair_rate: float
    duration: float

    def __post_init__(self):
        if not self.pair_rate > 0 or not self.duration > 0:
            raise ValueError("pair_rate and duration must be positive")


@dataclass(frozen=True)
class ChannelConfig:
    """Fiber link.  Delays in ps; ``*_drift`` are optional linear ramps in ps/s."""

    delay_ab: int
    delay_ba: int
    transmit_efficiency: float = 1.0
    return_efficiency: float = 1.0
    reflectance: float = 0.035
    delay_ab_drift: float = 0.0
    delay_ba_drift: float = 0.0

    def __post_init__(self):
        for name in ("transmit_efficiency", "return_efficiency", "reflectance"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.delay_ab < 0 or self.delay_ba < 0:
            raise ValueError("propagation delays must be non-negative")

    @property
    def symmetric(self):
        return self.delay_ab == self.delay_ba and self.delay_ab_drift == self.delay_ba_drift


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 1.0
    jitter_sigma: float = 0.0
    dead_time: int = 0
    dark_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("detector efficiency must be a probability")
        if self.jitter_sigma < 0 or self.dead_time < 0 or self.dark_rate < 0:
            raise ValueError("jitter, dead time and dark rate must be non-negative")


@dataclass
class StreamTruth:
    """Per-event ground truth aligned with one emitted stream.

    ``tag`` is always present.  ``pair`` (pair id, -1 for dark counts) and
    ``arrival`` (true arrival time before jitter, ps) are only kept when the
    simulation is run with ``detail=True``.
    """

    tag: np.ndarray
    pair: np.ndarray | None = None
    arrival: np.ndarray | None = None

    FIELDS = ("tag", "pair", "arrival")

    @classmethod
    def empty(cls, detail=True):
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros(0, dtype=np.uint8), z if detail else None, z.copy() if detail else None)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(None if getattr(parts[0], f) is None
                     else np.concatenate([getattr(p, f) for p in parts]) for f in cls.FIELDS))

    def take(self, index):
        return StreamTruth(*(None if getattr(self, f) is None else getattr(self, f)[index]
                             for f in self.FIELDS))

    def counts(self):
        return {TAG_NAMES[k]: int(np.count_nonzero(self.tag == k)) for k in TAG_NAMES}


@dataclass
class SimChunk:
    alice: np.ndarray
    bob: np.ndarray
    alice_truth: StreamTruth
    bob_truth: StreamTruth
    true_start: int
    true_end: int


@dataclass
class SimTruth:
    clock_alice: ClockModel
    clock_bob: ClockModel
    segments: list          # (true_start_ps, true_end_ps, ChannelConfig)
    alice: StreamTruth
    bob: StreamTruth
    pair_rate: float

    def offset_polynomial(self):
        return polynomial_offset(self.clock_alice, self.clock_bob)

    def to_dict(self):
        aging, freq, bias = self.offset_polynomial()
        return {
            "offset_polynomial": {"aging_per_s": aging, "freq_offset": freq, "bias_ps": bias},
            "clock_alice": self.clock_alice.to_dict(),
            "clock_bob": self.clock_bob.to_dict(),
            "pair_rate_per_s": self.pair_rate,
            "segments": [
                {"true_start_ps": int(a), "true_end_ps": int(b), "delay_ab_ps": int(ch.delay_ab),
                 "delay_ba_ps": int(ch.delay_ba), "delay_ab_drift_ps_per_s": ch.delay_ab_drift,
                 "delay_ba_drift_ps_per_s": ch.delay_ba_drift}
                for a, b, ch in self.segments
            ],
            "event_counts": {"alice": self.alice.counts(), "bob": self.bob.counts()},
        }


@dataclass
class SimOutput:
    alice_stream: np.ndarray
    bob_stream: np.ndarray
    truth: SimTruth = field(repr=False)


# --------------------------------------------------------------------------
# analytic rates


def outcome_probabilities(channel, det_al, det_ar, det_b):
    """(p_local, p_bob, p_return): detection probabilities per created pair."""
    p_l = det_al.efficiency
    p_b = (1.0 - channel.reflectance) * channel.transmit_efficiency * det_b.efficiency
    p_r = channel.reflectance * channel.return_efficiency * det_ar.efficiency
    return p_l, p_b, p_r


def expected_rates(pair_rate, channel, det_al, det_ar, det_b, dead_time=True):
    """Expected detected rates per second.

    Keys: ``alice``, ``bob`` (singles), ``single_trip`` and ``round_trip``
    (true coincidences).  With ``dead_time`` the non-paralysable loss
    ``m = n / (1 + n*tau)`` is applied to singles and each coincidence partner is
    taken to survive independently.
    """
    p_l, p_b, p_r = outcome_probabilities(channel, det_al, det_ar, det_b)
    n_a = pair_rate * (p_l + p_r) + det_al.dark_rate + det_ar.dark_rate
    n_b = pair_rate * p_b + det_b.dark_rate
    c1 = pair_rate * p_l * p_b
    c2 = pair_rate * p_l * p_r
    if dead_time:
        tau_a = max(det_al.dead_time, det_ar.dead_time) / PS_PER_S
        tau_b = det_b.dead_time / PS_PER_S
        s_a = 1.0 / (1.0 + n_a * tau_a)
        s_b = 1.0 / (1.0 + n_b * tau_b)
        n_a, n_b = n_a * s_a, n_b * s_b
        c1, c2 = c1 * s_a * s_b, c2 * s_a * s_a
    return {"alice": n_a, "bob": n_b, "single_trip": c1, "round_trip": c2}


def calibrate_rates(target_single_trip_cc, target_round_trip_cc, target_fwhms, channel, *,
                    target_car=(8.9, 0.13), car_window=1.0, local_jitter=40.0,
                    dark_rates=(100.0, 1000.0), dead_times=(50_000, 50_000), duration=100.0):
    """Choose source and detector settings that reproduce observed rates and widths.

    Peak widths: each coincidence peak is the quadrature sum of its two
    detectors' jitter, so with Alice's local jitter fixed the remaining sigmas
    are ``sigma_bob = sqrt((F1/2.3548)**2 - local**2)`` and
    ``sigma_return = sqrt((F2/2.3548)**2 - local**2)``.

    Rates: the coincidence-to-accidental ratio of a peak, counted in a window of
    ``car_window`` FWHMs centred on it, is ``C*f / (m1*m2*W)`` with ``f`` the
    Gaussian fraction inside the window.  The two CAR targets fix the detected
    singles (round trip: ``m_a**2``; single trip: ``m_a*m_b``).  Singles and
    coincidences are converted to pre-dead-time rates, dark counts removed, and
    the remaining four equations

        R*(p_l + p_r) = X_a,   R*p_b = X_b,   R*p_l*p_b = C1,   R*p_l*p_r = C2

    solve uniquely for the pair rate ``R`` and the per-pair detection
    probabilities.  Channel efficiencies are inputs; the detector efficiencies
    absorb the rest.  With no round-trip target the singles are split evenly.

    Returns ``(SourceConfig, det_alice_local, det_alice_return, det_bob)``.
    """
    c1, c2 = float(target_single_trip_cc), float(target_round_trip_cc)
    f1, f2 = (float(x) for x in target_fwhms)
    if c1 <= 0 or c2 < 0:
        raise ValueError("coincidence rate targets must be positive")
    if c2 > 0 and channel.reflectance <= 0:
        raise ValueError("a round-trip rate needs a reflecting far end (reflectance > 0)")
    sig1, sig2 = f1 / FWHM_PER_SIGMA, f2 / FWHM_PER_SIGMA
    if sig1 <= local_jitter or sig2 <= local_jitter:
        raise ValueError("target FWHM is narrower than the local detector jitter")
    sig_b = math.sqrt(sig1 ** 2 - local_jitter ** 2)
    sig_r = math.sqrt(sig2 ** 2 - local_jitter ** 2)

    car1, car2 = target_car
    w1, w2 = car_window * f1 * 1e-12, car_window * f2 * 1e-12
    frac1 = math.erf(w1 * 1e12 / 2 / (sig1 * math.sqrt(2)))
    frac2 = math.erf(w2 * 1e12 / 2 / (sig2 * math.sqrt(2)))
    if c2 > 0:
        m_a = math.sqrt(c2 * frac2 / (car2 * w2))
    else:
        m_a = math.sqrt(c1 * frac1 / (car1 * w1))
    m_b = c1 * frac1 / (car1 * m_a * w1)

    tau_a, tau_b = dead_times[0] / PS_PER_S, dead_times[1] / PS_PER_S
    if m_a * tau_a >= 1 or m_b * tau_b >= 1:
        raise ValueError("singles rate saturates the detector dead time")
    s_a, s_b = 1.0 - m_a * tau_a, 1.0 - m_b * tau_b
    n_a, n_b = m_a / s_a, m_b / s_b
    c1_in, c2_in = c1 / (s_a * s_b), c2 / (s_a * s_a)
    x_a, x_b = n_a - dark_rates[0], n_b - dark_rates[1]
    if x_b < c1_in or x_a <= c2_in:
        raise ValueError("singles implied by the CAR targets are below the coincidence rates")

    p_l = c1_in / x_b
    y = c2_in / p_l
    pair_rate = (x_a - y) / p_l
    if pair_rate <= 0:
        raise ValueError("infeasible rate targets")
    p_b = x_b / pair_rate
    p_r = y / pair_rate
    fwd = (1.0 - channel.reflectance) * channel.transmit_efficiency
    back = channel.reflectance * channel.return_efficiency
    if p_r > back:
        raise ValueError(
            f"round-trip rate needs {p_r:.3g} return probability per pair, above the "
            f"reflectance budget {back:.3g}")
    if p_b > fwd or p_l > 1.0:
        raise ValueError("single-trip rate exceeds the forward transmission budget")

    det_al = DetectorConfig(p_l, local_jitter, dead_times[0], dark_rates[0])
    det_ar = DetectorConfig(p_r / back if back > 0 else 0.0, sig_r, dead_times[0], 0.0)
    det_b = DetectorConfig(p_b / fwd, sig_b, dead_times[1], dark_rates[1])
    return SourceConfig(pair_rate, duration), det_al, det_ar, det_b


# --------------------------------------------------------------------------
# generation


def _sorted_uniform(rng, n, start, length):
    """``n`` sorted uniform integer times in [start, start + length)."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cs = np.cumsum(rng.standard_exponential(n + 1))
    u = np.floor(cs[:-1] / cs[-1] * length).astype(np.int64)
    return np.minimum(u, length - 1) + np.int64(start)


def _jitter(rng, n, sigma):
    if sigma <= 0 or n == 0:
        return np.zeros(n, dtype=np.int64)
    j = rng.standard_normal(n, dtype=np.float32)
    np.clip(j, -JITTER_CLIP, JITTER_CLIP, out=j)
    j *= np.float32(sigma)
    return np.rint(j).astype(np.int64)


def _delay(base, drift, s, seg_start):
    if drift == 0.0:
        return np.full(s.shape, np.int64(base))
    return np.int64(base) + np.rint(drift * (s - seg_start) / PS_PER_S).astype(np.int64)


class _Detector:
    """Ordering, clock reading, and dead time for one timestamp stream."""

    def __init__(self, clock, dead_time, rng):
        self.clock = clock
        self.dead_time = int(dead_time)
        self.noise = NoiseState(rng)
        self.last_accepted = np.iinfo(np.int64).min // 4
        self.pending = []
        self.pending_truth = []

    def add(self, times, truth):
        self.pending.append(times)
        self.pending_truth.append(truth)

    def emit(self, cutoff=None):
        """Read out every pending event with true time below ``cutoff`` (all if None)."""
        times = np.concatenate(self.pending)
        truth = StreamTruth.concat(self.pending_truth)
        order = np.argsort(times, kind="stable")
        times = times[order]
        split = times.shape[0] if cutoff is None else int(np.searchsorted(times, cutoff))
        self.pending = [times[split:]]
        self.pending_truth = [truth.take(order[split:])]
        truth = truth.take(order[:split])
        local = clock_read(self.clock, times[:split], self.noise)
        if local.size == 0:
            return local, truth
        keep, self.last_accepted = _kernels.dead_time_mask(local, self.dead_time, self.last_accepted)
        if keep.all():
            return local, truth
        return local[keep], truth.take(keep)


def iter_chunks(pair_rate, segments, det_alice_local, det_alice_return, det_bob,
                clock_alice, clock_bob, seed, chunk=1.0, detail=True):
    """Yield :class:`SimChunk` objects covering ``segments`` in true-time order.

    ``segments`` is a list of ``(duration_s, ChannelConfig)``; a pair uses the
    channel of the segment in which it is created.  Concatenating the chunks of
    one call gives exactly the streams :func:`simulate` returns for the same
    arguments.  ``detail=False`` drops the per-event pair ids and arrival times
    from the truth record (tags are kept), which the streaming pipeline uses.
    """
    if pair_rate <= 0:
        raise ValueError("pair_rate must be positive")
    ss = np.random.SeedSequence(seed)
    r_pairs, r_jal, r_jar, r_jb, r_dark, r_ca, r_cb = (np.random.default_rng(s) for s in ss.spawn(7))
    p_l, _, _ = outcome_probabilities(segments[0][1], det_alice_local, det_alice_return, det_bob)

    alice = _Detector(clock_alice, max(det_alice_local.dead_time, det_alice_return.dead_time), r_ca)
    bob = _Detector(clock_bob, det_bob.dead_time, r_cb)
    margin = int(JITTER_CLIP * max(det_alice_local.jitter_sigma, det_alice_return.jitter_sigma,
                                   det_bob.jitter_sigma)) + 2
    dark_a = det_alice_local.dark_rate + det_alice_return.dark_rate
    chunk_ps = max(1, int(round(chunk * PS_PER_S)))
    next_pair = 0
    t_seg = 0
    expected_cc = 0.0
    for k_seg, (seg_dur, ch) in enumerate(segments):
        seg_len = int(round(seg_dur * PS_PER_S))
        if seg_len <= 0:
            raise ValueError("segment durations must be positive")
        _, p_b, p_r = outcome_probabilities(ch, det_alice_local, det_alice_return, det_bob)
        classes = (  # (rate, local?, partner: 0 none / 1 bob / 2 return)
            (pair_rate * p_l * p_b, True, 1),
            (pair_rate * p_l * p_r, True, 2),
            (pair_rate * p_l * (1.0 - p_b - p_r), True, 0),
            (pair_rate * (1.0 - p_l) * p_b, False, 1),
            (pair_rate * (1.0 - p_l) * p_r, False, 2),
        )
        expected_cc += pair_rate * p_l * (p_b + p_r) * seg_dur
        c0 = t_seg
        while c0 < t_seg + seg_len:
            c1 = min(c0 + chunk_ps, t_seg + seg_len)
            span = c1 - c0
            loc, bob_s, ret_s = [], [], []
            for rate, has_local, partner in classes:
                n = int(r_pairs.poisson(max(rate, 0.0) * span / PS_PER_S))
                s = _sorted_uniform(r_pairs, n, c0, span)
                ids = np.arange(next_pair, next_pair + n, dtype=np.int64)
                next_pair += n
                if has_local:
                    loc.append((s, ids))
                if partner == 1:
                    bob_s.append((s, ids))
                elif partner == 2:
                    ret_s.append((s, ids))

            def stack(parts):
                return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))

            def truth(tag, ids, arr):
                tags = np.full(arr.shape, tag, np.uint8)
                return StreamTruth(tags, ids, arr) if detail else StreamTruth(tags)

            s, ids = stack(loc)
            j = _jitter(r_jal, s.shape[0], det_alice_local.jitter_sigma)
            alice.add(s + j, truth(LOCAL, ids, s))

            s, ids = stack(ret_s)
            arr = s + _delay(ch.delay_ab, ch.delay_ab_drift, s, t_seg) + \
                _delay(ch.delay_ba, ch.delay_ba_drift, s, t_seg)
            j = _jitter(r_jar, s.shape[0], det_alice_return.jitter_sigma)
            alice.add(arr + j, truth(REFLECTED, ids, arr))

            s, ids = stack(bob_s)
            arr = s + _delay(ch.delay_ab, ch.delay_ab_drift, s, t_seg)
            j = _jitter(r_jb, s.shape[0], det_bob.jitter_sigma)
            bob.add(arr + j, truth(TRANSMITTED, ids, arr))

            for det, rate in ((alice, dark_a), (bob, det_bob.dark_rate)):
                d = _sorted_uniform(r_dark, int(r_dark.poisson(rate * span / PS_PER_S)), c0, span)
                det.add(d, truth(DARK, np.full(d.shape, -1, np.int64), d))

            last = c1 >= t_seg + seg_len and k_seg == len(segments) - 1
            cutoff = None if last else c1 - margin
            a, at = alice.emit(cutoff)
            b, bt = bob.emit(cutoff)
            yield SimChunk(a, b, at, bt, c0, c1)
            c0 = c1
        t_seg += seg_len
    if expected_cc == 0:
        warnings.warn("configuration yields no expected coincidences", RuntimeWarning)


def _segments_bounds(segments):
    out, t = [], 0
    for dur, ch in segments:
        n = int(round(dur * PS_PER_S))
        out.append((t, t + n, ch))
        t += n
    return out


def simulate_segments(pair_rate, segments, det_alice_local, det_alice_return, det_bob,
                      clock_alice, clock_bob, seed, chunk=1.0):
    """Like :func:`simulate` over a list of ``(duration_s, ChannelConfig)`` segments."""
    chunks = list(iter_chunks(pair_rate, segments, det_alice_local, det_alice_return, det_bob,
                              clock_alice, clock_bob, seed, chunk))
    truth = SimTruth(
        clock_alice, clock_bob, _segments_bounds(segments),
        StreamTruth.concat(c.alice_truth for c in chunks),
        StreamTruth.concat(c.bob_truth for c in chunks), pair_rate)
    return SimOutput(np.concatenate([c.alice for c in chunks]),
                     np.concatenate([c.bob for c in chunks]), truth)


def simulate(source, channel, det_alice_local, det_alice_return, det_bob,
             clock_alice, clock_bob, seed, chunk=1.0):
    """Simulate ``source.duration`` seconds over a single fiber configuration."""
    return simulate_segments(source.pair_rate, [(source.duration, channel)], det_alice_local,
                             det_alice_return, det_bob, clock_alice, clock_bob, seed, chunk)


def with_extra_delay(channel, extra_ab, extra_ba=None):
    """Channel with both (or each) propagation delays lengthened by ``extra`` ps."""
    extra_ba = extra_ab if extra_ba is None else extra_ba
    return replace(channel, delay_ab=channel.delay_ab + int(extra_ab),
                   delay_ba=channel.delay_ba + int(extra_ba))
