"""Clock models and exact integer-picosecond time arithmetic.

All absolute times are ``int64`` picoseconds.  A clock maps true time ``t`` to
a local reading

    reading(t) = t + a*t**2 + d*t + b + phase_noise(t)

rounded once, half-to-even, onto the clock's resolution grid.  The large term
``t + b`` stays an exact integer; only the small correction is carried in
float64, so nothing of order ``t`` ever passes through floating point.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels

PS_PER_S = 10**12
# readings are checked against this before conversion back to int64
_SAFE = float(2**62)


def seconds(ps):
    return np.asarray(ps, dtype=np.float64) / PS_PER_S


def to_ps(s):
    """Seconds to integer picoseconds (nearest)."""
    return np.rint(np.asarray(s, dtype=np.float64) * PS_PER_S).astype(np.int64)


@dataclass(frozen=True)
class ClockModel:
    """Local clock relative to true time.

    ``aging`` is in 1/s (fractional frequency change per second), ``freq_offset``
    is dimensionless.  ``white_pm`` is the rms white phase noise in ps; with
    ``pm_cadence == 0`` it is drawn independently per reading, otherwise it is
    held for ``pm_cadence`` ps and redrawn (white phase noise sampled at that
    cadence).  ``white_fm`` is the Allan deviation at 1 s of a white frequency
    noise, i.e. a random walk of phase with variance ``white_fm**2 * dt``.
    """

    bias: int = 0
    freq_offset: float = 0.0
    aging: float = 0.0
    white_pm: float = 0.0
    white_fm: float = 0.0
    resolution: int = 1
    pm_cadence: int = 0

    def __post_init__(self):
        if int(self.resolution) < 1:
            raise ValueError("resolution must be a positive number of ps")
        if self.white_pm < 0 or self.white_fm < 0 or self.pm_cadence < 0:
            raise ValueError("noise amplitudes must be non-negative")

    @property
    def noiseless(self):
        return self.white_pm == 0 and self.white_fm == 0

    def correction(self, t):
        """Deterministic reading minus ``t + bias`` in ps (float64)."""
        t = np.asarray(t, dtype=np.float64)
        return self.aging * t * t / PS_PER_S + self.freq_offset * t

    def to_dict(self):
        return {
            "bias_ps": int(self.bias),
            "freq_offset": self.freq_offset,
            "aging_per_s": self.aging,
            "white_pm_ps": self.white_pm,
            "pm_cadence_ps": int(self.pm_cadence),
            "white_fm": self.white_fm,
            "resolution_ps": int(self.resolution),
        }


IDENTITY = ClockModel()


@dataclass
class NoiseState:
    """Seeded phase-noise state of one clock, consumed in true-time order.

    Also remembers the previous reading so streams can be clamped to stay
    strictly increasing across successive calls.
    """

    rng: np.random.Generator
    last_time: int = 0
    fm_phase: float = 0.0
    pm_slot: int = -1
    pm_value: float = 0.0
    last_reading: int | None = None

    @classmethod
    def from_seed(cls, seed):
        return cls(np.random.default_rng(seed))


def quantize(exact_int, frac, resolution):
    """Round ``exact_int + frac`` half-to-even onto multiples of ``resolution``.

    ``exact_int`` is int64, ``frac`` a float64 correction of modest size.
    """
    exact_int = np.asarray(exact_int, dtype=np.int64)
    frac = np.asarray(frac, dtype=np.float64)
    whole = np.floor(frac)
    base = exact_int + whole.astype(np.int64)
    rem = frac - whole
    q = np.int64(resolution)
    m, r = np.divmod(base, q)
    # compare r + rem with q/2 exactly: d is an integer and 2*rem is exact
    d = 2 * r - q
    two = 2.0 * rem
    above = (d > 0) | ((d == 0) & (rem > 0)) | ((d == -1) & (two > 1.0))
    tie = ((d == 0) & (rem == 0)) | ((d == -1) & (two == 1.0))
    up = above | (tie & (m % 2 == 1))
    return (m + up) * q


def _check_range(t, extra):
    hi = np.max(np.abs(np.asarray(t, dtype=np.float64) + extra), initial=0.0)
    if not np.isfinite(hi) or hi >= _SAFE:
        raise OverflowError("clock reading leaves the 64-bit picosecond range")


def _phase_noise(model, t, state):
    n = t.shape[0]
    noise = np.zeros(n)
    if n == 0:
        return noise
    if model.white_fm > 0:
        dt = np.diff(t, prepend=np.int64(state.last_time)).astype(np.float64)
        if np.any(dt < 0):
            raise ValueError("noisy clock readings must be taken in time order")
        # random walk of phase: variance white_fm^2 * dt[s] in s^2
        step = model.white_fm * np.sqrt(dt * PS_PER_S)
        walk = state.fm_phase + np.cumsum(step * state.rng.standard_normal(n))
        noise += walk
        state.fm_phase = float(walk[-1])
    if model.white_pm > 0:
        if model.pm_cadence <= 0:
            noise += model.white_pm * state.rng.standard_normal(n)
        else:
            slot = t // np.int64(model.pm_cadence)
            lo = int(slot[0])
            hi = int(slot[-1])
            if lo < state.pm_slot:
                raise ValueError("noisy clock readings must be taken in time order")
            fresh = hi - state.pm_slot
            vals = np.empty(hi - lo + 1)
            if lo == state.pm_slot:
                vals[0] = state.pm_value
                vals[1:] = model.white_pm * state.rng.standard_normal(hi - lo)
            else:
                # draw (and discard) the values of skipped slots so the sequence
                # does not depend on where events happen to fall
                drawn = model.white_pm * state.rng.standard_normal(fresh)
                vals[:] = drawn[-(hi - lo + 1):]
            noise += vals[slot - lo]
            state.pm_slot = hi
            state.pm_value = float(vals[-1])
    state.last_time = int(t[-1])
    return noise


def clock_read(model, true_time, noise_state=None, use_numba=None):
    """Local reading(s) of ``model`` at ``true_time`` (int ps, scalar or array).

    Without ``noise_state`` the result is the deterministic quantized reading.
    With one, phase noise is added, consuming the state; inputs must then be in
    non-decreasing order across calls, and readings are clamped to stay strictly
    increasing (previous + resolution) so emitted streams remain sorted.
    """
    if use_numba is None:
        use_numba = _kernels.HAVE_NUMBA
    scalar = np.ndim(true_time) == 0
    t = np.atleast_1d(np.asarray(true_time, dtype=np.int64))
    noise = np.zeros(0)
    if noise_state is not None and t.size:
        if model.noiseless:
            noise_state.last_time = int(t[-1])
        else:
            noise = _phase_noise(model, t, noise_state)
    clamp = noise_state is not None
    if use_numba:
        prev = noise_state.last_reading if clamp and noise_state.last_reading is not None \
            else np.iinfo(np.int64).min // 4
        out, bad = _kernels._read_clock_nb(t, np.int64(model.bias), float(model.freq_offset),
                                           float(model.aging), noise, np.int64(model.resolution),
                                           clamp, np.int64(prev))
        if bad:
            raise OverflowError("clock reading leaves the 64-bit picosecond range")
    else:
        corr = model.correction(t)
        if noise.size:
            corr = corr + noise
        _check_range(t, corr + model.bias)
        out = quantize(t + np.int64(model.bias), corr, model.resolution)
        if clamp:
            out = clamp_increasing(out, noise_state.last_reading, model.resolution)
    if clamp and out.size:
        noise_state.last_reading = int(out[-1])
    return int(out[0]) if scalar else out


def clamp_increasing(readings, previous=None, step=1):
    """Make readings strictly increasing by at least ``step`` (``r[i] >= r[i-1] + step``)."""
    r = np.asarray(readings, dtype=np.int64)
    if r.size == 0:
        return r
    ramp = np.arange(r.shape[0], dtype=np.int64) * np.int64(step)
    lifted = r - ramp
    if previous is not None:
        lifted[0] = max(lifted[0], previous + step)
    return np.maximum.accumulate(lifted) + ramp


def relative_offset(clock_a, clock_b, true_time):
    """Deterministic offset reading_b - reading_a at ``true_time``, float ps."""
    t = np.asarray(true_time, dtype=np.int64)
    bias = float(clock_b.bias - clock_a.bias)
    # the correction difference is formed first so swapping the clocks negates
    # the result exactly
    out = (clock_b.correction(t) - clock_a.correction(t)) + bias
    return float(out) if np.ndim(out) == 0 else out


def polynomial_offset(clock_a, clock_b):
    """(aging [1/s], freq [-], bias [ps]) of the deterministic relative offset.

    ``delta_ps(t) = (aging*t**2 + freq*t) * 1e12 + bias`` with t in seconds.
    """
    return (clock_b.aging - clock_a.aging,
            clock_b.freq_offset - clock_a.freq_offset,
            int(clock_b.bias - clock_a.bias))
