"""Hot inner loops, each with a numba version and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PAIRSYNC_DISABLE_NUMBA`` is unset (or ``0``).  Both paths are
always importable so tests and the benchmark can compare them directly.

Lags are compared in integer picoseconds; bin edges live on a 1/16 ps grid
(``SUBPS``) so that a 62.5 ps bin is exactly 1000 internal units.
"""
import os

import numpy as np

SUBPS = 16

_disabled = os.environ.get("PAIRSYNC_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("numba disabled by PAIRSYNC_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


def _lag_bounds(start16, end16):
    """Integer-ps lag bounds [lo, hi) equivalent to [start16, end16) on the 1/16 ps grid."""
    lo = -((-start16) // SUBPS)
    hi = -((-end16) // SUBPS)
    return lo, hi


# --------------------------------------------------------------------------
# pair-difference histogram


@njit(cache=True, nogil=True)
def _pair_counts_nb(left, right, lo, hi, start16, bw16, nbins, counts):
    nr = right.shape[0]
    j0 = 0
    for i in range(left.shape[0]):
        t = left[i]
        while j0 < nr and right[j0] - t < lo:
            j0 += 1
        j = j0
        while j < nr:
            d = right[j] - t
            if d >= hi:
                break
            k = (d * 16 - start16) // bw16
            if k < nbins:
                counts[k] += 1
            j += 1
    return counts


def _pair_counts_np(left, right, lo, hi, start16, bw16, nbins, counts, block=1 << 16):
    for b0 in range(0, left.shape[0], block):
        seg = left[b0:b0 + block]
        i0 = np.searchsorted(right, seg + lo, side="left")
        i1 = np.searchsorted(right, seg + hi, side="left")
        n = i1 - i0
        total = int(n.sum())
        if total == 0:
            continue
        owner = np.repeat(np.arange(seg.shape[0]), n)
        first = np.repeat(i0 - np.concatenate(([0], np.cumsum(n)[:-1])), n)
        idx = first + np.arange(total)
        d = right[idx] - seg[owner]
        k = (d * SUBPS - start16) // bw16
        k = k[k < nbins]
        counts += np.bincount(k, minlength=nbins)[:nbins].astype(counts.dtype)
    return counts


def pair_counts(left, right, start16, bw16, nbins, min_lag=None, use_numba=None):
    """Histogram of ``right[j] - left[i]`` over ``nbins`` bins starting at ``start16``.

    Bin geometry is on the 1/16 ps grid; the streams are int64 ps.  Lags below
    ``min_lag`` (ps) are ignored.
    """
    if use_numba is None:
        use_numba = HAVE_NUMBA
    lo, hi = _lag_bounds(start16, start16 + bw16 * nbins)
    if min_lag is not None:
        lo = max(lo, min_lag)
    counts = np.zeros(nbins, dtype=np.int64)
    left = np.ascontiguousarray(left, dtype=np.int64)
    right = np.ascontiguousarray(right, dtype=np.int64)
    if left.size == 0 or right.size == 0 or hi <= lo:
        return counts
    if use_numba:
        return _pair_counts_nb(left, right, lo, hi, start16, bw16, nbins, counts)
    return _pair_counts_np(left, right, lo, hi, start16, bw16, nbins, counts)


def auto_counts(stream, start16, bw16, nbins, use_numba=None):
    """Ordered pairs of one stream with strictly positive lag."""
    return pair_counts(stream, stream, start16, bw16, nbins, min_lag=1, use_numba=use_numba)


# --------------------------------------------------------------------------
# dead time (non-paralysable)


@njit(cache=True, nogil=True)
def _dead_time_nb(t, dead, last):
    keep = np.zeros(t.shape[0], dtype=np.bool_)
    for i in range(t.shape[0]):
        if t[i] - last >= dead:
            keep[i] = True
            last = t[i]
    return keep, last


def _dead_time_np(t, dead, last):
    keep = np.ones(t.shape[0], dtype=bool)
    if t.shape[0] == 0:
        return keep, last
    # an event further than `dead` from its raw predecessor is always kept, so
    # only the close ones need the sequential rule
    close = np.flatnonzero(np.diff(t, prepend=last) < dead)
    prev = last
    for i in close:
        if i > 0 and keep[i - 1]:
            prev = t[i - 1]
        if t[i] - prev < dead:
            keep[i] = False
    acc = np.flatnonzero(keep)
    return keep, (t[acc[-1]] if acc.size else last)


def dead_time_mask(t, dead, last=np.iinfo(np.int64).min // 2, use_numba=None):
    """Keep mask for a sorted stream; ``last`` is the previous accepted event."""
    if use_numba is None:
        use_numba = HAVE_NUMBA
    t = np.ascontiguousarray(t, dtype=np.int64)
    if dead <= 0:
        return np.ones(t.shape[0], dtype=bool), (int(t[-1]) if t.size else last)
    if use_numba:
        keep, new_last = _dead_time_nb(t, np.int64(dead), np.int64(last))
        return keep, int(new_last)
    keep, new_last = _dead_time_np(t, dead, last)
    return keep, int(new_last)


# --------------------------------------------------------------------------
# clock reading: polynomial correction, half-even quantization, clamping


@njit(cache=True, nogil=True)
def _quantize_loop(t, bias, freq, aging, noise, resolution, shift, out):
    # shift >= 0 selects the power-of-two grid path (no integer division)
    have_noise = noise.shape[0] == t.shape[0]
    mask = resolution - 1
    big = 0.0
    for i in range(t.shape[0]):
        tf = float(t[i])
        corr = aging * tf * tf * 1e-12 + freq * tf
        if have_noise:
            corr += noise[i]
        big = max(big, abs(tf + bias + corr))
        whole = np.floor(corr)
        base = t[i] + bias + np.int64(whole)
        rem = corr - whole
        if shift >= 0:
            m = base >> shift
            r = base & mask
        else:
            m = base // resolution
            r = base - m * resolution
        d = 2 * r - resolution
        two = 2.0 * rem
        up = np.int64(0)
        if d > 0 or (d == 0 and rem > 0.0) or (d == -1 and two > 1.0):
            up = np.int64(1)
        elif (d == 0 and rem == 0.0) or (d == -1 and two == 1.0):
            up = m & 1
        out[i] = (m + up) * resolution
    return big


@njit(cache=True, nogil=True)
def _read_clock_nb(t, bias, freq, aging, noise, resolution, clamp, prev):
    n = t.shape[0]
    out = np.empty(n, dtype=np.int64)
    shift = -1
    if (resolution & (resolution - 1)) == 0:
        shift = 0
        while (np.int64(1) << shift) < resolution:
            shift += 1
    big = _quantize_loop(t, bias, freq, aging, noise, resolution, shift, out)
    bad = big >= 4.611686018427388e18
    if clamp and not bad:
        for i in range(n):
            if out[i] < prev + resolution:
                out[i] = prev + resolution
            prev = out[i]
    return out, bad
