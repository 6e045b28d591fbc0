"""File formats: binary timestamp files, histogram and series tables, JSON.

Timestamp file layout (little-endian)::

    offset  size  field
    0       8     magic  b"PAIRTS\\0\\0"
    8       4     version (u32, currently 1)
    12      8     resolution in ps (u64)
    20      4     channel id (u32)
    24      8     start time in ps (i64)
    32      8     number of events (u64)
    40      8*n   event times minus start time, u64, strictly increasing

The start time and every stored value are multiples of the resolution.
"""
import csv
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correlation import CorrelationHistogram, normalize

MAGIC = b"PAIRTS\0\0"
VERSION = 1
_HEADER = struct.Struct("<8sIQIqQ")
HEADER_SIZE = _HEADER.size

CHANNEL_ALICE = 0
CHANNEL_BOB = 1


class FormatError(ValueError):
    pass


@dataclass
class TimestampHeader:
    channel: int
    resolution: int
    start_time: int
    n_events: int
    version: int = VERSION

    def pack(self):
        return _HEADER.pack(MAGIC, self.version, self.resolution, self.channel, self.start_time,
                            self.n_events)


def _validate(t, resolution):
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise FormatError("timestamps must be strictly increasing")
    if resolution > 1 and t.size and np.any(t % resolution):
        raise FormatError(f"timestamps are not multiples of the resolution {resolution} ps")


def write_timestamps(path, times, channel=0, resolution=1, start_time=None):
    """Write a complete stream; ``start_time`` defaults to the first event."""
    t = np.asarray(times, dtype=np.int64)
    resolution = int(resolution)
    if resolution < 1:
        raise FormatError("resolution must be positive")
    _validate(t, resolution)
    if start_time is None:
        start_time = int(t[0]) if t.size else 0
    if t.size and t[0] < start_time:
        raise FormatError("events before the start time")
    if start_time % resolution:
        raise FormatError("start time is not a multiple of the resolution")
    with open(path, "wb") as fh:
        fh.write(TimestampHeader(channel, resolution, int(start_time), int(t.size)).pack())
        (t - np.int64(start_time)).astype("<u8").tofile(fh)


def read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise FormatError("file too short for a timestamp header")
    magic, version, res, channel, start, n = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError("not a timestamp file (bad magic)")
    if version != VERSION:
        raise FormatError(f"unsupported timestamp file version {version}")
    return TimestampHeader(channel, res, start, n, version)


def read_timestamps(path, mmap=False):
    """Return ``(times, header)``; times are absolute int64 ps."""
    hdr = read_header(path)
    size = Path(path).stat().st_size
    if size != HEADER_SIZE + 8 * hdr.n_events:
        raise FormatError(f"payload size {size - HEADER_SIZE} does not match {hdr.n_events} events")
    if mmap:
        raw = np.memmap(path, dtype="<u8", mode="r", offset=HEADER_SIZE, shape=(hdr.n_events,))
    else:
        raw = np.fromfile(path, dtype="<u8", offset=HEADER_SIZE, count=hdr.n_events)
    if hdr.n_events and int(raw.max()) >= 2**63 - max(hdr.start_time, 0):
        raise FormatError("event offsets overflow the picosecond range")
    return raw.astype(np.int64) + np.int64(hdr.start_time), hdr


class TimestampWriter:
    """Append chunks of a stream to a timestamp file; the header is completed on close.

    Without ``start_time`` the first written event sets it.
    """

    def __init__(self, path, channel=0, resolution=1, start_time=None):
        self.path = path
        self.fixed_start = start_time is not None
        self.header = TimestampHeader(channel, int(resolution),
                                      0 if start_time is None else int(start_time), 0)
        self.last = None
        self.fh = open(path, "wb")
        self.fh.write(self.header.pack())

    def write(self, times):
        t = np.asarray(times, dtype=np.int64)
        if t.size == 0:
            return
        _validate(t, self.header.resolution)
        if self.last is not None and t[0] <= self.last:
            raise FormatError("chunk does not continue the stream")
        if not self.fixed_start and self.last is None:
            self.header.start_time = int(t[0])
        if self.header.start_time % self.header.resolution:
            raise FormatError("start time is not a multiple of the resolution")
        if t[0] < self.header.start_time:
            raise FormatError("events before the start time")
        (t - np.int64(self.header.start_time)).astype("<u8").tofile(self.fh)
        self.header.n_events += int(t.size)
        self.last = int(t[-1])

    def close(self):
        if self.fh.closed:
            return
        self.fh.seek(0)
        self.fh.write(self.header.pack())
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --------------------------------------------------------------------------
# JSON


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def dumps(obj):
    """Deterministic JSON (sorted keys, non-finite floats as null)."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


# --------------------------------------------------------------------------
# histograms


def _hist_meta(h):
    return {"tau_start_ps": h.tau_start, "bin_width_ps": h.bin_width, "nbins": h.nbins,
            "n_left": h.n_left, "n_right": h.n_right, "duration_ps": h.duration, "kind": h.kind,
            "lag_step_ps": h.lag_step}


def write_histogram_csv(path, hist):
    """Columns: tau_ps (bin centre), counts, normalized."""
    try:
        norm = normalize(hist).normalized
    except ValueError:
        norm = np.full(hist.nbins, np.nan)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(_hist_meta(hist), sort_keys=True) + "\n")
        w = csv.writer(fh)
        w.writerow(["tau_ps", "counts", "normalized"])
        for c, n, v in zip(hist.centers, hist.counts, norm):
            w.writerow([repr(float(c)), int(n), "" if not np.isfinite(v) else repr(float(v))])


def read_histogram_csv(path):
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise FormatError("histogram CSV lacks its metadata line")
        meta = json.loads(first[2:])
        rows = list(csv.DictReader(fh))
    counts = np.array([int(r["counts"]) for r in rows], dtype=np.int64)
    return _hist_from_meta(meta, counts)


def _hist_from_meta(meta, counts):
    if counts.size != meta["nbins"]:
        raise FormatError("histogram bin count mismatch")
    return CorrelationHistogram(meta["tau_start_ps"], meta["bin_width_ps"], counts,
                                meta["n_left"], meta["n_right"], meta["duration_ps"], meta["kind"],
                                meta.get("lag_step_ps", 1))


def write_histogram_binary(path, hist):
    """JSON header at ``path`` plus little-endian u64 counts in ``<path stem>.bin``."""
    path = Path(path)
    data = path.with_suffix(".bin")
    meta = _hist_meta(hist)
    meta["counts_file"] = data.name
    meta["counts_dtype"] = "<u8"
    write_json(path, meta)
    hist.counts.astype("<u8").tofile(data)


def read_histogram_binary(path):
    path = Path(path)
    meta = json.loads(path.read_text())
    counts = np.fromfile(path.parent / meta["counts_file"], dtype="<u8").astype(np.int64)
    return _hist_from_meta(meta, counts)


def read_histogram(path):
    path = Path(path)
    if path.suffix == ".json":
        return read_histogram_binary(path)
    return read_histogram_csv(path)


# --------------------------------------------------------------------------
# series tables


def write_table(path, columns):
    """CSV from a mapping of column name -> sequence (all equal length)."""
    names = list(columns)
    cols = [np.asarray(columns[n]) for n in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([_cell(v) for v in row])


def _cell(v):
    if isinstance(v, (np.integer, int)):
        return int(v)
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    out = {}
    for k in rows[0]:
        vals = [r[k] for r in rows]
        try:
            out[k] = np.array([int(v) for v in vals], dtype=np.int64)
        except ValueError:
            out[k] = np.array([float(v) if v != "" else np.nan for v in vals])
    return out


def write_offsets(path, series):
    write_table(path, series.columns())


def read_offsets(path, window_single=3.0, window_round=90.0):
    """Read an offset table; only ``t_mid_ps``, ``delta_ps`` and ``delta_err_ps`` are required."""
    from .estimation import OffsetSeries

    c = read_table(path)
    for k in ("t_mid_ps", "delta_ps", "delta_err_ps"):
        if k not in c:
            raise FormatError(f"offset table lacks column {k}")
    n = c["delta_ps"].size
    ints = ("t_mid_ps", "round_index", "segment")
    defaults = {"round_index": np.arange(n), "segment": np.zeros(n, dtype=np.int64)}
    cols = []
    for k in OffsetSeries.COLUMNS:
        dt = np.int64 if k in ints else np.float64
        v = c.get(k, defaults.get(k, np.full(n, np.nan)))
        cols.append(np.asarray(v, dtype=dt))
    return OffsetSeries(*cols, window_single, window_round)
