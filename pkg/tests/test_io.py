import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pairsync import io
from pairsync.correlation import CorrelationHistogram
from pairsync.estimation import OffsetSeries


def _stream(rng, n=1000, res=4):
    return np.cumsum(rng.integers(1, 10**6, n)) * res


def test_timestamps_round_trip_is_bit_identical(tmp_path, rng):
    t = _stream(rng)
    p = tmp_path / "a.pts"
    io.write_timestamps(p, t, channel=1, resolution=4)
    back, hdr = io.read_timestamps(p)
    assert back.dtype == np.int64 and np.array_equal(back, t)
    assert (hdr.channel, hdr.resolution, hdr.start_time, hdr.n_events) == (1, 4, int(t[0]), t.size)
    mm, _ = io.read_timestamps(p, mmap=True)
    assert np.array_equal(mm, t)
    q = tmp_path / "b.pts"
    io.write_timestamps(q, back, channel=1, resolution=4)
    assert p.read_bytes() == q.read_bytes()


@given(st.lists(st.integers(1, 10**9), min_size=0, max_size=200), st.integers(-10**12, 10**12))
def test_timestamps_round_trip_property(tmp_path_factory, gaps, start):
    t = start + np.cumsum(np.asarray(gaps, dtype=np.int64))
    p = tmp_path_factory.mktemp("ts") / "x.pts"
    io.write_timestamps(p, t)
    back, hdr = io.read_timestamps(p)
    assert np.array_equal(back, t)
    assert hdr.n_events == len(gaps)


def test_header_layout(tmp_path):
    p = tmp_path / "a.pts"
    io.write_timestamps(p, np.array([100, 108]), channel=0, resolution=4, start_time=96)
    raw = p.read_bytes()
    assert len(raw) == io.HEADER_SIZE + 16 == 56
    assert raw[:8] == b"PAIRTS\0\0"
    assert np.frombuffer(raw[40:], "<u8").tolist() == [4, 12]
    # magic, version, resolution, channel, start time, count
    assert int.from_bytes(raw[12:20], "little") == 4
    assert int.from_bytes(raw[24:32], "little", signed=True) == 96
    with pytest.raises(io.FormatError):
        io.write_timestamps(p, np.array([100, 108]), resolution=4, start_time=98)


def test_bad_files(tmp_path, rng):
    p = tmp_path / "a.pts"
    io.write_timestamps(p, _stream(rng, 10))
    raw = bytearray(p.read_bytes())
    bad = tmp_path / "bad.pts"
    bad.write_bytes(b"NOTPAIRS" + bytes(raw[8:]))
    with pytest.raises(io.FormatError, match="magic"):
        io.read_timestamps(bad)
    bad.write_bytes(bytes(raw[:-3]))
    with pytest.raises(io.FormatError, match="size"):
        io.read_timestamps(bad)
    bad.write_bytes(bytes(raw[:20]))
    with pytest.raises(io.FormatError):
        io.read_timestamps(bad)
    with pytest.raises(io.FormatError):
        io.write_timestamps(bad, np.array([5, 3]))
    with pytest.raises(io.FormatError):
        io.write_timestamps(bad, np.array([4, 6]), resolution=4)


def test_streaming_writer_matches_batch(tmp_path, rng):
    t = _stream(rng, 500)
    a, b = tmp_path / "a.pts", tmp_path / "b.pts"
    io.write_timestamps(a, t, resolution=4)
    with io.TimestampWriter(b, resolution=4) as w:
        for chunk in np.array_split(t, 7):
            w.write(chunk)
        w.write(np.array([], dtype=np.int64))
    assert a.read_bytes() == b.read_bytes()
    with pytest.raises(io.FormatError):
        with io.TimestampWriter(tmp_path / "c.pts") as w:
            w.write(t[10:])
            w.write(t[:10])


def _hist(rng):
    return CorrelationHistogram(-1000.0, 62.5, rng.integers(50, 200, 32), 10**5, 2 * 10**5,
                                10**12, "cross", 4)


def test_histogram_csv_round_trip(tmp_path, rng):
    h = _hist(rng)
    p = tmp_path / "h.csv"
    io.write_histogram_csv(p, h)
    back = io.read_histogram(p)
    assert np.array_equal(back.counts, h.counts)
    assert (back.tau_start, back.bin_width, back.n_left, back.n_right, back.duration, back.kind,
            back.lag_step) == (h.tau_start, h.bin_width, h.n_left, h.n_right, h.duration, h.kind,
                               h.lag_step)
    header = p.read_text().splitlines()[1]
    assert header == "tau_ps,counts,normalized"


def test_histogram_binary_round_trip(tmp_path, rng):
    h = _hist(rng)
    p = tmp_path / "h.json"
    io.write_histogram_binary(p, h)
    assert (tmp_path / "h.bin").stat().st_size == 8 * h.nbins
    back = io.read_histogram(p)
    assert np.array_equal(back.counts, h.counts) and back.lag_step == 4


def test_offsets_round_trip(tmp_path, rng):
    s = OffsetSeries.from_arrays(np.arange(10) * 3 * 10**12, rng.normal(500, 16, 10), 16.0)
    p = tmp_path / "o.csv"
    io.write_offsets(p, s)
    back = io.read_offsets(p)
    for k, v in s.columns().items():
        np.testing.assert_array_equal(back.columns()[k], v)
    p.write_text("t_mid_ps,delta_ps\n1,2\n")
    with pytest.raises(io.FormatError):
        io.read_offsets(p)


def test_json_is_deterministic():
    obj = {"b": np.float64(1.5), "a": [np.int64(3), float("nan")], "c": np.arange(2)}
    s = io.dumps(obj)
    assert s == io.dumps(dict(reversed(list(obj.items()))))
    assert json.loads(s) == {"a": [3, None], "b": 1.5, "c": [0, 1]}
