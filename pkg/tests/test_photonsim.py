import math

import numpy as np
import pytest

from pairsync import photonsim as P
from pairsync.timebase import ClockModel

CH = P.ChannelConfig(51_650_000, 51_650_000)


def reference_config(car=(8.9, 0.13)):
    return P.calibrate_rates(8900, 160, (905, 950), CH, target_car=car)


def test_calibration_reproduces_targets():
    src, al, ar, b = reference_config()
    r = P.expected_rates(src.pair_rate, CH, al, ar, b)
    assert r["single_trip"] == pytest.approx(8900, rel=1e-9)
    assert r["round_trip"] == pytest.approx(160, rel=1e-9)
    # widths: each peak is the quadrature sum of its two detectors' jitter
    f1 = P.FWHM_PER_SIGMA * math.hypot(al.jitter_sigma, b.jitter_sigma)
    f2 = P.FWHM_PER_SIGMA * math.hypot(al.jitter_sigma, ar.jitter_sigma)
    assert f1 == pytest.approx(905) and f2 == pytest.approx(950)


def test_calibration_width_identity():
    # FWHM2^2 - FWHM1^2 is the jitter difference of swapping Bob's detector for
    # Alice's return detector
    _, al, ar, b = reference_config()
    lhs = 950.0 ** 2 - 905.0 ** 2
    rhs = P.FWHM_PER_SIGMA ** 2 * (ar.jitter_sigma ** 2 - b.jitter_sigma ** 2)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_calibration_car_targets():
    src, al, ar, b = reference_config()
    r = P.expected_rates(src.pair_rate, CH, al, ar, b)
    for cc, fwhm, singles, target in ((r["single_trip"], 905, r["alice"] * r["bob"], 8.9),
                                      (r["round_trip"], 950, r["alice"] ** 2, 0.13)):
        sigma = fwhm / P.FWHM_PER_SIGMA
        frac = math.erf(fwhm / 2 / (sigma * math.sqrt(2)))
        assert cc * frac / (singles * fwhm * 1e-12) == pytest.approx(target, rel=1e-9)


def test_calibration_without_return_path():
    ch = P.ChannelConfig(51_650_000, 51_650_000, reflectance=0.0)
    src, al, ar, b = P.calibrate_rates(8900, 0, (905, 950), ch)
    r = P.expected_rates(src.pair_rate, ch, al, ar, b)
    assert r["round_trip"] == 0
    assert r["single_trip"] == pytest.approx(8900)


def test_calibration_rejects_infeasible():
    with pytest.raises(ValueError):
        P.calibrate_rates(8900, 160, (905, 950), P.ChannelConfig(1, 1, reflectance=0.0))
    with pytest.raises(ValueError):
        P.calibrate_rates(8900, 160, (50, 950), CH)


def test_config_validation():
    with pytest.raises(ValueError):
        P.ChannelConfig(1, 1, reflectance=1.5)
    with pytest.raises(ValueError):
        P.ChannelConfig(-1, 1)
    with pytest.raises(ValueError):
        P.DetectorConfig(efficiency=2)
    with pytest.raises(ValueError):
        P.SourceConfig(0, 1)


def small(seed=1, duration=2.0, channel=CH, clocks=(ClockModel(), ClockModel()), car=(747, 12.8)):
    src, al, ar, b = P.calibrate_rates(8900, 160, (905, 950), channel, target_car=car,
                                       duration=duration)
    return P.simulate(src, channel, al, ar, b, clocks[0], clocks[1], seed)


def test_streams_sorted_and_tagged():
    out = small()
    for s in (out.alice_stream, out.bob_stream):
        assert np.all(np.diff(s) > 0)
    assert out.truth.alice.tag.size == out.alice_stream.size
    assert out.truth.bob.tag.size == out.bob_stream.size
    assert set(np.unique(out.truth.alice.tag)) <= {P.LOCAL, P.REFLECTED, P.DARK}
    assert set(np.unique(out.truth.bob.tag)) <= {P.TRANSMITTED, P.DARK}


def test_determinism():
    a, b = small(seed=5), small(seed=5)
    assert np.array_equal(a.alice_stream, b.alice_stream)
    assert np.array_equal(a.bob_stream, b.bob_stream)
    assert np.array_equal(a.truth.alice.pair, b.truth.alice.pair)
    c = small(seed=6)
    assert not np.array_equal(a.alice_stream[:100], c.alice_stream[:100])


def test_streamed_chunks_equal_batch():
    src, al, ar, b = P.calibrate_rates(8900, 160, (905, 950), CH, target_car=(747, 12.8))
    ca, cb = ClockModel(resolution=4, white_fm=1e-11), ClockModel(bias=500, resolution=4)
    batch = P.simulate_segments(src.pair_rate, [(2.0, CH)], al, ar, b, ca, cb, 3, chunk=0.5)
    chunks = list(P.iter_chunks(src.pair_rate, [(2.0, CH)], al, ar, b, ca, cb, 3, chunk=0.5,
                                detail=False))
    assert np.array_equal(np.concatenate([c.alice for c in chunks]), batch.alice_stream)
    assert np.array_equal(np.concatenate([c.bob for c in chunks]), batch.bob_stream)


def test_no_reflection_no_reflected_events():
    ch = P.ChannelConfig(51_650_000, 51_650_000, reflectance=0.0)
    src, al, ar, b = P.calibrate_rates(8900, 0, (905, 950), ch, target_car=(747, 12.8),
                                       duration=1.0)
    out = P.simulate(src, ch, al, ar, b, ClockModel(), ClockModel(), 2)
    assert not np.any(out.truth.alice.tag == P.REFLECTED)


def test_rates_match_expectation():
    # 100 s at reduced singles; truth-tagged coincidences against analytic rates
    duration = 100.0
    src, al, ar, b = P.calibrate_rates(8900, 160, (905, 950), CH, target_car=(747, 12.8),
                                       duration=duration)
    out = P.simulate(src, CH, al, ar, b, ClockModel(), ClockModel(), 11)
    exp = P.expected_rates(src.pair_rate, CH, al, ar, b)
    ta, tb = out.truth.alice, out.truth.bob
    local = set(ta.pair[ta.tag == P.LOCAL].tolist())
    n_single = sum(1 for p in tb.pair[tb.tag == P.TRANSMITTED].tolist() if p in local)
    n_round = sum(1 for p in ta.pair[ta.tag == P.REFLECTED].tolist() if p in local)
    for got, rate in ((out.alice_stream.size, exp["alice"]), (out.bob_stream.size, exp["bob"]),
                      (n_single, exp["single_trip"]), (n_round, exp["round_trip"])):
        mu = rate * duration
        assert abs(got - mu) < 5 * math.sqrt(mu) + 1e-3 * mu


def test_truth_recovers_delays_exactly():
    # before jitter, per-pair differences equal delta + dt_ab and dt_ab + dt_ba
    ch = P.ChannelConfig(51_650_000, 51_652_000)
    out = small(channel=ch, clocks=(ClockModel(), ClockModel(bias=500)))
    ta, tb = out.truth.alice, out.truth.bob
    loc = {p: t for p, t, g in zip(ta.pair, ta.arrival, ta.tag) if g == P.LOCAL}
    d_ab = [t - loc[p] for p, t, g in zip(tb.pair, tb.arrival, tb.tag)
            if g == P.TRANSMITTED and p in loc]
    d_aa = [t - loc[p] for p, t, g in zip(ta.pair, ta.arrival, ta.tag)
            if g == P.REFLECTED and p in loc]
    assert d_ab and d_aa
    assert set(d_ab) == {51_650_000}
    assert set(d_aa) == {103_302_000}
    # the local readings then add the clock bias exactly (noiseless clocks)
    assert out.truth.offset_polynomial()[2] == 500


def test_delay_drift_ramp():
    ch = P.ChannelConfig(51_650_000, 51_650_000, delay_ab_drift=1000.0)
    out = small(channel=ch, duration=2.0)
    ta, tb = out.truth.alice, out.truth.bob
    loc = {p: t for p, t, g in zip(ta.pair, ta.arrival, ta.tag) if g == P.LOCAL}
    rows = [(loc[p], t - loc[p]) for p, t, g in zip(tb.pair, tb.arrival, tb.tag)
            if g == P.TRANSMITTED and p in loc]
    s, d = np.array(rows).T
    np.testing.assert_allclose(d, 51_650_000 + 1000.0 * s / 1e12, atol=0.51)


def test_segments_switch_channel():
    ch2 = P.with_extra_delay(CH, 48_300)
    src, al, ar, b = P.calibrate_rates(8900, 160, (905, 950), CH, target_car=(747, 12.8))
    out = P.simulate_segments(src.pair_rate, [(1.0, CH), (1.0, ch2)], al, ar, b, ClockModel(),
                              ClockModel(), 4)
    ta, tb = out.truth.alice, out.truth.bob
    loc = {p: t for p, t, g in zip(ta.pair, ta.arrival, ta.tag) if g == P.LOCAL}
    rows = np.array([(loc[p], t - loc[p]) for p, t, g in zip(tb.pair, tb.arrival, tb.tag)
                     if g == P.TRANSMITTED and p in loc])
    first = rows[rows[:, 0] < 10**12, 1]
    second = rows[rows[:, 0] >= 10**12, 1]
    assert set(first.tolist()) == {51_650_000}
    assert set(second.tolist()) == {51_698_300}


def test_dead_time_respected():
    out = small()
    _, al, _, b = reference_config((747, 12.8))
    assert np.min(np.diff(out.alice_stream)) >= al.dead_time
    assert np.min(np.diff(out.bob_stream)) >= b.dead_time
