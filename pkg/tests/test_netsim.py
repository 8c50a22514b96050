from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq

from splitpolicy.netsim import (
    EventLoop,
    LatencyConfig,
    LinkConfig,
    ShapedChannel,
    analytic_latency,
    break_even_bandwidth,
    crossover_bandwidth,
    request_size,
    response_size,
    run_latency_experiment,
    transmit_ns,
)
from splitpolicy.wire import REQUEST_HEADER_SIZE

X, K, N = 400, 4, 3
LAT = LatencyConfig(encode_ns=100_000_000, overhead_ns=36_500_000)


def break_even_exact(X, n, K, j):
    return 32 * X * X * (1 - Fraction(K, 4 * 2 ** (2 * n))) / Fraction(j)


@pytest.mark.parametrize("args,expected", [((400, 3, 4, "0.1"), 50_400_000), ((200, 2, 4, "0.05"), 24_000_000),
                                           ((84, 2, 16, "0.02"), 8_467_200)])
def test_break_even_examples(args, expected):
    X_, n, K_, j = args
    assert break_even_exact(X_, n, K_, j) == expected
    assert break_even_bandwidth(X_, n, K_, float(j)) == pytest.approx(expected, rel=1e-12)


@given(st.integers(8, 1000), st.integers(0, 5), st.integers(1, 64), st.floats(1e-3, 10))
def test_break_even_matches_exact(X_, n, K_, j):
    assert break_even_bandwidth(X_, n, K_, j) == pytest.approx(float(break_even_exact(X_, n, K_, j)), rel=1e-9)


def test_break_even_monotone():
    base = break_even_bandwidth(400, 3, 4, 0.1)
    assert break_even_bandwidth(400, 3, 4, 0.2) < base
    assert break_even_bandwidth(500, 3, 4, 0.1) > base
    assert break_even_bandwidth(400, 3, 16, 0.1) < base
    assert break_even_bandwidth(400, 4, 4, 0.1) > base
    assert break_even_bandwidth(400, 1, 16, 0.1) == 0.0
    with pytest.raises(ValueError):
        break_even_bandwidth(400, 3, 4, 0.0)


# analytic latency model

def test_analytic_example_10mbps():
    raw = analytic_latency("raw", X, K, N, LinkConfig(10e6), LAT)
    split = analytic_latency("split", X, K, N, LinkConfig(10e6), LAT)
    # 640,035 B request + 60 B response at 10 Mb/s, plus 36.5 ms overhead
    assert raw.total_ns == 36_500_000 + transmit_ns(640_035, 10e6) + transmit_ns(60, 10e6)
    assert raw.total_ns / 1e6 == pytest.approx(548.6, abs=0.05)
    assert split.total_ns / 1e6 == pytest.approx(144.6, abs=0.05)


def test_large_bandwidth_limit():
    raw = analytic_latency("raw", X, K, N, LinkConfig(1e15), LAT)
    split = analytic_latency("split", X, K, N, LinkConfig(1e15), LAT)
    assert raw.total_ns == pytest.approx(LAT.overhead_ns, abs=10)
    assert split.total_ns - raw.total_ns == pytest.approx(LAT.encode_ns, abs=10)


def continuous_gap(b):
    """split - raw latency in seconds, with no integer rounding."""
    raw_bits = 8 * (4 * X * X + REQUEST_HEADER_SIZE)
    split_bits = 8 * (K * (X // 2 ** N) ** 2 + REQUEST_HEADER_SIZE)
    return LAT.encode_ns / 1e9 + (split_bits - raw_bits) / b


def test_crossover_against_root_finder():
    oracle = brentq(continuous_gap, 1e5, 1e10, xtol=1e-3)
    assert oracle == pytest.approx(50.4e6, rel=1e-9)
    assert crossover_bandwidth(X, K, N, LAT) == pytest.approx(oracle, rel=5e-3)


def test_crossover_nan_when_split_never_wins():
    fast = LatencyConfig(encode_ns=100_000_000_000)
    assert np.isnan(crossover_bandwidth(X, K, N, fast, hi_bps=1e7))


@given(st.floats(1e5, 1e10))
def test_split_wins_exactly_below_crossover(b):
    link = LinkConfig(b)
    raw = analytic_latency("raw", X, K, N, link, LAT).total_ns
    split = analytic_latency("split", X, K, N, link, LAT).total_ns
    if abs(b - 50.4e6) / 50.4e6 > 1e-6:
        assert (split < raw) == (b < 50.4e6)


# channel

def test_transmit_definition():
    assert transmit_ns(1250, 1e6) == 10_000_000
    assert transmit_ns(0, 1e6) == 0


def test_channel_delay_and_propagation():
    ch = ShapedChannel(LinkConfig(8e6, base_one_way_ns=500))
    assert ch.send(1000, 0) == 1_000_000 + 500
    assert ch.send(b"x" * 1000, 5_000_000) == 6_000_500


def test_channel_queues_back_to_back():
    ch = ShapedChannel(LinkConfig(8e6))
    times = [ch.send(1000, 0) for _ in range(5)]
    assert times == [1_000_000 * (i + 1) for i in range(5)]


@given(st.lists(st.tuples(st.integers(0, 10_000_000), st.integers(1, 5000)), min_size=1, max_size=50),
       st.integers(0, 2_000_000), st.integers(0, 100))
def test_channel_fifo_with_jitter(sends, jitter, seed):
    ch = ShapedChannel(LinkConfig(1e7, base_one_way_ns=100_000, jitter_ns=jitter), seed)
    sends = sorted(sends)
    deliveries = [ch.send(n, t) for t, n in sends]
    assert deliveries == sorted(deliveries)
    for (t, n), d in zip(sends, deliveries):
        assert d >= t + transmit_ns(n, 1e7)


def test_channel_throughput_saturates_bandwidth():
    ch = ShapedChannel(LinkConfig(1e6))
    last = 0
    for i in range(1000):
        last = ch.send(125, 0)
    assert last == 1_000_000_000  # 1000 * 1000 bits at 1 Mb/s


def test_event_loop_order():
    loop, seen = EventLoop(), []
    loop.at(5, seen.append, "b")
    loop.at(1, seen.append, "a")
    loop.at(5, seen.append, "c")
    loop.run()
    assert seen == ["a", "b", "c"] and loop.now == 5
    with pytest.raises(ValueError):
        loop.at(1, seen.append, "late")


# simulation

@pytest.mark.parametrize("mode", ["raw", "split"])
@pytest.mark.parametrize("bandwidth", [10e6, 25e6, 50e6, 100e6])
def test_simulation_equals_analytic_without_jitter(mode, bandwidth):
    link = LinkConfig(bandwidth, base_one_way_ns=250_000)
    stats = run_latency_experiment(mode, 50, X, K, N, link, LAT)
    expected = analytic_latency(mode, X, K, N, link, LAT)
    assert len(stats.traces) == 50
    assert all(t == expected for t in stats.traces)
    assert stats.median_ns == expected.total_ns


def test_single_decision():
    stats = run_latency_experiment("split", 1, X, K, N, LinkConfig(25e6), LAT)
    assert len(stats.traces) == 1
    assert stats.median_ns == stats.p95_ns == stats.mean_ns
    with pytest.raises(ValueError):
        run_latency_experiment("split", 0, X, K, N, LinkConfig(25e6), LAT)


def test_jitter_is_seeded_and_bounded():
    link = LinkConfig(25e6, base_one_way_ns=2_000_000, jitter_ns=1_000_000)
    a = run_latency_experiment("raw", 200, X, K, N, link, LAT, seed=4)
    b = run_latency_experiment("raw", 200, X, K, N, link, LAT, seed=4)
    assert [t.total_ns for t in a.traces] == [t.total_ns for t in b.traces]
    base = analytic_latency("raw", X, K, N, link, LAT).total_ns
    assert np.all(np.abs(a.totals - base) <= 2_000_000)
    assert a.totals.std() > 0


def test_stage_medians_sum_and_names():
    stats = run_latency_experiment("split", 10, X, K, N, LinkConfig(10e6), LAT)
    med = stats.stage_medians()
    assert list(med) == ["encode_ns", "serialize_ns", "uplink_ns", "server_ns", "downlink_ns", "deserialize_ns"]
    assert med["encode_ns"] == 100_000_000
    assert sum(med.values()) == stats.median_ns


def test_ordering_over_sweep():
    raw = [run_latency_experiment("raw", 5, X, K, N, LinkConfig(b), LAT).median_ns for b in (10e6, 25e6, 50e6, 100e6)]
    split = [run_latency_experiment("split", 5, X, K, N, LinkConfig(b), LAT).median_ns for b in (10e6, 25e6, 50e6, 100e6)]
    assert raw == sorted(raw, reverse=True) and split == sorted(split, reverse=True)
    assert raw[0] > split[0] and raw[3] < split[3]


def test_message_sizes():
    assert request_size("raw", X, K, N) == 640_035
    assert request_size("split", X, K, N) == 10_035
    assert response_size(6) == 60
