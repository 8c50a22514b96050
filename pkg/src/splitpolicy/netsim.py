"""Bandwidth break-even model and decision-latency simulation.

All simulated times are integer nanoseconds on a virtual clock. The same
``transmit_ns`` rounding is used by the analytic model and the event-driven
channel, so with zero jitter the two agree exactly.
"""

from __future__ import annotations

import functools
import heapq
import itertools
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .wire import (
    RequestHeader,
    ResponseRecord,
    encode_request,
    encode_response,
    parse_mode,
    payload_bytes,
    Mode,
)

# 8 bits per byte times 4 bytes per RGBA pixel
BITS_PER_RGBA_PIXEL = 32
DEFAULT_ACTION_DIM = 6


@dataclass(frozen=True)
class LinkConfig:
    bandwidth_bps: float
    base_one_way_ns: int = 0
    jitter_ns: int = 0

    def __post_init__(self):
        if not self.bandwidth_bps > 0:
            raise ValueError("bandwidth_bps must be > 0")
        if self.base_one_way_ns < 0 or self.jitter_ns < 0:
            raise ValueError("propagation and jitter must be >= 0")


@dataclass(frozen=True)
class LatencyConfig:
    encode_ns: int = 100_000_000
    server_compute_ns: int = 0
    # fixed per-decision cost, half charged before send and half after receive
    overhead_ns: int = 36_500_000

    def __post_init__(self):
        if min(self.encode_ns, self.server_compute_ns, self.overhead_ns) < 0:
            raise ValueError("latency terms must be >= 0")


@dataclass(frozen=True)
class DecisionTrace:
    """Per-stage durations of one decision, in nanoseconds.

    The fixed overhead is split between serialize (first half) and
    deserialize (remainder); uplink/downlink include propagation.
    """

    encode_ns: int
    serialize_ns: int
    uplink_ns: int
    server_ns: int
    downlink_ns: int
    deserialize_ns: int

    @property
    def total_ns(self) -> int:
        return (self.encode_ns + self.serialize_ns + self.uplink_ns
                + self.server_ns + self.downlink_ns + self.deserialize_ns)

    @classmethod
    def stage_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def stages(self) -> list[int]:
        return [getattr(self, name) for name in self.stage_names()]


def break_even_bandwidth(X: int, n: int, K: int, j_seconds: float) -> float:
    """Bandwidth (bit/s) below which sending features beats sending RGBA frames."""
    if not j_seconds > 0:
        raise ValueError("per-frame encode time j must be > 0")
    return BITS_PER_RGBA_PIXEL * X * X * (1.0 - K / (4.0 * 2 ** (2 * n))) / j_seconds


def transmit_ns(nbytes: int, bandwidth_bps: float) -> int:
    return int(round(nbytes * 8 * 1e9 / bandwidth_bps))


@functools.lru_cache(maxsize=256)
def request_size(mode, X: int, K: int, n: int) -> int:
    """Bytes on the wire for one request, measured by encoding one."""
    mode = parse_mode(mode)
    if mode == Mode.RAW:
        header = RequestHeader(Mode.RAW, 0, 0, X, X, 4)
    else:
        side = X // (2 ** n)
        header = RequestHeader(Mode.SPLIT, 0, 0, side, side, K, 1.0, 0.0)
    return len(encode_request(header, bytes(payload_bytes(mode, X, K, n))))


@functools.lru_cache(maxsize=64)
def response_size(action_dim: int = DEFAULT_ACTION_DIM) -> int:
    return len(encode_response(ResponseRecord(0, (0.0,) * action_dim)))


def analytic_latency(mode, X: int, K: int, n: int, link: LinkConfig, lat: LatencyConfig,
                     action_dim: int = DEFAULT_ACTION_DIM) -> DecisionTrace:
    mode = parse_mode(mode)
    half = lat.overhead_ns // 2
    return DecisionTrace(
        encode_ns=lat.encode_ns if mode == Mode.SPLIT else 0,
        serialize_ns=half,
        uplink_ns=transmit_ns(request_size(mode, X, K, n), link.bandwidth_bps) + link.base_one_way_ns,
        server_ns=lat.server_compute_ns,
        downlink_ns=transmit_ns(response_size(action_dim), link.bandwidth_bps) + link.base_one_way_ns,
        deserialize_ns=lat.overhead_ns - half,
    )


class ShapedChannel:
    """One direction of a shaped link: a single FIFO queue drained at B bit/s.

    ``send`` returns the delivery time. Delivery order always equals send
    order; jitter can delay a message but never lets it overtake.
    """

    def __init__(self, link: LinkConfig, seed: int | np.random.Generator | None = 0):
        self.link = link
        self._rng = np.random.default_rng(seed)
        self._free_at = 0
        self._last_delivery = 0
        self.log: list[tuple[int, int, int]] = []  # (send time, bytes, delivery time)

    def send(self, message: bytes | int, now: int) -> int:
        nbytes = message if isinstance(message, int) else len(message)
        start = max(self._free_at, now)
        self._free_at = start + transmit_ns(nbytes, self.link.bandwidth_bps)
        delivery = self._free_at + self.link.base_one_way_ns
        if self.link.jitter_ns:
            delivery += int(self._rng.integers(-self.link.jitter_ns, self.link.jitter_ns + 1))
        delivery = max(delivery, self._free_at, self._last_delivery)
        self._last_delivery = delivery
        self.log.append((now, nbytes, delivery))
        return delivery


def shaped_channel(link: LinkConfig, seed: int | None = 0) -> ShapedChannel:
    return ShapedChannel(link, seed)


class EventLoop:
    """Minimal discrete-event scheduler on an integer virtual clock."""

    def __init__(self):
        self.now = 0
        self._queue: list = []
        self._counter = itertools.count()

    def at(self, time: int, callback, *args) -> None:
        if time < self.now:
            raise ValueError("cannot schedule into the past")
        heapq.heappush(self._queue, (time, next(self._counter), callback, args))

    def run(self) -> None:
        while self._queue:
            time, _, callback, args = heapq.heappop(self._queue)
            self.now = time
            callback(*args)


@dataclass
class LatencyStats:
    mode: str
    bandwidth_bps: float
    traces: list[DecisionTrace] = field(default_factory=list)

    @property
    def totals(self) -> np.ndarray:
        return np.array([t.total_ns for t in self.traces], dtype=np.int64)

    @property
    def median_ns(self) -> float:
        return float(np.median(self.totals))

    @property
    def mean_ns(self) -> float:
        return float(np.mean(self.totals))

    @property
    def p95_ns(self) -> float:
        return float(np.percentile(self.totals, 95))

    def stage_medians(self) -> dict[str, float]:
        table = np.array([t.stages() for t in self.traces], dtype=np.int64)
        return {name: float(np.median(table[:, i])) for i, name in enumerate(DecisionTrace.stage_names())}


def run_latency_experiment(mode, decisions: int, X: int, K: int, n: int,
                           link: LinkConfig, lat: LatencyConfig, seed: int = 0,
                           action_dim: int = DEFAULT_ACTION_DIM) -> LatencyStats:
    """Closed-loop client: the next observation is taken when the action arrives."""
    if decisions < 1:
        raise ValueError("decisions must be >= 1")
    mode = parse_mode(mode)
    up_seed, down_seed = np.random.SeedSequence(seed).spawn(2)
    uplink, downlink = ShapedChannel(link, up_seed), ShapedChannel(link, down_seed)
    req_bytes = request_size(mode, X, K, n)
    resp_bytes = response_size(action_dim)
    half = lat.overhead_ns // 2
    encode = lat.encode_ns if mode == Mode.SPLIT else 0
    loop = EventLoop()
    stats = LatencyStats(mode.name.lower(), link.bandwidth_bps)

    def observe(i: int):
        marks = {"t0": loop.now}
        loop.at(loop.now + encode, serialized, i, marks)

    def serialized(i, marks):
        marks["encoded"] = loop.now
        marks["sent"] = loop.now + half
        arrival = uplink.send(req_bytes, marks["sent"])
        loop.at(arrival, server_receive, i, marks)

    def server_receive(i, marks):
        marks["arrived"] = loop.now
        loop.at(loop.now + lat.server_compute_ns, server_reply, i, marks)

    def server_reply(i, marks):
        marks["replied"] = loop.now
        loop.at(downlink.send(resp_bytes, loop.now), client_receive, i, marks)

    def client_receive(i, marks):
        done = loop.now + (lat.overhead_ns - half)
        stats.traces.append(DecisionTrace(
            encode_ns=marks["encoded"] - marks["t0"],
            serialize_ns=marks["sent"] - marks["encoded"],
            uplink_ns=marks["arrived"] - marks["sent"],
            server_ns=marks["replied"] - marks["arrived"],
            downlink_ns=loop.now - marks["replied"],
            deserialize_ns=done - loop.now,
        ))
        if i + 1 < decisions:
            loop.at(done, observe, i + 1)

    loop.at(0, observe, 0)
    loop.run()
    return stats


def crossover_bandwidth(X: int, K: int, n: int, lat: LatencyConfig, base_one_way_ns: int = 0,
                        lo_bps: float = 1e5, hi_bps: float = 1e11, decisions: int = 1,
                        seed: int = 0, action_dim: int = DEFAULT_ACTION_DIM,
                        iterations: int = 80) -> float:
    """Bandwidth at which simulated split and raw medians meet (log bisection).

    Returns ``nan`` if the split pipeline does not win at ``lo_bps`` and lose
    at ``hi_bps``.
    """
    def gap(b: float) -> float:
        link = LinkConfig(b, base_one_way_ns)
        split = run_latency_experiment("split", decisions, X, K, n, link, lat, seed, action_dim)
        raw = run_latency_experiment("raw", decisions, X, K, n, link, lat, seed, action_dim)
        return split.median_ns - raw.median_ns

    if not (gap(lo_bps) < 0 < gap(hi_bps)):
        return math.nan
    lo, hi = math.log(lo_bps), math.log(hi_bps)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if gap(math.exp(mid)) < 0:
            lo = mid
        else:
            hi = mid
    return math.exp(0.5 * (lo + hi))
