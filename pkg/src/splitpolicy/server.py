"""Policy-head server with its transports, plus the multi-client scalability harness."""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderSpec, WeightSet, encode_reference, init_weights, output_shape
from .errors import DimensionError, ServeError
from .netsim import EventLoop
from .tensors import FeatureMap, Frame, Tensor3, dequantize, frame_to_tensor, quantize
from .wire import (
    Mode,
    RequestHeader,
    ResponseRecord,
    Status,
    WireError,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    read_request,
    read_response,
)

log = logging.getLogger(__name__)

ACCEPT_MODES = {"raw": {Mode.RAW}, "split": {Mode.SPLIT}, "both": {Mode.RAW, Mode.SPLIT}}


@dataclass(frozen=True)
class PolicyHead:
    """Two fully connected layers, ReLU hidden and tanh output."""

    w1: np.ndarray  # (hidden, input)
    b1: np.ndarray
    w2: np.ndarray  # (actions, hidden)
    b2: np.ndarray

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"policy head {name} is not finite")
            object.__setattr__(self, name, arr)
        if self.w1.shape[0] != self.b1.shape[0] or self.w2.shape != (self.b2.shape[0], self.w1.shape[0]):
            raise DimensionError("policy head layer sizes do not chain")

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def action_dim(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def init(cls, input_dim: int, hidden: int = 32, actions: int = 6,
             rng: np.random.Generator | int = 0, zero_bias: bool = False) -> PolicyHead:
        rng = np.random.default_rng(rng)
        b1 = 1 / np.sqrt(input_dim)
        b2 = 1 / np.sqrt(hidden)
        return cls(
            rng.uniform(-b1, b1, (hidden, input_dim)),
            np.zeros(hidden) if zero_bias else rng.uniform(-b1, b1, hidden),
            rng.uniform(-b2, b2, (actions, hidden)),
            np.zeros(actions) if zero_bias else rng.uniform(-b2, b2, actions),
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.input_dim:
            raise DimensionError(f"policy head expects {self.input_dim} inputs, got {x.shape[0]}")
        h = np.maximum(self.w1.astype(np.float64) @ x + self.b1, 0.0)
        return np.tanh(self.w2.astype(np.float64) @ h + self.b2)

    def lipschitz(self) -> float:
        """Upper bound on the L2 Lipschitz constant (ReLU and tanh are 1-Lipschitz)."""
        return float(np.linalg.norm(self.w1, 2) * np.linalg.norm(self.w2, 2))


@dataclass
class ServerConfig:
    spec: EncoderSpec
    head: PolicyHead
    weights: WeightSet | None = None
    accept: str = "both"
    compute_floor_ns: dict[Mode, int] = field(default_factory=dict)
    host: str = "127.0.0.1"
    port: int = 0

    def __post_init__(self):
        if self.accept not in ACCEPT_MODES:
            raise ValueError(f"accept must be one of {sorted(ACCEPT_MODES)}")
        if Mode.RAW in ACCEPT_MODES[self.accept]:
            if self.weights is None:
                raise ValueError("raw mode needs encoder weights on the server")
            self.weights.check_matches(self.spec)
        K, side = output_shape(self.spec)
        if self.head.input_dim != K * side * side:
            raise DimensionError(f"head input {self.head.input_dim} != K*(X/2^n)^2 = {K * side * side}")


class PolicyServer:
    """Stateless request handler; one shared compute device guarded by a lock.

    The lock serialises compute across connections, which is what makes the
    per-request floor turn into a server capacity limit.
    """

    def __init__(self, config: ServerConfig, clock=time.monotonic_ns):
        self.config = config
        self.clock = clock
        self._device = threading.Lock()
        self.records: list[tuple[Mode, int]] = []  # (mode, server_compute_ns)
        self._records_lock = threading.Lock()

    def act_from_features(self, features: Tensor3) -> np.ndarray:
        return self.config.head.forward(features.data)

    def _compute(self, header: RequestHeader, payload: bytes) -> np.ndarray:
        spec = self.config.spec
        if header.mode == Mode.RAW:
            if (header.width, header.height) != (spec.input_side, spec.input_side):
                raise DimensionError(
                    f"raw frame {header.width}x{header.height} != encoder input {spec.input_side}"
                )
            if spec.input_channels != 4:
                raise DimensionError("raw mode needs an encoder with RGBA input")
            frame = Frame.from_bytes(payload, header.width, header.height, header.channels)
            features = encode_reference(spec, self.config.weights, frame_to_tensor(frame))
        else:
            K, side = output_shape(spec)
            if header.channels != K or (header.width, header.height) != (side, side):
                raise DimensionError(
                    f"feature map {header.channels}x{header.height}x{header.width} != {K}x{side}x{side}"
                )
            features = dequantize(FeatureMap(K, side, payload, header.quant_scale, header.quant_offset))
        return self.act_from_features(features)

    def serve_decision(self, header: RequestHeader, payload: bytes, recv_ns: int | None = None) -> ResponseRecord:
        recv_ns = self.clock() if recv_ns is None else recv_ns
        if header.mode not in ACCEPT_MODES[self.config.accept]:
            raise ServeError(f"mode {header.mode.name.lower()} not accepted by this server")
        floor = self.config.compute_floor_ns.get(header.mode, 0)
        with self._device:
            start = time.perf_counter_ns()
            actions = self._compute(header, payload)
            elapsed = time.perf_counter_ns() - start
            if elapsed < floor:
                time.sleep((floor - elapsed) / 1e9)
                elapsed = time.perf_counter_ns() - start
        with self._records_lock:
            self.records.append((header.mode, elapsed))
        return ResponseRecord(header.seq, tuple(actions), recv_ns, self.clock(), elapsed)

    def handle_bytes(self, message: bytes) -> bytes:
        """Decode, serve and encode; failures become status responses."""
        recv_ns = self.clock()
        seq = 0
        try:
            header, payload = decode_request(message)
            seq = header.seq
            record = self.serve_decision(header, payload, recv_ns)
        except WireError:
            record = ResponseRecord(seq, (), recv_ns, self.clock(), 0, Status.MALFORMED)
        except ServeError:
            record = ResponseRecord(seq, (), recv_ns, self.clock(), 0, Status.MODE_REJECTED)
        except DimensionError:
            record = ResponseRecord(seq, (), recv_ns, self.clock(), 0, Status.DIMENSION_ERROR)
        return encode_response(record)


class InMemoryTransport:
    """Synchronous in-process transport used by the simulator and tests."""

    def __init__(self, server: PolicyServer):
        self.server = server

    def request(self, message: bytes) -> bytes:
        return self.server.handle_bytes(message)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        while True:
            try:
                message = read_request(sock)
            except WireError:
                return  # peer closed or sent garbage; drop the connection
            except OSError:
                return
            try:
                sock.sendall(self.server.policy.handle_bytes(message))
            except OSError:
                return


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    request_queue_size = 256
    allow_reuse_address = True


class TCPPolicyServer:
    """Thread-per-connection TCP front end; use as a context manager."""

    def __init__(self, policy: PolicyServer, host: str = "127.0.0.1", port: int = 0):
        self._server = _TCPServer((host, port), _Handler)
        self._server.policy = policy
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)


def build_request(mode: Mode, seq: int, send_ns: int, observation: Frame | FeatureMap) -> bytes:
    if mode == Mode.RAW:
        frame = observation
        header = RequestHeader(Mode.RAW, seq, send_ns, frame.width, frame.height, frame.channels)
        return encode_request(header, frame.tobytes())
    fm = observation
    header = RequestHeader(Mode.SPLIT, seq, send_ns, fm.side, fm.side, fm.channels,
                           fm.quant_scale, fm.quant_offset)
    return encode_request(header, fm.data)


@dataclass
class LoadReport:
    mode: str
    clients: int
    offered_hz: float
    achieved_hz: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    requests: int
    compute_mean_us: float
    compute_p50_us: float
    budget_ms: float
    passes: bool

    CSV_FIELDS = ("mode", "clients", "offered_hz", "achieved_hz", "p50_ms", "p95_ms", "p99_ms",
                  "requests", "compute_mean_us", "compute_p50_us", "budget_ms", "passes")

    def row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]

    def summary(self) -> str:
        verdict = "PASS" if self.passes else "FAIL"
        return (f"{self.mode} clients={self.clients} offered={self.offered_hz:.2f}Hz "
                f"achieved={self.achieved_hz:.2f}Hz p95={self.p95_ms:.2f}ms "
                f"budget={self.budget_ms:g}ms {verdict}")


@dataclass
class ScaleSetup:
    """Everything a scalability run needs besides the client count."""

    spec: EncoderSpec
    weights: WeightSet
    head: PolicyHead
    floor_ns: dict[Mode, int]
    seed: int = 0

    @classmethod
    def default(cls, spec: EncoderSpec, raw_floor_ns: int = 6_000_000, split_floor_ns: int = 2_000_000,
                seed: int = 0, hidden: int = 32, actions: int = 6) -> ScaleSetup:
        K, side = output_shape(spec)
        weights = init_weights(spec, seed)
        head = PolicyHead.init(K * side * side, hidden, actions, seed + 1)
        return cls(spec, weights, head, {Mode.RAW: raw_floor_ns, Mode.SPLIT: split_floor_ns}, seed)

    def server(self, accept: str = "both") -> PolicyServer:
        return PolicyServer(ServerConfig(self.spec, self.head, self.weights, accept, dict(self.floor_ns)))

    def observation(self, mode: Mode, rng: np.random.Generator) -> Frame | FeatureMap:
        side = self.spec.input_side
        frame = Frame(rng.integers(0, 256, (side, side, 4), dtype=np.uint8))
        if mode == Mode.RAW:
            return frame
        return quantize(encode_reference(self.spec, self.weights, frame_to_tensor(frame)))


def _report(mode: Mode, clients: int, rate_hz: float, sent: int, scheduled: int,
            latencies_s: list[float], compute_ns: list[int], budget_ms: float) -> LoadReport:
    lat_ms = np.asarray(latencies_s, dtype=np.float64) * 1e3
    if lat_ms.size:
        p50, p95, p99 = (float(v) for v in np.percentile(lat_ms, [50, 95, 99]))
    else:
        p50 = p95 = p99 = float("inf")
    achieved = rate_hz * sent / scheduled if scheduled else 0.0
    comp = np.asarray(compute_ns, dtype=np.float64) / 1e3
    passes = bool(sent >= 0.99 * scheduled and lat_ms.size and p95 < budget_ms)
    return LoadReport(
        mode=mode.name.lower(), clients=clients, offered_hz=float(rate_hz), achieved_hz=float(achieved),
        p50_ms=p50, p95_ms=p95, p99_ms=p99, requests=int(lat_ms.size),
        compute_mean_us=float(comp.mean()) if comp.size else 0.0,
        compute_p50_us=float(np.median(comp)) if comp.size else 0.0,
        budget_ms=float(budget_ms), passes=passes,
    )


class LoopbackHarness:
    """A TCP policy server on loopback plus a pool of client connections.

    Reused across probes of a client-count search so that connection set-up
    cost is paid once per client slot.
    """

    def __init__(self, setup: ScaleSetup, host: str = "127.0.0.1"):
        self.setup = setup
        self.policy = setup.server()
        self._tcp = TCPPolicyServer(self.policy, host, 0)
        self._socks: list[socket.socket] = []
        self._obs: dict[Mode, list] = {}

    def __enter__(self):
        self._tcp.__enter__()
        return self

    def __exit__(self, *exc):
        for s in self._socks:
            s.close()
        self._tcp.__exit__(*exc)

    def _connections(self, count: int) -> list[socket.socket]:
        while len(self._socks) < count:
            s = socket.create_connection(self._tcp.address)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._socks.append(s)
        return self._socks[:count]

    def _observations(self, mode: Mode) -> list:
        if mode not in self._obs:
            rng = np.random.default_rng([self.setup.seed, int(mode)])
            self._obs[mode] = [build_request(mode, 0, 0, self.setup.observation(mode, rng)) for _ in range(4)]
        return self._obs[mode]

    def run(self, clients: int, rate_hz: float, duration_s: float, mode: Mode, budget_ms: float) -> LoadReport:
        socks = self._connections(clients)
        templates = self._observations(mode)
        rng = np.random.default_rng([self.setup.seed, clients])
        phases = rng.uniform(0.0, 1.0 / rate_hz, clients)
        period = 1.0 / rate_hz
        results: list = [None] * clients
        errors: list[BaseException] = []
        with self.policy._records_lock:
            self.policy.records.clear()
        start = time.perf_counter() + 0.05 + 0.001 * clients
        end = start + duration_s

        def client(idx: int):
            sock, template = socks[idx], templates[idx % len(templates)]
            sent = scheduled = 0
            latencies = []
            try:
                k = 0
                while True:
                    t_sched = start + phases[idx] + k * period
                    if t_sched >= end:
                        break
                    scheduled += 1
                    k += 1
                    now = time.perf_counter()
                    if now < t_sched:
                        time.sleep(t_sched - now)
                        now = time.perf_counter()
                    if now >= end:
                        continue
                    sent += 1
                    sock.sendall(restamp_request(template, k, time.monotonic_ns()))
                    response = decode_response(read_response(sock))
                    if not response.ok:
                        raise ServeError(f"server answered {response.status.name}")
                    latencies.append(time.perf_counter() - t_sched)
            except BaseException as exc:  # surfaced after join
                errors.append(exc)
            finally:
                results[idx] = (sent, scheduled, latencies)

        threads = [threading.Thread(target=client, args=(i,), daemon=True) for i in range(clients)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        sent = sum(r[0] for r in results)
        scheduled = sum(r[1] for r in results)
        latencies = [v for r in results for v in r[2]]
        with self.policy._records_lock:
            compute = [c for m, c in self.policy.records if m == mode]
        return _report(mode, clients, rate_hz, sent, scheduled, latencies, compute, budget_ms)


def restamp_request(message: bytes, seq: int, send_ns: int) -> bytes:
    """Rewrite seq and client timestamp of an encoded request in place."""
    return message[:6] + struct.pack("<IQ", seq & 0xFFFFFFFF, send_ns) + message[18:]


def _run_simulated(setup: ScaleSetup, clients: int, rate_hz: float, duration_s: float,
                   mode: Mode, budget_ms: float, link_ns: int = 0) -> LoadReport:
    """Virtual-time version: one FIFO compute device, service time = floor."""
    policy = setup.server()
    transport = InMemoryTransport(policy)
    rng = np.random.default_rng(setup.seed)
    obs = setup.observation(mode, rng)
    period_ns = int(round(1e9 / rate_hz))
    end_ns = int(round(duration_s * 1e9))
    phases = rng.integers(0, period_ns, clients)
    service_ns = setup.floor_ns.get(mode, 0)
    loop = EventLoop()
    device_free = 0
    sent = scheduled = 0
    latencies: list[float] = []
    compute: list[int] = []
    message = build_request(mode, 0, 0, obs)
    response_ok = decode_response(transport.request(message)).ok
    if not response_ok:
        raise ServeError("server rejected the simulated request")

    def schedule_next(c: int, k: int, earliest: int):
        nonlocal scheduled
        t_sched = int(phases[c]) + k * period_ns
        if t_sched >= end_ns:
            return
        scheduled += 1
        send_at = max(t_sched, earliest)
        if send_at >= end_ns:
            schedule_next(c, k + 1, send_at)
            return
        loop.at(send_at, send, c, k, t_sched)

    def send(c: int, k: int, t_sched: int):
        nonlocal device_free, sent
        sent += 1
        begin = max(loop.now + link_ns, device_free)
        device_free = begin + service_ns
        compute.append(service_ns)
        loop.at(device_free + link_ns, receive, c, k, t_sched)

    def receive(c: int, k: int, t_sched: int):
        latencies.append((loop.now - t_sched) / 1e9)
        schedule_next(c, k + 1, loop.now)

    for c in range(clients):
        schedule_next(c, 0, 0)
    loop.run()
    return _report(mode, clients, rate_hz, sent, scheduled, latencies, compute, budget_ms)


def run_scalability_experiment(clients: int, rate_hz: float, duration_s: float, mode, setup: ScaleSetup,
                               p95_budget_ms: float = 100.0, transport: str = "loopback",
                               harness: LoopbackHarness | None = None) -> LoadReport:
    if clients < 1:
        raise ValueError("clients must be >= 1")
    if not rate_hz > 0:
        raise ValueError("rate must be > 0")
    mode = Mode[mode.upper()] if isinstance(mode, str) else Mode(mode)
    if transport == "loopback":
        if harness is not None:
            return harness.run(clients, rate_hz, duration_s, mode, p95_budget_ms)
        with LoopbackHarness(setup) as own:
            return own.run(clients, rate_hz, duration_s, mode, p95_budget_ms)
    if transport == "sim":
        return _run_simulated(setup, clients, rate_hz, duration_s, mode, p95_budget_ms)
    raise ValueError(f"unknown transport {transport!r}")


@dataclass
class SearchResult:
    max_clients: int
    upper_limit: int
    probes: list[LoadReport]

    @property
    def hit_upper_limit(self) -> bool:
        return self.max_clients >= self.upper_limit


def find_max_clients(rate_hz: float, p95_budget_ms: float, mode, setup: ScaleSetup,
                     duration_s: float = 2.0, transport: str = "loopback",
                     upper: int = 128) -> SearchResult:
    """Largest passing client count in [1, upper].

    Doubles the client count until a probe fails, then bisects the last
    bracket, so overloaded probes stay close to the capacity boundary.
    """
    if transport == "loopback":
        with LoopbackHarness(setup) as harness:
            return _search(rate_hz, p95_budget_ms, mode, setup, duration_s, transport, upper, harness)
    return _search(rate_hz, p95_budget_ms, mode, setup, duration_s, transport, upper, None)


def _search(rate_hz, p95_budget_ms, mode, setup, duration_s, transport, upper, harness) -> SearchResult:
    probes: list[LoadReport] = []

    def passes(n: int) -> bool:
        report = run_scalability_experiment(n, rate_hz, duration_s, mode, setup, p95_budget_ms,
                                            transport, harness)
        probes.append(report)
        log.info(report.summary())
        return report.passes

    if not passes(1):
        log.warning("no client count passes: a single %s client misses the %.1f ms budget", mode, p95_budget_ms)
        return SearchResult(0, upper, probes)
    lo = 1
    while True:
        hi = min(2 * lo, upper)
        if hi == lo:
            return SearchResult(lo, upper, probes)
        if not passes(hi):
            break
        lo = hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if passes(mid):
            lo = mid
        else:
            hi = mid
    return SearchResult(lo, upper, probes)
