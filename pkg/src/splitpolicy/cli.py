"""Command-line entry point: ``splitpolicy <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 device
constraint error, 5 any other operation error.
"""

from __future__ import annotations

import argparse
import logging
import struct
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from .bench import (
    RunManifest,
    bench_inference,
    bench_sustained,
    output_dir,
    write_csv,
)
from .config import KeyValueConfig, load_encoder_spec
from .encoder import EncoderSpec, encode_reference, init_weights, load_weights, output_shape
from .errors import ConfigError, ConstraintError, DimensionError, SplitPolicyError
from .netsim import (
    DecisionTrace,
    LatencyConfig,
    LinkConfig,
    break_even_bandwidth,
    crossover_bandwidth,
    run_latency_experiment,
)
from .server import LoadReport, ScaleSetup, find_max_clients
from .shader import DeviceProfile, emit_plan, execute_plan, plan_manifest, plan_passes, plan_report
from .tensors import AlreadyRGBAError, Frame, Tensor3, frame_to_tensor, quantize, to_rgba
from .wire import Mode, RequestHeader, encode_request, payload_bytes

log = logging.getLogger("splitpolicy")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CONSTRAINT, EXIT_OPERATION = 0, 2, 3, 4, 5

IMAGE_HEADER = struct.Struct("<3I")

LATENCY_KEYS = {"mode", "X", "K", "n", "bandwidth_bps", "encode_ns", "server_compute_ns", "overhead_ns",
                "decisions", "seed", "base_one_way_ns", "jitter_ns", "action_dim"}
SCALE_KEYS = {"spec", "X", "rate_hz", "p95_budget_ms", "duration_s", "raw_floor_ns", "split_floor_ns",
              "transport", "upper", "seed", "hidden", "action_dim"}
BREAKEVEN_KEYS = {"X", "n", "K", "j"}


def read_image(path: str | Path) -> Frame:
    data = Path(path).read_bytes()
    if len(data) < IMAGE_HEADER.size:
        raise DimensionError(f"{path}: image file shorter than its 12-byte header")
    width, height, channels = IMAGE_HEADER.unpack_from(data)
    if channels not in (3, 4):
        raise DimensionError(f"{path}: images have 3 or 4 channels, header says {channels}")
    return Frame.from_bytes(data[IMAGE_HEADER.size:], width, height, channels)


def write_image(path: str | Path, frame: Frame) -> None:
    Path(path).write_bytes(IMAGE_HEADER.pack(frame.width, frame.height, frame.channels) + frame.tobytes())


def default_config(name: str) -> KeyValueConfig:
    text = resources.files("splitpolicy").joinpath("configs", name).read_text()
    return KeyValueConfig.parse(text, f"<builtin {name}>")


def _load_config(args, builtin: str, allowed: set[str]) -> KeyValueConfig:
    cfg = KeyValueConfig.load(args.config) if args.config else default_config(builtin)
    cfg.check_keys(allowed)
    return cfg


def _seed(args, cfg: KeyValueConfig | None = None) -> int:
    if args.seed is not None:
        return args.seed
    if cfg is not None:
        return cfg.integer("seed", 0)
    return 0


def _manifest(args, seed: int) -> RunManifest:
    return RunManifest(args.command, args.config or "<builtin>", seed, str(args.out))


def _spec(args) -> EncoderSpec:
    return load_encoder_spec(args.spec, args.input_side)


def _weights(args, spec: EncoderSpec, seed: int):
    if args.weights:
        return load_weights(Path(args.weights).read_bytes(), spec)
    return init_weights(spec, seed)


def _profile(args) -> DeviceProfile:
    return DeviceProfile(args.max_textures, args.sample_budget, args.profile_name)


def _print_plan(report: dict) -> None:
    print(f"passes={report['pass_count']} peak_textures={report['peak_textures']} "
          f"profile={report['profile']} ({report['max_textures']} textures, {report['sample_budget']} samples)")
    for p in report["passes"]:
        lo, hi = p["out_channels"]
        print(f"  {p['file']:<22} {p['role']:<8} out={lo}-{hi - 1:<3} samples={p['samples']:<3} "
              f"bindings={','.join(map(str, p['bindings']))}")


def cmd_plan(args) -> int:
    seed = _seed(args)
    spec = _spec(args)
    plan = plan_passes(spec, _profile(args))
    out = output_dir(args.out)
    manifest = _manifest(args, seed)
    (out / "plan.txt").write_text(manifest.line() + "\n" + plan_manifest(plan))
    _print_plan(plan_report(plan))
    return EXIT_OK


def cmd_emit_shaders(args) -> int:
    seed = _seed(args)
    spec = _spec(args)
    weights = _weights(args, spec, seed)
    plan = plan_passes(spec, _profile(args))
    out = output_dir(args.out)
    manifest = _manifest(args, seed)
    (out / "plan.txt").write_text(manifest.line() + "\n" + plan_manifest(plan))
    for name, source in emit_plan(plan, spec, weights).items():
        (out / name).write_text(manifest.line("//") + "\n" + source)
    _print_plan(plan_report(plan))
    return EXIT_OK


def cmd_encode(args) -> int:
    seed = _seed(args)
    spec = _spec(args)
    weights = _weights(args, spec, seed)
    frame = read_image(args.image)
    if spec.input_channels == 4:
        try:
            frame = to_rgba(frame)
        except AlreadyRGBAError:
            pass
    if (frame.width, frame.height) != (spec.input_side, spec.input_side) or frame.channels != spec.input_channels:
        raise DimensionError(
            f"image is {frame.width}x{frame.height}x{frame.channels}, encoder expects "
            f"{spec.input_side}x{spec.input_side}x{spec.input_channels}"
        )
    x = frame_to_tensor(frame)
    if args.executor == "reference":
        features = encode_reference(spec, weights, x)
    else:
        features = execute_plan(plan_passes(spec, _profile(args)), spec, weights, x, args.precision)
    fm = quantize(features)
    header = RequestHeader(Mode.SPLIT, 0, 0, fm.side, fm.side, fm.channels, fm.quant_scale, fm.quant_offset)
    out = output_dir(args.out)
    (out / "features.spw").write_bytes(encode_request(header, fm.data))
    manifest = _manifest(args, seed)
    write_csv(out / "encode.csv", manifest,
              ["executor", "K", "side", "quant_scale", "quant_offset", "min", "max"],
              [[args.executor, fm.channels, fm.side, fm.quant_scale, fm.quant_offset,
                float(features.data.min()), float(features.data.max())]])
    print(f"wrote {out / 'features.spw'}: K={fm.channels} side={fm.side} "
          f"payload={len(fm.data)} bytes scale={fm.quant_scale:.6g} offset={fm.quant_offset:.6g}")
    return EXIT_OK


def cmd_bench_inference(args) -> int:
    seed = _seed(args)
    spec = _spec(args)
    weights = _weights(args, spec, seed)
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
        for side in sizes:
            output_shape(spec.with_input_side(side))
    except ValueError as exc:
        raise ConfigError(f"--sizes: {exc}") from None
    rows = bench_inference(spec, weights, sizes, args.repeats, seed)
    write_csv(Path(args.out) / "bench_inference.csv", _manifest(args, seed),
              ["X", "repeats", "mean_ms", "std_ms"], rows)
    for side, repeats, mean, std in rows:
        print(f"X={side:<5} mean={mean:9.3f} ms  std={std:8.3f} ms  (n={repeats})")
    return EXIT_OK


def cmd_bench_sustained(args) -> int:
    seed = _seed(args)
    if args.stub_ms is not None:
        delay = args.stub_ms / 1e3

        def encode():
            time.sleep(delay)
    else:
        spec = _spec(args)
        weights = _weights(args, spec, seed)
        shape = (spec.input_channels, spec.input_side, spec.input_side)
        x = Tensor3(np.random.default_rng(seed).random(shape, dtype=np.float32))

        def encode():
            encode_reference(spec, weights, x)

    stats = bench_sustained(encode, args.frames, args.window)
    manifest = _manifest(args, seed)
    ma = stats.moving_average
    rows = []
    for i, d in enumerate(stats.durations_ns):
        j = i - (stats.window - 1)
        rows.append([i, int(d), float(ma[j]) if j >= 0 else ""])
    out = Path(args.out)
    write_csv(out / "bench_sustained.csv", manifest, ["frame", "duration_ns", "moving_avg_ns"], rows)
    write_csv(out / "bench_sustained_summary.csv", manifest,
              ["frames", "window", "mean_ns", "moving_avg_points", "drift"],
              [[stats.durations_ns.size, stats.window, float(stats.durations_ns.mean()), ma.size, stats.drift]])
    print(f"frames={stats.durations_ns.size} mean={stats.durations_ns.mean() / 1e6:.3f} ms drift={stats.drift:+.4f}")
    return EXIT_OK


def cmd_breakeven(args) -> int:
    cfg = _load_config(args, "breakeven.cfg", BREAKEVEN_KEYS)
    X = args.X if args.X is not None else cfg.integer("X")
    n = args.n if args.n is not None else cfg.integer("n")
    K = args.K if args.K is not None else cfg.integer("K")
    j = args.j if args.j is not None else cfg.number("j")
    seed = _seed(args)
    bps = break_even_bandwidth(X, n, K, j)
    raw, split = payload_bytes(Mode.RAW, X), payload_bytes(Mode.SPLIT, X, K, n)
    write_csv(Path(args.out) / "breakeven.csv", _manifest(args, seed),
              ["X", "n", "K", "j_s", "raw_payload_bytes", "split_payload_bytes", "break_even_bps", "break_even_mbps"],
              [[X, n, K, float(j), raw, split, bps, bps / 1e6]])
    print(f"X={X} n={n} K={K} j={j:g}s")
    print(f"  raw payload    {raw:>12,d} bytes")
    print(f"  split payload  {split:>12,d} bytes")
    print(f"  break-even     {bps / 1e6:12.3f} Mb/s")
    return EXIT_OK


def _latency_settings(cfg: KeyValueConfig):
    mode = cfg.get("mode", "both")
    if mode not in ("raw", "split", "both"):
        raise ConfigError(f"{cfg.source}: mode must be raw, split or both")
    try:
        lat = LatencyConfig(cfg.integer("encode_ns", 100_000_000), cfg.integer("server_compute_ns", 0),
                            cfg.integer("overhead_ns", 36_500_000))
        bandwidths = cfg.numbers("bandwidth_bps")
        for b in bandwidths:
            LinkConfig(b)
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: {exc}") from None
    return mode, lat, bandwidths


def cmd_bench_latency(args) -> int:
    cfg = _load_config(args, "latency_sweep.cfg", LATENCY_KEYS)
    seed = _seed(args, cfg)
    mode, lat, bandwidths = _latency_settings(cfg)
    X, K, n = cfg.integer("X", 400), cfg.integer("K", 4), cfg.integer("n", 3)
    payload_bytes(Mode.SPLIT, X, K, n)
    decisions = cfg.integer("decisions", 1000)
    base, jitter = cfg.integer("base_one_way_ns", 0), cfg.integer("jitter_ns", 0)
    action_dim = cfg.integer("action_dim", 6)
    modes = ["raw", "split"] if mode == "both" else [mode]

    stage_names = DecisionTrace.stage_names()
    decision_rows, summary_rows, medians = [], [], {}
    for b in bandwidths:
        link = LinkConfig(b, base, jitter)
        for m in modes:
            stats = run_latency_experiment(m, decisions, X, K, n, link, lat, seed, action_dim)
            for i, trace in enumerate(stats.traces):
                decision_rows.append([m, b, i, *trace.stages(), trace.total_ns])
            summary_rows.append([b, m, decisions, stats.median_ns / 1e6, stats.mean_ns / 1e6, stats.p95_ns / 1e6])
            medians[(b, m)] = stats.median_ns / 1e6

    crossover = float("nan")
    if len(modes) == 2:
        crossover = crossover_bandwidth(X, K, n, lat, base, seed=seed, action_dim=action_dim)
    out = Path(args.out)
    manifest = _manifest(args, seed)
    write_csv(out / "latency_decisions.csv", manifest,
              ["mode", "bandwidth_bps", "decision", *stage_names, "total_ns"], decision_rows)
    write_csv(out / "latency_summary.csv", manifest,
              ["bandwidth_bps", "mode", "decisions", "median_ms", "mean_ms", "p95_ms"], summary_rows)
    write_csv(out / "latency_crossover.csv", manifest, ["crossover_bps", "crossover_mbps"],
              [[crossover, crossover / 1e6]])

    print(f"{'Bandwidth':>12} | {'Server-only (ms)':>16} | {'Split-policy (ms)':>17}")
    for b in bandwidths:
        cells = [f"{medians[(b, m)]:.1f}" if (b, m) in medians else "-" for m in ("raw", "split")]
        print(f"{b / 1e6:>7g} Mb/s | {cells[0]:>16} | {cells[1]:>17}")
    if len(modes) == 2:
        print(f"crossover: {crossover / 1e6:.2f} Mb/s")
    return EXIT_OK


def cmd_bench_scale(args) -> int:
    cfg = _load_config(args, "scale.cfg", SCALE_KEYS)
    seed = _seed(args, cfg)
    transport = cfg.get("transport", "loopback")
    if transport not in ("loopback", "sim"):
        raise ConfigError(f"{cfg.source}: transport must be loopback or sim")
    spec = load_encoder_spec(cfg.get("spec", "k4"), cfg.integer("X", 32))
    setup = ScaleSetup.default(spec, cfg.integer("raw_floor_ns", 6_000_000), cfg.integer("split_floor_ns", 2_000_000),
                               seed, cfg.integer("hidden", 32), cfg.integer("action_dim", 6))
    rate, budget = cfg.number("rate_hz", 10.0), cfg.number("p95_budget_ms", 100.0)
    duration, upper = cfg.number("duration_s", 1.5), cfg.integer("upper", 64)
    if rate <= 0 or duration <= 0 or upper < 1:
        raise ConfigError(f"{cfg.source}: rate_hz, duration_s and upper must be positive")

    results = {m: find_max_clients(rate, budget, m, setup, duration, transport, upper) for m in ("raw", "split")}
    out = Path(args.out)
    manifest = _manifest(args, seed)
    write_csv(out / "scale_probes.csv", manifest, LoadReport.CSV_FIELDS,
              [p.row() for m in results for p in results[m].probes])
    write_csv(out / "scale_summary.csv", manifest,
              ["mode", "rate_hz", "p95_budget_ms", "max_clients", "upper_limit", "transport"],
              [[m, rate, budget, r.max_clients, r.upper_limit, transport] for m, r in results.items()])
    print(f"{rate:g}Hz per client, p95 latency <{budget:g}ms: "
          f"server-only {results['raw'].max_clients} clients, split-policy {results['split'].max_clients} clients")
    for m, r in results.items():
        if r.hit_upper_limit:
            print(f"  note: {m} reached the search upper limit ({r.upper_limit})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="RNG seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="key=value config file")

    parser = argparse.ArgumentParser(
        prog="splitpolicy", parents=[common],
        description="Compile on-device encoders to shader passes and benchmark split-policy serving.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def encoder_args(p, weights=True):
        p.add_argument("--spec", default="k4", help="k4, k16 or an encoder spec file")
        p.add_argument("--input-side", type=int, default=None, help="override the encoder input side X")
        if weights:
            p.add_argument("--weights", default=None, help="MCW1 weights file (default: seeded init)")

    def profile_args(p):
        p.add_argument("--max-textures", type=int, default=8)
        p.add_argument("--sample-budget", type=int, default=64)
        p.add_argument("--profile-name", default="embedded-default")

    p = sub.add_parser("plan", parents=[common], help="plan shader passes for an encoder")
    encoder_args(p, weights=False)
    profile_args(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("emit-shaders", parents=[common], help="write one fragment shader per pass")
    encoder_args(p)
    profile_args(p)
    p.set_defaults(func=cmd_emit_shaders)

    p = sub.add_parser("encode", parents=[common], help="encode an image file to a feature message")
    encoder_args(p)
    profile_args(p)
    p.add_argument("--image", required=True, help="12-byte header (w, h, c as u32 LE) + interleaved bytes")
    p.add_argument("--executor", choices=["reference", "passes"], default="reference")
    p.add_argument("--precision", choices=["float32", "quantized8"], default="float32")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("bench-inference", parents=[common], help="mean/std encode time per input size")
    encoder_args(p)
    p.add_argument("--sizes", default="128,256,512")
    p.add_argument("--repeats", type=int, default=100)
    p.set_defaults(func=cmd_bench_inference)

    p = sub.add_parser("bench-sustained", parents=[common], help="per-frame timing over a long run")
    encoder_args(p)
    p.add_argument("--frames", type=int, default=5000)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--stub-ms", type=float, default=None, help="time a constant sleep instead of the encoder")
    p.set_defaults(func=cmd_bench_sustained)

    p = sub.add_parser("breakeven", parents=[common], help="break-even bandwidth and payload sizes")
    p.add_argument("--X", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--j", type=float, default=None, help="per-frame encode time in seconds")
    p.set_defaults(func=cmd_breakeven)

    p = sub.add_parser("bench-latency", parents=[common], help="simulated decision latency sweep")
    p.set_defaults(func=cmd_bench_latency)

    p = sub.add_parser("bench-scale", parents=[common], help="max clients within a p95 budget")
    p.set_defaults(func=cmd_bench_scale)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("out", "out"), ("config", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConstraintError as exc:
        print(f"constraint error: {exc}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SplitPolicyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OPERATION


if __name__ == "__main__":
    sys.exit(main())
