import numpy as np
import pytest

from splitpolicy.bench import read_csv
from splitpolicy.cli import main, read_image, write_image
from splitpolicy.config import dump_encoder_spec
from splitpolicy.encoder import EncoderSpec, LayerSpec, default_spec, store_weights, zero_weights
from splitpolicy.netsim import break_even_bandwidth
from splitpolicy.tensors import FeatureMap, Frame, dequantize
from splitpolicy.wire import decode_request

FAST_SCALE = "spec=k4\nX=32\nrate_hz=10\np95_budget_ms=100\nduration_s=1\nupper=64\ntransport=sim\n"
FAST_LATENCY = "mode=both\nbandwidth_bps=10e6,100e6\ndecisions=20\n"


def run(*argv):
    return main([str(a) for a in argv])


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def image(tmp_path, side=32, channels=3, value=None, seed=0):
    g = np.random.default_rng(seed)
    data = (np.full((side, side, channels), value, np.uint8) if value is not None
            else g.integers(0, 256, (side, side, channels), dtype=np.uint8))
    path = tmp_path / "img.bin"
    write_image(path, Frame(data))
    return path


def features(out):
    header, payload = decode_request((out / "features.spw").read_bytes())
    return dequantize(FeatureMap(header.channels, header.width, payload, header.quant_scale, header.quant_offset))


def test_image_file_roundtrip(tmp_path):
    path = image(tmp_path, 5, 4)
    f = read_image(path)
    assert (f.width, f.height, f.channels) == (5, 5, 4)


def test_breakeven(tmp_path, capsys):
    assert run("breakeven", "--out", tmp_path) == 0
    manifest, rows = read_csv(tmp_path / "breakeven.csv")
    assert manifest.startswith("# splitpolicy subcommand=breakeven")
    assert float(rows[0]["break_even_mbps"]) == pytest.approx(50.4, rel=1e-3)
    assert rows[0]["raw_payload_bytes"] == "640000" and rows[0]["split_payload_bytes"] == "10000"
    assert "50.400 Mb/s" in capsys.readouterr().out


def test_breakeven_flags_match_library(tmp_path):
    assert run("breakeven", "--X", 200, "--n", 2, "--K", 4, "--j", 0.05, "--out", tmp_path) == 0
    _, rows = read_csv(tmp_path / "breakeven.csv")
    assert float(rows[0]["break_even_bps"]) == break_even_bandwidth(200, 2, 4, 0.05)


def test_global_flags_before_subcommand(tmp_path):
    assert run("--out", tmp_path, "--seed", 4, "breakeven") == 0
    manifest, _ = read_csv(tmp_path / "breakeven.csv")
    assert "seed=4" in manifest


def test_plan(tmp_path, capsys):
    assert run("plan", "--spec", "k16", "--out", tmp_path) == 0
    lines = (tmp_path / "plan.txt").read_text().splitlines()
    assert lines[0].startswith("# splitpolicy subcommand=plan")
    assert len(lines) == 1 + 10
    assert "passes=10" in capsys.readouterr().out


def test_plan_constraint_exit_code(tmp_path):
    assert run("plan", "--spec", "k4", "--sample-budget", 8, "--out", tmp_path) == 4


def test_emit_identity_single_file(tmp_path):
    spec = EncoderSpec(8, 4, (LayerSpec(1, 4, 4, 1, "none"),))
    spec_path = write(tmp_path, "id.cfg", dump_encoder_spec(spec))
    out = tmp_path / "out"
    assert run("emit-shaders", "--spec", spec_path, "--out", out) == 0
    frags = sorted(p.name for p in out.glob("*.frag"))
    assert frags == ["layer0_pass0.frag"]
    assert (out / frags[0]).read_text().startswith("// splitpolicy subcommand=emit-shaders")


def test_emit_k16_final_layer(tmp_path):
    assert run("emit-shaders", "--spec", "k16", "--out", tmp_path) == 0
    assert len(list(tmp_path.glob("layer2_pass*.frag"))) >= 4


def test_emit_with_weights_file(tmp_path):
    spec = default_spec(4)
    wpath = tmp_path / "w.mcw"
    wpath.write_bytes(store_weights(zero_weights(spec)))
    assert run("emit-shaders", "--weights", wpath, "--out", tmp_path / "o") == 0
    assert run("emit-shaders", "--spec", "k16", "--weights", wpath, "--out", tmp_path / "o") == 5


def test_encode_zero_image_zero_weights(tmp_path):
    spec = default_spec(4, input_side=32)
    wpath = tmp_path / "w.mcw"
    wpath.write_bytes(store_weights(zero_weights(spec)))
    assert run("encode", "--input-side", 32, "--weights", wpath, "--image", image(tmp_path, value=0),
               "--out", tmp_path) == 0
    f = features(tmp_path)
    assert f.shape == (4, 4, 4) and not f.data.any()
    _, rows = read_csv(tmp_path / "encode.csv")
    assert rows[0]["K"] == "4" and rows[0]["side"] == "4"


def test_encode_reference_matches_passes(tmp_path):
    img = image(tmp_path, 64, 4, seed=5)
    assert run("encode", "--input-side", 64, "--image", img, "--out", tmp_path / "ref") == 0
    assert run("encode", "--input-side", 64, "--image", img, "--executor", "passes", "--out", tmp_path / "gpu") == 0
    a, b = features(tmp_path / "ref"), features(tmp_path / "gpu")
    scale = float(read_csv(tmp_path / "ref" / "encode.csv")[1][0]["quant_scale"])
    assert np.max(np.abs(a.data - b.data)) <= 1e-4 + scale


def test_encode_wrong_image_size(tmp_path):
    assert run("encode", "--input-side", 32, "--image", image(tmp_path, 16), "--out", tmp_path) == 5


def test_encode_missing_image(tmp_path):
    assert run("encode", "--image", tmp_path / "nope.bin", "--out", tmp_path) == 3


def test_bench_inference(tmp_path):
    assert run("bench-inference", "--sizes", "16,32", "--repeats", 1, "--out", tmp_path) == 0
    manifest, rows = read_csv(tmp_path / "bench_inference.csv")
    assert [r["X"] for r in rows] == ["16", "32"]
    assert all(float(r["std_ms"]) == 0.0 for r in rows)


def test_bench_inference_bad_size(tmp_path):
    assert run("bench-inference", "--sizes", "100", "--out", tmp_path) == 2


def test_bench_sustained_one_window(tmp_path):
    assert run("bench-sustained", "--input-side", 16, "--frames", 10, "--window", 10, "--out", tmp_path) == 0
    _, rows = read_csv(tmp_path / "bench_sustained.csv")
    assert len(rows) == 10
    assert sum(1 for r in rows if r["moving_avg_ns"]) == 1
    _, summary = read_csv(tmp_path / "bench_sustained_summary.csv")
    assert summary[0]["moving_avg_points"] == "1"


def test_bench_sustained_stub_no_drift(tmp_path):
    assert run("bench-sustained", "--stub-ms", 1, "--frames", 200, "--window", 20, "--out", tmp_path) == 0
    _, summary = read_csv(tmp_path / "bench_sustained_summary.csv")
    assert abs(float(summary[0]["drift"])) < 0.3


def test_bench_latency_defaults(tmp_path, capsys):
    assert run("bench-latency", "--out", tmp_path) == 0
    _, summary = read_csv(tmp_path / "latency_summary.csv")
    assert len(summary) == 8
    _, cross = read_csv(tmp_path / "latency_crossover.csv")
    assert 45 <= float(cross[0]["crossover_mbps"]) <= 55
    _, decisions = read_csv(tmp_path / "latency_decisions.csv")
    assert len(decisions) == 8000
    assert "crossover:" in capsys.readouterr().out


def test_bench_latency_single_bandwidth(tmp_path):
    cfg = write(tmp_path, "l.cfg", "bandwidth_bps=25e6\ndecisions=3\n")
    assert run("bench-latency", "--config", cfg, "--out", tmp_path) == 0
    _, summary = read_csv(tmp_path / "latency_summary.csv")
    assert [r["mode"] for r in summary] == ["raw", "split"]


@pytest.mark.parametrize("text", ["bandwidth_bps=0\n", "colour=red\n", "mode=video\n", "decisions=ten\n"])
def test_bench_latency_config_errors(tmp_path, text):
    cfg = write(tmp_path, "bad.cfg", text)
    assert run("bench-latency", "--config", cfg, "--out", tmp_path) == 2


def test_bench_scale_sim(tmp_path, capsys):
    cfg = write(tmp_path, "s.cfg", FAST_SCALE)
    assert run("bench-scale", "--config", cfg, "--out", tmp_path) == 0
    _, summary = read_csv(tmp_path / "scale_summary.csv")
    got = {r["mode"]: int(r["max_clients"]) for r in summary}
    assert got["split"] >= 2.5 * got["raw"] > 0
    _, probes = read_csv(tmp_path / "scale_probes.csv")
    assert {r["mode"] for r in probes} == {"raw", "split"}
    assert "split-policy" in capsys.readouterr().out


def test_bench_scale_upper_limit_note(tmp_path, capsys):
    cfg = write(tmp_path, "s.cfg", FAST_SCALE.replace("upper=64", "upper=2"))
    assert run("bench-scale", "--config", cfg, "--out", tmp_path) == 0
    assert "upper limit" in capsys.readouterr().out


def snapshot(out):
    return {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


SIMULATED_RUNS = [
    ("plan", ["plan", "--spec", "k16"]),
    ("emit-shaders", ["emit-shaders", "--spec", "k16", "--input-side", 64]),
    ("encode", ["encode", "--input-side", 32, "--executor", "passes"]),
    ("breakeven", ["breakeven"]),
    ("bench-latency", ["bench-latency"]),
    ("bench-latency-jitter", ["bench-latency"]),
    ("bench-scale", ["bench-scale"]),
]


def prepare(name, argv, tmp_path):
    argv = list(argv)
    if name == "encode":
        argv += ["--image", image(tmp_path)]
    if name == "bench-latency-jitter":
        argv += ["--config", write(tmp_path, "j.cfg", FAST_LATENCY + "base_one_way_ns=1e6\njitter_ns=5e5\n")]
    if name == "bench-scale":
        argv += ["--config", write(tmp_path, "s.cfg", FAST_SCALE)]
    return argv


@pytest.mark.parametrize("name,argv", SIMULATED_RUNS, ids=[n for n, _ in SIMULATED_RUNS])
def test_simulated_subcommands_deterministic(tmp_path, name, argv):
    argv = prepare(name, argv, tmp_path)
    out = tmp_path / "out"
    assert run(*argv, "--seed", 11, "--out", out) == 0
    first = snapshot(out)
    assert first
    assert run(*argv, "--seed", 11, "--out", out) == 0
    assert snapshot(out) == first
