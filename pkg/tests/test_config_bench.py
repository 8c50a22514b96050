import time

import numpy as np
import pytest

from splitpolicy.bench import RunManifest, SustainedStats, bench_inference, bench_sustained, read_csv, write_csv
from splitpolicy.config import KeyValueConfig, dump_encoder_spec, load_encoder_spec, parse_layer
from splitpolicy.encoder import LayerSpec, default_spec, init_weights
from splitpolicy.errors import ConfigError


def test_parse_comments_and_repeats():
    cfg = KeyValueConfig.parse("# header\na = 1  # trailing\n\nlayer=x\nlayer=y\nlist=1,2, 3\n")
    assert cfg.integer("a") == 1
    assert cfg.all("layer") == ["x", "y"]
    assert cfg.numbers("list") == [1.0, 2.0, 3.0]
    assert cfg.number("missing", 2.5) == 2.5
    with pytest.raises(ConfigError):
        cfg.get("layer")


@pytest.mark.parametrize("text", ["novalue\n", "=3\n"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        KeyValueConfig.parse(text)


def test_typed_accessors():
    cfg = KeyValueConfig.parse("a=1.5\nb=abc\nc=1e6\n")
    with pytest.raises(ConfigError):
        cfg.integer("a")
    with pytest.raises(ConfigError):
        cfg.number("b")
    with pytest.raises(ConfigError):
        cfg.number("zzz")
    assert cfg.integer("c") == 1_000_000
    with pytest.raises(ConfigError, match="unknown keys"):
        cfg.check_keys({"a", "b"})


def test_layer_parse():
    assert parse_layer("3,4,8,2,relu") == LayerSpec(3, 4, 8, 2, "relu")
    for bad in ("3,4,8,2", "3,4,8,2,swish", "a,4,8,2,relu"):
        with pytest.raises(ConfigError):
            parse_layer(bad)


def test_spec_file_roundtrip(tmp_path):
    spec = default_spec(16)
    path = tmp_path / "s.cfg"
    path.write_text(dump_encoder_spec(spec))
    assert load_encoder_spec(str(path)) == spec
    assert load_encoder_spec("k16") == spec
    assert load_encoder_spec("k4", 64).input_side == 64
    with pytest.raises(ConfigError):
        load_encoder_spec("k4", 100)


def test_bad_spec_file(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text("input_side=8\ninput_channels=4\nlayer=3,3,8,1,relu\n")
    with pytest.raises(ConfigError):
        load_encoder_spec(str(path))
    path.write_text("input_side=8\ninput_channels=4\ncolour=blue\n")
    with pytest.raises(ConfigError):
        load_encoder_spec(str(path))


# bench helpers

def test_csv_manifest_first_line(tmp_path):
    m = RunManifest("bench-x", "c.cfg", 3, "out")
    write_csv(tmp_path / "a.csv", m, ["a", "b"], [[1, 0.5], [2, True]])
    first, rows = read_csv(tmp_path / "a.csv")
    assert first == m.line() and first.startswith("# splitpolicy subcommand=bench-x config=c.cfg seed=3")
    assert rows == [{"a": "1", "b": "0.5"}, {"a": "2", "b": "true"}]


def test_bench_inference_rows():
    spec = default_spec(4, input_side=16)
    rows = bench_inference(spec, init_weights(spec, 0), [16, 32], repeats=1)
    assert [r[0] for r in rows] == [16, 32]
    assert all(r[1] == 1 and r[3] == 0.0 and r[2] > 0 for r in rows)


def test_sustained_window_equals_frames():
    stats = SustainedStats(np.arange(1, 11), 10)
    assert stats.moving_average.tolist() == [5.5]


def test_sustained_requires_enough_frames():
    with pytest.raises(ValueError):
        SustainedStats(np.ones(5), 10)


def test_drift_detects_slowdown():
    d = np.concatenate([np.full(500, 1000), np.full(500, 2000)])
    assert SustainedStats(d, 50).drift == pytest.approx(1.0)
    assert SustainedStats(np.full(1000, 1000), 50).drift == 0.0


def test_drift_of_injected_slowdown_is_measured():
    calls = {"n": 0}

    def encode():
        calls["n"] += 1
        time.sleep(0.002 if calls["n"] > 100 else 0.001)

    stats = bench_sustained(encode, 200, 20)
    assert 0.5 < stats.drift < 1.5
    assert stats.moving_average.size == 181
