"""Measurement helpers behind the CLI: run manifests, CSV output, timing loops."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .encoder import EncoderSpec, WeightSet, encode_reference
from .tensors import Tensor3


@dataclass(frozen=True)
class RunManifest:
    subcommand: str
    config: str
    seed: int
    out: str
    version: str = __version__

    def line(self, prefix: str = "#") -> str:
        return (f"{prefix} splitpolicy subcommand={self.subcommand} config={self.config} "
                f"seed={self.seed} out={self.out} version={self.version}")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(manifest: RunManifest, header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(manifest.line() + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_csv(path: Path, manifest: RunManifest, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(manifest, header, rows))
    return path


def read_csv(path: Path) -> tuple[str, list[dict[str, str]]]:
    """Return (manifest line, rows) of a CSV written by ``write_csv``."""
    text = Path(path).read_text().splitlines()
    return text[0], list(csv.DictReader(text[1:]))


@dataclass(frozen=True)
class SustainedStats:
    """Per-frame durations over a long run with a moving average and drift.

    ``drift`` compares the mean of the last decile of frames with the first:
    0 means stable, positive means the run slowed down.
    """

    durations_ns: np.ndarray
    window: int

    def __post_init__(self):
        d = np.asarray(self.durations_ns, dtype=np.int64)
        if self.window < 1 or d.size < self.window:
            raise ValueError(f"need at least window={self.window} frames, got {d.size}")
        object.__setattr__(self, "durations_ns", d)

    @property
    def moving_average(self) -> np.ndarray:
        windows = np.lib.stride_tricks.sliding_window_view(self.durations_ns, self.window)
        return windows.mean(axis=1)

    @property
    def drift(self) -> float:
        decile = max(1, self.durations_ns.size // 10)
        first = self.durations_ns[:decile].mean()
        last = self.durations_ns[-decile:].mean()
        return float((last - first) / first)


def time_calls(fn: Callable[[], object], repeats: int, clock=time.perf_counter_ns) -> np.ndarray:
    durations = np.empty(repeats, dtype=np.int64)
    for i in range(repeats):
        t0 = clock()
        fn()
        durations[i] = clock() - t0
    return durations


def bench_inference(spec: EncoderSpec, weights: WeightSet, sizes: Sequence[int], repeats: int = 100,
                    seed: int = 0) -> list[tuple[int, int, float, float]]:
    """(X, repeats, mean_ms, std_ms) of consecutive reference encodes per size."""
    rng = np.random.default_rng(seed)
    rows = []
    for side in sizes:
        sized = spec.with_input_side(side)
        x = Tensor3(rng.random((sized.input_channels, side, side), dtype=np.float32))
        d = time_calls(lambda: encode_reference(sized, weights, x), repeats) / 1e6
        rows.append((side, repeats, float(d.mean()), float(d.std())))
    return rows


def bench_sustained(encode: Callable[[], object], frames: int, window: int) -> SustainedStats:
    return SustainedStats(time_calls(encode, frames), window)


def output_dir(out: str | Path) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path
