"""Line-oriented ``key=value`` configuration files.

``#`` starts a comment, blank lines are ignored, and a key may repeat
(encoder specs list one ``layer=`` line per layer). Lists use commas.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .encoder import EncoderSpec, LayerSpec, default_spec
from .errors import ConfigError, DimensionError


@dataclass
class KeyValueConfig:
    entries: list[tuple[str, str]]
    source: str = "<defaults>"

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> KeyValueConfig:
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{source}:{lineno}: empty key")
            entries.append((key, value))
        return cls(entries, source)

    @classmethod
    def load(cls, path: str | Path) -> KeyValueConfig:
        path = Path(path)
        return cls.parse(path.read_text(), str(path))

    def keys(self) -> set[str]:
        return {k for k, _ in self.entries}

    def check_keys(self, allowed: set[str]) -> None:
        unknown = self.keys() - allowed
        if unknown:
            raise ConfigError(f"{self.source}: unknown keys {sorted(unknown)}")

    def all(self, key: str) -> list[str]:
        return [v for k, v in self.entries if k == key]

    def get(self, key: str, default: str | None = None) -> str | None:
        values = self.all(key)
        if len(values) > 1:
            raise ConfigError(f"{self.source}: key {key!r} given {len(values)} times")
        return values[0] if values else default

    def number(self, key: str, default: float | None = None) -> float:
        value = self.get(key)
        if value is None:
            if default is None:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"{self.source}: {key}={value!r} is not a number") from None

    def integer(self, key: str, default: int | None = None) -> int:
        value = self.number(key, None if default is None else float(default))
        if value != int(value):
            raise ConfigError(f"{self.source}: {key} must be an integer, got {value}")
        return int(value)

    def numbers(self, key: str, default: list[float] | None = None) -> list[float]:
        value = self.get(key)
        if value is None:
            if default is None:
                raise ConfigError(f"{self.source}: missing required key {key!r}")
            return list(default)
        try:
            return [float(v) for v in value.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"{self.source}: {key}={value!r} is not a number list") from None

    def set_default(self, key: str, value) -> None:
        if key not in self.keys():
            self.entries.append((key, str(value)))


def parse_layer(value: str, source: str = "<string>") -> LayerSpec:
    """``kernel,in,out,stride,activation`` e.g. ``3,4,8,2,relu``."""
    parts = [p.strip() for p in value.split(",")]
    if len(parts) != 5:
        raise ConfigError(f"{source}: layer needs kernel,in,out,stride,activation, got {value!r}")
    try:
        return LayerSpec(int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]), parts[4])
    except (ValueError, DimensionError) as exc:
        raise ConfigError(f"{source}: bad layer {value!r}: {exc}") from None


def load_encoder_spec(ref: str, input_side: int | None = None) -> EncoderSpec:
    """Load a spec from a file, or a built-in name ``k4`` / ``k16``."""
    if ref in ("k4", "k16", "default-k4", "default-k16"):
        spec = default_spec(int(ref.rsplit("k", 1)[1]))
    else:
        try:
            cfg = KeyValueConfig.load(ref)
        except OSError:
            raise
        cfg.check_keys({"name", "input_side", "input_channels", "layer"})
        try:
            spec = EncoderSpec(
                cfg.integer("input_side"),
                cfg.integer("input_channels"),
                tuple(parse_layer(v, cfg.source) for v in cfg.all("layer")),
                name=cfg.get("name", Path(ref).stem),
            )
        except DimensionError as exc:
            raise ConfigError(f"{cfg.source}: {exc}") from None
    if input_side is not None:
        try:
            spec = spec.with_input_side(input_side)
            EncoderSpec(spec.input_side, spec.input_channels, spec.layers, spec.name)
        except DimensionError as exc:
            raise ConfigError(str(exc)) from None
    return spec


def dump_encoder_spec(spec: EncoderSpec) -> str:
    lines = [f"name={spec.name}", f"input_side={spec.input_side}", f"input_channels={spec.input_channels}"]
    for layer in spec.layers:
        lines.append(f"layer={layer.kernel},{layer.in_channels},{layer.out_channels},{layer.stride},{layer.activation}")
    return "\n".join(lines) + "\n"
