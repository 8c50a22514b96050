"""Frame and tensor types plus the observation preprocessing pipeline.

Frames are 8-bit, row-major and channel-interleaved (``(height, width,
channels)``), which is the layout textures are uploaded in. Tensors are
float32 and channel-first (``(channels, height, width)``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlreadyRGBAError, DimensionError, NonFiniteError

OPAQUE_ALPHA = 255


@dataclass(frozen=True)
class Frame:
    """An 8-bit RGB or RGBA image."""

    data: np.ndarray  # uint8, (height, width, channels)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] not in (3, 4):
            raise DimensionError(f"frame must be (H, W, 3|4), got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, width: int, height: int, channels: int) -> Frame:
        expected = width * height * channels
        if len(buf) != expected:
            raise DimensionError(f"expected {expected} bytes for {width}x{height}x{channels}, got {len(buf)}")
        return cls(np.frombuffer(buf, dtype=np.uint8).reshape(height, width, channels))


@dataclass(frozen=True)
class Tensor3:
    """A finite float32 tensor in channel-first layout."""

    data: np.ndarray  # float32, (channels, height, width)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise DimensionError(f"tensor must be 3-D (C, H, W), got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FeatureMap:
    """A K-channel square feature map quantized to bytes.

    Byte ``b`` stands for the real value ``quant_offset + quant_scale * b``.
    """

    channels: int
    side: int
    data: bytes
    quant_scale: float
    quant_offset: float

    def __post_init__(self):
        if len(self.data) != self.channels * self.side * self.side:
            raise DimensionError(
                f"feature map of {self.channels}x{self.side}x{self.side} needs "
                f"{self.channels * self.side * self.side} bytes, got {len(self.data)}"
            )
        if not (np.isfinite(self.quant_scale) and self.quant_scale > 0):
            raise DimensionError(f"quant_scale must be positive, got {self.quant_scale}")
        if not np.isfinite(self.quant_offset):
            raise NonFiniteError("quant_offset is not finite")
        object.__setattr__(self, "data", bytes(self.data))
        # stored as 32-bit on the wire, so keep exactly that precision here
        object.__setattr__(self, "quant_scale", float(np.float32(self.quant_scale)))
        object.__setattr__(self, "quant_offset", float(np.float32(self.quant_offset)))


def _check_crop(frame: Frame, out_side: int) -> None:
    if out_side < 1 or out_side > min(frame.width, frame.height):
        raise DimensionError(
            f"crop side {out_side} does not fit a {frame.width}x{frame.height} frame"
        )


def _crop_at(frame: Frame, top: int, left: int, out_side: int) -> Frame:
    return Frame(frame.data[top:top + out_side, left:left + out_side, :].copy())


def center_crop(frame: Frame, out_side: int) -> Frame:
    """Take the centred ``out_side`` square window without resampling."""
    _check_crop(frame, out_side)
    top = (frame.height - out_side) // 2
    left = (frame.width - out_side) // 2
    return _crop_at(frame, top, left, out_side)


def crop_offsets(frame: Frame, out_side: int, rng: np.random.Generator) -> tuple[int, int]:
    """Draw (top, left) offsets uniformly from the valid range."""
    _check_crop(frame, out_side)
    top = int(rng.integers(0, frame.height - out_side + 1))
    left = int(rng.integers(0, frame.width - out_side + 1))
    return top, left


def random_crop(frame: Frame, out_side: int, rng: np.random.Generator) -> Frame:
    top, left = crop_offsets(frame, out_side, rng)
    return _crop_at(frame, top, left, out_side)


def stack_frames(frames: list[Frame]) -> Tensor3:
    """Stack three RGB frames (oldest first) into a 9-channel [0, 1] tensor."""
    if len(frames) != 3:
        raise DimensionError(f"expected 3 frames, got {len(frames)}")
    first = frames[0]
    for f in frames:
        if f.channels != 3:
            raise DimensionError(f"stacked frames must be RGB, got {f.channels} channels")
        if (f.height, f.width) != (first.height, first.width):
            raise DimensionError("stacked frames must share dimensions")
    planes = [f.data.transpose(2, 0, 1) for f in frames]
    stacked = np.concatenate(planes, axis=0).astype(np.float32) / np.float32(255.0)
    return Tensor3(stacked)


def frame_to_tensor(frame: Frame) -> Tensor3:
    """Normalise one frame to a channel-first [0, 1] tensor."""
    return Tensor3(frame.data.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def to_rgba(frame: Frame) -> Frame:
    """Append an opaque alpha channel.

    Raises ``AlreadyRGBAError`` for 4-channel input so the 4:3 payload
    change is never applied (or skipped) silently.
    """
    if frame.channels == 4:
        raise AlreadyRGBAError("frame already has 4 channels")
    alpha = np.full((frame.height, frame.width, 1), OPAQUE_ALPHA, dtype=np.uint8)
    return Frame(np.concatenate([frame.data, alpha], axis=2))


def strip_alpha(frame: Frame) -> Frame:
    if frame.channels != 4:
        raise DimensionError("strip_alpha needs an RGBA frame")
    return Frame(frame.data[:, :, :3].copy())


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_array(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Per-tensor affine uint8 quantization of an arbitrary float array.

    Returns ``(bytes_array, scale, offset)`` with scale and offset already
    rounded to float32, the precision they travel at.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size and not np.all(np.isfinite(v)):
        raise NonFiniteError("cannot quantize non-finite values")
    if v.size == 0:
        return np.zeros(v.shape, dtype=np.uint8), 1.0, 0.0
    lo, hi = float(v.min()), float(v.max())
    offset = float(np.float32(lo))
    scale = float(np.float32((hi - lo) / 255.0)) if hi > lo else 1.0
    if scale <= 0.0:  # range so small it underflows float32
        scale = 1.0
    q = np.clip(round_half_away((v - offset) / scale), 0, 255).astype(np.uint8)
    return q, scale, offset


def dequantize_array(q: np.ndarray, scale: float, offset: float) -> np.ndarray:
    return (offset + scale * q.astype(np.float64)).astype(np.float32)


def quantize(t: Tensor3) -> FeatureMap:
    if t.height != t.width:
        raise DimensionError(f"feature maps are square, got {t.height}x{t.width}")
    q, scale, offset = quantize_array(t.data)
    return FeatureMap(t.channels, t.height, q.tobytes(), scale, offset)


def dequantize(f: FeatureMap) -> Tensor3:
    q = np.frombuffer(f.data, dtype=np.uint8).reshape(f.channels, f.side, f.side)
    return Tensor3(dequantize_array(q, f.quant_scale, f.quant_offset))
