"""Small strided-convolution encoders and their CPU reference executor.

``encode_reference`` is the ground truth that the shader pass simulator is
checked against, so it is written as a plain direct convolution in float64:
for every kernel tap, the strided input window is multiplied into the
accumulator.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, NonFiniteError, WeightsFormatError
from .tensors import Tensor3

ACTIVATIONS = {"none": 0, "relu": 1}
ACTIVATION_NAMES = {code: name for name, code in ACTIVATIONS.items()}
KERNEL_SIZES = (1, 3, 5)

WEIGHTS_MAGIC = b"MCW1"
_U32 = struct.Struct("<I")
_LAYER_HEADER = struct.Struct("<5I")


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    in_channels: int
    out_channels: int
    stride: int = 1
    activation: str = "relu"

    def __post_init__(self):
        if self.kernel not in KERNEL_SIZES:
            raise DimensionError(f"kernel must be one of {KERNEL_SIZES}, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise DimensionError("layer channel counts must be >= 1")
        if self.stride not in (1, 2):
            raise DimensionError(f"stride must be 1 or 2, got {self.stride}")
        if self.activation not in ACTIVATIONS:
            raise DimensionError(f"unknown activation {self.activation!r}")

    @property
    def radius(self) -> int:
        return self.kernel // 2


@dataclass(frozen=True)
class EncoderSpec:
    input_side: int
    input_channels: int
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_side < 1 or self.input_channels < 1:
            raise DimensionError("input side and channel count must be >= 1")
        channels = self.input_channels
        for i, layer in enumerate(self.layers):
            if layer.in_channels != channels:
                raise DimensionError(
                    f"layer {i} expects {layer.in_channels} input channels, previous stage gives {channels}"
                )
            channels = layer.out_channels
        if self.input_side % (2 ** self.n):
            raise DimensionError(
                f"input side {self.input_side} is not divisible by 2^{self.n}"
            )

    @property
    def n(self) -> int:
        """Number of stride-2 layers."""
        return sum(1 for layer in self.layers if layer.stride == 2)

    @property
    def K(self) -> int:
        return self.layers[-1].out_channels if self.layers else self.input_channels

    def layer_input_sides(self) -> list[int]:
        sides, side = [], self.input_side
        for layer in self.layers:
            sides.append(side)
            side = -(-side // layer.stride)
        return sides

    def with_input_side(self, side: int) -> EncoderSpec:
        return replace(self, input_side=side)


def output_shape(spec: EncoderSpec) -> tuple[int, int]:
    """(K, X / 2^n) of the final feature map."""
    if spec.input_side % (2 ** spec.n):
        raise DimensionError(f"input side {spec.input_side} is not divisible by 2^{spec.n}")
    return spec.K, spec.input_side // (2 ** spec.n)


def default_spec(K: int = 4, input_side: int = 400, input_channels: int = 4) -> EncoderSpec:
    """Three 3x3 stride-2 ReLU blocks, so n=3, with K in {4, 16}.

    Hidden widths are a choice of this package; swap in an ``EncoderSpec``
    for other compositions.
    """
    if K == 4:
        layers = (
            LayerSpec(3, input_channels, 8, 2, "relu"),
            LayerSpec(3, 8, 8, 2, "relu"),
            LayerSpec(3, 8, 4, 2, "relu"),
        )
    elif K == 16:
        layers = (
            LayerSpec(3, input_channels, 8, 2, "relu"),
            LayerSpec(3, 8, 16, 2, "relu"),
            LayerSpec(3, 16, 16, 2, "relu"),
        )
    else:
        raise ValueError(f"no default spec for K={K}; build an EncoderSpec directly")
    return EncoderSpec(input_side, input_channels, layers, name=f"default-k{K}")


@dataclass(frozen=True)
class WeightSet:
    """Kernels (out, in, k, k) and biases (out,) per layer, float32."""

    layers: tuple[LayerSpec, ...]
    kernels: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not (len(self.layers) == len(self.kernels) == len(self.biases)):
            raise WeightsFormatError("layer, kernel and bias counts differ")
        kernels, biases = [], []
        for i, (layer, w, b) in enumerate(zip(self.layers, self.kernels, self.biases)):
            w = np.ascontiguousarray(w, dtype=np.float32)
            b = np.ascontiguousarray(b, dtype=np.float32)
            expected = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            if w.shape != expected or b.shape != (layer.out_channels,):
                raise WeightsFormatError(
                    f"layer {i}: kernel {w.shape} / bias {b.shape} do not match {expected}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteError(f"layer {i} has non-finite weights")
            w.setflags(write=False)
            b.setflags(write=False)
            kernels.append(w)
            biases.append(b)
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "kernels", tuple(kernels))
        object.__setattr__(self, "biases", tuple(biases))

    def check_matches(self, spec: EncoderSpec) -> None:
        if tuple(self.layers) != tuple(spec.layers):
            raise WeightsFormatError("weights were built for a different layer list")


def init_bound(layer: LayerSpec) -> float:
    return 1.0 / math.sqrt(layer.in_channels * layer.kernel ** 2)


def init_weights(spec: EncoderSpec, rng: np.random.Generator | int) -> WeightSet:
    """Fan-in scaled uniform init; kernels and biases share the bound."""
    rng = np.random.default_rng(rng)
    kernels, biases = [], []
    for layer in spec.layers:
        bound = init_bound(layer)
        shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        kernels.append(rng.uniform(-bound, bound, size=shape).astype(np.float32))
        biases.append(rng.uniform(-bound, bound, size=layer.out_channels).astype(np.float32))
    return WeightSet(spec.layers, tuple(kernels), tuple(biases))


def zero_weights(spec: EncoderSpec) -> WeightSet:
    return WeightSet(
        spec.layers,
        tuple(np.zeros((l.out_channels, l.in_channels, l.kernel, l.kernel), np.float32) for l in spec.layers),
        tuple(np.zeros(l.out_channels, np.float32) for l in spec.layers),
    )


def store_weights(weights: WeightSet) -> bytes:
    parts = [WEIGHTS_MAGIC, _U32.pack(len(weights.layers))]
    for layer, w, b in zip(weights.layers, weights.kernels, weights.biases):
        parts.append(_LAYER_HEADER.pack(
            layer.kernel, layer.in_channels, layer.out_channels, layer.stride,
            ACTIVATIONS[layer.activation],
        ))
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    return b"".join(parts)


def load_weights(data: bytes, spec: EncoderSpec | None = None) -> WeightSet:
    """Parse a weights file; if ``spec`` is given the layer list must match it."""
    view = memoryview(data)

    def take(n: int, what: str) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise WeightsFormatError(f"truncated weights file while reading {what}")
        chunk, view = view[:n], view[n:]
        return chunk

    if bytes(take(4, "magic")) != WEIGHTS_MAGIC:
        raise WeightsFormatError("bad magic, expected MCW1")
    (count,) = _U32.unpack(take(4, "layer count"))
    layers, kernels, biases = [], [], []
    for i in range(count):
        kernel, cin, cout, stride, act = _LAYER_HEADER.unpack(take(_LAYER_HEADER.size, f"layer {i} header"))
        if act not in ACTIVATION_NAMES:
            raise WeightsFormatError(f"layer {i}: unknown activation code {act}")
        try:
            layer = LayerSpec(kernel, cin, cout, stride, ACTIVATION_NAMES[act])
        except DimensionError as exc:
            raise WeightsFormatError(f"layer {i}: {exc}") from exc
        nw = cout * cin * kernel * kernel
        w = np.frombuffer(take(4 * nw, f"layer {i} kernel"), dtype="<f4").reshape(cout, cin, kernel, kernel)
        b = np.frombuffer(take(4 * cout, f"layer {i} bias"), dtype="<f4")
        layers.append(layer)
        kernels.append(w)
        biases.append(b)
    if len(view):
        raise WeightsFormatError(f"{len(view)} trailing bytes after last layer")
    weights = WeightSet(tuple(layers), tuple(kernels), tuple(biases))
    if spec is not None:
        weights.check_matches(spec)
    return weights


def _check_input(spec: EncoderSpec, weights: WeightSet, x: np.ndarray) -> None:
    weights.check_matches(spec)
    expected = (spec.input_channels, spec.input_side, spec.input_side)
    if x.shape != expected:
        raise DimensionError(f"input shape {x.shape} does not match spec {expected}")


def conv2d_same(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """Zero 'same' padded convolution; output pixel o is centred on input o*stride."""
    cout, cin, k, _ = w.shape
    r = k // 2
    _, h, wd = x.shape
    oh, ow = -(-h // stride), -(-wd // stride)
    xp = np.pad(x, ((0, 0), (r, r + stride), (r, r + stride)))
    y = np.empty((cout, oh, ow), dtype=np.float64)
    y[...] = np.asarray(b, dtype=np.float64)[:, None, None]
    for dy in range(k):
        for dx in range(k):
            window = xp[:, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride]
            y += np.tensordot(w[:, :, dy, dx].astype(np.float64), window, axes=1)
    return y


def forward(spec: EncoderSpec, weights: WeightSet, x: np.ndarray) -> list[np.ndarray]:
    """Float64 forward pass returning pre-activation outputs of every layer."""
    pre_acts = []
    h = np.asarray(x, dtype=np.float64)
    for layer, w, b in zip(spec.layers, weights.kernels, weights.biases):
        z = conv2d_same(h, w, b, layer.stride)
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return pre_acts


def encode_array(spec: EncoderSpec, weights: WeightSet, x: np.ndarray) -> np.ndarray:
    _check_input(spec, weights, x)
    if not spec.layers:
        return np.asarray(x, dtype=np.float64)
    z = forward(spec, weights, x)[-1]
    return np.maximum(z, 0.0) if spec.layers[-1].activation == "relu" else z


def encode_reference(spec: EncoderSpec, weights: WeightSet, input: Tensor3) -> Tensor3:
    return Tensor3(encode_array(spec, weights, input.data))


def input_gradient(spec: EncoderSpec, weights: WeightSet, x: np.ndarray) -> np.ndarray:
    """d/dx of sum(encode(x)), by accumulating transposed convolutions."""
    _check_input(spec, weights, x)
    x = np.asarray(x, dtype=np.float64)
    pre_acts = forward(spec, weights, x)
    inputs_sides = [(x.shape[1], x.shape[2])]
    for z in pre_acts[:-1]:
        inputs_sides.append(z.shape[1:])
    g = np.ones_like(pre_acts[-1]) if pre_acts else np.ones_like(x)
    for i in reversed(range(len(spec.layers))):
        layer, w = spec.layers[i], weights.kernels[i].astype(np.float64)
        if layer.activation == "relu":
            g = g * (pre_acts[i] > 0)
        h, wd = inputs_sides[i]
        r, s, k = layer.radius, layer.stride, layer.kernel
        oh, ow = g.shape[1:]
        gp = np.zeros((layer.in_channels, h + 2 * r + s, wd + 2 * r + s))
        for dy in range(k):
            for dx in range(k):
                gp[:, dy:dy + s * oh:s, dx:dx + s * ow:s] += np.tensordot(w[:, :, dy, dx].T, g, axes=1)
        g = gp[:, r:r + h, r:r + wd]
    return g
