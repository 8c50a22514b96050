"""Software execution of a shader plan.

Textures are ``(height, width, 4)`` arrays. Each pass is evaluated for all
fragments at once but in the emitted shader's order: partial sum first, then
input textures in binding order, taps row-major, then bias and activation.
Out-of-range fetches return zero, matching the emitted ``fetch`` helper.
"""

from __future__ import annotations

import numpy as np

from ..encoder import EncoderSpec, WeightSet
from ..errors import DimensionError
from ..tensors import Tensor3, dequantize_array, quantize_array
from .emit import pass_bias, tap_matrix
from .plan import ShaderPlan, TexturePacking

PRECISIONS = ("float32", "quantized8")


def pack_textures(x: np.ndarray) -> list[np.ndarray]:
    """Channel-first tensor -> list of RGBA textures, trailing slots zeroed."""
    c, h, w = x.shape
    packing = TexturePacking(c)
    textures = []
    for t in range(packing.textures):
        tex = np.zeros((h, w, 4), dtype=np.float32)
        chunk = x[4 * t:4 * t + 4]
        tex[:, :, : chunk.shape[0]] = np.moveaxis(chunk, 0, -1)
        textures.append(tex)
    return textures


def unpack_textures(textures: list[np.ndarray], channels: int) -> np.ndarray:
    stacked = np.concatenate([np.moveaxis(t, -1, 0) for t in textures], axis=0)
    return stacked[:channels]


def _fetch_windows(tex: np.ndarray, kernel: int, stride: int, out_h: int, out_w: int):
    r = kernel // 2
    padded = np.pad(tex, ((r, r + stride), (r, r + stride), (0, 0)))
    for dy in range(kernel):
        for dx in range(kernel):
            yield dy, dx, padded[dy:dy + stride * out_h:stride, dx:dx + stride * out_w:stride, :]


def execute_plan(
    plan: ShaderPlan,
    spec: EncoderSpec,
    weights: WeightSet,
    input: Tensor3,
    precision: str = "float32",
) -> Tensor3:
    if precision not in PRECISIONS:
        raise ValueError(f"precision must be one of {PRECISIONS}")
    weights.check_matches(spec)
    expected = (spec.input_channels, spec.input_side, spec.input_side)
    if input.shape != expected:
        raise DimensionError(f"input shape {input.shape} does not match spec {expected}")
    if sorted(plan.textures) != list(range(len(spec.layers))):
        raise DimensionError("plan was built for a different encoder")

    store: dict[int, np.ndarray] = {}
    if spec.layers:
        for tid, tex in zip(plan.textures[0]["input"], pack_textures(input.data)):
            store[tid] = tex
    else:
        return input

    sides = spec.layer_input_sides()
    for li, layer in enumerate(spec.layers):
        in_side = sides[li]
        out_side = -(-in_side // layer.stride)
        layer_inputs = plan.textures[li]["input"]
        for p in plan.layer_passes(li):
            if p.partial_input is not None:
                acc = store[p.partial_input].copy()
            else:
                acc = np.zeros((out_side, out_side, 4), dtype=np.float32)
            for tex_local in p.input_textures:
                src = store[layer_inputs[tex_local]]
                for dy, dx, win in _fetch_windows(src, layer.kernel, layer.stride, out_side, out_side):
                    m = tap_matrix(weights, p, tex_local, dy, dx)
                    acc += win @ m.T
            if p.applies_epilogue:
                acc += pass_bias(weights, p)
                if layer.activation == "relu":
                    acc = np.maximum(acc, np.float32(0.0))
            store[p.output_texture] = acc
        for tid in plan.textures[li]["partial"]:
            del store[tid]
        outputs = plan.textures[li]["output"]
        if precision == "quantized8":
            tensor = unpack_textures([store[t] for t in outputs], layer.out_channels)
            q, scale, offset = quantize_array(tensor)
            for tid, tex in zip(outputs, pack_textures(dequantize_array(q, scale, offset))):
                store[tid] = tex
        for tid in layer_inputs:
            store.pop(tid, None)

    final = plan.textures[len(spec.layers) - 1]["output"]
    return Tensor3(unpack_textures([store[t] for t in final], spec.K))
