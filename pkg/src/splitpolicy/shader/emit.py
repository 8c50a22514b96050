"""GLSL fragment shader emission for planned passes.

The dialect is the common subset of GLSL ES 1.00 and desktop GLSL 1.20:
``texture2D``, ``gl_FragColor``, ``mat4`` constants. Weights are baked into
the source as one ``mat4`` per (input texture, kernel tap); the RGBA sample
is multiplied by it, so column ``c`` holds the weights from input component
``c`` to the four output channels.
"""

from __future__ import annotations

import numpy as np

from ..encoder import EncoderSpec, WeightSet
from ..errors import DimensionError
from .plan import ShaderPass, ShaderPlan, TexturePacking

FETCH_HELPER = """\
vec4 fetch(sampler2D tex, vec2 texel) {
    if (texel.x < 0.0 || texel.y < 0.0 || texel.x >= u_in_size.x || texel.y >= u_in_size.y) {
        return vec4(0.0);
    }
    return texture2D(tex, (texel + 0.5) / u_in_size);
}
"""


def glsl_float(value: float) -> str:
    text = f"{float(np.float32(value)):.9g}"
    if "." not in text and "e" not in text:
        text += ".0"
    return text


def tap_matrix(weights: WeightSet, p: ShaderPass, texture: int, dy: int, dx: int) -> np.ndarray:
    """4x4 block of the kernel mapping one input texture's RGBA to the pass's outputs."""
    w = weights.kernels[p.layer]
    cout, cin = w.shape[:2]
    m = np.zeros((4, 4), dtype=np.float32)
    for r in range(4):
        o = p.out_start + r
        if o >= p.out_stop:
            break
        for c in range(4):
            i = 4 * texture + c
            if i < cin:
                m[r, c] = w[o, i, dy, dx]
    return m


def pass_bias(weights: WeightSet, p: ShaderPass) -> np.ndarray:
    b = np.zeros(4, dtype=np.float32)
    b[: p.out_stop - p.out_start] = weights.biases[p.layer][p.out_start:p.out_stop]
    return b


def _mat4_literal(m: np.ndarray) -> str:
    cols = []
    for c in range(4):
        cols.append(", ".join(glsl_float(m[r, c]) for r in range(4)))
    return "mat4(\n    " + ",\n    ".join(cols) + ")"


def emit_shader(p: ShaderPass, spec: EncoderSpec, packing: TexturePacking, weights: WeightSet) -> str:
    if p.layer >= len(weights.kernels):
        raise DimensionError(f"no weights for layer {p.layer}")
    layer = spec.layers[p.layer]
    if packing.tensor_channels != layer.in_channels:
        raise DimensionError("packing does not describe this layer's input")
    k, r, s = layer.kernel, layer.radius, layer.stride

    out = [
        f"// layer {p.layer} pass {p.index} ({p.role}): output channels "
        f"{p.out_start}..{p.out_stop - 1}, {k}x{k} kernel, stride {s}",
        f"// samples per fragment: {p.samples_per_fragment}",
        "#ifdef GL_ES",
        "precision highp float;",
        "#endif",
        "",
    ]
    for slot, _ in enumerate(p.input_textures):
        out.append(f"uniform sampler2D u_in{slot};")
    if p.partial_input is not None:
        out.append("uniform sampler2D u_partial;")
    out += ["uniform vec2 u_in_size;", "uniform vec2 u_out_size;", ""]

    for slot, tex in enumerate(p.input_textures):
        for dy in range(k):
            for dx in range(k):
                m = tap_matrix(weights, p, tex, dy, dx)
                out.append(f"const mat4 w{slot}_{dy}_{dx} = {_mat4_literal(m)};")
    if p.applies_epilogue:
        b = pass_bias(weights, p)
        out.append("const vec4 bias = vec4(" + ", ".join(glsl_float(v) for v in b) + ");")
    out += ["", FETCH_HELPER, "void main() {"]
    out.append(f"    vec2 centre = floor(gl_FragCoord.xy) * {glsl_float(s)};")
    if p.partial_input is not None:
        out.append("    vec4 acc = texture2D(u_partial, gl_FragCoord.xy / u_out_size);")
    else:
        out.append("    vec4 acc = vec4(0.0);")
    for slot, _ in enumerate(p.input_textures):
        for dy in range(k):
            for dx in range(k):
                off = f"vec2({glsl_float(dx - r)}, {glsl_float(dy - r)})"
                out.append(f"    acc += w{slot}_{dy}_{dx} * fetch(u_in{slot}, centre + {off});")
    if p.applies_epilogue:
        out.append("    acc += bias;")
        if layer.activation == "relu":
            out.append("    acc = max(acc, vec4(0.0));")
    out += ["    gl_FragColor = acc;", "}", ""]
    return "\n".join(out)


def emit_plan(plan: ShaderPlan, spec: EncoderSpec, weights: WeightSet) -> dict[str, str]:
    """Filename -> source for every pass in the plan."""
    weights.check_matches(spec)
    sources = {}
    for p in plan.passes:
        packing = TexturePacking(spec.layers[p.layer].in_channels)
        sources[p.filename] = emit_shader(p, spec, packing, weights)
    return sources
