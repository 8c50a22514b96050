"""Decomposition of an encoder into fragment-shader passes.

Each pass writes one RGBA texture (up to four output channels) and may bind
at most ``max_textures`` samplers and fetch at most ``sample_budget`` texels
per fragment. Layers whose full input does not fit one pass are split along
input textures into a chain: every link adds its slice of the convolution to
a running partial-sum texture, and the last link (the combine pass) also adds
the bias and applies the activation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..encoder import EncoderSpec
from ..errors import ConstraintError

COMPLETE, PARTIAL, COMBINE = "complete", "partial", "combine"


@dataclass(frozen=True)
class DeviceProfile:
    max_textures: int = 8
    sample_budget: int = 64
    name: str = "embedded-default"

    def __post_init__(self):
        if self.max_textures < 1 or self.sample_budget < 1:
            raise ValueError("device limits must be >= 1")


DEFAULT_PROFILE = DeviceProfile()


@dataclass(frozen=True)
class TexturePacking:
    """Channel c lives in texture c // 4, component c % 4."""

    tensor_channels: int

    @property
    def textures(self) -> int:
        return math.ceil(self.tensor_channels / 4)

    def slot(self, channel: int) -> tuple[int, int]:
        if not 0 <= channel < self.tensor_channels:
            raise IndexError(channel)
        return divmod(channel, 4)

    @property
    def mapping(self) -> dict[int, tuple[int, int]]:
        return {c: self.slot(c) for c in range(self.tensor_channels)}


@dataclass(frozen=True)
class ShaderPass:
    layer: int
    index: int  # position within the layer
    out_start: int
    out_stop: int
    input_textures: tuple[int, ...]  # which of the layer's input textures are sampled (local index)
    bindings: tuple[int, ...]  # global texture ids, data textures then the partial-sum texture
    output_texture: int
    partial_input: int | None
    samples_per_fragment: int
    role: str

    @property
    def group(self) -> range:
        return range(self.out_start, self.out_stop)

    @property
    def applies_epilogue(self) -> bool:
        """Bias and activation happen only in the pass that finalises a group."""
        return self.role in (COMPLETE, COMBINE)

    @property
    def filename(self) -> str:
        return f"layer{self.layer}_pass{self.index}.frag"


@dataclass(frozen=True)
class ShaderPlan:
    passes: tuple[ShaderPass, ...]
    textures: dict[int, dict[str, list[int]]]  # layer -> {"input", "output", "partial"} texture ids
    profile: DeviceProfile
    peak_textures: int
    group_size: dict[int, int] = field(default_factory=dict)  # split layers only

    @property
    def pass_count(self) -> int:
        return len(self.passes)

    def layer_passes(self, layer: int) -> list[ShaderPass]:
        return [p for p in self.passes if p.layer == layer]


def split_group_size(kernel: int, profile: DeviceProfile) -> int:
    """Input textures per link of a split chain after the first.

    One binding and one fetch are reserved for the running partial sum.
    """
    return min(profile.max_textures - 1, (profile.sample_budget - 1) // (kernel * kernel))


def plan_passes(spec: EncoderSpec, profile: DeviceProfile = DEFAULT_PROFILE) -> ShaderPlan:
    next_id = 0

    def alloc(count: int) -> list[int]:
        nonlocal next_id
        ids = list(range(next_id, next_id + count))
        next_id += count
        return ids

    passes: list[ShaderPass] = []
    textures: dict[int, dict[str, list[int]]] = {}
    group_sizes: dict[int, int] = {}
    current = alloc(TexturePacking(spec.input_channels).textures)

    for li, layer in enumerate(spec.layers):
        k2 = layer.kernel * layer.kernel
        t_in = TexturePacking(layer.in_channels).textures
        out_groups = math.ceil(layer.out_channels / 4)
        outputs = alloc(out_groups)
        partials: list[int] = []
        idx = 0

        if k2 > profile.sample_budget:
            raise ConstraintError(
                f"layer {li}: a {layer.kernel}x{layer.kernel} kernel needs {k2} samples, "
                f"budget is {profile.sample_budget}"
            )
        if k2 * t_in <= profile.sample_budget and t_in <= profile.max_textures:
            for g in range(out_groups):
                passes.append(ShaderPass(
                    layer=li, index=idx, out_start=4 * g,
                    out_stop=min(4 * g + 4, layer.out_channels),
                    input_textures=tuple(range(t_in)), bindings=tuple(current),
                    output_texture=outputs[g], partial_input=None,
                    samples_per_fragment=k2 * t_in, role=COMPLETE,
                ))
                idx += 1
        else:
            gsize = split_group_size(layer.kernel, profile)
            if gsize < 1:
                raise ConstraintError(
                    f"layer {li}: {t_in} input textures cannot be split under "
                    f"{profile.max_textures} bindings / {profile.sample_budget} samples"
                )
            group_sizes[li] = gsize
            # the first link reads no partial sum, so it can take one more texture
            first = min(profile.max_textures, profile.sample_budget // k2)
            chunks = [tuple(range(first))]
            chunks += [tuple(range(s, min(s + gsize, t_in))) for s in range(first, t_in, gsize)]
            for g in range(out_groups):
                running = None
                for ci, chunk in enumerate(chunks):
                    last = ci == len(chunks) - 1
                    target = outputs[g] if last else alloc(1)[0]
                    if not last:
                        partials.append(target)
                    bindings = tuple(current[t] for t in chunk) + ((running,) if running is not None else ())
                    passes.append(ShaderPass(
                        layer=li, index=idx, out_start=4 * g,
                        out_stop=min(4 * g + 4, layer.out_channels),
                        input_textures=chunk, bindings=bindings,
                        output_texture=target, partial_input=running,
                        samples_per_fragment=k2 * len(chunk) + (running is not None),
                        role=COMBINE if last else PARTIAL,
                    ))
                    idx += 1
                    running = target
        textures[li] = {"input": list(current), "output": outputs, "partial": partials}
        current = outputs

    return ShaderPlan(tuple(passes), textures, profile, _peak_textures(spec, passes, textures), group_sizes)


def _peak_textures(spec: EncoderSpec, passes: list[ShaderPass], textures) -> int:
    """Largest number of textures alive at once across the pass sequence."""
    if not passes:
        return TexturePacking(spec.input_channels).textures
    born: dict[int, int] = {}
    last_use: dict[int, int] = {}
    first_inputs = textures[0]["input"] if textures else []
    for t in first_inputs:
        born[t] = 0
    for p_i, p in enumerate(passes):
        born.setdefault(p.output_texture, p_i)
        last_use.setdefault(p.output_texture, p_i)
        for t in p.bindings:
            last_use[t] = p_i
    final_layer = max(textures)
    for t in textures[final_layer]["output"]:
        last_use[t] = len(passes) - 1
    peak = 0
    for p_i in range(len(passes)):
        live = sum(1 for t in born if born[t] <= p_i <= last_use.get(t, born[t]))
        peak = max(peak, live)
    return peak


def plan_report(plan: ShaderPlan) -> dict:
    """Summary record of a plan, plain types only."""
    return {
        "profile": plan.profile.name,
        "max_textures": plan.profile.max_textures,
        "sample_budget": plan.profile.sample_budget,
        "pass_count": plan.pass_count,
        "peak_textures": plan.peak_textures,
        "split_layers": {str(k): v for k, v in sorted(plan.group_size.items())},
        "passes": [
            {
                "file": p.filename,
                "layer": p.layer,
                "pass": p.index,
                "role": p.role,
                "out_channels": [p.out_start, p.out_stop],
                "bindings": list(p.bindings),
                "samples": p.samples_per_fragment,
            }
            for p in plan.passes
        ],
    }


def plan_manifest(plan: ShaderPlan) -> str:
    """One line per pass: layer, group range, bindings, sample count."""
    lines = []
    for p in plan.passes:
        bindings = ",".join(str(b) for b in p.bindings)
        lines.append(
            f"{p.filename} layer={p.layer} pass={p.index} role={p.role} "
            f"group={p.out_start}-{p.out_stop - 1} bindings={bindings} "
            f"samples={p.samples_per_fragment}"
        )
    return "\n".join(lines) + ("\n" if lines else "")
