"""Fragment-shader pass planning, GLSL emission and a software pass executor."""

from .emit import emit_plan, emit_shader
from .plan import (
    COMBINE,
    COMPLETE,
    DEFAULT_PROFILE,
    PARTIAL,
    DeviceProfile,
    ShaderPass,
    ShaderPlan,
    TexturePacking,
    plan_manifest,
    plan_passes,
    plan_report,
    split_group_size,
)
from .simulate import execute_plan

__all__ = [
    "COMBINE", "COMPLETE", "DEFAULT_PROFILE", "PARTIAL", "DeviceProfile", "ShaderPass",
    "ShaderPlan", "TexturePacking", "emit_plan", "emit_shader", "execute_plan",
    "plan_manifest", "plan_passes", "plan_report", "split_group_size",
]
