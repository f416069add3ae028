"""Multiply-accumulate counting over static layer descriptions."""

from __future__ import annotations

from math import prod

from .layers import Conv2d, LayerSpec, LiteBlock


def layer_macs(spec: LayerSpec) -> int:
    """Convolutions: ``out_elements * k*k * Cin/groups``; BN and add: one per element."""
    if any(d is None for d in (*spec.in_shape, *spec.out_shape)):
        raise ValueError(f"layer {spec.name} has a dynamic shape")
    out_elems = prod(spec.out_shape)
    if spec.kind == "conv":
        cin = spec.in_shape[0]
        return out_elems * spec.kernel * spec.kernel * (cin // spec.groups)
    if spec.kind in ("bn", "add"):
        return out_elems
    return 0


def flops_count(rows: list[LayerSpec]) -> dict:
    """Per-layer MACs and totals; ``conv`` is the convolution-only subtotal."""
    table = [{"name": r.name, "kind": r.kind, "out_shape": list(r.out_shape), "macs": layer_macs(r)} for r in rows]
    return {
        "layers": table,
        "total": sum(t["macs"] for t in table),
        "conv": sum(t["macs"] for t in table if t["kind"] == "conv"),
    }


def lite_vs_plain_ratio(channels: int = 48, size: int = 32) -> float:
    """Convolution MACs of a lite block over a plain 5x5 convolution with equal in/out channels."""
    shape = (channels, size, size)
    lite, _ = LiteBlock(channels, channels).describe(shape)
    plain, _ = Conv2d(channels, channels, 5).describe(shape)
    return flops_count(lite)["conv"] / flops_count(plain)["conv"]
