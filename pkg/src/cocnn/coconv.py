"""Contextual convolution: n dilation levels over one input, outputs stacked.

Also the parameter/FLOP cost model. One FLOP here is one multiply-accumulate,
which is the unit the published ResNet/ProGAN totals are quoted in.
"""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import conv as _conv
from .conv import ConvGeometry
from .tensor import OutputShape, ShapeError, concat_channels, conv_output_shape, split_channels

FLOP_UNIT = "MAC"


class SpecError(ValueError):
    pass


class ParityError(ValueError):
    """The two layers being compared do not have the same in/out widths or kernel."""


class Level(NamedTuple):
    dilation: int
    out_channels: int


@dataclass(frozen=True)
class CoConvSpec:
    m_in: int
    levels: tuple[Level, ...]
    k_h: int = 3
    k_w: int = 3
    stride: int = 1
    paddings: tuple[int, ...] | None = None
    has_bias: bool = False
    m_out_declared: int | None = None
    # False admits repeated dilations (e.g. all d=1), the degenerate stacked-kernel case
    strict_ladder: bool = True

    def __post_init__(self):
        levels = tuple(Level(int(d), int(m)) for d, m in self.levels)
        object.__setattr__(self, "levels", levels)
        if not levels:
            raise SpecError("CoConv needs at least one level")
        if self.m_in < 1 or self.stride < 1 or self.k_h < 1 or self.k_w < 1:
            raise SpecError("m_in, stride and kernel sizes must be positive")
        for d, m in levels:
            if d < 1 or m < 1:
                raise SpecError(f"level (d={d}, out={m}) must have dilation >= 1 and out >= 1")
        dils = [lv.dilation for lv in levels]
        if any(b < a or (b == a and self.strict_ladder) for a, b in zip(dils, dils[1:])):
            kind = "strictly increasing" if self.strict_ladder else "non-decreasing"
            raise SpecError(f"dilations must be {kind}, got {dils}")
        if self.m_out_declared is not None and self.m_out_declared != self.m_out:
            raise SpecError(
                f"level outputs {[lv.out_channels for lv in levels]} sum to {self.m_out}, "
                f"declared M_out is {self.m_out_declared}"
            )
        if self.paddings is None:
            if self.k_h % 2 == 0 or self.k_w % 2 == 0:
                raise SpecError("even kernels need explicit per-level paddings")
            if self.k_h != self.k_w:
                raise SpecError("non-square kernels need explicit per-level paddings")
            object.__setattr__(self, "paddings", tuple(d * (self.k_h - 1) // 2 for d in dils))
        if len(self.paddings) != len(levels):
            raise SpecError("one padding per level required")
        # equal (2p - d(K-1)) for every level is what makes level outputs concatenable
        slack = {2 * p - d * (self.k_h - 1) for p, d in zip(self.paddings, dils)}
        slack_w = {2 * p - d * (self.k_w - 1) for p, d in zip(self.paddings, dils)}
        if len(slack) != 1 or len(slack_w) != 1:
            raise SpecError("per-level paddings give levels different output sizes")

    @classmethod
    def from_splits(cls, m_in, splits: Sequence[tuple[int, int]], kernel=3, stride=1, has_bias=False):
        return cls(m_in, tuple(Level(d, m) for d, m in splits), kernel, kernel, stride, None, has_bias)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def m_out(self) -> int:
        return sum(lv.out_channels for lv in self.levels)

    @property
    def splits(self) -> list[int]:
        return [lv.out_channels for lv in self.levels]

    def level_geometry(self, i: int) -> ConvGeometry:
        d, m = self.levels[i]
        return ConvGeometry(self.m_in, m, self.k_h, self.k_w, self.stride, self.paddings[i], d, False)

    def output_shape(self, in_hw) -> OutputShape:
        return conv_output_shape(in_hw, self.level_geometry(0))


def coconv_forward(x, level_weights, spec: CoConvSpec, bias=None):
    if x.ndim != 4 or x.shape[1] != spec.m_in:
        raise ShapeError(f"input {getattr(x, 'shape', None)} does not have {spec.m_in} channels")
    if len(level_weights) != spec.n_levels:
        raise SpecError(f"{len(level_weights)} weight tensors for {spec.n_levels} levels")
    outs = [_conv.conv2d_forward(x, w, None, spec.level_geometry(i)) for i, w in enumerate(level_weights)]
    if len({(o.shape[0], *o.shape[2:]) for o in outs}) != 1:
        raise SpecError(f"level outputs disagree: {[o.shape for o in outs]}")
    y = concat_channels(outs)
    if bias is not None:
        if bias.shape != (spec.m_out,):
            raise ShapeError(f"bias {bias.shape} does not match {spec.m_out} output channels")
        y = y + bias.reshape(1, -1, 1, 1)
    return y


def coconv_backward(x, level_weights, spec: CoConvSpec, grad_out):
    """Return ``(grad_input, [grad_weights per level], grad_bias or None)``."""
    if grad_out.ndim != 4 or grad_out.shape[1] != spec.m_out:
        raise ShapeError(f"grad_out {grad_out.shape} does not have {spec.m_out} channels")
    grad_x = None
    grad_ws = []
    for i, g in enumerate(split_channels(grad_out, spec.splits)):
        gx, gw, _ = _conv.conv2d_backward(x, level_weights[i], spec.level_geometry(i), np.ascontiguousarray(g))
        grad_x = gx if grad_x is None else grad_x + gx
        grad_ws.append(gw)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if spec.has_bias else None
    return grad_x, grad_ws, grad_b


# ---------------------------------------------------------------- cost model

class CostEntry(NamedTuple):
    label: str
    params: int
    flops: int


@dataclass
class CostReport:
    breakdown: list[CostEntry] = field(default_factory=list)
    unit: str = FLOP_UNIT

    @property
    def params(self) -> int:
        return sum(e.params for e in self.breakdown)

    @property
    def flops(self) -> int:
        return sum(e.flops for e in self.breakdown)

    def __add__(self, other: CostReport) -> CostReport:
        return CostReport(self.breakdown + other.breakdown, self.unit)

    def relabel(self, prefix: str) -> CostReport:
        return CostReport([e._replace(label=prefix + e.label) for e in self.breakdown], self.unit)

    def __repr__(self):
        return f"CostReport(params={self.params}, flops={self.flops} {self.unit}, entries={len(self.breakdown)})"


def count_conv_cost(geom: ConvGeometry, out: OutputShape, label: str = "conv") -> CostReport:
    taps = geom.m_in * geom.k_w * geom.k_h * geom.m_out
    params = taps + (geom.m_out if geom.has_bias else 0)
    return CostReport([CostEntry(label, params, taps * out[0] * out[1])])


def count_coconv_cost(spec: CoConvSpec, out: OutputShape, label: str = "coconv") -> CostReport:
    # a dilated K x K kernel still touches K*K input locations, whatever its dilation
    entries = []
    for i, (d, m) in enumerate(spec.levels):
        taps = spec.m_in * spec.k_w * spec.k_h * m
        entries.append(CostEntry(f"{label}.level{i}(d={d})", taps, taps * out[0] * out[1]))
    if spec.has_bias:
        entries.append(CostEntry(f"{label}.bias", spec.m_out, 0))
    return CostReport(entries)


def check_budget_parity(spec: CoConvSpec, reference: ConvGeometry, out: OutputShape) -> bool:
    mismatch = []
    if spec.m_in != reference.m_in:
        mismatch.append(f"M_in {spec.m_in} != {reference.m_in}")
    if (spec.k_h, spec.k_w) != (reference.k_h, reference.k_w):
        mismatch.append(f"kernel {(spec.k_h, spec.k_w)} != {(reference.k_h, reference.k_w)}")
    if spec.m_out != reference.m_out:
        mismatch.append(f"M_out {spec.m_out} != {reference.m_out}")
    if spec.has_bias != reference.has_bias:
        mismatch.append("bias flags differ")
    if mismatch:
        raise ParityError("; ".join(mismatch))
    a = count_coconv_cost(spec, out)
    b = count_conv_cost(reference, out)
    return a.params == b.params and a.flops == b.flops
