"""Residual bottleneck blocks, standard and CoConv."""
from __future__ import annotations

from dataclasses import dataclass

from .coconv import CoConvSpec, SpecError
from .conv import ConvGeometry
from .layers import Activation, BatchNorm2d, CoConv2d, Conv2d, Layer


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    stride: int = 1
    coconv: CoConvSpec | None = None
    dilation: int = 1  # only used by the plain 3x3 path

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise SpecError(f"stride must be 1 or 2, got {self.stride}")
        if self.coconv is not None:
            c = self.coconv
            if c.m_in != self.bottleneck_channels or c.m_out != self.bottleneck_channels:
                raise SpecError(
                    f"CoConv {c.m_in}->{c.m_out} does not match bottleneck width {self.bottleneck_channels}"
                )
            if c.stride != self.stride:
                raise SpecError(f"CoConv stride {c.stride} != block stride {self.stride}")

    @property
    def projection_shortcut(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


class Bottleneck(Layer):
    """1x1 reduce -> 3x3 (or CoConv) -> 1x1 expand, BN after each conv, residual add, ReLU.

    Downsampling stride sits on the 3x3/CoConv.
    """

    kind = "bottleneck"

    def __init__(self, name, spec: BlockSpec, zero_init_residual=False):
        super().__init__(name)
        self.spec = spec
        w = spec.bottleneck_channels
        self.conv1 = Conv2d("conv1", ConvGeometry(spec.in_channels, w, 1, 1))
        self.bn1 = BatchNorm2d("bn1", w)
        self.relu1 = Activation("relu1")
        if spec.coconv is not None:
            self.conv2 = CoConv2d("conv2", spec.coconv)
        else:
            self.conv2 = Conv2d("conv2", ConvGeometry.same(w, w, 3, spec.stride, spec.dilation))
        self.bn2 = BatchNorm2d("bn2", w)
        self.relu2 = Activation("relu2")
        self.conv3 = Conv2d("conv3", ConvGeometry(w, spec.out_channels, 1, 1))
        self.bn3 = BatchNorm2d("bn3", spec.out_channels, zero_gamma=zero_init_residual)
        self.branch = [self.conv1, self.bn1, self.relu1, self.conv2, self.bn2, self.relu2, self.conv3, self.bn3]
        if spec.projection_shortcut:
            self.proj = Conv2d("proj", ConvGeometry(spec.in_channels, spec.out_channels, 1, 1, spec.stride))
            self.proj_bn = BatchNorm2d("proj_bn", spec.out_channels)
            self.shortcut = [self.proj, self.proj_bn]
        else:
            self.shortcut = []
        self.out_relu = Activation("relu_out")

    def children(self):
        return self.branch + self.shortcut + [self.out_relu]

    def forward(self, x, train=False):
        if x.shape[1] != self.spec.in_channels:
            raise SpecError(f"{self.name}: input has {x.shape[1]} channels, block expects {self.spec.in_channels}")
        f = x
        for layer in self.branch:
            f = layer.forward(f, train)
        s = x
        for layer in self.shortcut:
            s = layer.forward(s, train)
        return self.out_relu.forward(s + f, train)

    def backward(self, grad):
        g = self.out_relu.backward(grad)
        gf = g
        for layer in reversed(self.branch):
            gf = layer.backward(gf)
        gs = g
        for layer in reversed(self.shortcut):
            gs = layer.backward(gs)
        return gf + gs

    def output_shape(self, shape):
        for layer in self.branch:
            shape = layer.output_shape(shape)
        return shape

    def cost(self, shape, prefix=""):
        sub = f"{prefix}{self.name}."
        entries = []
        out = shape
        for layer in self.branch:
            out, e = layer.cost(out, sub)
            entries.extend(e)
        s = shape
        for layer in self.shortcut:
            s, e = layer.cost(s, sub)
            entries.extend(e)
        if s != out:
            raise SpecError(f"{self.name}: shortcut shape {s} != branch shape {out}")
        return out, entries
