"""Contextual convolution (multi-dilation, budget-neutral) engine, cost model and desk-scale trainer."""
from .arch import (ArchConfig, ConfigError, Network, PRESETS, build, build_coprogan_generator, build_coresnet,
                   build_preset, get_preset, network_cost, parse_arch_config, write_cost_csv)
from .blocks import BlockSpec, Bottleneck
from .coconv import (CoConvSpec, CostEntry, CostReport, Level, ParityError, SpecError, check_budget_parity,
                     coconv_backward, coconv_forward, count_coconv_cost, count_conv_cost)
from .conv import ConvGeometry, conv2d_backward, conv2d_forward, conv2d_reference_oracle
from .tensor import (GeometryError, OutputShape, ShapeError, concat_channels, conv_output_shape,
                     split_channels, tensor_create)

__version__ = "0.1.0"
