"""Whole networks from declarative configs: (Co)ResNet-50/101/152 and the (Co)ProGAN generator.

``ArchConfig`` is the single description both builders and the cost model
consume; configs can be read from JSON documents with :func:`parse_arch_config`.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .blocks import BlockSpec, Bottleneck
from .coconv import CoConvSpec, CostReport, Level, SpecError
from .conv import ConvGeometry
from .layers import (Activation, BatchNorm2d, CoConv2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d,
                     PixelNorm, Reshape, Sequential, Upsample2x)

DEPTH_BLOCKS = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}
FAMILIES = ("resnet", "coresnet", "progan_gen", "coprogan_gen")
GEN_RESOLUTIONS = (4, 8, 16, 32, 64, 128)
# fmap widths that reproduce the 128x128 generator's published totals
GEN_WIDTHS = {4: 512, 8: 512, 16: 512, 32: 512, 64: 512, 128: 256}
GEN_LEVELS = {4: 1, 8: 2, 16: 3, 32: 4, 64: 4, 128: 4}
OS8_DILATION = {3: 2, 4: 4}


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class ArchConfig:
    family: str = "coresnet"
    depth: int = 50
    stage_levels: tuple[int, ...] = (4, 3, 2, 1)
    # stage index (1-based; resolution for generators) -> levels; unset stages use defaults
    stage_splits: dict[int, tuple[Level, ...]] = field(default_factory=dict)
    top_only: bool = False
    output_stride: int = 32
    num_classes: int = 1000
    input_resolution: int = 224
    stem: str = "imagenet"
    base_width: int = 64
    blocks: tuple[int, ...] | None = None
    zero_init_residual: bool = False
    widths: tuple[int, ...] | None = None
    latent_dim: int = 512

    @property
    def is_generator(self) -> bool:
        return self.family in ("progan_gen", "coprogan_gen")


def equal_split(width: int, n: int) -> list[int]:
    base = width // n
    return [width - base * (n - 1)] + [base] * (n - 1)


def default_stage_split(width: int, n: int) -> list[int]:
    """Level widths for a CoResNet stage: halves/quarters pattern for 3 levels, equal otherwise."""
    if n == 3:
        q = width // 4
        return [width - 2 * q, q, q]
    return equal_split(width, n)


def _check_levels(path, levels, width):
    dils = [lv.dilation for lv in levels]
    if any(d < 1 for d in dils) or any(lv.out_channels < 1 for lv in levels):
        raise ConfigError(path, "dilations and level widths must be positive")
    if any(b <= a for a, b in zip(dils, dils[1:])):
        raise ConfigError(path, f"dilations must be strictly increasing, got {dils}")
    total = sum(lv.out_channels for lv in levels)
    if total != width:
        raise ConfigError(path, f"level widths {[lv.out_channels for lv in levels]} sum to {total}, stage width is {width}")


def validate_config(cfg: ArchConfig) -> ArchConfig:
    if cfg.family not in FAMILIES:
        raise ConfigError("family", f"unknown family {cfg.family!r}; expected one of {FAMILIES}")
    if cfg.is_generator:
        if cfg.input_resolution not in GEN_RESOLUTIONS:
            raise ConfigError("input_resolution", f"unsupported generator resolution {cfg.input_resolution}")
        res = _gen_resolutions(cfg)
        if cfg.widths is not None and len(cfg.widths) != len(res):
            raise ConfigError("widths", f"need {len(res)} widths for resolutions {res}")
        for r, levels in cfg.stage_splits.items():
            if r not in res:
                raise ConfigError(f"stage_splits.{r}", "no such resolution in this generator")
            _check_levels(f"stage_splits.{r}", levels, _gen_width(cfg, r))
        return cfg
    if cfg.blocks is None and cfg.depth not in DEPTH_BLOCKS:
        raise ConfigError("depth", f"depth must be one of {sorted(DEPTH_BLOCKS)}")
    if cfg.blocks is not None and (len(cfg.blocks) != 4 or min(cfg.blocks) < 1):
        raise ConfigError("blocks", "need four positive block counts")
    if len(cfg.stage_levels) != 4 or min(cfg.stage_levels) < 1:
        raise ConfigError("stage_levels", f"need four level counts >= 1, got {cfg.stage_levels}")
    if cfg.output_stride not in (8, 32):
        raise ConfigError("output_stride", "output_stride must be 8 or 32")
    if cfg.num_classes < 1:
        raise ConfigError("num_classes", "must be positive")
    if cfg.stem not in ("imagenet", "cifar"):
        raise ConfigError("stem", "stem must be 'imagenet' or 'cifar'")
    if cfg.base_width < 1:
        raise ConfigError("base_width", "must be positive")
    for s, levels in cfg.stage_splits.items():
        if s not in (1, 2, 3, 4):
            raise ConfigError(f"stage_splits.{s}", "stage must be 1..4")
        if len(levels) != cfg.stage_levels[s - 1]:
            raise ConfigError(f"stage_splits.{s}",
                              f"{len(levels)} levels given but stage_levels says {cfg.stage_levels[s - 1]}")
        _check_levels(f"stage_splits.{s}", levels, cfg.base_width * 2 ** (s - 1))
    return cfg


_KEYS = {f.name for f in ArchConfig.__dataclass_fields__.values()}


def parse_arch_config(text: str | dict) -> ArchConfig:
    """Parse a JSON document (or an already-decoded dict) into a validated config."""
    if isinstance(text, str):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"malformed JSON: {exc}") from exc
    else:
        doc = dict(text)
    if not isinstance(doc, dict):
        raise ConfigError("", "config document must be an object")
    unknown = sorted(set(doc) - _KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    kw = dict(doc)
    family = kw.get("family", "coresnet")
    if family in ("progan_gen", "coprogan_gen"):
        kw.setdefault("input_resolution", 128)
    splits = {}
    for key, levels in (kw.pop("stage_splits", None) or {}).items():
        path = f"stage_splits.{key}"
        try:
            stage = int(key)
        except ValueError:
            raise ConfigError(path, "stage key must be an integer") from None
        if not isinstance(levels, list) or not levels:
            raise ConfigError(path, "expected a non-empty list of {d, out}")
        parsed = []
        for i, lv in enumerate(levels):
            if not isinstance(lv, dict) or set(lv) != {"d", "out"}:
                raise ConfigError(f"{path}[{i}]", "each level needs exactly the keys 'd' and 'out'")
            if not all(isinstance(lv[k], int) and not isinstance(lv[k], bool) for k in ("d", "out")):
                raise ConfigError(f"{path}[{i}]", "'d' and 'out' must be integers")
            parsed.append(Level(lv["d"], lv["out"]))
        splits[stage] = tuple(parsed)
    if splits and "stage_levels" not in kw and family in ("resnet", "coresnet"):
        levels = list(ArchConfig.stage_levels)
        for s, lv in splits.items():
            if 1 <= s <= 4:
                levels[s - 1] = len(lv)
        kw["stage_levels"] = levels
    for key in ("stage_levels", "blocks", "widths"):
        if kw.get(key) is not None:
            if not isinstance(kw[key], list) or not all(isinstance(v, int) for v in kw[key]):
                raise ConfigError(key, "expected a list of integers")
            kw[key] = tuple(kw[key])
    for key in ("depth", "output_stride", "num_classes", "input_resolution", "base_width", "latent_dim"):
        if key in kw and (not isinstance(kw[key], int) or isinstance(kw[key], bool)):
            raise ConfigError(key, "expected an integer")
    for key in ("top_only", "zero_init_residual"):
        if key in kw and not isinstance(kw[key], bool):
            raise ConfigError(key, "expected a boolean")
    return validate_config(ArchConfig(stage_splits=splits, **kw))


def config_to_dict(cfg: ArchConfig) -> dict:
    d = asdict(cfg)
    d["stage_splits"] = {str(k): [{"d": lv[0], "out": lv[1]} for lv in v] for k, v in cfg.stage_splits.items()}
    for key in ("stage_levels", "blocks", "widths"):
        if d[key] is not None:
            d[key] = list(d[key])
    return d


# -------------------------------------------------------------------- presets

PRESETS: dict[str, ArchConfig] = {
    "resnet50": ArchConfig(family="resnet", depth=50, stage_levels=(1, 1, 1, 1)),
    "resnet101": ArchConfig(family="resnet", depth=101, stage_levels=(1, 1, 1, 1)),
    "resnet152": ArchConfig(family="resnet", depth=152, stage_levels=(1, 1, 1, 1)),
    "resnet50-os8": ArchConfig(family="resnet", depth=50, stage_levels=(1, 1, 1, 1), output_stride=8),
    "coresnet50": ArchConfig(depth=50),
    "coresnet101": ArchConfig(depth=101),
    "coresnet152": ArchConfig(depth=152),
    "coresnet50-top": ArchConfig(depth=50, top_only=True),
    "coresnet50-os8": ArchConfig(depth=50, output_stride=8),
    "coresnet50-1111": ArchConfig(depth=50, stage_levels=(1, 1, 1, 1)),
    "coresnet50-2221": ArchConfig(depth=50, stage_levels=(2, 2, 2, 1)),
    "coresnet50-3321": ArchConfig(depth=50, stage_levels=(3, 3, 2, 1)),
    "coresnet50-3333": ArchConfig(depth=50, stage_levels=(3, 3, 3, 3)),
    "progan-gen128": ArchConfig(family="progan_gen", input_resolution=128),
    "coprogan-gen128": ArchConfig(family="coprogan_gen", input_resolution=128),
    "coresnet-tiny": ArchConfig(blocks=(1, 1, 1, 1), stem="cifar", base_width=16, num_classes=10,
                                input_resolution=32),
    "resnet-tiny": ArchConfig(family="resnet", stage_levels=(1, 1, 1, 1), blocks=(1, 1, 1, 1), stem="cifar",
                              base_width=16, num_classes=10, input_resolution=32),
}

# (co-variant, standard counterpart) pairs whose costs must agree exactly
PARITY_PAIRS = [
    ("coresnet50", "resnet50"),
    ("coresnet101", "resnet101"),
    ("coresnet152", "resnet152"),
    ("coresnet50-top", "resnet50"),
    ("coresnet50-os8", "resnet50-os8"),
    ("coresnet50-2221", "resnet50"),
    ("coresnet50-3321", "resnet50"),
    ("coresnet50-3333", "resnet50"),
    ("coprogan-gen128", "progan-gen128"),
    ("coresnet-tiny", "resnet-tiny"),
]


def get_preset(name: str) -> ArchConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# -------------------------------------------------------------------- network

class Network(Sequential):
    def __init__(self, layers, config: ArchConfig, input_shape):
        super().__init__("", layers)
        self.config = config
        self.input_shape = tuple(input_shape)
        self.materialized = False

    def init(self, seed=0, dtype=np.float32):
        self.init_params(np.random.default_rng(seed), dtype)
        self.materialized = True
        return self

    @property
    def dtype(self):
        return next(iter(self.parameters().values())).dtype

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: layer.params[key] for name, layer, key in self.named_parameters()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: layer.grads[key] for name, layer, key in self.named_parameters()}

    def decay_mask(self) -> set[str]:
        return {name for name, layer, key in self.named_parameters() if key not in layer.no_decay}

    def batchnorms(self):
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.copy() for k, v in self.parameters().items()}
        for name, layer in self.named_modules():
            if isinstance(layer, BatchNorm2d):
                state[f"{name}.running_mean"] = layer.running_mean.copy()
                state[f"{name}.running_var"] = layer.running_var.copy()
        return state

    def load_state_dict(self, state):
        for name, layer, key in self.named_parameters():
            arr = np.asarray(state[name])
            if arr.shape != layer.param_shapes[key]:
                raise SpecError(f"{name}: shape {arr.shape} != {layer.param_shapes[key]}")
            layer.params[key] = arr.copy()
        for name, layer in self.named_modules():
            if isinstance(layer, BatchNorm2d):
                layer.running_mean = np.asarray(state[f"{name}.running_mean"]).copy()
                layer.running_var = np.asarray(state[f"{name}.running_var"]).copy()
        self.materialized = True

    def named_modules(self, prefix=""):
        def walk(layer, base):
            yield base, layer
            for child in layer.children():
                yield from walk(child, f"{base}.{child.name}" if base else child.name)
        yield from walk(self, prefix)

    def cost(self, shape=None, prefix=""):
        return super().cost(self.input_shape if shape is None else shape, prefix)


def network_cost(net: Network, input_shape=None) -> CostReport:
    """Layerwise params/MACs: convs, CoConv levels, FC affine and BN scale/shift."""
    _, entries = net.cost(None if input_shape is None else tuple(input_shape))
    return CostReport(entries)


def write_cost_csv(report: CostReport, fh=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "label", "params", "flops"])
    for i, e in enumerate(report.breakdown):
        w.writerow([i, e.label, e.params, e.flops])
    w.writerow(["total", "TOTAL", report.params, report.flops])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


# ------------------------------------------------------------------ builders

def stage_levels_for(cfg: ArchConfig, stage: int) -> tuple[Level, ...]:
    """Resolved CoConv levels of a CoResNet stage (1-based), after top-only and output-stride rules."""
    width = cfg.base_width * 2 ** (stage - 1)
    if stage in cfg.stage_splits:
        levels = cfg.stage_splits[stage]
    else:
        n = cfg.stage_levels[stage - 1]
        levels = tuple(Level(i + 1, m) for i, m in enumerate(default_stage_split(width, n)))
    if cfg.top_only:
        levels = (Level(levels[-1].dilation, width),)
    if cfg.output_stride == 8 and stage in OS8_DILATION:
        k = OS8_DILATION[stage]
        levels = tuple(Level(lv.dilation * k, lv.out_channels) for lv in levels)
    return levels


def build_coresnet(cfg: ArchConfig, seed=0, dtype=np.float32, init=True) -> Network:
    validate_config(cfg)
    if cfg.is_generator:
        raise ConfigError("family", "use build_coprogan_generator for generator configs")
    plain = cfg.family == "resnet"
    blocks = cfg.blocks or DEPTH_BLOCKS[cfg.depth]
    bw = cfg.base_width
    if cfg.stem == "imagenet":
        stem = [Conv2d("conv", ConvGeometry(3, bw, 7, 7, 2, 3)), BatchNorm2d("bn", bw), Activation("relu"),
                MaxPool2d("pool", 3, 2, 1)]
    else:
        stem = [Conv2d("conv", ConvGeometry(3, bw, 3, 3, 1, 1)), BatchNorm2d("bn", bw), Activation("relu")]
    layers = [Sequential("stem", stem)]
    c_in = bw
    for s in range(1, 5):
        width = bw * 2 ** (s - 1)
        levels = stage_levels_for(cfg, s)
        stride = 2 if s > 1 else 1
        if cfg.output_stride == 8 and s in OS8_DILATION:
            stride = 1
        stage = []
        for b in range(blocks[s - 1]):
            bstride = stride if b == 0 else 1
            if plain:
                dil = OS8_DILATION.get(s, 1) if cfg.output_stride == 8 else 1
                spec = BlockSpec(c_in, width, 4 * width, bstride, None, dil)
            else:
                co = CoConvSpec(width, levels, 3, 3, bstride)
                spec = BlockSpec(c_in, width, 4 * width, bstride, co)
            stage.append(Bottleneck(f"block{b}", spec, cfg.zero_init_residual))
            c_in = 4 * width
        layers.append(Sequential(f"stage{s}", stage))
    layers += [GlobalAvgPool("avgpool"), Linear("fc", c_in, cfg.num_classes)]
    net = Network(layers, cfg, (3, cfg.input_resolution, cfg.input_resolution))
    if init:
        net.init(seed, dtype)
    return net


def _gen_resolutions(cfg):
    return [r for r in GEN_RESOLUTIONS if r <= cfg.input_resolution]


def _gen_width(cfg, r):
    if cfg.widths is not None:
        return cfg.widths[_gen_resolutions(cfg).index(r)]
    return GEN_WIDTHS[r]


def gen_levels_for(cfg: ArchConfig, r: int) -> tuple[Level, ...]:
    width = _gen_width(cfg, r)
    if cfg.family == "progan_gen":
        return (Level(1, width),)
    if r in cfg.stage_splits:
        return cfg.stage_splits[r]
    return tuple(Level(i + 1, m) for i, m in enumerate(equal_split(width, GEN_LEVELS[r])))


def build_coprogan_generator(cfg: ArchConfig, seed=0, dtype=np.float32, init=True) -> Network:
    """Generator at its final resolution: latent -> 4x4 -> (upsample, 2 convs) per doubling -> RGB."""
    validate_config(cfg)
    if not cfg.is_generator:
        raise ConfigError("family", "not a generator config")
    lrelu = dict(kind="leaky_relu", slope=0.2)
    gain = math.sqrt(2)

    def conv(name, c_in, r):
        levels = gen_levels_for(cfg, r)
        spec = CoConvSpec(c_in, levels, 3, 3, 1, None, True)
        if cfg.family == "progan_gen":
            return Conv2d(name, ConvGeometry.same(c_in, spec.m_out, 3, has_bias=True), gain=gain)
        return CoConv2d(name, spec, gain=gain)

    w4 = _gen_width(cfg, 4)
    layers = [
        PixelNorm("latent_norm"),
        Linear("dense", cfg.latent_dim, w4 * 16, gain=gain / 4),
        Reshape("reshape", (w4, 4, 4)),
        Activation("dense_act", **lrelu),
        PixelNorm("dense_norm"),
    ]
    block4 = [conv("conv", w4, 4), Activation("act", **lrelu), PixelNorm("norm")]
    layers.append(Sequential("res4", block4))
    c_in = w4
    for r in _gen_resolutions(cfg)[1:]:
        w = _gen_width(cfg, r)
        block = [Upsample2x("up"),
                 conv("conv0", c_in, r), Activation("act0", **lrelu), PixelNorm("norm0"),
                 conv("conv1", w, r), Activation("act1", **lrelu), PixelNorm("norm1")]
        layers.append(Sequential(f"res{r}", block))
        c_in = w
    layers.append(Conv2d("to_rgb", ConvGeometry(c_in, 3, 1, 1, has_bias=True), gain=1.0))
    net = Network(layers, cfg, (cfg.latent_dim,))
    if init:
        net.init(seed, dtype)
    return net


def build(cfg: ArchConfig, seed=0, dtype=np.float32, init=True) -> Network:
    if cfg.is_generator:
        return build_coprogan_generator(cfg, seed, dtype, init)
    return build_coresnet(cfg, seed, dtype, init)


def build_preset(name: str, seed=0, dtype=np.float32, init=True, resolution=None) -> Network:
    cfg = get_preset(name)
    if resolution is not None:
        cfg = validate_config(replace(cfg, input_resolution=resolution))
    return build(cfg, seed, dtype, init)
