"""Property suites behind ``cocnn verify``: cost parity, oracle differential tests, gradient checks.

Each suite returns a list of :class:`Check` records; nothing here raises on a
failed property, so callers decide what a failure means.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import arch
from .blocks import BlockSpec, Bottleneck
from .coconv import CoConvSpec, Level, check_budget_parity, coconv_forward
from .conv import ConvGeometry, conv2d_forward, conv2d_reference_oracle
from .layers import (Activation, BatchNorm2d, CoConv2d, Conv2d, Linear, MaxPool2d, PixelNorm, Upsample2x)
from .tensor import concat_channels

ORACLE_TOL = 1e-10
LAYER_GRAD_TOL = 1e-5
COMPOSED_GRAD_TOL = 1e-4


class Check(NamedTuple):
    name: str
    ok: bool
    detail: str


# --------------------------------------------------------------------- parity

def parity_suite(pairs=None) -> list[Check]:
    """Whole-network and per-layer cost equality for every (co, standard) preset pair."""
    checks = []
    for co_name, std_name in pairs or arch.PARITY_PAIRS:
        co = arch.build_preset(co_name, init=False)
        std = arch.build_preset(std_name, init=False)
        a, b = arch.network_cost(co), arch.network_cost(std)
        ok = a.params == b.params and a.flops == b.flops
        eq = lambda u, v: "==" if u == v else "!="
        checks.append(Check(
            f"{co_name} == {std_name}", ok,
            f"params {a.params} {eq(a.params, b.params)} {b.params}, flops {a.flops} {eq(a.flops, b.flops)} {b.flops}",
        ))
        bad = _layer_parity_failures(co)
        checks.append(Check(f"{co_name} per-CoConv parity", not bad,
                            f"{len(bad)} mismatching layers" + (f": {bad[:3]}" if bad else "")))
    return checks


def _layer_parity_failures(net) -> list[str]:
    bad = []
    shape = net.input_shape
    for name, (lay, in_shape) in _walk_shapes(net, shape):
        if isinstance(lay, CoConv2d):
            spec = lay.spec
            ref = ConvGeometry(spec.m_in, spec.m_out, spec.k_h, spec.k_w, spec.stride, spec.paddings[0],
                               spec.levels[0].dilation, spec.has_bias)
            out = lay.output_shape(in_shape)[1:]
            if not check_budget_parity(spec, ref, out):
                bad.append(name)
    return bad


def _walk_shapes(layer, shape, prefix=""):
    """Yield ``(qualified name, (leaf, input shape))`` along the main data path."""
    kids = layer.children()
    if not kids:
        yield prefix + layer.name, (layer, shape)
        return
    if isinstance(layer, Bottleneck):
        kids = layer.branch
    base = f"{prefix}{layer.name}." if layer.name else prefix
    for child in kids:
        yield from _walk_shapes(child, shape, base)
        shape = child.output_shape(shape)


# --------------------------------------------------------------------- oracle

def random_conv_instance(rng):
    """A geometry inside the differential-test envelope: K in {1,3,7}, d in 1..4, s in {1,2}, <= (2,8,9,9)."""
    while True:
        k = int(rng.choice([1, 3, 7]))
        d = int(rng.integers(1, 5))
        s = int(rng.integers(1, 3))
        n, c, h, w = (int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 10)),
                      int(rng.integers(1, 10)))
        m = int(rng.integers(1, 9))
        p = int(rng.integers(0, d * (k - 1) // 2 + 2))
        geom = ConvGeometry(c, m, k, k, s, p, d, bool(rng.integers(0, 2)))
        if min(h, w) + 2 * p >= d * (k - 1) + 1:
            return geom, (n, c, h, w)


def random_coconv_instance(rng):
    while True:
        k = int(rng.choice([1, 3, 7]))
        n_lv = int(rng.integers(1, 5))
        dils = sorted(rng.choice(np.arange(1, 5), size=n_lv, replace=False).tolist())
        c, m_total = int(rng.integers(1, 9)), int(rng.integers(n_lv, 9))
        cuts = np.sort(rng.choice(np.arange(1, m_total), size=n_lv - 1, replace=False)) if n_lv > 1 else []
        sizes = np.diff([0, *cuts, m_total]).tolist()
        k_eff = dils[-1] * (k - 1) + 1
        h, w = int(rng.integers(1, 10)), int(rng.integers(1, 10))
        spec = CoConvSpec(c, tuple(Level(d, s) for d, s in zip(dils, sizes)), k, k, int(rng.integers(1, 3)),
                          has_bias=bool(rng.integers(0, 2)))
        if min(h, w) + 2 * spec.paddings[-1] >= k_eff:
            return spec, (int(rng.integers(1, 3)), c, h, w)


def coconv_reference(x, level_weights, spec: CoConvSpec, bias=None):
    """CoConv through the brute-force loop oracle, one level at a time."""
    outs = [conv2d_reference_oracle(x, w, None, spec.level_geometry(i)) for i, w in enumerate(level_weights)]
    y = concat_channels(outs)
    return y if bias is None else y + bias.reshape(1, -1, 1, 1)


def oracle_suite(seed=0, instances=100) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst_conv = worst_co = 0.0
    n_conv = instances // 2
    for _ in range(n_conv):
        geom, shape = random_conv_instance(rng)
        x = rng.standard_normal(shape)
        w = rng.standard_normal(geom.weight_shape)
        b = rng.standard_normal(geom.m_out) if geom.has_bias else None
        diff = conv2d_forward(x, w, b, geom) - conv2d_reference_oracle(x, w, b, geom)
        worst_conv = max(worst_conv, float(np.abs(diff).max()))
    for _ in range(instances - n_conv):
        spec, shape = random_coconv_instance(rng)
        x = rng.standard_normal(shape)
        ws = [rng.standard_normal((m, spec.m_in, spec.k_h, spec.k_w)) for m in spec.splits]
        b = rng.standard_normal(spec.m_out) if spec.has_bias else None
        diff = coconv_forward(x, ws, spec, b) - coconv_reference(x, ws, spec, b)
        worst_co = max(worst_co, float(np.abs(diff).max()))
    return [
        Check(f"conv2d vs oracle ({n_conv} instances, seed {seed})", worst_conv < ORACLE_TOL,
              f"max abs err {worst_conv:.3e} (< {ORACLE_TOL:g})"),
        Check(f"coconv vs oracle ({instances - n_conv} instances, seed {seed})", worst_co < ORACLE_TOL,
              f"max abs err {worst_co:.3e} (< {ORACLE_TOL:g})"),
    ]


# ------------------------------------------------------------------- gradients

def _single_layer_cases():
    co = CoConvSpec.from_splits(4, [(1, 2), (2, 1), (3, 3)], stride=2, has_bias=True)
    return [
        ("conv 3x3 s2 d2 +bias", Conv2d("conv", ConvGeometry(3, 4, 3, 3, 2, 2, 2, True)), (2, 3, 9, 9)),
        ("conv 7x7 s1", Conv2d("conv", ConvGeometry.same(2, 3, 7)), (2, 2, 8, 8)),
        ("conv 1x1 scaled", Conv2d("conv", ConvGeometry(3, 5, 1, 1, has_bias=True), gain=2 ** 0.5), (2, 3, 5, 5)),
        ("coconv d=1,2,3 s2 +bias", CoConv2d("coconv", co), (2, 4, 9, 9)),
        ("batchnorm", BatchNorm2d("bn", 3), (2, 3, 6, 6)),
        ("relu", Activation("relu"), (2, 3, 6, 6)),
        ("leaky_relu", Activation("lrelu", "leaky_relu"), (2, 3, 6, 6)),
        ("maxpool 3x3 s2", MaxPool2d("pool"), (2, 3, 8, 8)),
        ("pixelnorm", PixelNorm("pn"), (2, 5, 4, 4)),
        ("upsample 2x", Upsample2x("up"), (2, 3, 4, 4)),
        ("linear", Linear("fc", 12, 5), (3, 12)),
    ]


def tiny_gradcheck_config():
    """CoResNet-tiny at one eighth of the ResNet-50 widths (bottlenecks 8/16/32/64)."""
    from dataclasses import replace

    return replace(arch.get_preset("coresnet-tiny"), base_width=8)


def gradcheck_suite(seed=0, samples=3) -> list[Check]:
    from .train import grad_check_layer, grad_check_network, random_batch

    rng = np.random.default_rng(seed)
    checks = []
    for label, layer, shape in _single_layer_cases():
        layer.init_params(rng, np.float64)
        for bn in (m for m in layer.modules() if isinstance(m, BatchNorm2d)):
            bn.params["gamma"] = rng.uniform(0.5, 1.5, bn.params["gamma"].shape)
            bn.params["beta"] = rng.standard_normal(bn.params["beta"].shape)
        err = grad_check_layer(layer, rng.standard_normal(shape), samples=5, seed=seed)
        checks.append(Check(f"grad {label}", err < LAYER_GRAD_TOL, f"max rel err {err:.3e} (< {LAYER_GRAD_TOL:g})"))

    block = Bottleneck("block", BlockSpec(8, 4, 16, 2, CoConvSpec.from_splits(4, [(1, 2), (2, 1), (3, 1)], stride=2)))
    block.init_params(rng, np.float64)
    err = grad_check_layer(block, rng.standard_normal((2, 8, 8, 8)), samples=5, seed=seed)
    checks.append(Check("grad CoConv bottleneck", err < COMPOSED_GRAD_TOL,
                        f"max rel err {err:.3e} (< {COMPOSED_GRAD_TOL:g})"))

    net = arch.build(tiny_gradcheck_config(), seed=seed, dtype=np.float64)
    batch = random_batch(2, 10, seed=seed + 1, dtype=np.float64)
    err = grad_check_network(net, batch, samples=samples, seed=seed)
    checks.append(Check("grad CoResNet-tiny end-to-end", err < COMPOSED_GRAD_TOL,
                        f"max rel err {err:.3e} (< {COMPOSED_GRAD_TOL:g})"))
    return checks


SUITES = {"parity": parity_suite, "oracle": oracle_suite, "gradcheck": gradcheck_suite}


def run_suite(scope: str, seed=0) -> list[Check]:
    names = list(SUITES) if scope == "all" else [scope]
    out = []
    for name in names:
        fn = SUITES[name]
        res = fn() if name == "parity" else fn(seed=seed)
        out.extend(res)
        out.append(Check(f"{name} suite", all(c.ok for c in res),
                         f"{sum(c.ok for c in res)}/{len(res)} checks passed"))
    return out


__all__ = ["Check", "parity_suite", "oracle_suite", "gradcheck_suite", "run_suite", "coconv_reference",
           "random_conv_instance", "random_coconv_instance"]
