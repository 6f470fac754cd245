"""Acceptance criteria, each at its stated tolerance and runtime budget.

A PASS/FAIL line per criterion is printed in the pytest terminal summary.
The CIFAR-10 part of the learning criterion runs only when ``COCNN_CIFAR``
points at a CIFAR-10 binary training batch.
"""
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from cocnn.arch import PARITY_PAIRS, build, build_preset, get_preset, network_cost
from cocnn.coconv import CoConvSpec, Level, coconv_forward, count_coconv_cost
from cocnn.conv import ConvGeometry, conv2d_forward, conv2d_reference_oracle
from cocnn.tensor import OutputShape
from cocnn.train import (Schedule, evaluate, load_cifar10_batch, random_batch, recalibrate_bn, synthetic_blobs,
                         train)
from cocnn.verify import COMPOSED_GRAD_TOL, LAYER_GRAD_TOL, gradcheck_suite

PARITY = "budget parity (exact)"
COSTS = "cost regression vs published totals"
ORACLE = "oracle equivalence"
GRADS = "gradient suite"
DEGEN = "degeneracy equivalence"
LEARN = "desk-scale learning"
DILATION = "dilation cost-invariance"


def within(value, target, tol):
    return abs(value - target) <= tol * target


# ------------------------------------------------------------------- parity

@pytest.mark.criterion(PARITY)
def test_budget_parity(record_property):
    t0 = time.perf_counter()
    mismatches = []
    for co, std in PARITY_PAIRS:
        a = network_cost(build_preset(co, init=False))
        b = network_cost(build_preset(std, init=False))
        record_property("measured", f"{co} == {std}: params {a.params} == {b.params}, flops {a.flops} == {b.flops}")
        if (a.params, a.flops) != (b.params, b.flops):
            mismatches.append(co)
    elapsed = time.perf_counter() - t0
    record_property("measured", f"runtime {elapsed:.2f}s (< 1s)")
    assert {"coresnet50", "coresnet101", "coresnet152", "coresnet50-top", "coresnet50-os8",
            "coprogan-gen128"} <= {co for co, _ in PARITY_PAIRS}
    assert not mismatches
    assert elapsed < 1.0


# --------------------------------------------------------------------- costs

COST_TARGETS = [
    # preset, params target, params tol, flops target, flops tol
    ("coresnet50", 25.56e6, 0.005, 4.14e9, 0.05),
    ("coresnet101", 44.55e6, 0.005, 7.88e9, 0.05),
    ("coresnet152", 60.19e6, 0.005, 11.62e9, 0.05),
    ("coresnet50-os8", 25.56e6, 0.005, 19.20e9, 0.05),
    ("coprogan-gen128", 27.21e6, 0.02, 54.76e9, 0.05),
]


@pytest.mark.criterion(COSTS)
def test_cost_regression(record_property):
    t0 = time.perf_counter()
    failures = []
    for preset, p_ref, p_tol, f_ref, f_tol in COST_TARGETS:
        r = network_cost(build_preset(preset, init=False))
        ok = within(r.params, p_ref, p_tol) and within(r.flops, f_ref, f_tol)
        record_property("measured", f"{preset}: params {r.params / 1e6:.3f}M vs {p_ref / 1e6:.2f}M "
                                    f"(+-{p_tol:.1%}), flops {r.flops / 1e9:.3f}G vs {f_ref / 1e9:.2f}G (+-{f_tol:.0%})")
        if not ok:
            failures.append(preset)
    base = network_cost(build_preset("coresnet50", init=False)).params
    os8 = network_cost(build_preset("coresnet50-os8", init=False)).params
    elapsed = time.perf_counter() - t0
    record_property("measured", f"runtime {elapsed:.2f}s (< 5s)")
    assert not failures
    assert os8 == base
    assert elapsed < 5.0


# -------------------------------------------------------------------- oracle

def _random_instance(rng):
    """One conv or CoConv inside K in {1,3,7}, d in 1..4, s in {1,2}, shapes <= (2,8,9,9)."""
    while True:
        k = int(rng.choice([1, 3, 7]))
        s = int(rng.integers(1, 3))
        n, c, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 10)), int(rng.integers(1, 10))
        if rng.random() < 0.5:
            d = int(rng.integers(1, 5))
            g = ConvGeometry(c, int(rng.integers(1, 9)), k, k, s, d * (k - 1) // 2, d, bool(rng.integers(0, 2)))
            if min(h, w) + 2 * g.padding >= d * (k - 1) + 1:
                return "conv", g, (n, c, h, w)
        else:
            dils = sorted(rng.choice(np.arange(1, 5), size=int(rng.integers(1, 5)), replace=False).tolist())
            sizes = rng.integers(1, 3, len(dils)).tolist()
            spec = CoConvSpec(c, tuple(Level(d, m) for d, m in zip(dils, sizes)), k, k, s,
                              has_bias=bool(rng.integers(0, 2)))
            if spec.m_out <= 8 and min(h, w) + 2 * spec.paddings[-1] >= dils[-1] * (k - 1) + 1:
                return "coconv", spec, (n, c, h, w)


@pytest.mark.criterion(ORACLE)
def test_oracle_equivalence(record_property):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, kinds = 0.0, {"conv": 0, "coconv": 0}
    for _ in range(100):
        kind, geom, shape = _random_instance(rng)
        assert shape[0] <= 2 and shape[1] <= 8 and shape[2] <= 9 and shape[3] <= 9
        kinds[kind] += 1
        x = rng.standard_normal(shape)
        if kind == "conv":
            w = rng.standard_normal(geom.weight_shape)
            b = rng.standard_normal(geom.m_out) if geom.has_bias else None
            got, ref = conv2d_forward(x, w, b, geom), conv2d_reference_oracle(x, w, b, geom)
        else:
            ws = [rng.standard_normal((m, geom.m_in, geom.k_h, geom.k_w)) for m in geom.splits]
            b = rng.standard_normal(geom.m_out) if geom.has_bias else None
            got = coconv_forward(x, ws, geom, b)
            ref = np.concatenate([conv2d_reference_oracle(x, w, None, geom.level_geometry(i))
                                  for i, w in enumerate(ws)], axis=1)
            if b is not None:
                ref = ref + b.reshape(1, -1, 1, 1)
        worst = max(worst, float(np.abs(got - ref).max()))
    elapsed = time.perf_counter() - t0
    record_property("measured", f"{kinds['conv']} conv + {kinds['coconv']} CoConv instances, max abs err "
                                f"{worst:.2e} (< 1e-10), runtime {elapsed:.2f}s (< 30s)")
    assert worst < 1e-10
    assert elapsed < 30.0


# ----------------------------------------------------------------- gradients

@pytest.mark.criterion(GRADS)
def test_gradient_suite(record_property):
    t0 = time.perf_counter()
    checks = gradcheck_suite(seed=0)
    elapsed = time.perf_counter() - t0
    for c in checks:
        record_property("measured", f"{c.name}: {c.detail}")
    record_property("measured", f"runtime {elapsed:.1f}s (< 120s)")
    names = [c.name for c in checks]
    assert "grad CoConv bottleneck" in names and "grad CoResNet-tiny end-to-end" in names
    assert LAYER_GRAD_TOL == 1e-5 and COMPOSED_GRAD_TOL == 1e-4
    assert all(c.ok for c in checks), [c for c in checks if not c.ok]
    assert elapsed < 120.0


# ---------------------------------------------------------------- degeneracy

def _copy_positionally(src, dst):
    for (_, sl, sk), (_, dl, dk) in zip(src.named_parameters(), dst.named_parameters()):
        assert sl.param_shapes[sk] == dl.param_shapes[dk]
        dl.params[dk] = sl.params[sk].copy()


@pytest.mark.criterion(DEGEN)
def test_degeneracy_equivalence(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    pairs = [(build_preset("coresnet50-1111", seed=1, resolution=64), build_preset("resnet50", seed=2, resolution=64),
              (1, 3, 64, 64)),
             (build(replace(get_preset("coresnet-tiny"), stage_levels=(1, 1, 1, 1)), seed=1),
              build_preset("resnet-tiny", seed=2), (2, 3, 32, 32))]
    for co, std, shape in pairs:
        _copy_positionally(co, std)
        x = rng.standard_normal(shape).astype(np.float32)
        for mode in (False, True):
            same = co.forward(x, mode).tobytes() == std.forward(x, mode).tobytes()
            record_property("measured", f"{co.config.depth if co.config.blocks is None else 'tiny'} "
                                        f"(1,1,1,1) vs ResNet, train={mode}: bit-identical={same}")
            assert same
    spec = CoConvSpec(64, tuple(Level(1, 16) for _ in range(4)), strict_ladder=False)
    x = rng.standard_normal((2, 64, 28, 28)).astype(np.float32)
    ws = [rng.standard_normal((16, 64, 3, 3)).astype(np.float32) for _ in range(4)]
    same = coconv_forward(x, ws, spec).tobytes() == conv2d_forward(
        x, np.concatenate(ws), None, ConvGeometry.same(64, 64)).tobytes()
    elapsed = time.perf_counter() - t0
    record_property("measured", f"all-d=1 CoConv vs stacked conv: bit-identical={same}; runtime {elapsed:.2f}s (< 10s)")
    assert same
    assert elapsed < 10.0


# ------------------------------------------------------------------ learning

def tiny_net(seed=0, **kw):
    return build(replace(get_preset("coresnet-tiny"), **kw), seed=seed)


@pytest.mark.criterion(LEARN)
def test_overfit_eight_samples(record_property):
    net = tiny_net(0)
    batch = random_batch(8, 10, seed=0)
    state, hist = train(net, batch, 500, Schedule(0.01, ()), seed=0, batch_size=8, max_steps=500, target_loss=0.01)
    loss, acc = evaluate(net, batch, train_mode=True)
    record_property("measured", f"loss {loss:.4f} (< 0.01) after {state.step} steps (<= 500), accuracy {acc:.2f}")
    assert state.step <= 500 and loss < 0.01


@pytest.mark.criterion(LEARN)
def test_blobs_one_epoch(record_property):
    net = tiny_net(0, num_classes=2)
    ds = synthetic_blobs(200, 2, seed=0)
    train(net, ds, 1, Schedule(0.1), seed=0, batch_size=16)
    recalibrate_bn(net, ds)
    _, acc = evaluate(net, ds)
    record_property("measured", f"accuracy after 1 epoch {acc:.3f} (> 0.9)")
    assert acc > 0.9


@pytest.mark.criterion(LEARN)
def test_training_deterministic(record_property):
    ds = random_batch(32, 10, seed=3)
    runs = []
    for _ in range(2):
        net = tiny_net(5)
        _, hist = train(net, ds, 2, seed=9, batch_size=8, augment=True)
        runs.append((hist, net.state_dict()))
    same = runs[0][0] == runs[1][0] and all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])
    record_property("measured", f"two seeded single-thread runs identical: {same}")
    assert same


@pytest.mark.criterion(LEARN)
@pytest.mark.skipif(not os.environ.get("COCNN_CIFAR"), reason="COCNN_CIFAR not set")
def test_cifar_subset(record_property):
    t0 = time.perf_counter()
    ds = load_cifar10_batch(os.environ["COCNN_CIFAR"], limit=5000)
    net = tiny_net(0)
    _, hist = train(net, ds, 5, Schedule(0.1), seed=0, batch_size=64, augment=False)
    acc = hist[-1]["train_acc"]
    elapsed = time.perf_counter() - t0
    record_property("measured", f"train accuracy after 5 epochs {acc:.3f} (> 0.40), runtime {elapsed:.0f}s (< 600s)")
    assert acc > 0.40
    assert elapsed < 600


# ------------------------------------------------------------------ dilation

@pytest.mark.criterion(DILATION)
def test_dilation_cost_invariance(record_property):
    rng = np.random.default_rng(50)
    t0 = time.perf_counter()
    changed = 0
    for _ in range(50):
        n = int(rng.integers(1, 5))
        k = int(rng.choice([1, 3, 5, 7]))
        sizes = rng.integers(1, 65, n).tolist()
        m_in, stride = int(rng.integers(1, 257)), int(rng.integers(1, 3))
        bias = bool(rng.integers(0, 2))
        out = OutputShape(int(rng.integers(1, 57)), int(rng.integers(1, 57)))

        def ladder():
            return sorted(rng.choice(np.arange(1, 17), size=n, replace=False).tolist())

        a = CoConvSpec(m_in, tuple(Level(d, m) for d, m in zip(ladder(), sizes)), k, k, stride, has_bias=bias)
        b = CoConvSpec(m_in, tuple(Level(d, m) for d, m in zip(ladder(), sizes)), k, k, stride, has_bias=bias)
        ca, cb = count_coconv_cost(a, out), count_coconv_cost(b, out)
        if [(e.params, e.flops) for e in ca.breakdown] != [(e.params, e.flops) for e in cb.breakdown] or \
                (ca.params, ca.flops, ca.unit) != (cb.params, cb.flops, cb.unit):
            changed += 1
    elapsed = time.perf_counter() - t0
    record_property("measured", f"{changed}/50 ladder mutations changed the cost; runtime {elapsed:.3f}s (< 1s)")
    assert changed == 0
    assert elapsed < 1.0
