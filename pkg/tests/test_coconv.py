import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cocnn.coconv import (CoConvSpec, Level, ParityError, SpecError, check_budget_parity, coconv_backward,
                          coconv_forward, count_coconv_cost, count_conv_cost)
from cocnn.conv import ConvGeometry, conv2d_backward, conv2d_forward, conv2d_reference_oracle
from cocnn.tensor import OutputShape

from oracles import numeric_grad, rel_err, window_conv


def stage1_spec():
    return CoConvSpec.from_splits(64, [(1, 16), (2, 16), (3, 16), (4, 16)])


def test_spec_defaults_and_properties():
    s = stage1_spec()
    assert s.n_levels == 4 and s.m_out == 64 and s.splits == [16] * 4
    assert s.paddings == (1, 2, 3, 4)
    assert s.output_shape((56, 56)) == (56, 56)
    assert s.level_geometry(2) == ConvGeometry(64, 16, 3, 3, 1, 3, 3)


@pytest.mark.parametrize("levels", [((2, 4), (1, 4)), ((1, 4), (1, 4)), ((0, 4),), ((1, 0),), ()])
def test_bad_ladders(levels):
    with pytest.raises(SpecError):
        CoConvSpec(8, levels)


def test_declared_total_must_match():
    with pytest.raises(SpecError):
        CoConvSpec(64, ((1, 16), (2, 16), (3, 16), (4, 15)), m_out_declared=64)
    assert CoConvSpec(64, ((1, 16), (2, 16), (3, 16), (4, 16)), m_out_declared=64).m_out == 64


def test_padding_rules():
    with pytest.raises(SpecError):
        CoConvSpec(4, ((1, 2), (2, 2)), paddings=(1, 1))
    with pytest.raises(SpecError):
        CoConvSpec(4, ((1, 2),), k_h=2, k_w=2)
    with pytest.raises(SpecError):
        CoConvSpec(4, ((1, 2), (2, 2)), paddings=(1,))
    # uniform slack is fine: "valid" convs at every level
    s = CoConvSpec(4, ((1, 2), (2, 2)), paddings=(0, 1))
    assert s.output_shape((9, 9)) == (7, 7)


def test_single_level_is_plain_conv(rng):
    s = CoConvSpec.from_splits(3, [(1, 5)], stride=2)
    g = ConvGeometry.same(3, 5, 3, 2)
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal(g.weight_shape)
    assert np.array_equal(coconv_forward(x, [w], s), conv2d_forward(x, w, None, g))
    gy = rng.standard_normal((2, 5, 4, 4))
    gx, gws, gb = coconv_backward(x, [w], s, gy)
    rx, rw, _ = conv2d_backward(x, w, g, gy)
    assert np.array_equal(gx, rx) and np.array_equal(gws[0], rw) and gb is None


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_all_unit_dilations_equal_stacked_conv_bitwise(rng, dtype):
    s = CoConvSpec(64, tuple(Level(1, 16) for _ in range(4)), strict_ladder=False)
    x = rng.standard_normal((1, 64, 14, 14)).astype(dtype)
    ws = [rng.standard_normal((16, 64, 3, 3)).astype(dtype) for _ in range(4)]
    got = coconv_forward(x, ws, s)
    ref = conv2d_forward(x, np.concatenate(ws), None, ConvGeometry.same(64, 64))
    assert got.tobytes() == ref.tobytes()


def test_repeated_dilation_needs_opt_in():
    with pytest.raises(SpecError):
        CoConvSpec(4, ((1, 2), (1, 2)))
    with pytest.raises(SpecError):
        CoConvSpec(4, ((2, 2), (1, 2)), strict_ladder=False)


def test_stage1_levels_match_independent_dilated_convs(rng):
    s = stage1_spec()
    x = rng.standard_normal((1, 64, 56, 56))
    ws = [rng.standard_normal((16, 64, 3, 3)) for _ in range(4)]
    y = coconv_forward(x, ws, s)
    for i, d in enumerate((1, 2, 3, 4)):
        block = y[:, 16 * i:16 * (i + 1)]
        assert np.abs(block - conv2d_reference_oracle(x, ws[i], None, ConvGeometry(64, 16, 3, 3, 1, d, d))).max() < 1e-10


def test_bias_is_per_output_channel(rng):
    s = CoConvSpec.from_splits(2, [(1, 2), (2, 1)], has_bias=True)
    x = rng.standard_normal((1, 2, 5, 5))
    ws = [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((1, 2, 3, 3))]
    b = np.array([1.0, 2.0, 3.0])
    assert np.allclose(coconv_forward(x, ws, s, b) - coconv_forward(x, ws, s), b.reshape(1, 3, 1, 1))


def test_forward_errors(rng):
    s = CoConvSpec.from_splits(2, [(1, 2), (2, 1)])
    x = rng.standard_normal((1, 2, 5, 5))
    with pytest.raises(SpecError):
        coconv_forward(x, [np.zeros((2, 2, 3, 3))], s)
    with pytest.raises(ValueError):
        coconv_forward(rng.standard_normal((1, 3, 5, 5)), [np.zeros((2, 2, 3, 3)), np.zeros((1, 2, 3, 3))], s)


spec_strategy = st.builds(
    lambda dils, sizes, m_in, stride, bias: CoConvSpec.from_splits(
        m_in, list(zip(sorted(dils), sizes[:len(dils)])), 3, stride, bias),
    st.sets(st.integers(1, 4), min_size=1, max_size=4), st.lists(st.integers(1, 4), min_size=4, max_size=4),
    st.integers(1, 4), st.integers(1, 2), st.booleans(),
)


@settings(max_examples=40)
@given(spec=spec_strategy, seed=st.integers(0, 999))
def test_forward_matches_concatenated_window_oracle(spec, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, spec.m_in, 9, 8))
    ws = [r.standard_normal((m, spec.m_in, 3, 3)) for m in spec.splits]
    b = r.standard_normal(spec.m_out) if spec.has_bias else None
    ref = np.concatenate([window_conv(x, w, None, spec.stride, d, d) for w, (d, _) in zip(ws, spec.levels)], axis=1)
    if b is not None:
        ref = ref + b.reshape(1, -1, 1, 1)
    assert np.abs(coconv_forward(x, ws, spec, b) - ref).max() < 1e-10


def test_backward_zero_grad(rng):
    s = CoConvSpec.from_splits(2, [(1, 2), (3, 1)], has_bias=True)
    gx, gws, gb = coconv_backward(rng.standard_normal((1, 2, 7, 7)), [np.ones((2, 2, 3, 3)), np.ones((1, 2, 3, 3))],
                                  s, np.zeros((1, 3, 7, 7)))
    assert not gx.any() and not any(g.any() for g in gws) and not gb.any()


def test_backward_three_level_fd(rng):
    s = CoConvSpec.from_splits(8, [(1, 3), (2, 3), (3, 2)], has_bias=True)
    x = rng.standard_normal((1, 8, 9, 9))
    ws = [rng.standard_normal((m, 8, 3, 3)) for m in s.splits]
    b = rng.standard_normal(s.m_out)
    proj = rng.standard_normal((1, 8, 9, 9))
    loss = lambda: float(np.sum(proj * coconv_forward(x, ws, s, b)))
    gx, gws, gb = coconv_backward(x, ws, s, proj)
    errs = [rel_err(gx, numeric_grad(loss, x)), rel_err(gb, numeric_grad(loss, b))]
    errs += [rel_err(g, numeric_grad(loss, w)) for g, w in zip(gws, ws)]
    assert max(errs) < 1e-5


# ------------------------------------------------------------------ costs

def test_conv_cost_examples():
    g = ConvGeometry(64, 64, 3, 3)
    assert count_conv_cost(g, OutputShape(1, 1)).params == 36_864
    assert count_conv_cost(g, OutputShape(56, 56)).flops == 115_605_504
    c = count_conv_cost(ConvGeometry(64, 256, 1, 1), OutputShape(56, 56))
    assert (c.params, c.flops) == (16_384, 51_380_224)


def test_coconv_cost_examples():
    assert count_coconv_cost(stage1_spec(), OutputShape(56, 56)).params == 36_864
    s2 = CoConvSpec.from_splits(128, [(1, 64), (2, 32), (3, 32)])
    c = count_coconv_cost(s2, OutputShape(28, 28))
    assert (c.params, c.flops) == (147_456, 115_605_504)
    gan16 = CoConvSpec.from_splits(512, [(1, 172), (2, 170), (3, 170)])
    assert count_coconv_cost(gan16, OutputShape(16, 16)).params == 512 * 9 * 512 == 2_359_296


def test_cost_breakdown_labels_and_bias():
    s = CoConvSpec.from_splits(4, [(1, 2), (2, 2)], has_bias=True)
    c = count_coconv_cost(s, OutputShape(3, 3), "x")
    assert [e.label for e in c.breakdown] == ["x.level0(d=1)", "x.level1(d=2)", "x.bias"]
    assert c.params == 4 * 9 * 4 + 4
    assert c.unit == "MAC"
    total = c + count_conv_cost(ConvGeometry(1, 1, 1, 1), OutputShape(1, 1))
    assert total.params == c.params + 1 and len(total.relabel("n.").breakdown) == 4
    assert all(e.label.startswith("n.") for e in total.relabel("n.").breakdown)


def test_parity_examples():
    assert check_budget_parity(stage1_spec(), ConvGeometry(64, 64), OutputShape(56, 56))
    with pytest.raises(ParityError):
        check_budget_parity(CoConvSpec.from_splits(64, [(1, 16), (2, 16), (3, 16), (4, 15)]),
                            ConvGeometry(64, 64), OutputShape(56, 56))
    assert check_budget_parity(CoConvSpec.from_splits(7, [(1, 5)], kernel=5), ConvGeometry(7, 5, 5, 5),
                               OutputShape(9, 9))
    with pytest.raises(ParityError):
        check_budget_parity(stage1_spec(), ConvGeometry(64, 64, 5, 5), OutputShape(56, 56))
    with pytest.raises(ParityError):
        check_budget_parity(stage1_spec(), ConvGeometry(64, 64, has_bias=True), OutputShape(56, 56))


@given(spec=spec_strategy, h=st.integers(1, 64), w=st.integers(1, 64))
def test_parity_holds_for_any_ladder(spec, h, w):
    ref = ConvGeometry(spec.m_in, spec.m_out, 3, 3, spec.stride, 1, 1, spec.has_bias)
    assert check_budget_parity(spec, ref, OutputShape(h, w))
    a, b = count_coconv_cost(spec, OutputShape(h, w)), count_conv_cost(ref, OutputShape(h, w))
    assert (a.params, a.flops) == (b.params, b.flops)
