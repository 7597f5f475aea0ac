import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from morphopc import ops
from morphopc.gradcheck import gradcheck
from morphopc.morphology import (
    GateVector,
    MorphBasicBlock,
    MultiScaleMorphBlock,
    StructuringSurface,
    default_se_schedule,
    dilate,
    erode,
    gated_fuse,
    morph_basic,
    morph_delta_maps,
    multiscale_morph,
    reflect,
)
from morphopc.tensor import ShapeError, Tensor

from conftest import as64, tie_free


def dilate_oracle(x, w, b):
    B, C, H, W = x.shape
    k = w.shape[1]
    r = k // 2
    out = np.empty_like(x)
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    best = -np.inf
                    for u in range(k):
                        for v in range(k):
                            si, sj = i - (u - r), j - (v - r)
                            if 0 <= si < H and 0 <= sj < W:
                                best = max(best, x[n, c, si, sj] + w[c, u, v])
                    out[n, c, i, j] = best + b[c]
    return out


def erode_oracle(x, w, b):
    B, C, H, W = x.shape
    k = w.shape[1]
    r = k // 2
    out = np.empty_like(x)
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    best = np.inf
                    for u in range(k):
                        for v in range(k):
                            si, sj = i + (u - r), j + (v - r)
                            if 0 <= si < H and 0 <= sj < W:
                                best = min(best, x[n, c, si, sj] - w[c, u, v])
                    out[n, c, i, j] = best + b[c]
    return out


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _case(seed):
    r = np.random.default_rng(seed)
    C = int(r.integers(1, 9))
    k = int(r.choice([1, 3, 5]))
    H, W = int(r.integers(1, 17)), int(r.integers(1, 17))
    x = r.normal(size=(1, C, H, W))
    w = r.normal(size=(C, k, k))
    b = r.normal(size=C)
    return x, w, b


def test_dilate_impulse_flat_se():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1
    out = dilate(T(x), T(np.zeros((1, 3, 3))), T(np.zeros(1))).data[0, 0]
    expect = np.zeros((7, 7))
    expect[2:5, 2:5] = 1
    np.testing.assert_array_equal(out, expect)


def test_constant_image_shifted_by_bias():
    x = np.full((1, 2, 5, 5), 1.25)
    out = dilate(T(x), T(np.zeros((2, 3, 3))), T([0.5, -1.0])).data
    np.testing.assert_array_equal(out[0, 0], 1.75)
    np.testing.assert_array_equal(out[0, 1], 0.25)
    np.testing.assert_array_equal(erode(T(x), T(np.zeros((2, 3, 3))), T(np.zeros(2))).data, x)


def test_erode_removes_impulse():
    x = np.zeros((1, 1, 7, 7))
    x[0, 0, 3, 3] = 1
    np.testing.assert_array_equal(erode(T(x), T(np.zeros((1, 3, 3))), T(np.zeros(1))).data, 0)


def test_dilate_matches_oracle_1x2x8x8(rng):
    x, w, b = rng.normal(size=(1, 2, 8, 8)), rng.normal(size=(2, 3, 3)), rng.normal(size=2)
    np.testing.assert_array_equal(dilate(T(x), T(w), T(b)).data, dilate_oracle(x, w, b))
    np.testing.assert_array_equal(erode(T(x), T(w), T(b)).data, erode_oracle(x, w, b))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_morph_oracle_property(seed):
    x, w, b = _case(seed)
    np.testing.assert_allclose(dilate(T(x), T(w), T(b)).data, dilate_oracle(x, w, b), rtol=1e-6)
    np.testing.assert_allclose(erode(T(x), T(w), T(b)).data, erode_oracle(x, w, b), rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_duality(seed):
    x, w, _ = _case(seed)
    z = np.zeros(x.shape[1])
    lhs = erode(T(x), T(w), T(z)).data
    rhs = -dilate(T(-x), T(reflect(w)), T(z)).data
    np.testing.assert_array_equal(lhs, rhs)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_flat_extensivity(seed):
    x, w, _ = _case(seed)
    w0, z = np.zeros_like(w), np.zeros(x.shape[1])
    assert np.all(dilate(T(x), T(w0), T(z)).data >= x)
    assert np.all(erode(T(x), T(w0), T(z)).data <= x)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), flat=st.booleans())
def test_monotonicity(seed, flat):
    x, w, b = _case(seed)
    if flat:
        w = np.zeros_like(w)
    x2 = x + np.abs(np.random.default_rng(seed).normal(size=x.shape))
    assert np.all(dilate(T(x), T(w), T(b)).data <= dilate(T(x2), T(w), T(b)).data)
    assert np.all(erode(T(x), T(w), T(b)).data <= erode(T(x2), T(w), T(b)).data)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gate_convexity(seed):
    x, w, b = _case(seed)
    C, k = w.shape[0], w.shape[1]
    se = StructuringSurface(C, k, dtype=np.float64)
    se.weight.data[...] = w
    se.bias.data[...] = b
    gate = GateVector(C, dtype=np.float64)
    gate.g.data[...] = np.random.default_rng(seed).normal(scale=3, size=C)
    y = gated_fuse(T(x), se, gate).data
    d, e = se.dilate(T(x)).data, se.erode(T(x)).data
    tol = 1e-12 * (1 + np.abs(d) + np.abs(e))
    assert np.all(y >= np.minimum(d, e) - tol)
    assert np.all(y <= np.maximum(d, e) + tol)


def test_channel_mismatch_errors():
    with pytest.raises(ShapeError, match="channel"):
        dilate(T(np.ones((1, 2, 4, 4))), T(np.zeros((3, 3, 3))), T(np.zeros(3)))
    with pytest.raises(ShapeError):
        erode(T(np.ones((1, 2, 4, 4))), T(np.zeros((2, 2, 2))), T(np.zeros(2)))
    with pytest.raises(ValueError):
        StructuringSurface(2, 4)


def test_tie_break_routes_to_first_window_position():
    x = T(np.zeros((1, 1, 3, 3)))
    x.requires_grad = True
    w = Tensor(np.zeros((1, 3, 3)), requires_grad=True)
    b = Tensor(np.zeros(1), requires_grad=True)
    out = dilate(x, w, b)
    g = np.zeros((1, 1, 3, 3))
    g[0, 0, 1, 1] = 1.0
    ops.sum(ops.mul(out, Tensor(g))).backward()
    # centre pixel: all nine offsets tie, first q = (-1, -1) reads x(p + (1, 1))
    assert w.grad[0, 0, 0] == 1.0 and w.grad.sum() == 1.0
    assert x.grad[0, 0, 2, 2] == 1.0 and x.grad.sum() == 1.0
    assert b.grad[0] == 1.0


@pytest.mark.parametrize("op", [dilate, erode])
@pytest.mark.parametrize("k", [1, 3, 5])
def test_morph_gradcheck(rng, op, k):
    x = Tensor(tie_free(rng, (2, 2, 6, 6)), requires_grad=True)
    w = Tensor(tie_free(rng, (2, k, k), spread=0.5), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    wt = Tensor(rng.normal(size=(2, 2, 6, 6)))
    rep = gradcheck(lambda: ops.sum(ops.mul(op(x, w, b), wt)), [x, w, b], names=["x", "w", "b"], step=1e-4)
    assert rep.passed, str(rep)


def _surface(C, k, w=None, b=None, g=None):
    se = StructuringSurface(C, k, dtype=np.float64)
    if w is not None:
        se.weight.data[...] = w
    if b is not None:
        se.bias.data[...] = b
    gate = GateVector(C, dtype=np.float64)
    if g is not None:
        gate.g.data[...] = g
    return se, gate


def test_gate_zero_gives_even_mixture(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    se, gate = _surface(3, 3, rng.normal(size=(3, 3, 3)), rng.normal(size=3))
    assert not gate.g.data.any()
    y = gated_fuse(T(x), se, gate).data
    expect = 0.5 * se.dilate(T(x)).data + 0.5 * se.erode(T(x)).data
    assert np.max(np.abs(y - expect)) <= 1e-12


def test_saturated_gate_is_dilation(rng):
    x = rng.normal(size=(1, 2, 6, 6))
    se, gate = _surface(2, 3, rng.normal(size=(2, 3, 3)), g=30.0)
    np.testing.assert_allclose(gated_fuse(T(x), se, gate).data, se.dilate(T(x)).data, atol=1e-9)


def test_separate_surfaces_switch(rng):
    blk = as64(MorphBasicBlock(2, 3, separate_se=True))
    assert blk.surface_erode is not None
    blk.surface_erode.weight.data[...] = rng.normal(size=(2, 3, 3))
    x = T(rng.normal(size=(1, 2, 5, 5)))
    expect = 0.5 * blk.surface.dilate(x).data + 0.5 * blk.surface_erode.erode(x).data
    np.testing.assert_allclose(blk.fuse(x).data, expect, atol=1e-12)
    assert len(MorphBasicBlock(2, 3).parameters()) + 2 == len(blk.parameters())


def test_morph_basic_shape():
    blk = MorphBasicBlock(16, 3)
    assert morph_basic(Tensor(np.random.default_rng(0).normal(size=(2, 16, 32, 32)).astype(np.float32)), blk, "train").shape == (2, 16, 32, 32)


def test_morph_basic_composition(rng):
    C = 3
    blk = as64(MorphBasicBlock(C, 3, act="identity"))
    blk.proj.weight.data[...] = np.eye(C).reshape(C, C, 1, 1)
    blk.proj.bias.data[...] = 0
    blk.gate.g.data[...] = 40.0
    blk.eval()
    blk.norm._buffers["running_mean"][...] = 0
    blk.norm._buffers["running_var"][...] = 1 - blk.norm.eps
    x = T(rng.normal(size=(1, C, 8, 8)))
    out = morph_basic(x, blk).data
    expect = dilate_oracle(x.data, blk.surface.weight.data, blk.surface.bias.data) + x.data
    np.testing.assert_allclose(out, expect, rtol=1e-9, atol=1e-12)


def _randomize(block, rng, spread=0.5):
    for name, p in block.named_parameters():
        if name.endswith("surface.weight") or name.endswith("surface_erode.weight"):
            p.data[...] = tie_free(rng, p.shape, spread)
        elif name.endswith("gate.g") or name.endswith(".bias"):
            p.data[...] = rng.normal(scale=0.5, size=p.shape)


def test_morph_basic_gradcheck(rng):
    blk = as64(MorphBasicBlock(2, 3, act="sigmoid"))
    _randomize(blk, rng)
    x = Tensor(tie_free(rng, (2, 2, 6, 6)), requires_grad=True)
    wt = Tensor(rng.normal(size=(2, 2, 6, 6)))
    params = [x] + blk.parameters()
    rep = gradcheck(lambda: ops.sum(ops.mul(blk(x), wt)), params, tolerance=1e-4, step=1e-4)
    assert rep.passed, str(rep)


def test_default_se_schedule():
    assert default_se_schedule(8) == [3, 3, 3, 5, 5, 5, 5]
    assert default_se_schedule(4) == [3, 5, 5]
    assert default_se_schedule(2) == [5]
    with pytest.raises(ValueError):
        default_se_schedule(1)


def test_multiscale_s8_c64_layout():
    blk = MultiScaleMorphBlock(64, 8)
    assert [m.channels for m in blk.morphs] == [8] * 7
    sizes = [m.surface.size for m in blk.morphs]
    # split 1 carries no operator; splits 2-4 complete the first half with 3x3
    assert sizes == [3, 3, 3, 5, 5, 5, 5]


def test_multiscale_rejects_bad_config():
    with pytest.raises(ShapeError, match="not divisible"):
        MultiScaleMorphBlock(6, 4)
    with pytest.raises(ValueError):
        MultiScaleMorphBlock(8, 1)
    with pytest.raises(ValueError):
        MultiScaleMorphBlock(8, 4, se_sizes=[3, 3])


@settings(max_examples=10, deadline=None)
@given(s=st.sampled_from([2, 4]), mult=st.integers(1, 2), hw=st.integers(4, 8), b=st.integers(1, 2))
def test_multiscale_preserves_shape(s, mult, hw, b):
    blk = MultiScaleMorphBlock(s * mult, s)
    x = Tensor(np.random.default_rng(hw).normal(size=(b, s * mult, hw, hw)).astype(np.float32))
    assert multiscale_morph(x, blk, "train").shape == x.shape


def test_multiscale_zeroed_operators_leave_residual(rng):
    blk = as64(MultiScaleMorphBlock(8, 4))
    for name, p in blk.named_parameters():
        if "norm" not in name:
            p.data[...] = 0
    x = T(rng.normal(size=(2, 8, 5, 5)))
    out = multiscale_morph(x, blk, "train").data
    np.testing.assert_allclose(out, np.maximum(x.data, 0), atol=1e-12)


def test_multiscale_s2_matches_hand_composition(rng):
    blk = as64(MultiScaleMorphBlock(4, 2))
    _randomize(blk, rng)
    blk.train()
    x = T(rng.normal(size=(2, 4, 6, 6)))
    x1, x2 = x.data[:, :2], x.data[:, 2:]
    y2 = blk.morphs[0](blk.convs[0](T(x2)))
    z = blk.norm(blk.proj(ops.concat_channels([T(x1), y2])))
    expect = np.maximum(z.data + x.data, 0)
    np.testing.assert_array_equal(blk(x).data, expect)


def test_multiscale_hierarchy_feeds_previous_branch(rng):
    blk = as64(MultiScaleMorphBlock(8, 4))
    _randomize(blk, rng)
    x = T(rng.normal(size=(1, 8, 6, 6)))
    inputs, ys = blk.branches(x)
    assert len(ys) == 4 and len(inputs) == 3
    np.testing.assert_array_equal(ys[0].data, x.data[:, :2])
    np.testing.assert_array_equal(inputs[1].data, blk.convs[1](ops.add(T(x.data[:, 4:6]), ys[1])).data)


@pytest.mark.parametrize("outer", ["relu", "sigmoid"])
def test_multiscale_gradcheck(rng, outer):
    blk = as64(MultiScaleMorphBlock(4, 2, act="sigmoid", outer_activation=outer))
    _randomize(blk, rng)
    x = Tensor(tie_free(rng, (2, 4, 5, 5)), requires_grad=True)
    wt = Tensor(rng.normal(size=(2, 4, 5, 5)))
    rep = gradcheck(lambda: ops.sum(ops.mul(blk(x), wt)), [x] + blk.parameters(), tolerance=1e-4, step=1e-4)
    assert rep.passed, str(rep)


def test_delta_map_dilation_gate_nonnegative():
    blk = as64(MorphBasicBlock(1, 3))
    blk.gate.g.data[...] = 40.0
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1.0
    d = morph_delta_maps(x, blk)
    assert np.all(d >= 0) and d.max() == 1.0


def test_delta_map_erosion_gate_nonpositive(rng):
    blk = as64(MorphBasicBlock(2, 3))
    blk.gate.g.data[...] = -40.0
    assert np.all(morph_delta_maps(rng.normal(size=(1, 2, 8, 8)), blk) <= 1e-12)


def test_delta_map_zero_gate_matches_oracle(rng):
    blk = as64(MorphBasicBlock(2, 3))
    x = rng.normal(size=(1, 2, 7, 7))
    x = 0.5 * (x + x[..., ::-1, ::-1])
    w, z = blk.surface.weight.data, np.zeros(2)
    expect = 0.5 * (dilate_oracle(x, w, z) + erode_oracle(x, w, z)) - x
    np.testing.assert_allclose(morph_delta_maps(x, blk), expect, atol=1e-12)
