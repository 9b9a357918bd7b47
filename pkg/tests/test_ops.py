"""Distributed operators vs the single-device oracle."""

import numpy as np
import pytest

from voxmesh import oracle
from voxmesh.errors import GraphBuildError, VoxmeshError, WorkerFailed
from voxmesh.mesh import create_mesh
from voxmesh.ops import (
    ConvParams,
    concat_channels,
    conv3d_backward,
    conv3d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu,
    softmax_channels,
    upsample2_backward,
    upsample2_forward,
)
from voxmesh.sharding import Layout, TensorSpec, gather, shard

MESH_AXES = [("mx", 2), ("my", 2), ("mz", 2)]
LAYOUT = {"x": "mx", "y": "my", "z": "mz"}


@pytest.fixture(scope="module")
def mesh222():
    with create_mesh(MESH_AXES) as m:
        yield m


def spec_xyz(b, e, c, dtype="f32"):
    return TensorSpec((("batch", b), ("x", e), ("y", e), ("z", e), ("c", c)), dtype)


def rand_st(mesh, layout, spec, seed):
    x = np.random.default_rng(seed).standard_normal(spec.shape).astype(spec.dtype)
    return x, shard(x, spec, layout, mesh)


def identity_kernel(c, dtype=np.float32):
    k = np.zeros((3, 3, 3, c, c), dtype)
    for i in range(c):
        k[1, 1, 1, i, i] = 1.0
    return k


def test_conv_params_validation():
    with pytest.raises(VoxmeshError):
        ConvParams(np.zeros((2, 2, 2, 1, 1), np.float32), np.zeros(1, np.float32))
    with pytest.raises(VoxmeshError):
        ConvParams(np.zeros((3, 3, 3, 1, 2), np.float32), np.zeros(1, np.float32))
    bad = np.zeros((3, 3, 3, 1, 1), np.float32)
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(VoxmeshError):
        ConvParams(bad, np.zeros(1, np.float32))


def test_box_filter_along_one_axis_hand_checked():
    # ones(8) under a 1-D box kernel with SAME padding: edges see two taps
    with create_mesh([("mx", 2)]) as mesh:
        spec = TensorSpec((("batch", 1), ("x", 8), ("y", 4), ("z", 4), ("c", 1)))
        x = np.ones(spec.shape, np.float32)
        k = np.zeros((3, 3, 3, 1, 1), np.float32)
        k[:, 1, 1, 0, 0] = 1.0
        st = shard(x, spec, Layout({"x": "mx"}), mesh)
        out, _ = conv3d_forward(st, ConvParams(k, np.zeros(1, np.float32)))
        assert np.array_equal(
            gather(out)[0, :, 1, 1, 0], np.array([2, 3, 3, 3, 3, 3, 3, 2], np.float32)
        )


def test_identity_kernel_returns_input_bitwise(mesh222):
    layout = Layout(LAYOUT)
    x, st = rand_st(mesh222, layout, spec_xyz(1, 8, 2), 0)
    out, _ = conv3d_forward(st, ConvParams(identity_kernel(2), np.zeros(2, np.float32)))
    assert np.array_equal(gather(out), x)


def test_conv_forward_bitwise_vs_oracle_12cube(mesh222):
    layout = Layout(LAYOUT)
    rng = np.random.default_rng(7)
    spec = spec_xyz(1, 12, 2)
    x, st = rand_st(mesh222, layout, spec, 7)
    kernel = rng.standard_normal((3, 3, 3, 2, 4)).astype(np.float32)
    bias = rng.standard_normal(4).astype(np.float32)
    out, _ = conv3d_forward(st, ConvParams(kernel, bias))
    assert np.array_equal(gather(out), oracle.conv3d_dense(x, kernel, bias))


def test_conv_channel_mismatch():
    with create_mesh([("mx", 2)]) as mesh:  # worker errors poison a mesh
        layout = Layout({"x": "mx"})
        _, st = rand_st(mesh, layout, spec_xyz(1, 8, 2), 1)
        p = ConvParams(np.zeros((3, 3, 3, 3, 1), np.float32), np.zeros(1, np.float32))
        with pytest.raises(WorkerFailed, match="channels"):
            conv3d_forward(st, p)


def test_conv_backward_zero_grad_gives_zero(mesh222):
    layout = Layout(LAYOUT)
    rng = np.random.default_rng(2)
    _, st = rand_st(mesh222, layout, spec_xyz(1, 8, 2), 2)
    kernel = rng.standard_normal((3, 3, 3, 2, 3)).astype(np.float32)
    out, tape = conv3d_forward(st, ConvParams(kernel, np.zeros(3, np.float32)))
    zero = out.map_blocks(np.zeros_like)
    gx, gk, gb = conv3d_backward(zero, tape)
    assert not gather(gx).any() and not gk.any() and not gb.any()


def test_conv_backward_single_worker_bitwise_vs_oracle():
    with create_mesh([("one", 1)]) as mesh:
        layout = Layout({})
        rng = np.random.default_rng(3)
        spec = spec_xyz(2, 6, 3)
        x, st = rand_st(mesh, layout, spec, 3)
        kernel = rng.standard_normal((3, 3, 3, 3, 2)).astype(np.float32)
        bias = rng.standard_normal(2).astype(np.float32)
        out, tape = conv3d_forward(st, ConvParams(kernel, bias))
        gout = rng.standard_normal(gather(out).shape).astype(np.float32)
        gspec = spec_xyz(2, 6, 2)
        gx, gk, gb = conv3d_backward(shard(gout, gspec, layout, mesh), tape)
        rgx, rgk, rgb = oracle.conv3d_dense_backward(gout, x, kernel)
        assert np.array_equal(gather(gx), rgx)
        assert np.array_equal(gk, rgk)
        assert np.array_equal(gb, rgb)


def test_conv_backward_distributed_close_to_oracle(mesh222):
    layout = Layout(LAYOUT)
    rng = np.random.default_rng(4)
    spec = spec_xyz(1, 8, 2)
    x, st = rand_st(mesh222, layout, spec, 4)
    kernel = rng.standard_normal((3, 3, 3, 2, 2)).astype(np.float32)
    bias = rng.standard_normal(2).astype(np.float32)
    out, tape = conv3d_forward(st, ConvParams(kernel, bias))
    gout = rng.standard_normal(gather(out).shape).astype(np.float32)
    gx, gk, gb = conv3d_backward(shard(gout, spec_xyz(1, 8, 2), layout, mesh222), tape)
    rgx, rgk, rgb = oracle.conv3d_dense_backward(gout, x, kernel)
    for got, ref in ((gather(gx), rgx), (gk, rgk), (gb, rgb)):
        denom = max(np.abs(ref).max(), 1e-12)
        assert np.abs(got - ref).max() / denom <= 1e-5


def test_conv_gradients_pass_finite_differences_f64():
    # treat the conv as f(params) = sum(W * conv(x)) with fixed random W
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 6, 6, 6, 2))
    w = rng.standard_normal((1, 6, 6, 6, 3))
    params = {
        "conv": {
            "kernel": rng.standard_normal((3, 3, 3, 2, 3)),
            "bias": rng.standard_normal(3),
        }
    }

    def f(p):
        return float((w * oracle.conv3d_dense(x, p["conv"]["kernel"], p["conv"]["bias"])).sum())

    def grad_fn(p):
        _, gk, gb = oracle.conv3d_dense_backward(w, x, p["conv"]["kernel"])
        return {"conv": {"kernel": gk, "bias": gb}}

    report = oracle.finite_difference_check(f, grad_fn, params, h=1e-6, tol=1e-6)
    assert report.passed, report.failures()


def test_conv_tape_consumed_once(mesh222):
    layout = Layout(LAYOUT)
    _, st = rand_st(mesh222, layout, spec_xyz(1, 8, 1), 6)
    out, tape = conv3d_forward(
        st, ConvParams(np.zeros((3, 3, 3, 1, 1), np.float32), np.zeros(1, np.float32))
    )
    conv3d_backward(out.map_blocks(np.zeros_like), tape)
    with pytest.raises(VoxmeshError, match="already consumed"):
        conv3d_backward(out.map_blocks(np.zeros_like), tape)


def test_maxpool_constant_ties_route_to_first_voxel(mesh222):
    layout = Layout(LAYOUT)
    spec = spec_xyz(1, 8, 1)
    st = shard(np.ones(spec.shape, np.float32), spec, layout, mesh222)
    out, tape = maxpool2_forward(st)
    assert (gather(out) == 1).all()
    g = out.map_blocks(np.ones_like)
    gx = gather(maxpool2_backward(g, tape))
    # gradient lands on the (0,0,0) voxel of each 2x2x2 cell
    assert np.array_equal(gx[0, ::2, ::2, ::2, 0], np.ones((4, 4, 4), np.float32))
    assert gx.sum() == 4 * 4 * 4


def test_maxpool_matches_oracle_on_ramp(mesh222):
    layout = Layout(LAYOUT)
    spec = spec_xyz(1, 8, 2)
    x = np.arange(np.prod(spec.shape), dtype=np.float32).reshape(spec.shape)
    st = shard(x, spec, layout, mesh222)
    out, _ = maxpool2_forward(st)
    ref, _ = oracle.maxpool2_dense(x)
    assert np.array_equal(gather(out), ref)


def test_maxpool_odd_local_extent_is_build_error():
    with create_mesh([("one", 1)]) as mesh:
        spec = TensorSpec((("batch", 1), ("x", 5), ("y", 4), ("z", 4), ("c", 1)))
        st = shard(np.zeros(spec.shape, np.float32), spec, Layout({}), mesh)
        with pytest.raises((GraphBuildError, WorkerFailed), match="even local extents"):
            maxpool2_forward(st)


def test_upsample_doubles_each_dim(mesh222):
    layout = Layout(LAYOUT)
    spec = spec_xyz(1, 2, 1)
    x = np.random.default_rng(8).standard_normal(spec.shape).astype(np.float32)
    st = shard(x, spec, layout, mesh222)
    up = gather(upsample2_forward(st))
    assert up.shape == (1, 4, 4, 4, 1)
    assert np.array_equal(up, oracle.upsample2_dense(x))


def test_upsample_then_pool_is_identity(mesh222):
    layout = Layout(LAYOUT)
    x, st = rand_st(mesh222, layout, spec_xyz(1, 4, 2), 9)
    up = upsample2_forward(st)
    pooled, _ = maxpool2_forward(up)
    assert np.array_equal(gather(pooled), x)


def test_upsample_adjoint_inner_product_f64(mesh222):
    layout = Layout(LAYOUT)
    rng = np.random.default_rng(10)
    spec = spec_xyz(1, 4, 2, "f64")
    x, st = rand_st(mesh222, layout, spec, 10)
    up = upsample2_forward(st)
    y = rng.standard_normal(gather(up).shape)
    yst = shard(y, spec_xyz(1, 8, 2, "f64"), layout, mesh222)
    lhs = float((gather(up) * y).sum())
    rhs = float((x * gather(upsample2_backward(yst))).sum())
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs))


def test_concat_preserves_values_bitwise(mesh222):
    layout = Layout(LAYOUT)
    a, ast = rand_st(mesh222, layout, spec_xyz(1, 4, 2), 11)
    b, bst = rand_st(mesh222, layout, spec_xyz(1, 4, 3), 12)
    cat = gather(concat_channels(ast, bst))
    assert cat.shape[-1] == 5
    assert np.array_equal(cat[..., :2], a)
    assert np.array_equal(cat[..., 2:], b)


def test_concat_shape_mismatch(mesh222):
    layout = Layout(LAYOUT)
    _, ast = rand_st(mesh222, layout, spec_xyz(1, 4, 2), 13)
    _, bst = rand_st(mesh222, layout, spec_xyz(1, 8, 2), 14)
    with pytest.raises(VoxmeshError, match="matching spatial shape"):
        concat_channels(ast, bst)


def test_relu_of_negated_nonnegatives_is_zero(mesh222):
    layout = Layout(LAYOUT)
    spec = spec_xyz(1, 4, 2)
    x = np.abs(np.random.default_rng(15).standard_normal(spec.shape)).astype(np.float32)
    st = shard(-x, spec, layout, mesh222)
    assert not gather(relu(st)).any()


def test_softmax_uniform_logits(mesh222):
    layout = Layout(LAYOUT)
    spec = spec_xyz(1, 4, 3)
    st = shard(np.full(spec.shape, 0.7, np.float32), spec, layout, mesh222)
    probs = gather(softmax_channels(st))
    assert np.allclose(probs, 1 / 3, atol=1e-7)
    assert np.abs(probs.sum(axis=-1) - 1).max() <= 1e-6


def test_pointwise_ops_move_zero_bytes(mesh222):
    layout = Layout(LAYOUT)
    _, ast = rand_st(mesh222, layout, spec_xyz(1, 4, 2), 16)
    _, bst = rand_st(mesh222, layout, spec_xyz(1, 4, 2), 17)
    before = mesh222.run(lambda ctx: dict(ctx.counters))
    relu(ast)
    softmax_channels(ast)
    concat_channels(ast, bst)
    after = mesh222.run(lambda ctx: dict(ctx.counters))
    assert before == after


@pytest.mark.parametrize("axes,layout", [
    ([("one", 1)], {}),
    ([("mx", 2)], {"x": "mx"}),
    ([("mx", 2), ("my", 2), ("mz", 2)], {"x": "mx", "y": "my", "z": "mz"}),
])
def test_forward_ops_mesh_size_independent(axes, layout):
    # identical gathered results on 1x1x1, 2x1x1 and 2x2x2 meshes (bitwise)
    rng = np.random.default_rng(18)
    spec = spec_xyz(1, 8, 2)
    x = rng.standard_normal(spec.shape).astype(np.float32)
    kernel = rng.standard_normal((3, 3, 3, 2, 3)).astype(np.float32)
    bias = rng.standard_normal(3).astype(np.float32)
    with create_mesh(axes) as mesh:
        st = shard(x, spec, Layout(layout), mesh)
        out, _ = conv3d_forward(st, ConvParams(kernel, bias))
        pooled, _ = maxpool2_forward(out)
        got = gather(pooled)
    ref, _ = oracle.maxpool2_dense(oracle.conv3d_dense(x, kernel, bias))
    assert np.array_equal(got, ref)
