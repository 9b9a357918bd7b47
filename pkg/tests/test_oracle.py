"""Oracle self-checks: dense kernels, fd harness controls, equivalence suite."""

import numpy as np
import pytest

from voxmesh import oracle
from voxmesh.mesh import create_mesh
from voxmesh.sharding import Layout, TensorSpec, gather, shard
from voxmesh.unet import UNetConfig, build, init_params
from voxmesh import unet
from voxmesh.halo import dim_axes


def test_identity_kernel_depth_one():
    x = np.random.default_rng(0).standard_normal((1, 5, 5, 5, 2)).astype(np.float32)
    k = np.zeros((3, 3, 3, 2, 2), np.float32)
    for i in range(2):
        k[1, 1, 1, i, i] = 1.0
    out = oracle.conv3d_dense(x, k, np.zeros(2, np.float32))
    assert np.array_equal(out, x)


def test_oracle_matches_distributed_forward_bitwise():
    cfg = UNetConfig(8, (2, 4), convs_per_block=2)
    spec = TensorSpec((("batch", 1), ("x", 8), ("y", 8), ("z", 8), ("c", 1)))
    x = np.random.default_rng(1).standard_normal(spec.shape).astype(np.float32)
    outs = {}
    for name, axes, lay in (
        ("single", [("one", 1)], {}),
        ("dist", [("mx", 2), ("my", 2), ("mz", 2)], {"x": "mx", "y": "my", "z": "mz"}),
    ):
        with create_mesh(axes) as mesh:
            graph = build(cfg, mesh, Layout(lay))
            params = init_params(graph, 3)
            dims = dim_axes(spec, graph.layout)
            st = shard(x, spec, graph.layout, mesh)
            blocks = mesh.run(
                lambda ctx, b: unet.run_forward_local(ctx, graph, params, b, dims, save_tape=False)[0],
                per_worker=(st.blocks,),
            )
            ospec = TensorSpec(spec.dims[:-1] + (("c", 3),))
            outs[name] = gather(type(st)(ospec, graph.layout, mesh, blocks))
    ref, _ = oracle.oracle_forward(graph, params, x, save_tape=False)
    assert np.array_equal(outs["single"], ref)
    assert np.array_equal(outs["dist"], ref)


def test_fd_linear_function_is_exact():
    rng = np.random.default_rng(2)
    w = {"lin": {"kernel": rng.standard_normal((3, 3, 3, 1, 1)), "bias": rng.standard_normal(1)}}
    params = {"lin": {"kernel": rng.standard_normal((3, 3, 3, 1, 1)), "bias": rng.standard_normal(1)}}

    def f(p):
        return float((w["lin"]["kernel"] * p["lin"]["kernel"]).sum() + w["lin"]["bias"] @ p["lin"]["bias"])

    def grad_fn(p):
        return w

    # linearity: a large step kills the roundoff term entirely
    report = oracle.finite_difference_check(f, grad_fn, params, h=0.5, tol=1e-12)
    assert report.passed, report.block_errors
    assert report.max_rel_err <= 1e-12


def test_fd_detects_corrupted_gradient():
    rng = np.random.default_rng(3)
    params = {"l": {"kernel": rng.standard_normal((2, 2)), "bias": rng.standard_normal(2)}}
    w = {"l": {"kernel": rng.standard_normal((2, 2)), "bias": rng.standard_normal(2)}}

    def f(p):
        return float((w["l"]["kernel"] * p["l"]["kernel"]).sum() + w["l"]["bias"] @ p["l"]["bias"])

    def bad_grad(p):
        g = {"l": {"kernel": w["l"]["kernel"].copy(), "bias": w["l"]["bias"].copy()}}
        g["l"]["kernel"][0, 0] += 1.0  # deliberate corruption
        return g

    report = oracle.finite_difference_check(f, bad_grad, params, h=0.5, tol=1e-6)
    assert not report.passed
    assert "l.kernel" in report.failures()


def test_run_verification_passes_and_counts_checks():
    result = oracle.run_verification(
        spatial_shapes=[(1, 1, 1), (2, 1, 1)], dp_sizes=(1,), seeds=2
    )
    assert result.passed
    assert "PASS" in result.summary()
    # single-worker shape also runs the backward bitwise check
    names = [n for n, _, _ in result.checks]
    assert any("backward" in n for n in names)


def test_full_equivalence_suite_default_breadth():
    # every spatial shape in {1,2}^3 x data-parallel {1,2}, 20 seeds each
    result = oracle.run_verification(seeds=20, gradients=False)
    assert result.passed, result.summary()
    assert sum(1 for n, _, _ in result.checks if "conv forward" in n) == 16


def test_pool_upsample_softmax_dense_roundtrips():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 4, 4, 4, 2)).astype(np.float32)
    up = oracle.upsample2_dense(x)
    pooled, _ = oracle.maxpool2_dense(up)
    assert np.array_equal(pooled, x)
    probs = oracle.softmax_dense(x)
    assert np.abs(probs.sum(-1) - 1).max() <= 1e-6
