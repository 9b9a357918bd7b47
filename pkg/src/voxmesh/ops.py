"""Distributed differentiable operators over sharded volumes.

All tensors are laid out [batch, x, y, z, c].  Convolution is direct (no
im2col/BLAS for the forward contraction): per kernel offset the window is
copied contiguously and contracted with ``np.einsum(..., optimize=False)``,
whose per-element accumulation is independent of the array shape.  Together
with the kernel-index-major offset order this makes the gathered distributed
forward bitwise equal to a single-device direct convolution, on any mesh.

Parameter gradients contract over voxels per batch sample (one GEMM per sample
and offset, accumulated in batch order), so a data-parallel split with one
sample per worker reproduces the concatenated-batch run bit for bit once the
partials are summed in coordinate order.

Pooling, upsampling, concat, relu and softmax are shard-local and perform no
communication.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import halo as _halo
from .errors import GraphBuildError, HaloError, VoxmeshError
from .sharding import ShardedTensor, TensorSpec

SPATIAL_DIMS = ("x", "y", "z")


@dataclass(frozen=True)
class ConvParams:
    """Odd kxkxk kernel [k,k,k,c_in,c_out] plus bias [c_out]; stride 1, SAME."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k = self.kernel.shape
        if len(k) != 5 or not (k[0] == k[1] == k[2]):
            raise VoxmeshError(f"kernel must be [k,k,k,c_in,c_out], got {k}")
        if k[0] % 2 == 0:
            raise HaloError(f"even kernel extent {k[0]} is unsupported")
        if self.bias.shape != (k[4],):
            raise VoxmeshError(f"bias shape {self.bias.shape} != ({k[4]},)")
        if not (np.isfinite(self.kernel).all() and np.isfinite(self.bias).all()):
            raise VoxmeshError("non-finite values in conv parameters")

    @property
    def k(self):
        return self.kernel.shape[0]

    @property
    def c_in(self):
        return self.kernel.shape[3]

    @property
    def c_out(self):
        return self.kernel.shape[4]


# ---------------------------------------------------------------------------
# Local (per-block) kernels.  These are the single accumulation-order-defining
# implementations; the oracle module re-implements them independently.
# ---------------------------------------------------------------------------


def conv3d_local(padded, kernel, bias):
    """Direct valid convolution of a halo-padded block.

    Accumulation order: bias first, then kernel offsets in row-major order
    over the three spatial axes, the input-channel contraction inside each
    offset.
    """
    k = kernel.shape[0]
    c_in, c_out = kernel.shape[3], kernel.shape[4]
    if padded.shape[-1] != c_in:
        raise VoxmeshError(f"input has {padded.shape[-1]} channels, kernel wants {c_in}")
    if kernel.dtype != padded.dtype:
        raise VoxmeshError(
            f"kernel dtype {kernel.dtype} != input dtype {padded.dtype}; "
            "mixed precision would break bitwise reproducibility"
        )
    b = padded.shape[0]
    zs, ys, xs = (padded.shape[i + 1] - (k - 1) for i in range(3))
    out = np.empty((b, zs, ys, xs, c_out), dtype=padded.dtype)
    out[...] = bias.astype(padded.dtype, copy=False)
    flat = out.reshape(-1, c_out)
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                w = np.ascontiguousarray(
                    padded[:, kz : kz + zs, ky : ky + ys, kx : kx + xs, :]
                ).reshape(-1, c_in)
                flat += np.einsum("mc,co->mo", w, kernel[kz, ky, kx], optimize=False)
    return out


def conv3d_input_grad_local(gout, kernel, padded_shape):
    """Gradient w.r.t. the padded input block (same offset-major order)."""
    k = kernel.shape[0]
    c_in, c_out = kernel.shape[3], kernel.shape[4]
    b, zs, ys, xs = gout.shape[0], gout.shape[1], gout.shape[2], gout.shape[3]
    gpad = np.zeros(padded_shape, dtype=gout.dtype)
    gflat = np.ascontiguousarray(gout).reshape(-1, c_out)
    for kz in range(k):
        for ky in range(k):
            for kx in range(k):
                contrib = np.einsum("mo,co->mc", gflat, kernel[kz, ky, kx], optimize=False)
                gpad[:, kz : kz + zs, ky : ky + ys, kx : kx + xs, :] += contrib.reshape(
                    b, zs, ys, xs, c_in
                )
    return gpad


def conv3d_param_grads_local(gout, padded, k):
    """Kernel/bias gradient partials over the local voxels.

    Samples are processed in (local) batch order, each contributing one GEMM
    per offset; summed partials across workers in coordinate order then equal
    a concatenated-batch run exactly when each worker holds one sample.
    """
    c_in = padded.shape[-1]
    b, zs, ys, xs, c_out = gout.shape
    gk = np.zeros((k, k, k, c_in, c_out), dtype=gout.dtype)
    gb = np.zeros((c_out,), dtype=gout.dtype)
    for s in range(b):
        gflat = np.ascontiguousarray(gout[s]).reshape(-1, c_out)
        for kz in range(k):
            for ky in range(k):
                for kx in range(k):
                    w = np.ascontiguousarray(
                        padded[s, kz : kz + zs, ky : ky + ys, kx : kx + xs, :]
                    ).reshape(-1, c_in)
                    gk[kz, ky, kx] += w.T @ gflat
        gb += gflat.sum(axis=0)
    return gk, gb


def maxpool2_local(x):
    """Non-overlapping 2x2x2 max pool; returns (pooled, argmax index per cell).

    Ties go to the first voxel in (dz, dy, dx) scan order within each cell.
    """
    b, zs, ys, xs, c = x.shape
    if zs % 2 or ys % 2 or xs % 2:
        raise GraphBuildError(f"maxpool2 needs even local extents, got {(zs, ys, xs)}")
    cells = (
        x.reshape(b, zs // 2, 2, ys // 2, 2, xs // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4, 6, 7)
        .reshape(b, zs // 2, ys // 2, xs // 2, 8, c)
    )
    idx = cells.argmax(axis=4)
    out = np.take_along_axis(cells, idx[..., None, :], axis=4)[..., 0, :]
    return out, idx


def maxpool2_backward_local(gout, idx, in_shape):
    """Route each cell's gradient to its argmax voxel."""
    b, zs, ys, xs, c = in_shape
    g = np.zeros((b, zs // 2, ys // 2, xs // 2, 8, c), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None, :], gout[..., None, :], axis=4)
    return (
        g.reshape(b, zs // 2, ys // 2, xs // 2, 2, 2, 2, c)
        .transpose(0, 1, 4, 2, 5, 3, 6, 7)
        .reshape(in_shape)
    )


def upsample2_local(x):
    """Nearest-neighbor x2 along each spatial dim."""
    return np.repeat(np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), 2, axis=3)


def upsample2_backward_local(gout):
    """Adjoint of nearest-neighbor x2: sum each 2x2x2 cell."""
    b, zs, ys, xs, c = gout.shape
    return gout.reshape(b, zs // 2, 2, ys // 2, 2, xs // 2, 2, c).sum(axis=(2, 4, 6))


def relu_local(x):
    return np.maximum(x, 0)


def relu_backward_local(gout, x):
    return np.where(x > 0, gout, np.zeros((), dtype=gout.dtype))


def softmax_channels_local(x):
    """Per-voxel stable softmax over the channel dim."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_channels_backward_local(gout, probs):
    dot = (gout * probs).sum(axis=-1, keepdims=True)
    return probs * (gout - dot)


def analytic_flops(op, out_shape, k=None, c_in=None):
    """Fused multiply-add count (x2) for the bench report."""
    n = int(np.prod(out_shape))
    if op == "conv":
        return 2 * n * (k ** 3) * c_in
    if op in ("pool", "up"):
        return n
    if op in ("relu", "concat"):
        return n
    if op == "softmax":
        return 4 * n
    return 0


# ---------------------------------------------------------------------------
# Driver-level collective ops over ShardedTensors.
# ---------------------------------------------------------------------------


class ConvTape:
    """Forward context a conv backward needs; consumable exactly once."""

    def __init__(self, x_st, padded_blocks, params, halo_spec):
        self.x_spec = x_st.spec
        self.layout = x_st.layout
        self.mesh = x_st.mesh
        self.padded_blocks = padded_blocks
        self.params = params
        self.halo_spec = halo_spec
        self._used = False

    def take(self):
        if self._used:
            raise VoxmeshError("conv tape already consumed by a backward pass")
        self._used = True
        return self.padded_blocks


def _out_spec(x_st, c_out=None, spatial_scale=1):
    dims = []
    for n, e in x_st.spec.dims:
        if n in SPATIAL_DIMS:
            e = int(e * spatial_scale)
        if n == "c" and c_out is not None:
            e = c_out
        dims.append((n, e))
    return TensorSpec(tuple(dims), x_st.spec.dtype)


def conv3d_forward(x: ShardedTensor, params: ConvParams, phase_barrier=True):
    """SAME-padded stride-1 distributed conv; returns (output, tape)."""
    spec = _halo.HaloSpec.for_kernel(params.k)
    dims = _halo.dim_axes(x.spec, x.layout)

    def fn(ctx, block):
        padded = _halo.exchange_local(ctx, dims, spec, _halo._FWD_TAG, phase_barrier, block)
        return padded.data, conv3d_local(padded.data, params.kernel, params.bias)

    res = x.mesh.run(fn, per_worker=(x.blocks,))
    padded_blocks = [r[0] for r in res]
    out_blocks = [r[1] for r in res]
    out = ShardedTensor(_out_spec(x, c_out=params.c_out), x.layout, x.mesh, out_blocks)
    return out, ConvTape(x, padded_blocks, params, spec)


def conv3d_backward(gout: ShardedTensor, tape: ConvTape, phase_barrier=True):
    """Returns (grad_x, grad_kernel, grad_bias); param grads all-reduced over the mesh."""
    padded_blocks = tape.take()
    params = tape.params
    dims = _halo.dim_axes(tape.x_spec, tape.layout)

    def fn(ctx, gblock, padded):
        gpad = conv3d_input_grad_local(gblock, params.kernel, padded.shape)
        gx = _halo.exchange_backward_local(
            ctx, dims, tape.halo_spec, _halo._BWD_TAG, phase_barrier, gpad
        )
        gk, gb = conv3d_param_grads_local(gblock, padded, params.k)
        gk = ctx.all_reduce_sum(gk, tag="gk")
        gb = ctx.all_reduce_sum(gb, tag="gb")
        return gx, gk, gb

    res = gout.mesh.run(fn, per_worker=(gout.blocks, padded_blocks))
    gx = ShardedTensor(tape.x_spec, tape.layout, tape.mesh, [r[0] for r in res])
    return gx, res[0][1], res[0][2]


def maxpool2_forward(x: ShardedTensor):
    res = x.mesh.run(lambda ctx, b: maxpool2_local(b), per_worker=(x.blocks,))
    out = ShardedTensor(_out_spec(x, spatial_scale=0.5), x.layout, x.mesh, [r[0] for r in res])
    return out, ([r[1] for r in res], x.local_shape, x.spec)


def maxpool2_backward(gout: ShardedTensor, tape):
    idx_blocks, in_shape, in_spec = tape
    res = gout.mesh.run(
        lambda ctx, g, idx: maxpool2_backward_local(g, idx, in_shape),
        per_worker=(gout.blocks, idx_blocks),
    )
    return ShardedTensor(in_spec, gout.layout, gout.mesh, res)


def upsample2_forward(x: ShardedTensor):
    res = x.mesh.run(lambda ctx, b: upsample2_local(b), per_worker=(x.blocks,))
    return ShardedTensor(_out_spec(x, spatial_scale=2), x.layout, x.mesh, res)


def upsample2_backward(gout: ShardedTensor):
    res = gout.mesh.run(lambda ctx, g: upsample2_backward_local(g), per_worker=(gout.blocks,))
    return ShardedTensor(_out_spec(gout, spatial_scale=0.5), gout.layout, gout.mesh, res)


def concat_channels(a: ShardedTensor, b: ShardedTensor):
    if a.spec.shape[:-1] != b.spec.shape[:-1] or a.layout.assignments != b.layout.assignments:
        raise VoxmeshError(
            f"concat needs matching spatial shape and layout: "
            f"{a.spec.shape} vs {b.spec.shape}"
        )
    res = a.mesh.run(
        lambda ctx, x, y: np.concatenate([x, y], axis=-1), per_worker=(a.blocks, b.blocks)
    )
    c_out = a.spec.extent("c") + b.spec.extent("c")
    return ShardedTensor(_out_spec(a, c_out=c_out), a.layout, a.mesh, res)


def relu(x: ShardedTensor):
    res = x.mesh.run(lambda ctx, b: relu_local(b), per_worker=(x.blocks,))
    return ShardedTensor(x.spec, x.layout, x.mesh, res)


def softmax_channels(x: ShardedTensor):
    res = x.mesh.run(lambda ctx, b: softmax_channels_local(b), per_worker=(x.blocks,))
    return ShardedTensor(x.spec, x.layout, x.mesh, res)
