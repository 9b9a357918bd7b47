"""Halo exchange: neighbor margin transfer before windowed ops, and its adjoint.

Before a convolution, every worker sends the faces of its block to its mesh
neighbors and pads its block with the faces it receives, so the windowed op can
run locally as if it saw the zero-padded global tensor.  Margins are exchanged
one spatial dimension at a time, each phase including the padding applied by
earlier phases; corners therefore arrive via two (or three) hops without any
diagonal channels.  Blocks at the global boundary are padded with zeros,
matching SAME convolution.

The backward pass is the exact linear adjoint: margin gradients are sent back
to the neighbor that owns those voxels and accumulated by addition, in the
reverse dimension order, with a fixed low-then-high accumulation order so runs
are reproducible.

Only single-hop halos are supported: each margin must fit inside the neighbor's
local extent.  Kernels must be odd (margin = (k-1)/2 per side).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HaloError
from .sharding import BATCH_DIM, CHANNEL_DIM, ShardedTensor, local_shape

_FWD_TAG = "halo"
_BWD_TAG = "halo-bwd"


@dataclass(frozen=True)
class HaloSpec:
    """Per-spatial-dim (lo, hi) margin widths in voxels."""

    margins: tuple  # ((dim, lo, hi), ...)

    def __init__(self, margins):
        if isinstance(margins, dict):
            margins = tuple((d, int(v[0]), int(v[1])) for d, v in sorted(margins.items()))
        else:
            margins = tuple((str(d), int(lo), int(hi)) for d, lo, hi in margins)
        for d, lo, hi in margins:
            if d in (BATCH_DIM, CHANNEL_DIM):
                raise HaloError(f"halo margins only apply to spatial dims, not {d!r}")
            if lo < 0 or hi < 0:
                raise HaloError(f"negative margin on {d!r}: ({lo}, {hi})")
        object.__setattr__(self, "margins", margins)

    @classmethod
    def for_kernel(cls, k, dims=("x", "y", "z")):
        """Margins for an odd kxkxk kernel: lo = hi = (k-1)/2 on every spatial dim."""
        if k % 2 == 0:
            raise HaloError(
                f"even kernel extent {k} is unsupported: margins must be "
                "(k-1)/2 per side, which requires odd k"
            )
        m = (k - 1) // 2
        return cls(tuple((d, m, m) for d in dims))

    def margin(self, dim):
        for d, lo, hi in self.margins:
            if d == dim:
                return lo, hi
        return 0, 0

    def total(self, dim):
        lo, hi = self.margin(dim)
        return lo + hi


@dataclass
class PaddedBlock:
    """A local block grown by its halo margins, plus per-face provenance.

    ``faces[(dim, "lo"|"hi")]`` is "neighbor" when the face came from a mesh
    neighbor and "zero" when it is global-boundary zero fill.  The interior
    equals the local block bitwise.
    """

    data: np.ndarray
    halo: HaloSpec
    dim_names: tuple
    faces: dict = field(default_factory=dict)

    def interior_slices(self):
        return tuple(
            slice(self.halo.margin(d)[0], self.data.shape[i] - self.halo.margin(d)[1])
            for i, d in enumerate(self.dim_names)
        )

    @property
    def interior(self):
        return self.data[self.interior_slices()]


def dim_axes(spec, layout):
    """Ordered (dim_name, mesh_axis_or_None) pairs for a tensor under a layout."""
    return tuple((n, layout.axis_for(n)) for n in spec.names)


def _slab(arr, axis, start, stop):
    idx = [slice(None)] * arr.ndim
    idx[axis] = slice(start, stop)
    return arr[tuple(idx)]


def exchange_local(ctx, dims, halo, tag, phase_barrier, block):
    """Worker-side halo exchange; returns the PaddedBlock for this worker.

    ``dims`` is the (dim_name, axis_name) tuple from :func:`dim_axes`.  All
    workers must call collectively with identical ``halo``.
    """
    data = block
    faces = {}
    for i, (dname, axis) in enumerate(dims):
        lo, hi = halo.margin(dname)
        if lo == 0 and hi == 0:
            continue
        ext = block.shape[i]
        if lo > ext or hi > ext:
            raise HaloError(
                f"margin ({lo},{hi}) on {dname!r} exceeds local extent {ext}; "
                "use a smaller mesh axis or a larger volume"
            )
        lo_nbr = ctx.neighbor(axis, -1) if axis else None
        hi_nbr = ctx.neighbor(axis, +1) if axis else None
        cur = data.shape[i]
        # Travel tags name the direction: "down" moves toward lower coordinates.
        if lo_nbr is not None and hi > 0:
            ctx.send(lo_nbr, np.ascontiguousarray(_slab(data, i, 0, hi)), (tag, dname, "down"))
        if hi_nbr is not None and lo > 0:
            ctx.send(hi_nbr, np.ascontiguousarray(_slab(data, i, cur - lo, cur)), (tag, dname, "up"))

        if lo_nbr is not None and lo > 0:
            lo_slab = ctx.recv(lo_nbr, (tag, dname, "up"))
        else:
            side_shape = list(data.shape)
            side_shape[i] = lo
            lo_slab = np.zeros(side_shape, data.dtype)
        if hi_nbr is not None and hi > 0:
            hi_slab = ctx.recv(hi_nbr, (tag, dname, "down"))
        else:
            side_shape = list(data.shape)
            side_shape[i] = hi
            hi_slab = np.zeros(side_shape, data.dtype)
        data = np.concatenate([lo_slab, data, hi_slab], axis=i)
        faces[(dname, "lo")] = "neighbor" if lo_nbr is not None else "zero"
        faces[(dname, "hi")] = "neighbor" if hi_nbr is not None else "zero"
        if phase_barrier:
            ctx.barrier(tag=(tag, dname, "phase"))
    if data is block:
        data = block.copy()  # margin-0 exchange still hands back an owned buffer
    return PaddedBlock(data, halo, tuple(n for n, _ in dims), faces)


def exchange_backward_local(ctx, dims, halo, tag, phase_barrier, grad_padded):
    """Adjoint of :func:`exchange_local`: scatter margin gradients back and sum.

    Processes dimensions in reverse order; per dimension the interior passes
    through and neighbor contributions are added low-side first, then high.
    Zero-boundary margins are discarded.
    """
    data = grad_padded
    for i, (dname, axis) in reversed(list(enumerate(dims))):
        lo, hi = halo.margin(dname)
        if lo == 0 and hi == 0:
            continue
        cur = data.shape[i]
        core = cur - lo - hi
        if core <= 0:
            raise HaloError(
                f"gradient block extent {cur} too small for margins ({lo},{hi}) on {dname!r}"
            )
        lo_nbr = ctx.neighbor(axis, -1) if axis else None
        hi_nbr = ctx.neighbor(axis, +1) if axis else None
        if lo_nbr is not None and lo > 0:
            ctx.send(lo_nbr, np.ascontiguousarray(_slab(data, i, 0, lo)), (tag, dname, "down"))
        if hi_nbr is not None and hi > 0:
            ctx.send(hi_nbr, np.ascontiguousarray(_slab(data, i, lo + core, cur)), (tag, dname, "up"))
        out = np.ascontiguousarray(_slab(data, i, lo, lo + core))
        if lo_nbr is not None and hi > 0:
            view = _slab(out, i, 0, hi)
            view += ctx.recv(lo_nbr, (tag, dname, "up"))
        if hi_nbr is not None and lo > 0:
            view = _slab(out, i, core - lo, core)
            view += ctx.recv(hi_nbr, (tag, dname, "down"))
        data = out
        if phase_barrier:
            ctx.barrier(tag=(tag, dname, "phase"))
    if data is grad_padded:
        data = grad_padded.copy()
    return data


def exchange_byte_count(spec, layout, mesh, halo, direction="forward"):
    """Analytic bytes sent by all workers during one exchange.

    Per worker and spatial dim, a face is sent only where a neighbor exists;
    its area includes the padding applied by earlier phases, matching the
    sequential per-axis protocol exactly.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be forward|backward, got {direction!r}")
    layout.validate(spec, mesh)
    base = local_shape(spec, layout, mesh)
    item = spec.dtype.itemsize
    total = 0
    for coord in mesh.coords:
        cur = list(base)
        for i, name in enumerate(spec.names):
            lo, hi = halo.margin(name)
            if lo == 0 and hi == 0:
                continue
            axis = layout.axis_for(name)
            if axis is not None and mesh.axis_size(axis) > 1:
                area = 1
                for j, e in enumerate(cur):
                    if j != i:
                        area *= e
                c = coord[mesh.axis_index[axis]]
                down_w, up_w = (hi, lo) if direction == "forward" else (lo, hi)
                if c > 0:
                    total += down_w * area
                if c < mesh.axis_size(axis) - 1:
                    total += up_w * area
            cur[i] += lo + hi
    return total * item


def halo_exchange(x: ShardedTensor, halo, phase_barrier=True):
    """Collective exchange over a ShardedTensor; returns one PaddedBlock per worker."""
    dims = dim_axes(x.spec, x.layout)
    return x.mesh.run(
        exchange_local, dims, halo, _FWD_TAG, phase_barrier, per_worker=(x.blocks,)
    )


def halo_exchange_backward(grad_padded, x_spec, layout, mesh, halo, phase_barrier=True):
    """Collective adjoint exchange; returns the gradient as a ShardedTensor.

    ``grad_padded`` is one array (or PaddedBlock) per worker with the padded
    local shape implied by ``halo``.
    """
    dims = dim_axes(x_spec, layout)
    base = local_shape(x_spec, layout, mesh)
    expected = tuple(
        e + halo.total(n) for e, n in zip(base, x_spec.names)
    )
    arrays = []
    for g in grad_padded:
        arr = g.data if isinstance(g, PaddedBlock) else np.asarray(g)
        if arr.shape != expected:
            raise HaloError(
                f"gradient block shape {arr.shape} does not match padded shape "
                f"{expected} for margins {halo.margins}"
            )
        arrays.append(arr)
    blocks = mesh.run(
        exchange_backward_local, dims, halo, _BWD_TAG, phase_barrier, per_worker=(arrays,)
    )
    return ShardedTensor(x_spec, layout, mesh, blocks)
