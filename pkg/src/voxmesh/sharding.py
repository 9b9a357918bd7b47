"""Global tensors realized as equal-shaped per-worker blocks.

A ``TensorSpec`` names and sizes every dimension; a ``Layout`` maps a subset of
tensor dimensions onto mesh axes.  ``shard`` cuts a dense array into one block
per worker, ``gather`` reassembles it bit-exactly.  Dimension order is fixed as
(batch, spatial..., channels) with the channel dimension named ``"c"``; blocks
are row-major with the last dimension fastest.

Channels and batch are never halo-exchanged; only spatial dimensions may carry
halos, and the channel dimension may never be sharded at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShardingError

DTYPES = {"f32": np.float32, "f64": np.float64, "u8": np.uint8}
CHANNEL_DIM = "c"
BATCH_DIM = "batch"


def resolve_dtype(dtype):
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ShardingError(f"unsupported dtype {dtype!r}; pick from {sorted(DTYPES)}")
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64), np.dtype(np.uint8)):
        raise ShardingError(f"unsupported dtype {dt}; pick from {sorted(DTYPES)}")
    return dt


@dataclass(frozen=True)
class TensorSpec:
    """Ordered (name, extent) dims plus a dtype from {f32, f64, u8}."""

    dims: tuple
    dtype: object = "f32"

    def __post_init__(self):
        dims = tuple((str(n), int(e)) for n, e in self.dims)
        names = [n for n, _ in dims]
        if len(set(names)) != len(names):
            raise ShardingError(f"duplicate dim names in {names}")
        for n, e in dims:
            if e < 1:
                raise ShardingError(f"dim {n!r} has non-positive extent {e}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "dtype", resolve_dtype(self.dtype))

    @property
    def names(self):
        return tuple(n for n, _ in self.dims)

    @property
    def shape(self):
        return tuple(e for _, e in self.dims)

    def extent(self, name):
        for n, e in self.dims:
            if n == name:
                return e
        raise ShardingError(f"no dim named {name!r} in {self.names}")

    def index(self, name):
        for i, (n, _) in enumerate(self.dims):
            if n == name:
                return i
        raise ShardingError(f"no dim named {name!r} in {self.names}")


@dataclass(frozen=True)
class Layout:
    """Partial map tensor-dim name -> mesh-axis name.

    No two tensor dims may share a mesh axis, the channel dim may never be
    assigned, and every assigned dim's extent must divide by its axis size.
    """

    assignments: tuple

    def __init__(self, assignments):
        if isinstance(assignments, dict):
            assignments = tuple(sorted(assignments.items()))
        else:
            assignments = tuple((str(d), str(a)) for d, a in assignments)
        object.__setattr__(self, "assignments", assignments)
        axes = [a for _, a in assignments]
        if len(set(axes)) != len(axes):
            raise ShardingError(f"two tensor dims map to one mesh axis in {assignments}")
        for d, _ in assignments:
            if d == CHANNEL_DIM:
                raise ShardingError("channel dimension is never assigned to a mesh axis")

    def axis_for(self, dim):
        for d, a in self.assignments:
            if d == dim:
                return a
        return None

    def validate(self, spec, mesh):
        for d, a in self.assignments:
            if d not in spec.names:
                raise ShardingError(f"layout assigns unknown dim {d!r} (have {spec.names})")
            if a not in mesh.axis_index:
                raise ShardingError(f"layout uses unknown mesh axis {a!r}")
            size = mesh.axis_size(a)
            ext = spec.extent(d)
            if ext % size != 0:
                raise ShardingError(
                    f"dim {d!r} extent {ext} is not divisible by mesh axis "
                    f"{a!r} of size {size}"
                )

    def as_dict(self):
        return dict(self.assignments)


def local_shape(spec, layout, mesh):
    """Block shape shared by every worker: assigned extents divided by axis size."""
    shape = []
    for n, e in spec.dims:
        a = layout.axis_for(n)
        shape.append(e // mesh.axis_size(a) if a else e)
    return tuple(shape)


def local_slices(spec, layout, mesh, coord):
    """Global-index slices of the block owned by the worker at ``coord``."""
    slices = []
    for n, e in spec.dims:
        a = layout.axis_for(n)
        if a is None:
            slices.append(slice(0, e))
        else:
            k = e // mesh.axis_size(a)
            c = coord[mesh.axis_index[a]]
            slices.append(slice(c * k, (c + 1) * k))
    return tuple(slices)


class ShardedTensor:
    """A global logical tensor held as one dense block per worker.

    Concatenating the blocks in coordinate order reconstructs the global tensor
    exactly; all blocks share one shape.  A block is owned by its worker; the
    driver only touches global data through :func:`shard` and :func:`gather`.
    """

    def __init__(self, spec, layout, mesh, blocks):
        layout.validate(spec, mesh)
        exp = local_shape(spec, layout, mesh)
        if len(blocks) != mesh.worker_count:
            raise ShardingError(
                f"need {mesh.worker_count} blocks, got {len(blocks)}"
            )
        for r, b in enumerate(blocks):
            if b.shape != exp or b.dtype != spec.dtype:
                raise ShardingError(
                    f"block {mesh.coords[r]}: shape {b.shape} dtype {b.dtype}, "
                    f"expected {exp} {spec.dtype}"
                )
        self.spec = spec
        self.layout = layout
        self.mesh = mesh
        self.blocks = list(blocks)

    @property
    def local_shape(self):
        return self.blocks[0].shape

    @property
    def global_shape(self):
        return self.spec.shape

    def block(self, rank):
        return self.blocks[rank]

    def map_blocks(self, fn, spec=None):
        """New ShardedTensor with ``fn`` applied to every block (driver-side)."""
        blocks = [fn(b) for b in self.blocks]
        return ShardedTensor(spec or self.spec, self.layout, self.mesh, blocks)


def shard(global_arr, spec, layout, mesh):
    """Cut a dense global array into per-worker blocks (zero inter-worker copies)."""
    global_arr = np.asarray(global_arr)
    if global_arr.shape != spec.shape:
        raise ShardingError(f"array shape {global_arr.shape} != spec shape {spec.shape}")
    if global_arr.dtype != spec.dtype:
        raise ShardingError(f"array dtype {global_arr.dtype} != spec dtype {spec.dtype}")
    layout.validate(spec, mesh)
    blocks = [
        np.ascontiguousarray(global_arr[local_slices(spec, layout, mesh, coord)])
        for coord in mesh.coords
    ]
    return ShardedTensor(spec, layout, mesh, blocks)


def gather(st):
    """Reassemble the dense global tensor, bitwise."""
    out = np.empty(st.spec.shape, dtype=st.spec.dtype)
    for coord, block in zip(st.mesh.coords, st.blocks):
        out[local_slices(st.spec, st.layout, st.mesh, coord)] = block
    return out
