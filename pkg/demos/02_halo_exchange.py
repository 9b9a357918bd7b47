"""Halo exchange in one dimension, small enough to read by eye.

Each worker owns a slab of the global array.  Before a windowed op it receives
one margin plane from each neighbor (zeros at the global boundary), so its
padded block is exactly the window a single device would see of the
zero-padded global tensor.  The backward pass returns margin gradients to
their owners and accumulates.
"""

import numpy as np

from voxmesh import DeviceMesh, HaloSpec, Layout, TensorSpec, gather, shard
from voxmesh.halo import exchange_byte_count, halo_exchange, halo_exchange_backward

mesh = DeviceMesh([("ax", 2)])
spec = TensorSpec((("x", 8),))
layout = Layout({"x": "ax"})
halo = HaloSpec((("x", 1, 1),))

x = np.arange(8, dtype=np.float32)
st = shard(x, spec, layout, mesh)
print("global:", x)
print("blocks:", [b.tolist() for b in st.blocks])

padded = halo_exchange(st, halo)
for rank, pb in enumerate(padded):
    print(f"worker {rank} padded: {pb.data.tolist()}  faces: {pb.faces}")

analytic = exchange_byte_count(spec, layout, mesh, halo)
print(f"bytes exchanged (analytic surface formula): {analytic}")

# the adjoint: margin gradients flow back and add onto boundary voxels
grads = [np.ones(6, np.float32), np.ones(6, np.float32)]
back = halo_exchange_backward(grads, spec, layout, mesh, halo)
print("backward of all-ones padded gradients:", gather(back).tolist())

mesh.shutdown()
