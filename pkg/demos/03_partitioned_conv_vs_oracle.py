"""The core claim: partitioned convolution equals single-device convolution.

Runs the same random 3D convolution on four different meshes and compares the
gathered outputs against a direct single-device computation — not to a
tolerance, but bitwise.  The accumulation order is fixed (kernel-index major)
and the channel contraction is shape-independent, so partitioning cannot
change a single ulp.
"""

import numpy as np

from voxmesh import ConvParams, DeviceMesh, Layout, TensorSpec, conv3d_forward, gather, shard
from voxmesh.oracle import conv3d_dense

rng = np.random.default_rng(7)
spec = TensorSpec((("batch", 2), ("x", 12), ("y", 12), ("z", 12), ("c", 3)))
x = rng.standard_normal(spec.shape).astype(np.float32)
kernel = rng.standard_normal((3, 3, 3, 3, 4)).astype(np.float32)
bias = rng.standard_normal(4).astype(np.float32)

reference = conv3d_dense(x, kernel, bias)
print("single-device reference:", reference.shape, reference.dtype)

meshes = [
    ([("one", 1)], {}),
    ([("mx", 2)], {"x": "mx"}),
    ([("b", 2), ("mz", 2)], {"batch": "b", "z": "mz"}),
    ([("mx", 2), ("my", 2), ("mz", 2)], {"x": "mx", "y": "my", "z": "mz"}),
]
for axes, assignment in meshes:
    with DeviceMesh(axes) as mesh:
        st = shard(x, spec, Layout(assignment), mesh)
        out, _ = conv3d_forward(st, ConvParams(kernel, bias))
        equal = np.array_equal(gather(out), reference)
        print(f"{mesh.describe():<22} workers={mesh.worker_count:<3} bitwise equal: {equal}")
