"""Where does a partitioned training step spend its time?

Runs two instrumented steps on a 2x2x2 spatial mesh and prints the per-phase
breakdown: halo exchange, convolution forward/backward, gradient collectives,
and everything else, plus per-layer exchange traffic checked against the
analytic surface formula.
"""

import numpy as np

from voxmesh import DeviceMesh, Layout, TrainConfig
from voxmesh.bench import run_bench
from voxmesh.data_io import synthesize_record
from voxmesh.unet import build, recipe_for_resolution

config = recipe_for_resolution(32, scale=1 / 32)
records = [synthesize_record(32, np.random.default_rng(i), f"bench{i}") for i in range(2)]

with DeviceMesh([("mx", 2), ("my", 2), ("mz", 2)]) as mesh:
    graph = build(config, mesh, Layout({"x": "mx", "y": "my", "z": "mz"}))
    report = run_bench(graph, records, TrainConfig(batch_size=1, log_every=0), steps=2)

print(report.summary())
print()
print("per-layer halo traffic (fwd+bwd bytes per step x steps):")
for layer, phase, ms, nbytes in report.rows:
    if phase == "halo" and nbytes:
        print(f"  {layer:<12} {nbytes:>10} bytes  {ms:8.1f} ms")
