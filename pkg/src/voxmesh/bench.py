"""Per-phase timing and traffic instrumentation for training steps.

Runs a few steps with worker-side counters enabled and reports, per layer:
halo-exchange time and bytes, conv forward/backward time, collective time, and
the residual "other" bucket.  Phase times are averaged over workers (they
overlap under the interpreter lock), and halo time includes the wait at the
per-axis synchronization points, as in MPI-style profiles.  The overhead
fraction (partitioning + halo as a share of the total) is logged, never
asserted: simulated in-process workers need not reproduce accelerator-pod
ratios.

Per-layer bytes are also checked against the analytic surface formula; those
must match exactly on any mesh.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import halo as _halo
from . import ops as _ops
from . import training as _training
from . import unet as _unet
from .sharding import TensorSpec, resolve_dtype, shard


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)  # (layer, phase, wall_ms, bytes)
    total_wall_ms: float = 0.0
    shard_ms: float = 0.0
    steps: int = 0
    bytes_match_analytic: bool = True
    flops: int = 0  # analytic multiply-add count (x2) over the whole run

    @property
    def phase_totals(self):
        tot = {}
        for _, phase, ms, nbytes in self.rows:
            t, b = tot.get(phase, (0.0, 0))
            tot[phase] = (t + ms, b + nbytes)
        return tot

    @property
    def overhead_fraction(self):
        halo_ms = self.phase_totals.get("halo", (0.0, 0))[0]
        denom = max(self.total_wall_ms, 1e-9)
        return (halo_ms + self.shard_ms) / denom

    def to_csv(self):
        lines = ["layer,phase,wall_ms,bytes"]
        for layer, phase, ms, nbytes in self.rows:
            lines.append(f"{layer},{phase},{ms:.3f},{nbytes}")
        lines.append(f"total,shard,{self.shard_ms:.3f},0")
        lines.append(f"total,all,{self.total_wall_ms:.3f},0")
        return "\n".join(lines) + "\n"

    def summary(self):
        lines = [f"bench over {self.steps} step(s); total wall {self.total_wall_ms:.1f} ms"]
        for phase, (ms, nbytes) in sorted(self.phase_totals.items()):
            share = 100.0 * ms / max(self.total_wall_ms, 1e-9)
            extra = f", {nbytes} bytes" if nbytes else ""
            lines.append(f"  {phase:<12} {ms:9.1f} ms ({share:5.1f}%){extra}")
        lines.append(f"  {'shard/gather':<12} {self.shard_ms:9.1f} ms")
        gflops = self.flops / max(self.total_wall_ms, 1e-9) / 1e6
        lines.append(f"analytic forward flops: {self.flops / 1e9:.2f} GFLOP ({gflops:.2f} GFLOP/s)")
        lines.append(
            f"partitioning overhead fraction (halo + shard) / total = {self.overhead_fraction:.3f}"
        )
        lines.append(f"per-layer bytes match analytic formula: {self.bytes_match_analytic}")
        return "\n".join(lines)


def _analytic_layer_bytes(graph, batch, dtype):
    """Forward+backward halo bytes per conv layer for one step."""
    out = {}
    for node in graph.conv_nodes:
        if node.k <= 1:
            out[node.id] = 0
            continue
        e = graph.level_extents[node.id]
        spec = TensorSpec(
            (("batch", batch), ("x", e), ("y", e), ("z", e), ("c", node.c_in)), dtype
        )
        hs = _halo.HaloSpec.for_kernel(node.k)
        fwd = _halo.exchange_byte_count(spec, graph.layout, graph.mesh, hs, "forward")
        first = node.inputs[0] == "input"
        bwd = 0 if first else _halo.exchange_byte_count(spec, graph.layout, graph.mesh, hs, "backward")
        out[node.id] = fwd + bwd
    return out


def run_bench(graph, records, cfg, steps=2):
    """Train ``steps`` steps with counters on; returns a BenchReport."""
    mesh, layout = graph.mesh, graph.layout
    dtype = resolve_dtype(cfg.dtype)
    rc = _training._run_ctx(graph, cfg, cfg.batch_size)
    img_spec, oh_spec = _training._batch_spec(graph, cfg.batch_size, rc.num_classes, dtype)
    dims = _halo.dim_axes(img_spec, layout)

    params = _unet.init_params(graph, cfg.seed, dtype)
    moments = _training.SGDMomentum(cfg.lr, cfg.momentum).init_state(params)
    mesh.run(_training._install_state, params, moments)
    source = _training.BatchSource(
        records, cfg.batch_size, cfg.seed, rc.num_classes, dtype, cfg.augment
    )

    counters = [dict() for _ in range(mesh.worker_count)]
    report = BenchReport(steps=steps)
    t_run = time.perf_counter()
    for step in range(steps):
        img, oh = source.batch(step)
        t0 = time.perf_counter()
        img_st = shard(img, img_spec, layout, mesh)
        oh_st = shard(oh, oh_spec, layout, mesh)
        report.shard_ms += (time.perf_counter() - t0) * 1e3
        mesh.run(
            _training._train_step, graph, dims, rc,
            per_worker=(counters, img_st.blocks, oh_st.blocks),
        )
    report.total_wall_ms = (time.perf_counter() - t_run) * 1e3

    # Times average over workers (they overlap under the GIL; each worker is
    # always inside exactly one phase, so the average is comparable to the
    # driver wall clock).  Bytes sum: total traffic is what the formula counts.
    merged_ms = {}
    merged_bytes = {}
    for c in counters:
        for key, val in c.items():
            layer, phase = key
            if phase == "halo_bytes":
                merged_bytes[layer] = merged_bytes.get(layer, 0) + int(val)
            else:
                merged_ms[(layer, phase)] = (
                    merged_ms.get((layer, phase), 0.0) + val * 1e3 / mesh.worker_count
                )
    for node in graph.nodes:
        e = graph.level_extents[node.id]
        shape = (cfg.batch_size, e, e, e, node.c_out)
        report.flops += steps * _ops.analytic_flops(
            "conv" if node.op == "conv" else node.op, shape, k=node.k, c_in=node.c_in
        )
    analytic = _analytic_layer_bytes(graph, cfg.batch_size, dtype)
    layers = [n.id for n in graph.conv_nodes]
    for layer in layers:
        measured = merged_bytes.get(layer, 0)
        expected = analytic[layer] * steps
        if measured != expected:
            report.bytes_match_analytic = False
        for phase in ("halo", "conv_fwd", "conv_bwd"):
            ms = merged_ms.get((layer, phase), 0.0)
            report.rows.append((layer, phase, ms, measured if phase == "halo" else 0))
    report.rows.append(
        ("grads", "collective", merged_ms.get(("grads", "collective"), 0.0), 0)
    )
    attributed = sum(ms for _, _, ms, _ in report.rows)
    report.rows.append(("all", "other", max(0.0, report.total_wall_ms - report.shard_ms - attributed), 0))
    return report
