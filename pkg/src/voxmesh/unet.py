"""U-Net recipe compiler: per-resolution block ladders and distributed execution.

The ladder is anchored at the 64-cube network: three encoder blocks of four
3x3x3 convolutions each, 256 filters in the first block, doubling after every
max-pool.  Each resolution doubling prepends one block with half the filters of
the current first block; halvings below 64 drop the deepest block.  The decoder
mirrors the encoder: nearest-neighbor x2 upsample, skip concat, then the same
number of convolutions at the mirrored filter count.  A 1x1x1 convolution maps
to class logits and a per-voxel softmax produces probabilities.

Pools happen between blocks, so an n-block network pools n-1 times and the last
encoder block is the bottleneck.  A global ``scale`` knob shrinks every filter
count (min 1) so full-size recipes fit on a desk while keeping the structure.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import halo as _halo
from . import ops as _ops
from .errors import GraphBuildError
from .sharding import Layout

ANCHOR_EXTENT = 64
ANCHOR_FILTERS = 256
ANCHOR_BLOCKS = 3


@dataclass(frozen=True)
class UNetConfig:
    input_extent: int
    encoder_filters: tuple
    convs_per_block: int = 4
    num_classes: int = 3
    in_channels: int = 1
    kernel: int = 3

    def __post_init__(self):
        if self.input_extent < 2:
            raise GraphBuildError(f"input extent {self.input_extent} too small")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise GraphBuildError(f"kernel extent must be odd, got {self.kernel}")
        if not self.encoder_filters:
            raise GraphBuildError("need at least one encoder block")
        for i, f in enumerate(self.encoder_filters):
            if f < 1:
                raise GraphBuildError(f"block {i} has {f} filters")
        for i in range(1, len(self.encoder_filters)):
            if self.encoder_filters[i] != 2 * self.encoder_filters[i - 1]:
                raise GraphBuildError(
                    f"filters must double after each pool: {self.encoder_filters}"
                )

    @property
    def n_blocks(self):
        return len(self.encoder_filters)

    def to_kv(self):
        lines = [
            f"input_extent = {self.input_extent}",
            f"encoder_filters = {','.join(str(f) for f in self.encoder_filters)}",
            f"convs_per_block = {self.convs_per_block}",
            f"num_classes = {self.num_classes}",
            f"in_channels = {self.in_channels}",
            f"kernel = {self.kernel}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text):
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
        return cls(
            input_extent=int(kv["input_extent"]),
            encoder_filters=tuple(int(x) for x in kv["encoder_filters"].split(",")),
            convs_per_block=int(kv.get("convs_per_block", 4)),
            num_classes=int(kv.get("num_classes", 3)),
            in_channels=int(kv.get("in_channels", 1)),
            kernel=int(kv.get("kernel", 3)),
        )


def recipe_for_resolution(extent, scale=1.0, convs_per_block=4, num_classes=3):
    """Block ladder for a cubic resolution, filters multiplied by ``scale`` (min 1)."""
    extent = int(extent)
    if extent < 8 or extent & (extent - 1):
        raise GraphBuildError(f"extent must be a power of two >= 8, got {extent}")
    exp = int(math.log2(extent))
    n_blocks = max(1, ANCHOR_BLOCKS + exp - int(math.log2(ANCHOR_EXTENT)))
    if extent >= ANCHOR_EXTENT:
        first = ANCHOR_FILTERS * ANCHOR_EXTENT // extent
    else:
        first = ANCHOR_FILTERS
    filters = tuple(
        max(1, round(first * (1 << i) * scale)) for i in range(n_blocks)
    )
    return UNetConfig(
        input_extent=extent,
        encoder_filters=filters,
        convs_per_block=convs_per_block,
        num_classes=num_classes,
    )


@dataclass(frozen=True)
class Node:
    id: str
    op: str  # conv | relu | pool | up | concat | softmax
    inputs: tuple
    k: int = 0
    c_in: int = 0
    c_out: int = 0
    level: int = 0


@dataclass
class LayerGraph:
    """Topologically ordered distributed ops with skip edges, tied to a mesh/layout."""

    config: UNetConfig
    nodes: list
    mesh: object = None
    layout: object = None
    output_id: str = "softmax"
    level_extents: dict = field(default_factory=dict)

    @property
    def conv_nodes(self):
        return [n for n in self.nodes if n.op == "conv"]

    @property
    def param_count(self):
        return sum(n.k ** 3 * n.c_in * n.c_out + n.c_out for n in self.conv_nodes)

    def receptive_field(self):
        """Input voxels influencing one output voxel (standard jump walk)."""
        rf, jump = 1, 1
        for n in self.nodes:
            if n.op == "conv":
                rf += (n.k - 1) * jump
            elif n.op == "pool":
                jump *= 2
            elif n.op == "up":
                jump = max(1, jump // 2)
        return rf

    def node(self, nid):
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    def describe(self):
        """Layer table: id, op, global output shape, params, forward halo bytes.

        Bytes assume one sample per batch-parallel worker.
        """
        rows = []
        b_axis = self.layout.axis_for("batch") if self.layout else None
        batch = self.mesh.axis_size(b_axis) if b_axis else 1
        for n in self.nodes:
            e = self.level_extents[n.id]
            shape = f"{e}^3 x{n.c_out}" if n.c_out else f"{e}^3"
            nparams = n.k ** 3 * n.c_in * n.c_out + n.c_out if n.op == "conv" else 0
            hbytes = 0
            if n.op == "conv" and n.k > 1 and self.mesh is not None:
                from .sharding import TensorSpec

                spec = TensorSpec(
                    (("batch", batch), ("x", e), ("y", e), ("z", e), ("c", n.c_in)),
                    "f32",
                )
                hbytes = _halo.exchange_byte_count(
                    spec, self.layout, self.mesh, _halo.HaloSpec.for_kernel(n.k)
                )
            rows.append((n.id, n.op, shape, nparams, hbytes))
        rows.append(("total", "", "", self.param_count, sum(r[4] for r in rows)))
        return rows


def _graph_nodes(cfg):
    nodes = []
    prev = "input"
    c_prev = cfg.in_channels
    skips = {}
    n = cfg.n_blocks
    for i, f in enumerate(cfg.encoder_filters):
        for j in range(cfg.convs_per_block):
            cid = f"enc{i}_conv{j}"
            nodes.append(Node(cid, "conv", (prev,), cfg.kernel, c_prev, f, i))
            rid = f"enc{i}_relu{j}"
            nodes.append(Node(rid, "relu", (cid,), 0, f, f, i))
            prev, c_prev = rid, f
        if i < n - 1:
            skips[i] = (prev, c_prev)
            pid = f"enc{i}_pool"
            nodes.append(Node(pid, "pool", (prev,), 0, f, f, i))
            prev = pid
    for i in range(n - 2, -1, -1):
        f = cfg.encoder_filters[i]
        uid = f"dec{i}_up"
        nodes.append(Node(uid, "up", (prev,), 0, c_prev, c_prev, i))
        skip_id, skip_c = skips[i]
        cat = f"dec{i}_cat"
        nodes.append(Node(cat, "concat", (uid, skip_id), 0, c_prev + skip_c, c_prev + skip_c, i))
        prev, c_prev = cat, c_prev + skip_c
        for j in range(cfg.convs_per_block):
            cid = f"dec{i}_conv{j}"
            nodes.append(Node(cid, "conv", (prev,), cfg.kernel, c_prev, f, i))
            rid = f"dec{i}_relu{j}"
            nodes.append(Node(rid, "relu", (cid,), 0, f, f, i))
            prev, c_prev = rid, f
    nodes.append(Node("head", "conv", (prev,), 1, c_prev, cfg.num_classes, 0))
    nodes.append(Node("softmax", "softmax", ("head",), 0, cfg.num_classes, cfg.num_classes, 0))
    return nodes


def build(config, mesh, layout):
    """Compile and validate the graph for a mesh/layout; shard geometry checked per level."""
    if isinstance(layout, dict):
        layout = Layout(layout)
    used_axes = {a for _, a in layout.assignments}
    for ax in mesh.axes:
        if ax.size > 1 and ax.name not in used_axes:
            raise GraphBuildError(
                f"mesh axis {ax.name!r} (size {ax.size}) is not used by the layout; "
                "replicated workers would double-count reductions"
            )
    margin = (config.kernel - 1) // 2
    for dim in ("x", "y", "z"):
        axis = layout.axis_for(dim)
        size = mesh.axis_size(axis) if axis else 1
        for level in range(config.n_blocks):
            extent = config.input_extent >> level
            if config.input_extent % (1 << level):
                raise GraphBuildError(
                    f"extent {config.input_extent} not divisible by 2^{level} at depth {level}"
                )
            if extent % size:
                raise GraphBuildError(
                    f"depth {level}: extent {extent} on dim {dim!r} is not divisible "
                    f"by mesh axis {axis!r} of size {size}"
                )
            local = extent // size
            if local < 1:
                raise GraphBuildError(
                    f"depth {level}: local extent on dim {dim!r} over axis {axis!r} "
                    f"is below one voxel"
                )
            if margin > local:
                raise GraphBuildError(
                    f"depth {level}: halo margin {margin} exceeds local extent {local} "
                    f"on dim {dim!r} (axis {axis!r}); use a smaller mesh axis or a "
                    "larger volume"
                )
            if level < config.n_blocks - 1 and local % 2:
                raise GraphBuildError(
                    f"depth {level}: pooling needs an even local extent on dim {dim!r}, "
                    f"got {local} (axis {axis!r})"
                )
    nodes = _graph_nodes(config)
    extents = {}
    cur = {"input": config.input_extent}
    for node in nodes:
        e = cur[node.inputs[0]] if node.inputs[0] in cur else extents[node.inputs[0]]
        if node.op == "pool":
            e = e // 2
        elif node.op == "up":
            e = e * 2
        extents[node.id] = e
    return LayerGraph(config, nodes, mesh=mesh, layout=layout, level_extents=extents)


def init_params(graph, seed, dtype=np.float32):
    """Fan-in-scaled uniform kernels (bound sqrt(6/fan_in)), zero biases.

    Deterministic: one generator seeded once, conv nodes drawn in graph order.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for n in graph.conv_nodes:
        fan_in = n.k ** 3 * n.c_in
        bound = math.sqrt(6.0 / fan_in)
        kernel = rng.uniform(-bound, bound, (n.k, n.k, n.k, n.c_in, n.c_out))
        params[n.id] = {
            "kernel": kernel.astype(dtype),
            "bias": np.zeros((n.c_out,), dtype=dtype),
        }
    return params


# ---------------------------------------------------------------------------
# Worker-side graph execution.
# ---------------------------------------------------------------------------


def _timed(counters, key):
    class _T:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, *exc):
            counters[key] = counters.get(key, 0.0) + (time.perf_counter() - self.t0)
            return False

    return _T() if counters is not None else _NULL


class _Null:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


_NULL = _Null()


def run_forward_local(ctx, graph, params, x, dims, save_tape=True, counters=None, phase_barrier=True):
    """Execute the graph on this worker's block; returns (probs, tape)."""
    acts = {"input": x}
    tape = {}
    for node in graph.nodes:
        a = acts[node.inputs[0]]
        if node.op == "conv":
            hs = _halo.HaloSpec.for_kernel(node.k)
            b0 = ctx.counters["p2p_bytes"]
            with _timed(counters, (node.id, "halo")):
                pb = _halo.exchange_local(ctx, dims, hs, _halo._FWD_TAG, phase_barrier, a)
            if counters is not None:
                counters[(node.id, "halo_bytes")] = (
                    counters.get((node.id, "halo_bytes"), 0) + ctx.counters["p2p_bytes"] - b0
                )
            p = params[node.id]
            with _timed(counters, (node.id, "conv_fwd")):
                out = _ops.conv3d_local(pb.data, p["kernel"], p["bias"])
            if save_tape:
                tape[node.id] = pb.data
        elif node.op == "relu":
            out = _ops.relu_local(a)
            if save_tape:
                tape[node.id] = a
        elif node.op == "pool":
            out, idx = _ops.maxpool2_local(a)
            if save_tape:
                tape[node.id] = (idx, a.shape)
        elif node.op == "up":
            out = _ops.upsample2_local(a)
        elif node.op == "concat":
            b2 = acts[node.inputs[1]]
            out = np.concatenate([a, b2], axis=-1)
            if save_tape:
                tape[node.id] = a.shape[-1]
        elif node.op == "softmax":
            out = _ops.softmax_channels_local(a)
            if save_tape:
                tape[node.id] = out
        else:  # pragma: no cover
            raise GraphBuildError(f"unknown op {node.op!r}")
        acts[node.id] = out
    return acts[graph.output_id], tape


def run_backward_local(
    ctx, graph, params, tape, dout, dims, counters=None, phase_barrier=True, reduce_grads=True
):
    """Backward pass; returns {node_id: (grad_kernel, grad_bias)} (all-reduced).

    Tape entries are consumed exactly once; activation gradients accumulate in
    reverse node order so fan-out joins are deterministic.
    """
    gacts = {graph.output_id: dout}

    def acc(nid, g):
        if nid == "input":
            return
        if nid in gacts:
            gacts[nid] = gacts[nid] + g
        else:
            gacts[nid] = g

    pgrads = {}
    for node in reversed(graph.nodes):
        g = gacts.pop(node.id, None)
        if g is None:
            continue
        if node.op == "conv":
            padded = tape.pop(node.id)
            with _timed(counters, (node.id, "conv_bwd")):
                gk, gb = _ops.conv3d_param_grads_local(g, padded, node.k)
            pgrads[node.id] = (gk, gb)
            if node.inputs[0] != "input":
                with _timed(counters, (node.id, "conv_bwd")):
                    gpad = _ops.conv3d_input_grad_local(g, params[node.id]["kernel"], padded.shape)
                hs = _halo.HaloSpec.for_kernel(node.k)
                b0 = ctx.counters["p2p_bytes"]
                with _timed(counters, (node.id, "halo")):
                    gx = _halo.exchange_backward_local(
                        ctx, dims, hs, _halo._BWD_TAG, phase_barrier, gpad
                    )
                if counters is not None:
                    counters[(node.id, "halo_bytes")] = (
                        counters.get((node.id, "halo_bytes"), 0)
                        + ctx.counters["p2p_bytes"]
                        - b0
                    )
                acc(node.inputs[0], gx)
        elif node.op == "relu":
            acc(node.inputs[0], _ops.relu_backward_local(g, tape.pop(node.id)))
        elif node.op == "pool":
            idx, in_shape = tape.pop(node.id)
            acc(node.inputs[0], _ops.maxpool2_backward_local(g, idx, in_shape))
        elif node.op == "up":
            acc(node.inputs[0], _ops.upsample2_backward_local(g))
        elif node.op == "concat":
            ca = tape.pop(node.id)
            acc(node.inputs[0], np.ascontiguousarray(g[..., :ca]))
            acc(node.inputs[1], np.ascontiguousarray(g[..., ca:]))
        elif node.op == "softmax":
            probs = tape.pop(node.id)
            acc(node.inputs[0], _ops.softmax_channels_backward_local(g, probs))
    if reduce_grads:
        with _timed(counters, ("grads", "collective")):
            for node in graph.conv_nodes:
                gk, gb = pgrads[node.id]
                pgrads[node.id] = (
                    ctx.all_reduce_sum(gk, tag=("gk", node.id)),
                    ctx.all_reduce_sum(gb, tag=("gb", node.id)),
                )
    return pgrads
