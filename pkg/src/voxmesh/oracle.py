"""Single-device reference implementations used as ground truth.

Every distributed-equivalence test compares against these.  The convolution
inner loop is a deliberate re-implementation rather than a call into
:mod:`voxmesh.ops`, so a bug in shared logic cannot vouch for itself; the
accumulation order (bias, then kernel offsets kz-ky-kx major, channel
contraction inside) is the same by construction, which is what makes bitwise
forward equality achievable.

Also home to the central finite-difference gradient checker and the
equivalence suite behind the ``verify`` CLI subcommand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import VoxmeshError


def conv3d_dense(x, kernel, bias):
    """SAME zero-padded direct convolution of a dense [b,z,y,x,c] tensor."""
    k = kernel.shape[0]
    c_in, c_out = kernel.shape[3], kernel.shape[4]
    if x.shape[-1] != c_in:
        raise VoxmeshError(f"input has {x.shape[-1]} channels, kernel wants {c_in}")
    m = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (m, m), (m, m), (m, m), (0, 0)))
    b, zs, ys, xs = x.shape[0], x.shape[1], x.shape[2], x.shape[3]
    out = np.empty((b, zs, ys, xs, c_out), dtype=x.dtype)
    out[...] = bias.astype(x.dtype, copy=False)
    flat = out.reshape(-1, c_out)
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                win = np.ascontiguousarray(
                    xp[:, dz : dz + zs, dy : dy + ys, dx : dx + xs, :]
                ).reshape(-1, c_in)
                flat += np.einsum("vc,cf->vf", win, kernel[dz, dy, dx], optimize=False)
    return out


def conv3d_dense_backward(gout, x, kernel):
    """Returns (grad_x, grad_kernel, grad_bias) for the SAME-padded conv."""
    k = kernel.shape[0]
    c_in, c_out = kernel.shape[3], kernel.shape[4]
    m = (k - 1) // 2
    b, zs, ys, xs = gout.shape[0], gout.shape[1], gout.shape[2], gout.shape[3]
    gxp = np.zeros((b, zs + 2 * m, ys + 2 * m, xs + 2 * m, c_in), dtype=gout.dtype)
    gflat = np.ascontiguousarray(gout).reshape(-1, c_out)
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                c = np.einsum("vf,cf->vc", gflat, kernel[dz, dy, dx], optimize=False)
                gxp[:, dz : dz + zs, dy : dy + ys, dx : dx + xs, :] += c.reshape(
                    b, zs, ys, xs, c_in
                )
    gx = gxp[:, m : m + zs, m : m + ys, m : m + xs, :] if m else gxp
    gx = np.ascontiguousarray(gx)

    xp = np.pad(x, ((0, 0), (m, m), (m, m), (m, m), (0, 0)))
    gk = np.zeros_like(kernel)
    gb = np.zeros((c_out,), dtype=gout.dtype)
    for s in range(b):
        gs = np.ascontiguousarray(gout[s]).reshape(-1, c_out)
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    win = np.ascontiguousarray(
                        xp[s, dz : dz + zs, dy : dy + ys, dx : dx + xs, :]
                    ).reshape(-1, c_in)
                    gk[dz, dy, dx] += win.T @ gs
        gb += gs.sum(axis=0)
    return gx, gk, gb


def maxpool2_dense(x):
    b, zs, ys, xs, c = x.shape
    cells = (
        x.reshape(b, zs // 2, 2, ys // 2, 2, xs // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4, 6, 7)
        .reshape(b, zs // 2, ys // 2, xs // 2, 8, c)
    )
    idx = cells.argmax(axis=4)
    return np.take_along_axis(cells, idx[..., None, :], axis=4)[..., 0, :], idx


def maxpool2_dense_backward(gout, idx, in_shape):
    b, zs, ys, xs, c = in_shape
    g = np.zeros((b, zs // 2, ys // 2, xs // 2, 8, c), dtype=gout.dtype)
    np.put_along_axis(g, idx[..., None, :], gout[..., None, :], axis=4)
    return (
        g.reshape(b, zs // 2, ys // 2, xs // 2, 2, 2, 2, c)
        .transpose(0, 1, 4, 2, 5, 3, 6, 7)
        .reshape(in_shape)
    )


def upsample2_dense(x):
    return np.repeat(np.repeat(np.repeat(x, 2, axis=1), 2, axis=2), 2, axis=3)


def upsample2_dense_backward(gout):
    b, zs, ys, xs, c = gout.shape
    return gout.reshape(b, zs // 2, 2, ys // 2, 2, xs // 2, 2, c).sum(axis=(2, 4, 6))


def softmax_dense(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_dense_backward(gout, probs):
    dot = (gout * probs).sum(axis=-1, keepdims=True)
    return probs * (gout - dot)


# ---------------------------------------------------------------------------
# Full dense network over the same LayerGraph.
# ---------------------------------------------------------------------------


def oracle_forward(graph, params, x, save_tape=True):
    """Dense forward over a LayerGraph; consumes the same parameter store."""
    acts = {"input": x}
    tape = {}
    for node in graph.nodes:
        a = acts[node.inputs[0]]
        if node.op == "conv":
            p = params[node.id]
            out = conv3d_dense(a, p["kernel"], p["bias"])
            if save_tape:
                tape[node.id] = a
        elif node.op == "relu":
            out = np.maximum(a, 0)
            if save_tape:
                tape[node.id] = a
        elif node.op == "pool":
            out, idx = maxpool2_dense(a)
            if save_tape:
                tape[node.id] = (idx, a.shape)
        elif node.op == "up":
            out = upsample2_dense(a)
        elif node.op == "concat":
            b2 = acts[node.inputs[1]]
            out = np.concatenate([a, b2], axis=-1)
            if save_tape:
                tape[node.id] = a.shape[-1]
        elif node.op == "softmax":
            out = softmax_dense(a)
            if save_tape:
                tape[node.id] = out
        else:  # pragma: no cover
            raise VoxmeshError(f"unknown op {node.op!r}")
        acts[node.id] = out
    return acts[graph.output_id], tape


def oracle_backward(graph, params, tape, dout):
    """Dense backward; returns ({node_id: (gk, gb)}, grad_input)."""
    gacts = {graph.output_id: dout}
    grad_input = None

    def acc(nid, g):
        nonlocal grad_input
        if nid == "input":
            grad_input = g if grad_input is None else grad_input + g
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
            x = tape.pop(node.id)
            gx, gk, gb = conv3d_dense_backward(g, x, params[node.id]["kernel"])
            pgrads[node.id] = (gk, gb)
            acc(node.inputs[0], gx)
        elif node.op == "relu":
            x = tape.pop(node.id)
            acc(node.inputs[0], np.where(x > 0, g, np.zeros((), dtype=g.dtype)))
        elif node.op == "pool":
            idx, in_shape = tape.pop(node.id)
            acc(node.inputs[0], maxpool2_dense_backward(g, idx, in_shape))
        elif node.op == "up":
            acc(node.inputs[0], upsample2_dense_backward(g))
        elif node.op == "concat":
            ca = tape.pop(node.id)
            acc(node.inputs[0], np.ascontiguousarray(g[..., :ca]))
            acc(node.inputs[1], np.ascontiguousarray(g[..., ca:]))
        elif node.op == "softmax":
            probs = tape.pop(node.id)
            acc(node.inputs[0], softmax_dense_backward(g, probs))
    return pgrads, grad_input


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.
# ---------------------------------------------------------------------------


@dataclass
class FdReport:
    """Per-block relative errors: max|fd - analytic| / max(max|analytic|, floor)."""

    block_errors: dict = field(default_factory=dict)
    tol: float = 1e-5

    @property
    def max_rel_err(self):
        return max(self.block_errors.values()) if self.block_errors else 0.0

    @property
    def passed(self):
        return self.max_rel_err <= self.tol

    def failures(self):
        return {k: v for k, v in self.block_errors.items() if v > self.tol}


def grads_as_param_dict(pgrads):
    """{nid: (gk, gb)} -> {nid: {kernel, bias}}, the shape of a parameter store."""
    return {nid: {"kernel": gk, "bias": gb} for nid, (gk, gb) in pgrads.items()}


def finite_difference_check(f, grad_fn, params, h=1e-6, tol=1e-5):
    """Central differences of scalar ``f(params)`` vs ``grad_fn(params)``.

    ``params`` is {name: {key: array}}; arrays should be float64.  Perturbs
    every element; reports the max relative error per parameter block, scaled
    by that block's largest analytic gradient.
    """
    analytic = grad_fn(params)
    report = FdReport(tol=tol)
    for nid, blocks in params.items():
        for key, arr in blocks.items():
            an = np.asarray(analytic[nid][key], dtype=np.float64)
            fd = np.zeros_like(an)
            flat = arr.reshape(-1)
            fdf = fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(params)
                flat[i] = orig - h
                fm = f(params)
                flat[i] = orig
                fdf[i] = (fp - fm) / (2 * h)
            scale = max(np.abs(an).max(), 1e-12)
            report.block_errors[f"{nid}.{key}"] = float(np.abs(fd - an).max() / scale)
    return report


# ---------------------------------------------------------------------------
# Equivalence suite (the `verify` subcommand).
# ---------------------------------------------------------------------------


@dataclass
class VerificationResult:
    checks: list = field(default_factory=list)  # (name, passed, detail)

    def add(self, name, passed, detail=""):
        self.checks.append((name, bool(passed), detail))

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.checks)

    def summary(self):
        lines = []
        for name, ok, detail in self.checks:
            mark = "PASS" if ok else "FAIL"
            lines.append(f"[{mark}] {name}" + (f" ({detail})" if detail else ""))
        n_bad = sum(1 for _, ok, _ in self.checks if not ok)
        lines.append(f"{len(self.checks) - n_bad}/{len(self.checks)} checks passed")
        return "\n".join(lines)


def run_verification(
    spatial_shapes=None, dp_sizes=(1, 2), seeds=20, extent=12, timeout=30.0, gradients=True
):
    """Distributed-vs-oracle equivalence over mesh shapes and random seeds.

    For every mesh in ``spatial_shapes x dp_sizes`` and every seed: a random
    input and 3x3x3 conv must gather bitwise-equal to :func:`conv3d_dense`;
    halo-padded blocks must equal windows of the zero-padded gathered tensor;
    measured exchange bytes must equal the analytic count; conv backward is
    checked bitwise on the single-worker mesh.  With ``gradients=True`` the
    suite finishes with the halo adjoint identity (f64, 1e-12) and a central
    finite-difference check of a small end-to-end network.
    """
    from . import halo as _halo
    from . import ops as _ops
    from .mesh import DeviceMesh
    from .sharding import Layout, TensorSpec, gather, shard

    if spatial_shapes is None:
        spatial_shapes = [
            (1, 1, 1), (2, 1, 1), (1, 2, 1), (1, 1, 2),
            (2, 2, 1), (2, 1, 2), (1, 2, 2), (2, 2, 2),
        ]
    result = VerificationResult()
    for dp in dp_sizes:
        for shape in spatial_shapes:
            axes = [("b", dp), ("mx", shape[0]), ("my", shape[1]), ("mz", shape[2])]
            assignments = {"batch": "b"}
            for dim, ax, size in zip(("x", "y", "z"), ("mx", "my", "mz"), shape):
                if size > 1:
                    assignments[dim] = ax
            layout = Layout(assignments)
            mesh = DeviceMesh(axes, timeout=timeout)
            try:
                fwd_ok, halo_ok, bytes_ok, bwd_ok = True, True, True, True
                for seed in range(seeds):
                    rng = np.random.default_rng((seed + 1) * 7919 + dp)
                    c_in = int(rng.integers(2, 5))
                    c_out = int(rng.integers(2, 5))
                    spec = TensorSpec(
                        (("batch", 2 * dp), ("x", extent), ("y", extent), ("z", extent), ("c", c_in)),
                        "f32",
                    )
                    x = rng.standard_normal(spec.shape).astype(np.float32)
                    kernel = rng.standard_normal((3, 3, 3, c_in, c_out)).astype(np.float32)
                    bias = rng.standard_normal((c_out,)).astype(np.float32)
                    st = shard(x, spec, layout, mesh)

                    hs = _halo.HaloSpec.for_kernel(3)
                    counters0 = mesh.run(lambda ctx: ctx.counters["p2p_bytes"])
                    padded = _halo.halo_exchange(st, hs)
                    counters1 = mesh.run(lambda ctx: ctx.counters["p2p_bytes"])
                    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
                    from .sharding import local_slices

                    for rank, coord in enumerate(mesh.coords):
                        sl = local_slices(spec, layout, mesh, coord)
                        w = [slice(sl[0].start, sl[0].stop)]
                        for d in range(1, 4):
                            w.append(slice(sl[d].start, sl[d].stop + 2))
                        w.append(sl[4])
                        if not np.array_equal(padded[rank].data, xp[tuple(w)]):
                            halo_ok = False
                    measured = sum(b1 - b0 for b0, b1 in zip(counters0, counters1))
                    analytic = _halo.exchange_byte_count(spec, layout, mesh, hs)
                    if measured != analytic:
                        bytes_ok = False

                    out, tape = _ops.conv3d_forward(st, _ops.ConvParams(kernel, bias))
                    ref = conv3d_dense(x, kernel, bias)
                    if not np.array_equal(gather(out), ref):
                        fwd_ok = False

                    if mesh.worker_count == 1:
                        gout = rng.standard_normal(ref.shape).astype(np.float32)
                        gspec = TensorSpec(
                            tuple(
                                (n, e if n != "c" else c_out) for n, e in spec.dims
                            ),
                            "f32",
                        )
                        gst = shard(gout, gspec, layout, mesh)
                        gx, gk, gb = _ops.conv3d_backward(gst, tape)
                        rgx, rgk, rgb = conv3d_dense_backward(gout, x, kernel)
                        if not (
                            np.array_equal(gather(gx), rgx)
                            and np.array_equal(gk, rgk)
                            and np.array_equal(gb, rgb)
                        ):
                            bwd_ok = False
                name = f"mesh b={dp} spatial={shape} seeds={seeds}"
                result.add(f"conv forward bitwise vs oracle [{name}]", fwd_ok)
                result.add(f"halo slice-of-global bitwise [{name}]", halo_ok)
                result.add(f"halo bytes == analytic [{name}]", bytes_ok)
                if dp == 1 and shape == (1, 1, 1):
                    result.add(f"conv backward bitwise on single worker [{name}]", bwd_ok)
            finally:
                mesh.shutdown()
    if gradients:
        adj_err, fd_report = _gradient_suite(timeout)
        result.add("halo adjoint inner-product identity (f64)", adj_err <= 1e-12, f"{adj_err:.2e}")
        result.add(
            "small U-Net finite-difference check (f64)",
            fd_report.passed,
            f"max rel err {fd_report.max_rel_err:.2e}",
        )
    return result


def _gradient_suite(timeout):
    from . import halo as _halo
    from . import training as _training
    from . import unet as _unet
    from .mesh import DeviceMesh
    from .sharding import Layout, TensorSpec, gather, shard

    rng = np.random.default_rng(17)
    adj_err = 0.0
    with DeviceMesh([("mx", 2), ("my", 2)], timeout=timeout) as mesh:
        spec = TensorSpec((("batch", 1), ("x", 8), ("y", 8), ("z", 4), ("c", 2)), "f64")
        layout = Layout({"x": "mx", "y": "my"})
        halo = _halo.HaloSpec.for_kernel(3)
        for _ in range(5):
            x = rng.standard_normal(spec.shape)
            st = shard(x, spec, layout, mesh)
            padded = _halo.halo_exchange(st, halo)
            ys = [rng.standard_normal(p.data.shape) for p in padded]
            lhs = sum(float((p.data * y).sum()) for p, y in zip(padded, ys))
            back = _halo.halo_exchange_backward(ys, spec, layout, mesh, halo)
            rhs = float((x * gather(back)).sum())
            adj_err = max(adj_err, abs(lhs - rhs) / max(abs(lhs), abs(rhs)))

    cfg_net = _unet.UNetConfig(6, (2, 4), convs_per_block=1)
    with DeviceMesh([("one", 1)], timeout=timeout) as mesh:
        graph = _unet.build(cfg_net, mesh, Layout({}))
        params = _unet.init_params(graph, 1, np.float64)
        x = rng.standard_normal((1, 6, 6, 6, 1))
        labels = rng.integers(0, 3, (1, 6, 6, 6)).astype(np.uint8)
        oh = _training.one_hot(labels, 3, np.float64)
        rc = _training._RunCtx(3, (1, 2), 0.9, 0.1, 1e-12, 6 ** 3, 0.0, 0.0, param_order=())
        spec = TensorSpec((("batch", 1), ("x", 6), ("y", 6), ("z", 6), ("c", 1)), "f64")
        dims = _halo.dim_axes(spec, graph.layout)

        def f(p):
            def prog(ctx):
                probs, _ = _unet.run_forward_local(ctx, graph, p, x, dims, save_tape=False)
                stats = ctx.all_reduce_sum(_training.loss_stats_local(probs, oh), tag="s")
                return _training.losses_from_stats(stats, rc)[0]

            return mesh.run(prog)[0]

        def grad_fn(p):
            def prog(ctx):
                probs, tape = _unet.run_forward_local(ctx, graph, p, x, dims)
                stats = ctx.all_reduce_sum(_training.loss_stats_local(probs, oh), tag="s")
                d = _training.loss_grad_local(probs, oh, stats, rc)
                return _unet.run_backward_local(ctx, graph, p, tape, d, dims)

            return grads_as_param_dict(mesh.run(prog)[0])

        fd_report = finite_difference_check(f, grad_fn, params, h=1e-6, tol=1e-5)
    return adj_err, fd_report
