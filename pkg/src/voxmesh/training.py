"""Loss, metrics, optimizer, and the distributed training/evaluation loops.

The combined loss is ``0.9 x soft-Dice + 0.1 x cross-entropy`` over per-voxel
class probabilities, with all sums taken globally: every worker computes
per-sample partial statistics over its block, the partials are all-reduced in
coordinate order, and both the scalar loss and the per-voxel gradient are then
evaluated from the identical reduced statistics on every worker.  Parameter
gradients are likewise all-reduced, so after each optimizer step the parameter
copies on all workers remain bitwise identical.

Evaluation reports hard-label tumor Dice two ways: ``dice_per_case`` (mean of
per-volume scores) and ``dice_global`` (one score over all volumes pooled), a
distinction that matters when a few large tumors dominate the pooled sums.

Batches come from a background pipeline thread feeding a bounded queue in
dataset order; batch composition and augmentation seeds derive statelessly
from (run seed, step), which is what makes checkpoint resume bit-exact.
"""

from __future__ import annotations

import json
import queue
import threading
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import halo as _halo
from . import unet as _unet
from .augment import augment_pipeline, with_seed
from .data_io import DatasetDir
from .errors import VoxmeshError
from .sharding import ShardedTensor, TensorSpec, gather, resolve_dtype, shard

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    dice: float = 0.9
    ce: float = 0.1

    def __post_init__(self):
        if self.dice < 0 or self.ce < 0:
            raise VoxmeshError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class _RunCtx:
    """Constants a training/eval step needs on the worker side."""

    num_classes: int
    dice_classes: tuple
    w_dice: float
    w_ce: float
    clamp: float
    total_batch_voxels: int
    lr: float
    momentum: float
    phase_barrier: bool = True
    param_order: tuple = ()


def one_hot(labels, num_classes, dtype=np.float32):
    return np.eye(num_classes, dtype=dtype)[labels]


# ---------------------------------------------------------------------------
# Loss: distributed statistics + per-voxel gradients.
# ---------------------------------------------------------------------------


def loss_stats_local(probs, onehot, clamp=1e-12):
    """Per-class [sum p*g, sum p, sum g] plus the summed NLL, over local voxels.

    Accumulated sample by sample in batch order so that summing worker partials
    in coordinate order reproduces a concatenated-batch run exactly.
    """
    c = probs.shape[-1]
    out = np.zeros(3 * c + 1, dtype=probs.dtype)
    for b in range(probs.shape[0]):
        p = probs[b].reshape(-1, c)
        g = onehot[b].reshape(-1, c)
        out[0:c] += (p * g).sum(axis=0)
        out[c : 2 * c] += p.sum(axis=0)
        out[2 * c : 3 * c] += g.sum(axis=0)
        out[3 * c] += -(np.log(np.maximum(p, clamp)) * g).sum()
    return out


def soft_dice_from_stats(stats, num_classes, dice_classes, eps=DICE_EPS):
    """1 - mean over ``dice_classes`` of (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps)."""
    c = num_classes
    pg, ps, gs = stats[0:c], stats[c : 2 * c], stats[2 * c : 3 * c]
    ratios = [(2.0 * float(pg[k]) + eps) / (float(ps[k]) + float(gs[k]) + eps) for k in dice_classes]
    return 1.0 - sum(ratios) / len(ratios)


def losses_from_stats(stats, rc):
    """(combined, dice, ce) from reduced statistics; identical on every worker."""
    dice = soft_dice_from_stats(stats, rc.num_classes, rc.dice_classes)
    ce = float(stats[3 * rc.num_classes]) / rc.total_batch_voxels
    return rc.w_dice * dice + rc.w_ce * ce, dice, ce


def loss_grad_local(probs, onehot, stats, rc):
    """Per-voxel gradient of the combined loss w.r.t. probabilities.

    Uses only the globally reduced statistics plus elementwise arithmetic, so
    the result for a voxel does not depend on how the volume is partitioned.
    """
    c = rc.num_classes
    pg, ps, gs = stats[0:c], stats[c : 2 * c], stats[2 * c : 3 * c]
    grad = np.zeros_like(probs)
    nfg = len(rc.dice_classes)
    for k in rc.dice_classes:
        nk = 2.0 * float(pg[k]) + DICE_EPS
        dk = float(ps[k]) + float(gs[k]) + DICE_EPS
        r = nk / dk
        grad[..., k] += (-rc.w_dice / nfg) * ((2.0 * onehot[..., k] - r) / dk)
    pm = np.maximum(probs, rc.clamp)
    grad += (-rc.w_ce / rc.total_batch_voxels) * (onehot / pm) * (probs >= rc.clamp)
    return grad


def soft_dice_loss(probs: ShardedTensor, labels_onehot: ShardedTensor, dice_classes=(1, 2)):
    """Distributed soft-Dice loss over sharded probabilities and one-hot labels."""
    c = probs.spec.extent("c")

    def fn(ctx, p, g):
        stats = loss_stats_local(p, g)
        return ctx.all_reduce_sum(stats, tag="dice-stats")

    stats = probs.mesh.run(fn, per_worker=(probs.blocks, labels_onehot.blocks))[0]
    return soft_dice_from_stats(stats, c, dice_classes)


def cross_entropy_loss(probs: ShardedTensor, labels_onehot: ShardedTensor, clamp=1e-12):
    """Distributed mean per-voxel negative log-likelihood."""
    c = probs.spec.extent("c")

    def fn(ctx, p, g):
        stats = loss_stats_local(p, g, clamp)
        return ctx.all_reduce_sum(stats, tag="ce-stats")

    stats = probs.mesh.run(fn, per_worker=(probs.blocks, labels_onehot.blocks))[0]
    voxels = int(np.prod([e for n, e in probs.spec.dims if n != "c"]))
    return float(stats[3 * c]) / voxels


def combined_loss(weights: LossWeights, probs, labels_onehot, dice_classes=(1, 2)):
    return weights.dice * soft_dice_loss(probs, labels_onehot, dice_classes) + weights.ce * cross_entropy_loss(
        probs, labels_onehot
    )


# ---------------------------------------------------------------------------
# Hard-label evaluation metrics.
# ---------------------------------------------------------------------------


def hard_dice(pred_mask, gt_mask):
    """2|A&B|/(|A|+|B|); 1.0 when both sets are empty, 0.0 when exactly one is."""
    p = int(pred_mask.sum())
    g = int(gt_mask.sum())
    if p == 0 and g == 0:
        return 1.0
    if p == 0 or g == 0:
        return 0.0
    inter = int((pred_mask & gt_mask).sum())
    return 2.0 * inter / (p + g)


def dice_per_case(preds, gts, cls=2):
    """Mean over cases of the hard Dice for one class (default: tumor)."""
    if len(preds) != len(gts):
        raise VoxmeshError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    scores = [hard_dice(p == cls, g == cls) for p, g in zip(preds, gts)]
    return sum(scores) / len(scores)


def dice_global(preds, gts, cls=2):
    """One Dice over all cases pooled, as if they were a single volume."""
    if len(preds) != len(gts):
        raise VoxmeshError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    inter = sum(int(((p == cls) & (g == cls)).sum()) for p, g in zip(preds, gts))
    tot = sum(int((p == cls).sum()) + int((g == cls).sum()) for p, g in zip(preds, gts))
    if tot == 0:
        return 1.0
    return 2.0 * inter / tot


# ---------------------------------------------------------------------------
# Optimizer.
# ---------------------------------------------------------------------------


def sgd_momentum_step(params, moments, grads, lr, momentum, order):
    """v <- momentum*v + g; p <- p - lr*v, per parameter blob in fixed order.

    Layers with non-finite gradients are skipped and reported; everything is
    elementwise, so workers holding identical grads stay bitwise identical.
    """
    skipped = []
    for nid in order:
        gk, gb = grads[nid]
        if not (np.isfinite(gk).all() and np.isfinite(gb).all()):
            skipped.append(nid)
            continue
        for key, g in (("kernel", gk), ("bias", gb)):
            v = moments[nid][key]
            v *= momentum
            v += g
            params[nid][key] -= lr * v
    return skipped


class SGDMomentum:
    """Pluggable optimizer interface: init_state + apply."""

    def __init__(self, lr=0.003, momentum=0.9):
        self.lr = lr
        self.momentum = momentum

    def init_state(self, params):
        return {nid: {k: np.zeros_like(v) for k, v in blobs.items()} for nid, blobs in params.items()}

    def apply(self, params, moments, grads, order):
        return sgd_momentum_step(params, moments, grads, self.lr, self.momentum, order)


# ---------------------------------------------------------------------------
# Batch pipeline.
# ---------------------------------------------------------------------------


class BatchSource:
    """Deterministic batches: per-epoch shuffles and per-sample augment seeds.

    Everything derives from (seed, global sample index); resuming at step k
    reproduces the exact stream an uninterrupted run would have seen.
    """

    def __init__(self, records, batch_size, seed, num_classes, dtype, augment=None):
        if not records:
            raise VoxmeshError("empty training set")
        self.records = records
        self.batch_size = batch_size
        self.seed = seed
        self.num_classes = num_classes
        self.dtype = dtype
        self.augment = augment
        self._perms = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 7919, epoch]))
            self._perms[epoch] = rng.permutation(len(self.records))
        return self._perms[epoch]

    def _record_for(self, global_idx):
        n = len(self.records)
        rec = self.records[self._perm(global_idx // n)[global_idx % n]]
        if self.augment is not None:
            aug_seed = int(
                np.random.SeedSequence([self.seed, 104729, global_idx]).generate_state(1)[0]
            )
            rec = augment_pipeline(rec, with_seed(self.augment, aug_seed))
        return rec

    def batch(self, step):
        recs = [self._record_for(step * self.batch_size + j) for j in range(self.batch_size)]
        img = np.stack([r.image for r in recs])[..., None].astype(self.dtype)
        oh = np.stack([one_hot(r.labels, self.num_classes, self.dtype) for r in recs])
        return img, oh


class Prefetcher:
    """Background thread computing batches in step order into a bounded queue."""

    def __init__(self, source, start, stop, depth=2):
        self.q = queue.Queue(maxsize=depth)
        self._thread = threading.Thread(
            target=self._produce, args=(source, start, stop), daemon=True
        )
        self._thread.start()

    def _produce(self, source, start, stop):
        try:
            for step in range(start, stop):
                self.q.put(("ok", step, source.batch(step)))
        except BaseException as e:  # noqa: BLE001 - surfaced to the consumer
            self.q.put(("error", None, e))

    def get(self, step):
        status, got, payload = self.q.get()
        if status == "error":
            raise payload
        if got != step:  # pragma: no cover - defensive
            raise VoxmeshError(f"pipeline produced step {got}, wanted {step}")
        return payload

    def join(self):
        self._thread.join(timeout=10)


# ---------------------------------------------------------------------------
# Worker-side programs.
# ---------------------------------------------------------------------------


def _install_state(ctx, params, moments):
    ctx.store["params"] = {nid: {k: v.copy() for k, v in b.items()} for nid, b in params.items()}
    ctx.store["moments"] = {nid: {k: v.copy() for k, v in b.items()} for nid, b in moments.items()}


def _export_state(ctx):
    if ctx.rank != 0:
        return None
    return (
        {nid: {k: v.copy() for k, v in b.items()} for nid, b in ctx.store["params"].items()},
        {nid: {k: v.copy() for k, v in b.items()} for nid, b in ctx.store["moments"].items()},
    )


def _train_step(ctx, graph, dims, rc, counters, img, oh):
    params = ctx.store["params"]
    moments = ctx.store["moments"]
    probs, tape = _unet.run_forward_local(
        ctx, graph, params, img, dims, save_tape=True, counters=counters, phase_barrier=rc.phase_barrier
    )
    stats = loss_stats_local(probs, oh, rc.clamp)
    stats = ctx.all_reduce_sum(stats, tag="loss-stats")
    dprobs = loss_grad_local(probs, oh, stats, rc)
    grads = _unet.run_backward_local(
        ctx, graph, params, tape, dprobs, dims, counters=counters, phase_barrier=rc.phase_barrier
    )
    skipped = sgd_momentum_step(params, moments, grads, rc.lr, rc.momentum, rc.param_order)
    return losses_from_stats(stats, rc), skipped


def _eval_chunk(ctx, graph, dims, rc, spatial_axes, img, oh):
    probs, _ = _unet.run_forward_local(
        ctx, graph, ctx.store["params"], img, dims, save_tape=False, phase_barrier=rc.phase_barrier
    )
    per_sample = np.stack(
        [loss_stats_local(probs[b : b + 1], oh[b : b + 1], rc.clamp) for b in range(probs.shape[0])]
    )
    if spatial_axes:
        per_sample = ctx.all_reduce_sum(per_sample, axes=spatial_axes, tag="eval-stats")
    return np.argmax(probs, axis=-1).astype(np.uint8), per_sample


# ---------------------------------------------------------------------------
# Config, state, checkpoints, loops.
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 1
    lr: float = 0.003
    momentum: float = 0.9
    seed: int = 0
    dice_classes: tuple = (1, 2)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    prob_clamp: float = 1e-12
    dtype: str = "f32"
    augment: object = None
    checkpoint_every: int = 0
    log_every: int = 1
    out_dir: str = None
    phase_barrier: bool = True


@dataclass
class TrainState:
    step: int
    params: dict
    moments: dict
    history: list = field(default_factory=list)


def _batch_spec(graph, batch, num_classes, dtype):
    e = graph.config.input_extent
    img = TensorSpec(
        (("batch", batch), ("x", e), ("y", e), ("z", e), ("c", graph.config.in_channels)), dtype
    )
    oh = TensorSpec((("batch", batch), ("x", e), ("y", e), ("z", e), ("c", num_classes)), dtype)
    return img, oh


def _run_ctx(graph, cfg, batch):
    e = graph.config.input_extent
    return _RunCtx(
        num_classes=graph.config.num_classes,
        dice_classes=tuple(cfg.dice_classes),
        w_dice=cfg.loss_weights.dice,
        w_ce=cfg.loss_weights.ce,
        clamp=cfg.prob_clamp,
        total_batch_voxels=batch * e ** 3,
        lr=cfg.lr,
        momentum=cfg.momentum,
        phase_barrier=cfg.phase_barrier,
        param_order=tuple(n.id for n in graph.conv_nodes),
    )


def save_checkpoint(path, step, params, moments, extra=None):
    """One directory per checkpoint: parameter/moment blobs plus a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs = []
    for kind, store in (("param", params), ("moment", moments)):
        for nid, d in store.items():
            for key, arr in d.items():
                name = f"{kind}__{nid}__{key}.npy"
                np.save(path / name, arr)
                blobs.append(name)
    manifest = {"step": int(step), "blobs": blobs}
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    params, moments = {}, {}
    for name in manifest["blobs"]:
        kind, nid, key = name[: -len(".npy")].split("__")
        store = params if kind == "param" else moments
        store.setdefault(nid, {})[key] = np.load(path / name)
    return manifest["step"], params, moments


def train_loop(graph, dataset, cfg, resume_from=None, run_echo=None):
    """Train on the graph's mesh; returns the final TrainState.

    ``dataset`` is a DatasetDir (its train split is used) or a list of
    VolumeRecords.  Metrics stream to stdout and, with ``cfg.out_dir``, to
    ``metrics.csv``; a config echo sufficient to reproduce the run bitwise is
    written to ``run.json``.
    """
    mesh, layout = graph.mesh, graph.layout
    records = dataset.load_split("train") if isinstance(dataset, DatasetDir) else list(dataset)
    dtype = resolve_dtype(cfg.dtype)
    rc = _run_ctx(graph, cfg, cfg.batch_size)
    dims = _halo.dim_axes(_batch_spec(graph, cfg.batch_size, rc.num_classes, dtype)[0], layout)

    if resume_from is not None:
        start_step, params, moments = load_checkpoint(resume_from)
    else:
        start_step = 0
        params = _unet.init_params(graph, cfg.seed, dtype)
        moments = SGDMomentum(cfg.lr, cfg.momentum).init_state(params)
    mesh.run(_install_state, params, moments)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    csv_f = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        echo = {
            "mesh": mesh.describe(),
            "layout": layout.as_dict(),
            "seed": cfg.seed,
            "steps": cfg.steps,
            "batch_size": cfg.batch_size,
            "lr": cfg.lr,
            "momentum": cfg.momentum,
            "dtype": cfg.dtype,
            "dice_classes": list(cfg.dice_classes),
            "loss_weights": [cfg.loss_weights.dice, cfg.loss_weights.ce],
            "augment": bool(cfg.augment),
            "config_kv": graph.config.to_kv(),
            "resume_from": str(resume_from) if resume_from else None,
        }
        if run_echo:
            echo.update(run_echo)
        (out_dir / "run.json").write_text(json.dumps(echo, indent=2, default=str))
        header_needed = not (out_dir / "metrics.csv").exists() or resume_from is None
        csv_f = open(out_dir / "metrics.csv", "w" if header_needed else "a")
        if header_needed:
            csv_f.write("step,loss,dice_loss,ce_loss,lr,wall_ms\n")

    source = BatchSource(records, cfg.batch_size, cfg.seed, rc.num_classes, dtype, cfg.augment)
    pipeline = Prefetcher(source, start_step, start_step + cfg.steps)
    img_spec, oh_spec = _batch_spec(graph, cfg.batch_size, rc.num_classes, dtype)

    state = TrainState(start_step, params, moments)
    try:
        for step in range(start_step, start_step + cfg.steps):
            img, oh = pipeline.get(step)
            t0 = time.perf_counter()
            img_st = shard(img, img_spec, layout, mesh)
            oh_st = shard(oh, oh_spec, layout, mesh)
            res = mesh.run(
                _train_step, graph, dims, rc, None, per_worker=(img_st.blocks, oh_st.blocks)
            )
            (loss, dice, ce), skipped = res[0]
            wall_ms = (time.perf_counter() - t0) * 1e3
            if skipped:
                warnings.warn(f"step {step}: non-finite gradients, skipped layers {skipped}")
            state.step = step + 1
            state.history.append((step, loss, dice, ce, wall_ms))
            if csv_f:
                csv_f.write(f"{step},{loss:.8f},{dice:.8f},{ce:.8f},{cfg.lr},{wall_ms:.2f}\n")
            if cfg.log_every and step % cfg.log_every == 0:
                print(f"step {step:5d}  loss {loss:.6f}  dice {dice:.6f}  ce {ce:.6f}  ({wall_ms:.0f} ms)")
            if cfg.checkpoint_every and out_dir and (step + 1) % cfg.checkpoint_every == 0:
                p, m = mesh.run(_export_state)[0]
                save_checkpoint(
                    out_dir / "checkpoints" / f"step_{step + 1:06d}", step + 1, p, m,
                    extra={"config_kv": graph.config.to_kv(), "seed": cfg.seed},
                )
    finally:
        if csv_f:
            csv_f.close()
        pipeline.join()

    state.params, state.moments = mesh.run(_export_state)[0]
    if out_dir:
        save_checkpoint(
            out_dir / "checkpoints" / f"step_{state.step:06d}", state.step,
            state.params, state.moments,
            extra={"config_kv": graph.config.to_kv(), "seed": cfg.seed},
        )
    return state


def install_params(graph, params, moments=None):
    """Put an externally built parameter store on the graph's workers."""
    if moments is None:
        moments = SGDMomentum().init_state(params)
    graph.mesh.run(_install_state, params, moments)


def evaluate(graph, dataset, cfg):
    """Forward-only pass over records; returns dice_per_case/dice_global/mean loss.

    Records are processed in chunks of the data-parallel width; a partial final
    chunk is padded by repeating the last record and the padding is dropped
    from both predictions and the loss.
    """
    mesh, layout = graph.mesh, graph.layout
    records = dataset.load_split("val") if isinstance(dataset, DatasetDir) else list(dataset)
    if not records:
        raise VoxmeshError("empty evaluation set")
    dtype = resolve_dtype(cfg.dtype)
    b_axis = layout.axis_for("batch")
    chunk = mesh.axis_size(b_axis) if b_axis else 1
    rc = replace(
        _run_ctx(graph, cfg, chunk),
        total_batch_voxels=graph.config.input_extent ** 3,  # per-sample loss normalization
    )
    img_spec, oh_spec = _batch_spec(graph, chunk, rc.num_classes, dtype)
    dims = _halo.dim_axes(img_spec, layout)
    spatial_axes = [layout.axis_for(d) for d in ("x", "y", "z") if layout.axis_for(d)]
    pred_spec = TensorSpec(
        (("batch", chunk), ("x", graph.config.input_extent), ("y", graph.config.input_extent), ("z", graph.config.input_extent)),
        "u8",
    )

    preds, gts, losses = [], [], []
    for i0 in range(0, len(records), chunk):
        recs = records[i0 : i0 + chunk]
        valid = len(recs)
        while len(recs) < chunk:
            recs.append(recs[-1])
        img = np.stack([r.image for r in recs])[..., None].astype(dtype)
        oh = np.stack([one_hot(r.labels, rc.num_classes, dtype) for r in recs])
        img_st = shard(img, img_spec, layout, mesh)
        oh_st = shard(oh, oh_spec, layout, mesh)
        res = mesh.run(
            _eval_chunk, graph, dims, rc, spatial_axes, per_worker=(img_st.blocks, oh_st.blocks)
        )
        pred_dense = gather(
            ShardedTensor(pred_spec, layout, mesh, [r[0] for r in res])
        )
        # Per-sample stats live on the worker(s) holding that batch coordinate;
        # after the spatial reduce every spatial peer holds identical copies.
        stats_by_sample = {}
        for rank, coord in enumerate(mesh.coords):
            bc = coord[mesh.axis_index[b_axis]] if b_axis else 0
            per_sample = res[rank][1]
            for j in range(per_sample.shape[0]):
                stats_by_sample.setdefault(bc * per_sample.shape[0] + j, per_sample[j])
        for j in range(valid):
            preds.append(pred_dense[j])
            gts.append(recs[j].labels)
            losses.append(losses_from_stats(stats_by_sample[j], rc)[0])
    return {
        "dice_per_case": dice_per_case(preds, gts),
        "dice_global": dice_global(preds, gts),
        "mean_loss": sum(losses) / len(losses),
        "n_cases": len(preds),
    }
