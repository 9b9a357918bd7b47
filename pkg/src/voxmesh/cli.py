"""Command-line entry point: train, eval, augment, bench, verify, synth-data.

Mesh shapes are given as ``--mesh b=2,x=2,y=2,z=2`` and layouts as
``--layout batch=b,dimx=x,dimy=y,dimz=z`` (tensor dim -> mesh axis).  Every run
echoes its configuration so results can be reproduced bitwise.  Usage errors
exit 2 (argparse), runtime failures exit 1 with a diagnostic.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench as _bench
from . import oracle as _oracle
from . import training as _training
from . import unet as _unet
from .augment import SynthConfig, augment_pipeline, with_seed
from .data_io import DatasetDir, generate_synthetic_dataset, write_manifest, write_record
from .errors import VoxmeshError
from .mesh import DeviceMesh
from .sharding import Layout

_DIM_ALIASES = {"dimx": "x", "dimy": "y", "dimz": "z", "batch": "batch", "x": "x", "y": "y", "z": "z"}


def parse_mesh(text):
    axes = []
    for part in text.split(","):
        name, _, size = part.partition("=")
        if not size:
            raise argparse.ArgumentTypeError(f"mesh axis {part!r} is not name=size")
        axes.append((name.strip(), int(size)))
    return axes


def parse_layout(text):
    out = {}
    for part in text.split(","):
        dim, _, axis = part.partition("=")
        dim = dim.strip()
        if dim not in _DIM_ALIASES:
            raise argparse.ArgumentTypeError(
                f"unknown tensor dim {dim!r}; use batch, dimx, dimy, dimz"
            )
        out[_DIM_ALIASES[dim]] = axis.strip()
    return out


def _int_pair(text):
    a, _, b = text.partition(",")
    return (int(a), int(b or a))


def _float_pair(text):
    a, _, b = text.partition(",")
    return (float(a), float(b or a))


def _add_mesh_args(p, mesh_default="x=1"):
    p.add_argument("--mesh", type=parse_mesh, default=parse_mesh(mesh_default))
    p.add_argument("--layout", type=parse_layout, default=None)
    p.add_argument("--timeout", type=float, default=30.0, help="collective timeout, seconds")


def _default_layout(mesh_axes, layout):
    if layout is not None:
        return Layout(layout)
    # Assign spatial dims to same-named axes, batch to "b", when present.
    names = {n for n, _ in mesh_axes}
    out = {}
    if "b" in names:
        out["batch"] = "b"
    for d in ("x", "y", "z"):
        if d in names:
            out[d] = d
    return Layout(out)


def _build_graph(args, mesh):
    cfg = _unet.recipe_for_resolution(
        args.extent, scale=args.scale, convs_per_block=args.convs_per_block
    )
    layout = _default_layout(args.mesh, args.layout)
    graph = _unet.build(cfg, mesh, layout)
    return graph


def _effective_batch(args, graph):
    if args.batch is not None:
        return args.batch
    b_axis = graph.layout.axis_for("batch")
    return graph.mesh.axis_size(b_axis) if b_axis else 1


def _train_cfg(args, augment=None, batch=None):
    return _training.TrainConfig(
        steps=args.steps,
        batch_size=batch if batch is not None else (args.batch or 1),
        lr=args.lr,
        momentum=args.momentum,
        seed=args.seed,
        dtype=args.dtype,
        augment=augment,
        checkpoint_every=args.checkpoint_every,
        log_every=args.log_every,
        out_dir=args.out,
    )


def cmd_synth_data(args):
    generate_synthetic_dataset(args.n, args.extent, args.seed, args.out)
    print(f"wrote {args.n} records at {args.extent}^3 to {args.out}")
    return 0


def cmd_train(args):
    with DeviceMesh(args.mesh, timeout=args.timeout) as mesh:
        graph = _build_graph(args, mesh)
        if args.print_graph:
            _print_graph(graph)
        augment = None
        if args.augment:
            augment = SynthConfig(
                n_tumors=args.n_tumors,
                radius_range=args.radius,
                blur_sigma=0.0 if args.no_blur else args.sigma,
                default_delta=args.default_delta,
            )
        dataset = DatasetDir(args.data)
        cfg = _train_cfg(args, augment, batch=_effective_batch(args, graph))
        echo = {"argv": sys.argv[1:], "scale": args.scale, "extent": args.extent}
        state = _training.train_loop(graph, dataset, cfg, resume_from=args.resume, run_echo=echo)
        metrics = _training.evaluate(graph, dataset, cfg)
        print(
            f"final step {state.step}: dice_per_case {metrics['dice_per_case']:.4f} "
            f"dice_global {metrics['dice_global']:.4f} val_loss {metrics['mean_loss']:.4f}"
        )
        if args.out:
            (Path(args.out) / "eval.json").write_text(json.dumps(metrics, indent=2))
    return 0


def cmd_eval(args):
    with DeviceMesh(args.mesh, timeout=args.timeout) as mesh:
        step, params, moments = _training.load_checkpoint(args.checkpoint)
        manifest = json.loads((Path(args.checkpoint) / "manifest.json").read_text())
        if "config_kv" in manifest:
            cfg_net = _unet.UNetConfig.from_kv(manifest["config_kv"])
        else:
            cfg_net = _unet.recipe_for_resolution(
                args.extent, scale=args.scale, convs_per_block=args.convs_per_block
            )
        layout = _default_layout(args.mesh, args.layout)
        graph = _unet.build(cfg_net, mesh, layout)
        _training.install_params(graph, params, moments)
        cfg = _train_cfg(args, batch=_effective_batch(args, graph))
        metrics = _training.evaluate(graph, DatasetDir(args.data), cfg)
        print(json.dumps(metrics, indent=2))
    return 0


def cmd_augment(args):
    dataset = DatasetDir(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig(
        n_tumors=args.n_tumors,
        radius_range=args.radius,
        blur_sigma=0.0 if args.no_blur else args.sigma,
        seed=args.seed,
        default_delta=args.default_delta,
    )
    splits = {}
    for i, rec_id in enumerate(dataset.ids()):
        rec = dataset.load(rec_id)
        aug = augment_pipeline(rec, with_seed(cfg, args.seed + i))
        write_record(out, aug)
        splits[rec_id] = dataset.splits[rec_id]
    write_manifest(out, splits)
    print(f"augmented {len(splits)} records into {args.out}")
    return 0


def cmd_bench(args):
    with DeviceMesh(args.mesh, timeout=args.timeout) as mesh:
        graph = _build_graph(args, mesh)
        if args.print_graph:
            _print_graph(graph)
        rng = np.random.default_rng(args.seed)
        from .data_io import synthesize_record

        records = [synthesize_record(args.extent, rng, f"bench{i}") for i in range(2)]
        cfg = _train_cfg(args, batch=_effective_batch(args, graph))
        report = _bench.run_bench(graph, records, cfg, steps=args.steps)
        print(report.summary())
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "bench.csv").write_text(report.to_csv())
            print(f"wrote {args.out}/bench.csv")
    return 0


def cmd_verify(args):
    spatial = None
    if args.mesh is not None:
        sizes = dict(args.mesh)
        spatial = [(sizes.get("x", 1), sizes.get("y", 1), sizes.get("z", 1))]
    result = _oracle.run_verification(
        spatial_shapes=spatial, seeds=args.seeds, timeout=args.timeout
    )
    print(result.summary())
    return 0 if result.passed else 1


def _print_graph(graph):
    rows = graph.describe()
    width = max(len(r[0]) for r in rows)
    print(f"{'layer':<{width}}  {'op':<8} {'output':<14} {'params':>10} {'halo bytes':>12}")
    for rid, op, shape, nparams, hbytes in rows:
        print(f"{rid:<{width}}  {op:<8} {shape:<14} {nparams:>10} {hbytes:>12}")
    print(f"receptive field: {graph.receptive_field()}^3 voxels")


def build_parser():
    p = argparse.ArgumentParser(prog="voxmesh", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth-data", help="generate the synthetic liver dataset")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--extent", type=int, default=32)
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth_data)

    for name, fn in (("train", cmd_train), ("bench", cmd_bench)):
        sp = sub.add_parser(name)
        _add_mesh_args(sp)
        sp.add_argument("--extent", type=int, default=32)
        sp.add_argument("--scale", type=float, default=1 / 32)
        sp.add_argument("--convs-per-block", type=int, default=4)
        sp.add_argument("--steps", type=int, default=200 if name == "train" else 2)
        sp.add_argument("--batch", type=int, default=None,
                        help="global batch size (default: the batch-axis width)")
        sp.add_argument("--lr", type=float, default=0.003)
        sp.add_argument("--momentum", type=float, default=0.9)
        sp.add_argument("--seed", type=int, default=1)
        sp.add_argument("--dtype", choices=("f32", "f64"), default="f32")
        sp.add_argument("--out", default=None)
        sp.add_argument("--print-graph", action="store_true")
        sp.add_argument("--checkpoint-every", type=int, default=0)
        sp.add_argument("--log-every", type=int, default=10)
        if name == "train":
            sp.add_argument("--data", required=True)
            sp.add_argument("--resume", default=None)
            sp.add_argument("--augment", action="store_true")
            sp.add_argument("--n-tumors", type=_int_pair, default=(1, 3))
            sp.add_argument("--radius", type=_float_pair, default=(2.0, 4.0))
            sp.add_argument("--sigma", type=float, default=1.5)
            sp.add_argument("--no-blur", action="store_true")
            sp.add_argument("--default-delta", type=float, default=None)
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's val split")
    _add_mesh_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--extent", type=int, default=32)
    sp.add_argument("--scale", type=float, default=1 / 32)
    sp.add_argument("--convs-per-block", type=int, default=4)
    sp.add_argument("--batch", type=int, default=None,
                        help="global batch size (default: the batch-axis width)")
    sp.add_argument("--lr", type=float, default=0.003)
    sp.add_argument("--momentum", type=float, default=0.9)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    sp.add_argument("--steps", type=int, default=0)
    sp.add_argument("--out", default=None)
    sp.add_argument("--checkpoint-every", type=int, default=0)
    sp.add_argument("--log-every", type=int, default=10)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("augment", help="run the tumor remove/synthesize pipeline over a dataset")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-tumors", type=_int_pair, default=(1, 3))
    sp.add_argument("--radius", type=_float_pair, default=(2.0, 4.0))
    sp.add_argument("--sigma", type=float, default=1.5)
    sp.add_argument("--no-blur", action="store_true")
    sp.add_argument("--default-delta", type=float, default=None)
    sp.set_defaults(fn=cmd_augment)

    sp = sub.add_parser("verify", help="distributed-vs-oracle equivalence suite")
    sp.add_argument("--mesh", type=parse_mesh, default=None)
    sp.add_argument("--seeds", type=int, default=20)
    sp.add_argument("--timeout", type=float, default=30.0)
    sp.set_defaults(fn=cmd_verify)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except VoxmeshError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
