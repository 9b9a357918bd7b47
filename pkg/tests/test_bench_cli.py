"""Bench instrumentation and the command-line surface."""

import json

import numpy as np
import pytest

from voxmesh import bench as _bench
from voxmesh import training
from voxmesh.cli import main, parse_layout, parse_mesh
from voxmesh.data_io import synthesize_record
from voxmesh.mesh import create_mesh
from voxmesh.sharding import Layout
from voxmesh.unet import UNetConfig, build


def make_records(extent, n):
    return [synthesize_record(extent, np.random.default_rng(i), f"r{i}") for i in range(n)]


def test_bench_margin_zero_network_moves_no_bytes():
    cfg_net = UNetConfig(8, (2, 4), convs_per_block=1, kernel=1)  # 1^3 kernels only
    with create_mesh([("mx", 2), ("my", 2)]) as mesh:
        graph = build(cfg_net, mesh, Layout({"x": "mx", "y": "my"}))
        cfg = training.TrainConfig(steps=1, batch_size=1, log_every=0)
        report = _bench.run_bench(graph, make_records(8, 2), cfg, steps=1)
    assert report.bytes_match_analytic
    assert all(nbytes == 0 for _, _, _, nbytes in report.rows)
    halo_ms = report.phase_totals.get("halo", (0.0, 0))[0]
    assert halo_ms <= 0.2 * report.total_wall_ms


def test_bench_bytes_match_analytic_on_222():
    cfg_net = UNetConfig(16, (2, 4), convs_per_block=2)
    with create_mesh([("mx", 2), ("my", 2), ("mz", 2)]) as mesh:
        graph = build(cfg_net, mesh, Layout({"x": "mx", "y": "my", "z": "mz"}))
        cfg = training.TrainConfig(steps=2, batch_size=1, log_every=0)
        report = _bench.run_bench(graph, make_records(16, 2), cfg, steps=2)
    assert report.bytes_match_analytic
    assert any(nbytes > 0 for _, phase, _, nbytes in report.rows if phase == "halo")
    assert 0.0 <= report.overhead_fraction <= 1.0
    csv = report.to_csv().splitlines()
    assert csv[0] == "layer,phase,wall_ms,bytes"
    assert "overhead fraction" in report.summary()


def test_parse_mesh_and_layout():
    assert parse_mesh("b=2,x=4") == [("b", 2), ("x", 4)]
    assert parse_layout("batch=b,dimx=x,dimy=y,dimz=z") == {
        "batch": "b", "x": "x", "y": "y", "z": "z",
    }


def test_cli_synth_data_and_train_eval_bench_verify(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth-data", "--n", "4", "--extent", "16", "--seed", "3",
                 "--out", str(data)]) == 0
    assert (data / "manifest.tsv").exists()

    run = tmp_path / "run"
    rc = main([
        "train", "--mesh", "b=1,x=2", "--layout", "batch=b,dimx=x",
        "--extent", "16", "--scale", str(1 / 64), "--convs-per-block", "1",
        "--steps", "3", "--seed", "1", "--data", str(data), "--out", str(run),
        "--log-every", "0", "--lr", "0.02",
    ])
    assert rc == 0
    metrics = (run / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "step,loss,dice_loss,ce_loss,lr,wall_ms"
    assert len(metrics) == 4
    echo = json.loads((run / "run.json").read_text())
    assert echo["mesh"] == "b=1,x=2"
    assert echo["seed"] == 1 and echo["steps"] == 3
    ckpt = run / "checkpoints" / "step_000003"
    assert ckpt.exists()

    rc = main([
        "eval", "--mesh", "x=2", "--layout", "dimx=x",
        "--data", str(data), "--checkpoint", str(ckpt),
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "dice_per_case" in out

    rc = main([
        "bench", "--mesh", "x=2", "--layout", "dimx=x", "--extent", "16",
        "--scale", str(1 / 64), "--convs-per-block", "1", "--steps", "1",
        "--out", str(tmp_path / "bench"), "--log-every", "0",
    ])
    assert rc == 0
    assert (tmp_path / "bench" / "bench.csv").exists()

    rc = main(["verify", "--mesh", "x=2,y=1,z=1", "--seeds", "2"])
    assert rc == 0
    assert "checks passed" in capsys.readouterr().out


def test_cli_augment_subcommand(tmp_path):
    data = tmp_path / "d"
    main(["synth-data", "--n", "2", "--extent", "16", "--seed", "5", "--out", str(data)])
    rc = main([
        "augment", "--input", str(data), "--out", str(tmp_path / "aug"),
        "--seed", "2", "--radius", "2.5,3.5",
    ])
    assert rc == 0
    assert (tmp_path / "aug" / "case000.img.spv").exists()
    assert (tmp_path / "aug" / "manifest.tsv").exists()
    # no-blur variant exercises the sigma=0 path
    rc = main([
        "augment", "--input", str(data), "--out", str(tmp_path / "aug0"),
        "--seed", "2", "--radius", "2,3", "--no-blur",
    ])
    assert rc == 0


def test_cli_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["train"])  # missing --data
    assert exc.value.code == 2


def test_cli_runtime_error_exits_1(tmp_path, capsys):
    rc = main([
        "train", "--mesh", "x=3", "--layout", "dimx=x", "--extent", "16",
        "--scale", str(1 / 64), "--steps", "1", "--data", str(tmp_path / "missing"),
    ])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
