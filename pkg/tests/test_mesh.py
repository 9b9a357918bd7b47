"""Mesh runtime: topology, channels, collectives, failure handling."""

import time

import numpy as np
import pytest

from voxmesh.errors import (
    CollectiveMismatchError,
    DeadlockError,
    MeshConfigError,
    ProtocolError,
    WorkerFailed,
)
from voxmesh.mesh import DeviceMesh, WorkerContext, create_mesh


def test_mesh_coordinates_2x4():
    with create_mesh([("b", 2), ("x", 4)]) as mesh:
        assert mesh.worker_count == 8
        assert mesh.coords == [(b, x) for b in range(2) for x in range(4)]


def test_single_worker_mesh_collectives_are_identities():
    with create_mesh([("x", 1)]) as mesh:
        arr = np.arange(4.0)
        out = mesh.run(lambda ctx: ctx.all_reduce_sum(arr))[0]
        assert out is arr  # group of one: unchanged
        mesh.run(lambda ctx: ctx.barrier())  # returns immediately


def test_neighbor_links_2x2x2_by_enumeration():
    # every interior-facing face has exactly one neighbor; edges have none
    with create_mesh([("x", 2), ("y", 2), ("z", 2)]) as mesh:

        def probe(ctx):
            return {
                (ax.name, d): ctx.neighbor(ax.name, d)
                for ax in ctx.mesh.axes
                for d in (-1, 1)
            }

        found = mesh.run(probe)
        for rank, coord in enumerate(mesh.coords):
            for i, ax in enumerate(mesh.axes):
                for d in (-1, 1):
                    want = list(coord)
                    want[i] += d
                    expected = (
                        mesh.rank_of[tuple(want)] if 0 <= want[i] < ax.size else None
                    )
                    assert found[rank][(ax.name, d)] == expected


def test_mesh_config_errors():
    with pytest.raises(MeshConfigError):
        DeviceMesh([("x", 2), ("x", 2)])
    with pytest.raises(MeshConfigError):
        DeviceMesh([("x", 0)])
    with pytest.raises(MeshConfigError):
        DeviceMesh([])


def test_all_reduce_two_workers():
    with create_mesh([("g", 2)]) as mesh:
        vals = [np.array([1.0, 3.0]), np.array([3.0, 5.0])]
        out = mesh.run(lambda ctx, v: ctx.all_reduce_sum(v), per_worker=(vals,))
        for o in out:
            assert np.array_equal(o, [4.0, 8.0])


def test_all_reduce_matches_sequential_order_bitwise():
    rng = np.random.default_rng(0)
    vals = [rng.standard_normal(37) for _ in range(4)]
    expected = vals[0].copy()
    for v in vals[1:]:
        expected = expected + v
    with create_mesh([("g", 4)]) as mesh:
        out = mesh.run(lambda ctx, v: ctx.all_reduce_sum(v), per_worker=(vals,))
    for o in out:
        assert np.array_equal(o, expected)


def test_all_reduce_results_are_independent_copies():
    with create_mesh([("g", 2)]) as mesh:
        vals = [np.ones(3), np.ones(3)]
        out = mesh.run(lambda ctx, v: ctx.all_reduce_sum(v), per_worker=(vals,))
        out[0][0] = 99.0
        assert out[1][0] == 2.0


def test_all_reduce_subgroup_axis():
    # reduce only across "b"; the "x" coordinate keeps groups apart
    with create_mesh([("b", 2), ("x", 2)]) as mesh:
        vals = [np.array([float(10 * b + x)]) for b, x in mesh.coords]
        out = mesh.run(lambda ctx, v: ctx.all_reduce_sum(v, axes="b"), per_worker=(vals,))
        for rank, (b, x) in enumerate(mesh.coords):
            assert out[rank][0] == float(x) + float(10 + x)


def test_all_reduce_shape_mismatch_is_fatal():
    with create_mesh([("g", 2)], timeout=5.0) as mesh:
        vals = [np.ones(3), np.ones(4)]
        with pytest.raises(WorkerFailed, match="all_reduce_sum"):
            mesh.run(lambda ctx, v: ctx.all_reduce_sum(v), per_worker=(vals,))


def test_barrier_releases_all_after_last_arrival():
    with create_mesh([("x", 8)]) as mesh:

        def staggered(ctx):
            time.sleep(0.02 * ctx.rank)
            arrived = time.perf_counter()
            ctx.barrier()
            return arrived, time.perf_counter()

        res = mesh.run(staggered)
        last_arrival = max(a for a, _ in res)
        releases = [r for _, r in res]
        assert min(releases) >= last_arrival
        assert max(releases) - min(releases) < 1.0  # skew bounded by the scheduler


def test_barrier_timeout_names_unarrived_coordinates():
    with create_mesh([("x", 3)], timeout=0.3) as mesh:

        def skipper(ctx):
            if ctx.rank == 1:
                return "skipped"
            ctx.barrier()

        with pytest.raises(WorkerFailed, match=r"unarrived coordinates.*\(1,\)"):
            mesh.run(skipper)


def test_worker_panic_shuts_down_peers_instead_of_hanging():
    with create_mesh([("x", 4)], timeout=10.0) as mesh:

        def faulty(ctx):
            if ctx.rank == 2:
                raise RuntimeError("injected fault")
            ctx.barrier()

        t0 = time.perf_counter()
        with pytest.raises(WorkerFailed, match="injected fault") as exc:
            mesh.run(faulty)
        assert exc.value.coord == (2,)
        assert time.perf_counter() - t0 < 5.0  # released by shutdown, not timeout


def test_mesh_broken_after_failure():
    mesh = create_mesh([("x", 2)])
    with pytest.raises(WorkerFailed):
        mesh.run(lambda ctx: 1 / 0)
    with pytest.raises(ProtocolError):
        mesh.run(lambda ctx: None)
    mesh.shutdown()


def test_channels_are_fifo_per_pair():
    with create_mesh([("x", 2)]) as mesh:

        def program(ctx):
            other = 1 - ctx.rank
            if ctx.rank == 0:
                for i in range(50):
                    ctx.send(other, np.array([i]), tag=("seq", i))
            else:
                return [int(ctx.recv(other, tag=("seq", i))[0]) for i in range(50)]

        res = mesh.run(program)
        assert res[1] == list(range(50))


def test_send_to_non_neighbor_rejected():
    with create_mesh([("x", 3)]) as mesh:

        def program(ctx):
            if ctx.rank == 0:
                ctx.send(2, np.zeros(1), tag="bad")  # (0,) and (2,) are not adjacent

        with pytest.raises(WorkerFailed, match="not mesh neighbors"):
            mesh.run(program)


def test_tag_mismatch_is_protocol_error():
    with create_mesh([("x", 2)]) as mesh:

        def program(ctx):
            if ctx.rank == 0:
                ctx.send(1, np.zeros(1), tag="a")
            else:
                ctx.recv(0, tag="b")

        with pytest.raises(WorkerFailed, match="expected tag"):
            mesh.run(program)


def test_byte_counters_track_p2p_payloads():
    with create_mesh([("x", 2)]) as mesh:

        def program(ctx):
            if ctx.rank == 0:
                ctx.send(1, np.zeros(10, np.float32), tag="t")
            else:
                ctx.recv(0, tag="t")
            return ctx.counters["p2p_bytes"]

        sent = mesh.run(program)
        assert sent[0] == 40
        assert sent[1] == 0


def test_scheduler_jitter_does_not_change_results(monkeypatch):
    # race-detection run: all data flows through channels, so randomized send
    # delays must not change any collective result, bitwise
    rng = np.random.default_rng(42)

    real_send = WorkerContext.send

    def jittery_send(self, dst, payload, tag):
        time.sleep(float(rng.uniform(0, 0.002)))
        return real_send(self, dst, payload, tag)

    vals = [np.random.default_rng(s).standard_normal(64) for s in range(8)]

    def program(ctx, v):
        r1 = ctx.all_reduce_sum(v, tag="j1")
        ctx.barrier()
        r2 = ctx.all_reduce_sum(2.0 * v, axes="x", tag="j2")
        return r1, r2

    outs = []
    for _ in range(2):
        monkeypatch.setattr(WorkerContext, "send", jittery_send)
        with create_mesh([("x", 4), ("y", 2)]) as mesh:
            outs.append(mesh.run(program, per_worker=(vals,)))
        monkeypatch.setattr(WorkerContext, "send", real_send)
    for r_a, r_b in zip(outs[0], outs[1]):
        assert np.array_equal(r_a[0], r_b[0])
        assert np.array_equal(r_a[1], r_b[1])
