"""Simulated device mesh: one worker thread per device, message channels, collectives.

Devices are in-process threads rather than accelerators; the mesh API is the seam
where a real transport could be bolted on later.  Workers communicate exclusively
through FIFO channels (one queue per directed worker pair), so every run of the
same program over the same inputs produces bitwise-identical results: collectives
reduce sequentially in coordinate order, and point-to-point receives name their
sender, leaving no room for message races.

The driver thread owns the mesh object and dispatches collective programs with
:meth:`DeviceMesh.run`; all workers execute the same function (SPMD) against
their own ``WorkerContext``.  If any worker raises, the driver injects shutdown
sentinels into every channel so the surviving workers abort promptly instead of
hanging, and the mesh is marked broken.
"""

from __future__ import annotations

import itertools
import queue
import threading
import traceback
from dataclasses import dataclass

import numpy as np

from .errors import (
    CollectiveMismatchError,
    DeadlockError,
    MeshConfigError,
    ProtocolError,
    WorkerFailed,
    WorkerShutdown,
)

_SHUTDOWN = object()  # sentinel injected into channels on teardown


@dataclass(frozen=True)
class MeshAxis:
    name: str
    size: int


def _payload_nbytes(payload):
    if isinstance(payload, np.ndarray):
        return payload.nbytes
    if isinstance(payload, (tuple, list)):
        return sum(_payload_nbytes(p) for p in payload)
    return 0


class WorkerContext:
    """Per-worker view of the mesh: coordinate, channels, collectives, counters.

    ``store`` persists across dispatched programs (parameter copies, optimizer
    moments).  ``counters`` accumulates traffic/timing statistics; ops add their
    own keys.  Arrays received from a channel are owned by the sender: receivers
    must copy before mutating (the built-in collectives and the halo protocol
    follow this discipline).
    """

    def __init__(self, mesh, rank):
        self.mesh = mesh
        self.rank = rank
        self.coord = mesh.coords[rank]
        self.store = {}
        self.counters = {"p2p_bytes": 0, "p2p_msgs": 0, "coll_bytes": 0}

    # -- topology ---------------------------------------------------------

    def axis_size(self, axis):
        return self.mesh.axis_size(axis)

    def axis_coord(self, axis):
        return self.coord[self.mesh.axis_index[axis]]

    def neighbor(self, axis, delta):
        """Rank of the worker one step along ``axis``, or None at the mesh edge."""
        if delta not in (-1, 1):
            raise ProtocolError(f"neighbor step must be +/-1, got {delta}")
        i = self.mesh.axis_index[axis]
        c = self.coord[i] + delta
        if c < 0 or c >= self.mesh.axes[i].size:
            return None
        coord = self.coord[:i] + (c,) + self.coord[i + 1 :]
        return self.mesh.rank_of[coord]

    # -- point to point ---------------------------------------------------

    def send(self, dst, payload, tag):
        """Send to a mesh neighbor. Channels are FIFO per (sender, receiver)."""
        if dst not in self._neighbor_ranks():
            raise ProtocolError(
                f"{self.coord} -> {self.mesh.coords[dst]}: not mesh neighbors"
            )
        self.counters["p2p_bytes"] += _payload_nbytes(payload)
        self.counters["p2p_msgs"] += 1
        self.mesh._channel(self.rank, dst).put((tag, payload))

    def recv(self, src, tag):
        """Receive the next message from ``src``; its tag must match ``tag``."""
        got_tag, payload = self._raw_recv(src)
        if got_tag != tag:
            raise ProtocolError(
                f"{self.coord} expected tag {tag!r} from {self.mesh.coords[src]}, "
                f"got {got_tag!r}"
            )
        return payload

    def _raw_recv(self, src, timeout=None):
        if self.mesh._broken.is_set():
            raise WorkerShutdown("mesh is shutting down")
        q = self.mesh._channel(src, self.rank)
        try:
            item = q.get(timeout=self.mesh.timeout if timeout is None else timeout)
        except queue.Empty:
            raise DeadlockError(
                f"{self.coord} timed out after {self.mesh.timeout}s waiting for a "
                f"message from {self.mesh.coords[src]}"
            ) from None
        if item is _SHUTDOWN:
            raise WorkerShutdown("mesh is shutting down")
        return item

    def _send_any(self, dst, payload, tag):
        # Internal path for collectives: not restricted to neighbors.
        self.counters["coll_bytes"] += _payload_nbytes(payload)
        self.mesh._channel(self.rank, dst).put((tag, payload))

    def _neighbor_ranks(self):
        ranks = set()
        for i, ax in enumerate(self.mesh.axes):
            for d in (-1, 1):
                c = self.coord[i] + d
                if 0 <= c < ax.size:
                    ranks.add(self.mesh.rank_of[self.coord[:i] + (c,) + self.coord[i + 1 :]])
        return ranks

    # -- collectives ------------------------------------------------------

    def group(self, axes=None):
        """Ranks reachable by varying ``axes`` (all axes if None), sorted by coordinate."""
        if axes is None:
            axes = [ax.name for ax in self.mesh.axes]
        elif isinstance(axes, str):
            axes = [axes]
        idxs = []
        for a in axes:
            if a not in self.mesh.axis_index:
                raise MeshConfigError(f"unknown mesh axis {a!r}")
            idxs.append(self.mesh.axis_index[a])
        ranges = [
            range(ax.size) if i in idxs else (self.coord[i],)
            for i, ax in enumerate(self.mesh.axes)
        ]
        return [self.mesh.rank_of[c] for c in itertools.product(*ranges)]

    def barrier(self, axes=None, tag="barrier"):
        """Block until every worker in the group has arrived.

        The group leader (lowest coordinate) gathers one token per member and
        releases them together.  On timeout the leader raises a DeadlockError
        naming the coordinates that never arrived.
        """
        group = self.group(axes)
        if len(group) == 1:
            return
        leader = group[0]
        if self.rank == leader:
            missing = []
            for r in group[1:]:
                try:
                    self._expect(r, (tag, "arrive"))
                except DeadlockError:
                    missing.append(r)
            if missing:
                # Drain any stragglers that arrived while we were collecting.
                still = [
                    r for r in missing if not self._try_expect(r, (tag, "arrive"))
                ]
                if still:
                    coords = [self.mesh.coords[r] for r in still]
                    raise DeadlockError(
                        f"barrier timed out; unarrived coordinates: {coords}"
                    )
            for r in group[1:]:
                self._send_any(r, None, (tag, "release"))
        else:
            self._send_any(leader, None, (tag, "arrive"))
            # Backstop only: give the leader time to collect its timeout
            # diagnostics; a real failure wakes us through the shutdown sentinel.
            self._expect(leader, (tag, "release"), timeout=self.mesh.timeout * (len(group) + 1))

    def all_reduce_sum(self, local, axes=None, tag="allreduce"):
        """Element-wise sum over the group, reduced sequentially in coordinate order.

        Every member receives the identical result array (bitwise).  A group of
        one returns the input unchanged.
        """
        local = np.asarray(local)
        group = self.group(axes)
        if len(group) == 1:
            return local
        leader = group[0]
        if self.rank == leader:
            parts = [local]
            for r in group[1:]:
                parts.append(self._expect(r, (tag, "part")))
            bad = [
                (self.mesh.coords[group[i]], p.shape, p.dtype)
                for i, p in enumerate(parts)
                if p.shape != local.shape or p.dtype != local.dtype
            ]
            if bad:
                err = CollectiveMismatchError(
                    f"all_reduce_sum over {axes or 'all axes'}: expected "
                    f"{local.shape} {local.dtype}, got {bad}"
                )
                for r in group[1:]:
                    self._send_any(r, err, (tag, "result"))
                raise err
            acc = parts[0].copy()
            for p in parts[1:]:
                acc += p
            for r in group[1:]:
                self._send_any(r, acc.copy(), (tag, "result"))
            return acc
        self._send_any(leader, local, (tag, "part"))
        res = self._expect(leader, (tag, "result"))
        if isinstance(res, Exception):
            raise res
        return res

    def _expect(self, src, tag, timeout=None):
        got_tag, payload = self._raw_recv(src, timeout=timeout)
        if got_tag != tag:
            raise ProtocolError(
                f"{self.coord} expected {tag!r} from {self.mesh.coords[src]}, got {got_tag!r}"
            )
        return payload

    def _try_expect(self, src, tag):
        try:
            got_tag, payload = self._raw_recv(src, timeout=0.01)
        except (DeadlockError, WorkerShutdown):
            return False
        if got_tag != tag:
            raise ProtocolError(f"unexpected {got_tag!r} while draining barrier")
        return True


class DeviceMesh:
    """A grid of simulated devices; one worker thread per device.

    ``axes`` is an ordered list of ``(name, size)``; ranks enumerate coordinates
    lexicographically.  The mesh is immutable after creation.  Use as a context
    manager or call :meth:`shutdown` to join the workers.
    """

    def __init__(self, axes, timeout=30.0):
        axes = [MeshAxis(str(n), int(s)) for n, s in axes]
        if not axes:
            raise MeshConfigError("mesh needs at least one axis")
        names = [a.name for a in axes]
        if len(set(names)) != len(names):
            raise MeshConfigError(f"duplicate axis names in {names}")
        for a in axes:
            if a.size < 1:
                raise MeshConfigError(f"axis {a.name!r} has non-positive size {a.size}")
        self.axes = tuple(axes)
        self.axis_index = {a.name: i for i, a in enumerate(axes)}
        self.shape = tuple(a.size for a in axes)
        self.worker_count = int(np.prod(self.shape))
        self.coords = list(itertools.product(*[range(s) for s in self.shape]))
        self.rank_of = {c: r for r, c in enumerate(self.coords)}
        self.timeout = float(timeout)

        self._channels = {}
        self._chan_lock = threading.Lock()
        self._cmd = [queue.Queue() for _ in range(self.worker_count)]
        self._done = queue.Queue()
        self._broken = threading.Event()
        self._closed = False
        self._job_counter = itertools.count()
        self._contexts = [WorkerContext(self, r) for r in range(self.worker_count)]
        self._threads = [
            threading.Thread(
                target=self._worker_loop, args=(r,), name=f"mesh-{self.coords[r]}", daemon=True
            )
            for r in range(self.worker_count)
        ]
        for t in self._threads:
            t.start()
        # Every worker checks in through an initial barrier.
        self.run(lambda ctx: ctx.barrier())

    # -- driver API --------------------------------------------------------

    def run(self, fn, *args, per_worker=None):
        """Execute ``fn(ctx, *args)`` on every worker; returns results by rank.

        ``per_worker`` is an optional tuple of length-``worker_count`` sequences;
        element ``rank`` of each is appended to that worker's arguments.  The
        first worker exception aborts the program on all workers and re-raises
        driver-side as WorkerFailed.
        """
        if self._closed:
            raise ProtocolError("mesh is shut down")
        if self._broken.is_set():
            raise ProtocolError("mesh is broken after an earlier failure")
        job = next(self._job_counter)
        for r in range(self.worker_count):
            extra = tuple(pw[r] for pw in per_worker) if per_worker else ()
            self._cmd[r].put((job, fn, args + extra))
        results = [None] * self.worker_count
        first_error = None
        for _ in range(self.worker_count):
            jid, rank, status, payload = self._done.get()
            if jid != job:  # pragma: no cover - defensive
                raise ProtocolError(f"job id mismatch: {jid} != {job}")
            if status == "ok":
                results[rank] = payload
            elif status == "shutdown":
                pass
            else:
                exc, tb = payload
                if first_error is None:
                    first_error = (rank, exc, tb)
                    self._poison()
        if first_error is not None:
            rank, exc, tb = first_error
            raise WorkerFailed(self.coords[rank], f"{exc}\n{tb}") from exc
        return results

    def shutdown(self):
        if self._closed:
            return
        self._closed = True
        for q in self._cmd:
            q.put(_SHUTDOWN)
        for t in self._threads:
            t.join(timeout=self.timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False

    def axis_size(self, name):
        if name not in self.axis_index:
            raise MeshConfigError(f"unknown mesh axis {name!r}")
        return self.axes[self.axis_index[name]].size

    def describe(self):
        return ",".join(f"{a.name}={a.size}" for a in self.axes)

    # -- internals ---------------------------------------------------------

    def _channel(self, src, dst):
        key = (src, dst)
        q = self._channels.get(key)
        if q is None:
            with self._chan_lock:
                q = self._channels.get(key)
                if q is None:
                    q = queue.Queue()
                    if self._broken.is_set():
                        q.put(_SHUTDOWN)
                    self._channels[key] = q
        return q

    def _poison(self):
        self._broken.set()
        with self._chan_lock:
            for q in self._channels.values():
                q.put(_SHUTDOWN)

    def _worker_loop(self, rank):
        ctx = self._contexts[rank]
        while True:
            item = self._cmd[rank].get()
            if item is _SHUTDOWN:
                return
            job, fn, args = item
            try:
                out = fn(ctx, *args)
            except WorkerShutdown as e:
                self._done.put((job, rank, "shutdown", e))
            except BaseException as e:  # noqa: BLE001 - forwarded to the driver
                self._done.put((job, rank, "error", (e, traceback.format_exc())))
            else:
                self._done.put((job, rank, "ok", out))


def create_mesh(axes, timeout=30.0):
    """Build a DeviceMesh from ``[(axis_name, size), ...]`` and start its workers."""
    return DeviceMesh(axes, timeout=timeout)
