"""Simulated devices, their memory arenas and asynchronous command queues.

Each device is served by one worker thread that drains an in-order FIFO of
commands.  Everything submitted returns a :class:`Fence` immediately; results
become visible to the host only through fences or :meth:`Environment.barrier_fence`.

Commands that span several devices (peer-to-peer copies, reductions) are
submitted as *gang* commands: one participant is enqueued on every involved
queue under a global submission lock, and the participants rendezvous before
running.  Because all gangs are enqueued in one global order, no two gangs can
wait on each other in a cycle.
"""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import AllocationError, ConfigError, KernelError, UsageError
from .topology import Topology, TransferLedger

# GeForce GTX 580 carries 1.5 GB
DEFAULT_ARENA_BYTES = 1536 * 1024 * 1024

_local = threading.local()


def current_rank() -> Optional[int]:
    """Rank of the device whose worker is executing the caller, else None."""
    return getattr(_local, "rank", None)


@dataclass(frozen=True)
class DevGroup:
    """Contiguous half-open range of device ranks ``[first, last_exclusive)``."""

    first: int
    last_exclusive: int

    @classmethod
    def from_to(cls, first: int, last_exclusive: int) -> "DevGroup":
        return cls(first, last_exclusive)

    @property
    def ranks(self) -> range:
        return range(self.first, self.last_exclusive)

    def __len__(self) -> int:
        return self.last_exclusive - self.first

    def __contains__(self, rank) -> bool:
        return self.first <= rank < self.last_exclusive


class Arena:
    """Per-device memory with capacity accounting.

    Offsets are logical addresses handed out by a bump counter; each allocation
    is backed by its own ndarray which only this device's commands touch.
    """

    def __init__(self, rank: int, capacity: int):
        self.rank = rank
        self.capacity = capacity
        self.used = 0
        self._next = 0
        self._blocks: Dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def allocate(self, count: int, dtype) -> tuple:
        dtype = np.dtype(dtype)
        nbytes = count * dtype.itemsize
        with self._lock:
            if self.used + nbytes > self.capacity:
                raise AllocationError(
                    f"device {self.rank}: cannot allocate {nbytes} B "
                    f"({self.used} of {self.capacity} B in use)"
                )
            offset = self._next
            self._next += max(nbytes, 1)
            self.used += nbytes
            buf = np.empty(count, dtype=dtype)
            self._blocks[offset] = buf
        return offset, buf

    def free(self, offset: int) -> None:
        with self._lock:
            buf = self._blocks.pop(offset, None)
            if buf is not None:
                self.used -= buf.nbytes

    def block(self, offset: int) -> np.ndarray:
        return self._blocks[offset]


class DeviceHandle:
    def __init__(self, rank: int, arena_bytes: int):
        self.rank = rank
        self.arena = Arena(rank, arena_bytes)
        self._executor = ThreadPoolExecutor(
            max_workers=1,
            thread_name_prefix=f"device{rank}",
            initializer=_bind_rank,
            initargs=(rank,),
        )
        self._last: Future = _done_future()
        self.submitted = 0
        self.failures: List[Future] = []

    def enqueue(self, fn: Callable[[], Any]) -> Future:
        fut = self._executor.submit(fn)
        self._last = fut
        self.submitted += 1
        fut.add_done_callback(self._on_done)
        return fut

    def _on_done(self, fut: Future) -> None:
        if not fut.cancelled() and fut.exception() is not None:
            self.failures.append(fut)

    def shutdown(self) -> None:
        self._executor.shutdown(wait=True)


def _bind_rank(rank: int) -> None:
    _local.rank = rank


def _done_future() -> Future:
    f: Future = Future()
    f.set_result(None)
    return f


class Fence:
    """Token for a set of submitted commands."""

    def __init__(self, entries: Iterable[tuple] = ()):
        # (rank, future) pairs
        self._entries = list(entries)

    def __or__(self, other: "Fence") -> "Fence":
        return Fence(self._entries + other._entries)

    @classmethod
    def merge(cls, fences: Iterable["Fence"]) -> "Fence":
        return cls(itertools.chain.from_iterable(f._entries for f in fences))

    def done(self) -> bool:
        return all(f.done() for _, f in self._entries)

    def wait(self, timeout: Optional[float] = None) -> None:
        """Block until every command completed; re-raise the first failure."""
        first = None
        for rank, fut in self._entries:
            exc = fut.exception(timeout=timeout)
            if exc is not None:
                fut.reported = True
                if first is None:
                    first = KernelError(rank, exc) if not isinstance(exc, KernelError) else exc
        if first is not None:
            raise first


class Passthrough:
    """Forward a whole segmented container to a kernel instead of its local range."""

    def __init__(self, value):
        self.value = value


class Environment:
    """Simulated multi-device node.

    Use :func:`create_environment` to build one.  Environments are shareable
    across host threads and are context managers; leaving the ``with`` block
    drains and stops every worker.
    """

    def __init__(
        self,
        device_count: int,
        group: Optional[DevGroup] = None,
        topology: Optional[Topology] = None,
        arena_bytes: int = DEFAULT_ARENA_BYTES,
    ):
        if not isinstance(device_count, int) or device_count < 1:
            raise ConfigError("devices", f"device count must be a positive integer, got {device_count!r}")
        if group is None:
            group = DevGroup(0, device_count)
        if not 0 <= group.first < group.last_exclusive <= device_count:
            raise ConfigError(
                "group", f"[{group.first}, {group.last_exclusive}) outside [0, {device_count})"
            )
        if topology is None:
            topology = Topology.single(device_count)
        if topology.device_count < device_count:
            raise ConfigError(
                "topology",
                f"topology describes {topology.device_count} devices, environment needs {device_count}",
            )
        self.device_count = device_count
        self.group = group
        self.topology = topology
        self.ledger = TransferLedger()
        self._devices = {r: DeviceHandle(r, arena_bytes) for r in group.ranks}
        self._submit_lock = threading.Lock()
        self._closed = False

    @property
    def ranks(self) -> List[int]:
        return list(self.group.ranks)

    @property
    def size(self) -> int:
        return len(self.group)

    def device(self, rank: int) -> DeviceHandle:
        try:
            return self._devices[rank]
        except (KeyError, TypeError):
            raise UsageError(f"rank {rank!r} is not in device group {list(self.group.ranks)}") from None

    def check_rank(self, rank: int) -> None:
        self.device(rank)

    def submit(self, rank: int, fn: Callable[..., Any], *args, **kwargs) -> Fence:
        """Enqueue ``fn(*args, **kwargs)`` on device ``rank``; returns at once."""
        dev = self.device(rank)
        self._check_open()
        call = (lambda: fn(*args, **kwargs)) if (args or kwargs) else fn
        with self._submit_lock:
            fut = dev.enqueue(call)
        return Fence([(rank, fut)])

    def submit_gang(self, ranks: Sequence[int], body: Callable[[int, Callable[[], None]], Any]) -> Fence:
        """Run ``body(rank, sync)`` on every rank in ``ranks`` as one command.

        All participants start together once every involved queue has reached
        the gang; ``sync()`` is a barrier among the participants.  A body that
        raises breaks the barrier so that no participant hangs.
        """
        ranks = sorted(set(ranks))
        if not ranks:
            return Fence()
        devs = [self.device(r) for r in ranks]
        self._check_open()
        barrier = threading.Barrier(len(ranks))

        def participant(rank):
            def run():
                try:
                    barrier.wait()
                    return body(rank, barrier.wait)
                except threading.BrokenBarrierError:
                    raise
                except BaseException:
                    barrier.abort()
                    raise

            return run

        with self._submit_lock:
            futs = [(d.rank, d.enqueue(participant(d.rank))) for d in devs]
        return Fence(futs)

    def barrier_fence(self) -> None:
        """Block until every queue in the group has drained.

        Raises the first command failure that was not already reported
        through a fence.
        """
        if self._closed:
            return
        with self._submit_lock:
            markers = [(r, d.enqueue(_noop)) for r, d in self._devices.items()]
        for _, fut in markers:
            fut.result()
        for rank, dev in self._devices.items():
            for fut in list(dev.failures):
                if not getattr(fut, "reported", False):
                    fut.reported = True
                    raise KernelError(rank, fut.exception())

    def invoke_kernel(self, caller: Callable, *args, rank: int) -> Fence:
        """Run ``caller`` once in the context of device ``rank``.

        Segmented-container arguments arrive as that device's local range;
        wrap one in :class:`Passthrough` to forward the whole container.
        """
        self.check_rank(rank)
        local_args = [_localize(a, rank) for a in args]
        return self.submit(rank, caller, *local_args)

    def invoke_kernel_all(self, caller: Callable, *args) -> Fence:
        return Fence.merge(self.invoke_kernel(caller, *args, rank=r) for r in self.ranks)

    def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        for dev in self._devices.values():
            dev.shutdown()

    def _check_open(self):
        if self._closed:
            raise UsageError("environment has been shut down")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()

    def __repr__(self):
        return f"Environment(devices={self.device_count}, group={list(self.group.ranks)})"


def _noop():
    return None


def _localize(arg, rank):
    from .segvec import SegVector

    if isinstance(arg, Passthrough):
        return arg.value
    if isinstance(arg, SegVector):
        return arg.local_or_empty(rank)
    return arg


def create_environment(
    device_count: int,
    group: Optional[DevGroup] = None,
    topology: Optional[Topology] = None,
    arena_bytes: int = DEFAULT_ARENA_BYTES,
) -> Environment:
    """Start one worker per device in ``group`` (default: all devices)."""
    return Environment(device_count, group, topology, arena_bytes)
