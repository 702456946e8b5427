"""MPI-like transfer primitives over segmented vectors.

Every primitive decomposes into commands on the involved device queues and
returns one :class:`~multidev.runtime.Fence` covering all of them.  Transfers
are routed with the environment's topology and recorded in its ledger at the
moment they execute.

Host arrays passed to :func:`scatter`, :func:`broadcast`, :func:`gather` and
:func:`reduce` must stay alive and untouched until the returned fence has been
waited on, exactly like pinned host buffers in an asynchronous copy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import UnsupportedTopologyError, UsageError
from .runtime import Environment, Fence
from .segvec import Overlap2D, SegVector, natural_counts
from .topology import HOST, PathKind


class ReduceOp(enum.Enum):
    SUM = "sum"

    def combine(self, acc: np.ndarray, other: np.ndarray) -> None:
        """In-place ``acc <- acc op other``."""
        if self is ReduceOp.SUM:
            np.add(acc, other, out=acc)
        else:  # pragma: no cover - extension point
            raise NotImplementedError(self)


def _check_host(arr: np.ndarray, v: SegVector, what: str) -> np.ndarray:
    if not isinstance(arr, np.ndarray):
        raise UsageError(f"{what} must be a numpy array")
    if arr.size != v.logical_len:
        raise UsageError(f"{what} has {arr.size} elements, vector has {v.logical_len}")
    if arr.dtype != v.dtype:
        raise UsageError(f"{what} dtype {arr.dtype} does not match vector dtype {v.dtype}")
    return arr.reshape(-1)


def device_copy(
    env: Environment,
    src: SegVector,
    src_start: int,
    dst: SegVector,
    dst_start: int,
    src_rank: int,
    dst_rank: int,
    count: int,
) -> Fence:
    """Copy ``count`` elements between two device segments.

    Same-rank copies are an ordinary command; cross-rank copies run as a gang
    on both queues so that neither side moves on while the data is in flight.
    """
    nbytes = count * src.itemsize
    kind = env.topology.resolve_path(src_rank, dst_rank)
    ledger = env.ledger

    def copy():
        s = src.local_range(src_rank)[src_start : src_start + count]
        dst.local_range(dst_rank)[dst_start : dst_start + count] = s
        ledger.record(src_rank, dst_rank, kind, nbytes)

    if src_rank == dst_rank:
        return env.submit(src_rank, copy)

    def body(rank, sync):
        if rank == dst_rank:
            copy()
        sync()

    return env.submit_gang([src_rank, dst_rank], body)


def copy_seg(src: SegVector, dst: SegVector) -> Fence:
    """Make ``dst`` logically equal to ``src``, span by span.

    Each destination segment (halo rows included) is filled from the source
    segments that own the overlapping global range.  A Clone source serves
    every span from the destination's own rank when it holds a replica there.
    """
    if src is dst:
        return Fence()
    if src.logical_len != dst.logical_len or src.dtype != dst.dtype:
        raise UsageError(
            f"copy_seg mismatch: {src.logical_len}/{src.dtype} vs {dst.logical_len}/{dst.dtype}"
        )
    env = dst.env
    fences = []
    for d in dst.segments:
        g0, g1 = d.global_offset, d.global_offset + d.len
        for s_rank, s_local, g_lo, n in _source_pieces(src, g0, g1, prefer=d.rank):
            fences.append(device_copy(env, src, s_local, dst, g_lo - g0, s_rank, d.rank, n))
    return Fence.merge(fences)


def _source_pieces(src: SegVector, g0: int, g1: int, prefer: int):
    if src.is_clone:
        rank = prefer if prefer in src.ranks else src.segments[0].rank
        yield rank, g0, g0, g1 - g0
        return
    for s in src.segments:
        lstart, gstart, n = src.owned(s.rank)
        lo, hi = max(g0, gstart), min(g1, gstart + n)
        if lo < hi:
            yield s.rank, lstart + lo - gstart, lo, hi - lo


def scatter(src: np.ndarray, dst: SegVector) -> Fence:
    """Distribute a host array: every segment receives its global span."""
    flat = _check_host(src, dst, "scatter source")
    env, ledger = dst.env, dst.env.ledger
    fences = []
    for d in dst.segments:

        def h2d(d=d):
            dst.local_range(d.rank)[:] = flat[d.global_offset : d.global_offset + d.len]
            ledger.record(HOST, d.rank, PathKind.HOST_TO_DEVICE, d.len * dst.itemsize)

        fences.append(env.submit(d.rank, h2d))
    return Fence.merge(fences)


def gather(src: SegVector, dst: np.ndarray) -> Fence:
    """Assemble the logical contents of ``src`` into a host array.

    Clone vectors are read from their first rank only; halo rows are skipped.
    """
    flat = _check_host(dst, src, "gather destination")
    if not np.shares_memory(flat, dst):
        raise UsageError("gather destination must be contiguous")
    env, ledger = src.env, src.env.ledger
    segs = src.segments[:1] if src.is_clone else src.segments
    fences = []
    for d in segs:
        lstart, gstart, n = src.owned(d.rank)

        def d2h(rank=d.rank, lstart=lstart, gstart=gstart, n=n):
            flat[gstart : gstart + n] = src.local_range(rank)[lstart : lstart + n]
            ledger.record(rank, HOST, PathKind.DEVICE_TO_HOST, n * src.itemsize)

        fences.append(env.submit(d.rank, d2h))
    return Fence.merge(fences)


def to_host(v: SegVector) -> np.ndarray:
    """Blocking gather into a fresh array."""
    out = np.empty(v.logical_len, dtype=v.dtype)
    gather(v, out).wait()
    return out


def broadcast(src: np.ndarray, dst: SegVector) -> Fence:
    """Copy one host array to every replica of a Clone vector."""
    if not dst.is_clone:
        raise UsageError("broadcast destination must use the Clone policy")
    return scatter(src, dst)


def reduce(src: SegVector, dst: np.ndarray, op: ReduceOp = ReduceOp.SUM) -> Fence:
    """Combine all replicas of a Clone vector into a host array.

    Devices are grouped by IOH.  Within a group the lowest rank is the leader:
    it reads every peer's replica over peer-to-peer access, combines in
    ascending rank order, and ships its partial result to host memory.  With
    more than one IOH involved the host combines the partials, again in
    ascending order.
    """
    if not src.is_clone:
        raise UsageError("reduce source must use the Clone policy")
    flat = _check_host(dst, src, "reduce destination")
    env, ledger, topo = src.env, src.env.ledger, src.env.topology
    nbytes = src.logical_len * src.itemsize
    groups = list(topo.peer_sets(src.ranks).values())
    leaders = [g[0] for g in groups]
    multi = len(groups) > 1
    staging = {leader: np.empty_like(flat) for leader in leaders} if multi else {leaders[0]: flat}

    def body(rank, sync):
        if rank in staging:
            members = groups[leaders.index(rank)]
            acc = src.local_range(rank).copy()
            for peer in members[1:]:
                op.combine(acc, src.local_range(peer))
                ledger.record(peer, rank, PathKind.PEER_TO_PEER, nbytes)
            staging[rank][:] = acc
            ledger.record(rank, HOST, PathKind.DEVICE_TO_HOST, nbytes)
        sync()
        if multi and rank == leaders[0]:
            # host-side combine of the per-IOH partials
            flat[:] = staging[leaders[0]]
            for leader in leaders[1:]:
                op.combine(flat, staging[leader])
            ledger.note_host_combine()
        sync()

    return env.submit_gang(src.ranks, body)


@dataclass(frozen=True)
class Window2D:
    """Rectangular sub-window applied to every ``rows x cols`` matrix of a buffer."""

    rows: int
    cols: int
    row0: int
    col0: int
    nrows: int
    ncols: int

    def __post_init__(self):
        if not (0 <= self.row0 and self.row0 + self.nrows <= self.rows):
            raise UsageError("window rows out of range")
        if not (0 <= self.col0 and self.col0 + self.ncols <= self.cols):
            raise UsageError("window columns out of range")

    @classmethod
    def centered(cls, rows: int, cols: int, nrows: int, ncols: int) -> "Window2D":
        return cls(rows, cols, (rows - nrows) // 2, (cols - ncols) // 2, nrows, ncols)


def _block_slices(length: int, g: int, window: Optional[Window2D]) -> List[List[slice]]:
    """Partition the summed region into ``g`` blocks of flat slices."""
    if window is None:
        out, off = [], 0
        for n in natural_counts(length, g):
            out.append([slice(off, off + n)] if n else [])
            off += n
        return out
    mat = window.rows * window.cols
    if length % mat:
        raise UsageError(f"buffer length {length} is not a multiple of the {window.rows}x{window.cols} matrix")
    rows = [
        b * mat + (window.row0 + r) * window.cols + window.col0
        for b in range(length // mat)
        for r in range(window.nrows)
    ]
    out, i = [], 0
    for n in natural_counts(len(rows), g):
        out.append([slice(s, s + window.ncols) for s in rows[i : i + n]])
        i += n
    return out


def all_reduce_blockwise(
    parts: SegVector,
    out: SegVector,
    op: ReduceOp = ReduceOp.SUM,
    window: Optional[Window2D] = None,
) -> Fence:
    """Every device's ``out`` replica becomes ``op`` over all ``parts`` replicas.

    Device ``g`` computes block ``g`` of the result by reading that block from
    every peer (ascending rank order), then each device pulls the remaining
    blocks from their owners.  With a ``window`` only that sub-region of each
    matrix is summed and exchanged; elements outside it are left untouched.
    ``parts`` and ``out`` must be distinct buffers (double buffering).
    """
    if not (parts.is_clone and out.is_clone):
        raise UsageError("all_reduce_blockwise needs Clone-policy buffers")
    if parts is out:
        raise UsageError("all_reduce_blockwise: parts and out must not alias")
    if parts.logical_len != out.logical_len or parts.ranks != out.ranks or parts.dtype != out.dtype:
        raise UsageError("all_reduce_blockwise: parts and out must have identical layout")
    env, ledger, topo = parts.env, parts.env.ledger, parts.env.topology
    ranks = parts.ranks
    if len(topo.peer_sets(ranks)) > 1:
        raise UnsupportedTopologyError(
            f"all-reduce over ranks {ranks} spans several IOH groups; peer-to-peer access is unavailable"
        )
    blocks = _block_slices(parts.logical_len, len(ranks), window)
    itemsize = parts.itemsize

    def body(rank, sync):
        me = ranks.index(rank)
        dst = out.local_range(rank)
        mine = blocks[me]
        nb = sum(s.stop - s.start for s in mine) * itemsize
        for sl in mine:
            dst[sl] = parts.local_range(ranks[0])[sl]
            for peer in ranks[1:]:
                op.combine(dst[sl], parts.local_range(peer)[sl])
        for peer in ranks:
            kind = PathKind.ON_DEVICE if peer == rank else PathKind.PEER_TO_PEER
            if nb:
                ledger.record(peer, rank, kind, nb)
        sync()
        for j, owner in enumerate(ranks):
            if owner == rank or not blocks[j]:
                continue
            src = out.local_range(owner)
            for sl in blocks[j]:
                dst[sl] = src[sl]
            ledger.record(owner, rank, PathKind.PEER_TO_PEER, sum(s.stop - s.start for s in blocks[j]) * itemsize)
        sync()

    return env.submit_gang(ranks, body)


def halo_exchange(v: SegVector) -> Fence:
    """Refresh every halo row of an Overlap2D vector from its owner."""
    if not isinstance(v.policy, Overlap2D):
        raise UsageError("halo_exchange needs an Overlap2D vector")
    c = v.policy.cols
    env = v.env
    fences = []
    segs = v.segments
    for a, b in zip(segs, segs[1:]):
        if a.halo_hi:
            # a's upper halo mirrors b's first owned rows
            n = a.halo_hi * c
            fences.append(device_copy(env, v, b.halo_lo * c, v, a.len - n, b.rank, a.rank, n))
        if b.halo_lo:
            n = b.halo_lo * c
            a_owned_end = a.len - a.halo_hi * c
            fences.append(device_copy(env, v, a_owned_end - n, v, 0, a.rank, b.rank, n))
    return Fence.merge(fences)


def segment_spans(v: SegVector) -> List[Tuple[int, int, int]]:
    """(rank, global_start, length) of every owned span; handy for reports."""
    return [(s.rank, *v.owned(s.rank)[1:]) for s in v.segments]
