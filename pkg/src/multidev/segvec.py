"""Segmented vectors: one logical array stored as per-device segments.

A :class:`SegVector` never holds data on the host.  Its descriptors record,
for every participating device, where the segment lives in that device's
arena and which global element range it covers.  Split policies decide the
layout:

* :class:`Natural`   -- contiguous, lengths differ by at most one, remainder
  on the lowest ranks
* :class:`Blockwise` -- contiguous runs of whole blocks per device (blocks
  distributed like ``Natural``), only the last segment may end in a partial block
* :class:`Clone`     -- every device holds the full array
* :class:`Overlap2D` -- row blocks of a ``rows x cols`` matrix with ``halo``
  extra rows copied from each neighbour
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import UsageError
from .runtime import Environment

DTYPES = {
    "complex32": np.complex64,
    "real32": np.float32,
    # double-precision kinds back the oracle mode of the reconstruction tests
    "complex64": np.complex128,
    "real64": np.float64,
}


@dataclass(frozen=True)
class Natural:
    pass


@dataclass(frozen=True)
class Blockwise:
    block_len: int


@dataclass(frozen=True)
class Clone:
    pass


@dataclass(frozen=True)
class Overlap2D:
    rows: int
    cols: int
    halo: int = 1


SplitPolicy = Union[Natural, Blockwise, Clone, Overlap2D]


@dataclass(frozen=True)
class SegmentDescriptor:
    rank: int
    global_offset: int
    len: int
    arena_offset: int
    halo_lo: int = 0
    halo_hi: int = 0


def natural_counts(total: int, parts: int) -> List[int]:
    """Split ``total`` into ``parts`` near-equal counts, remainder first."""
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _layout(logical_len: int, policy: SplitPolicy, ranks: Sequence[int]):
    """Return (rank, global_offset, len, halo_lo, halo_hi) for each segment."""
    g = len(ranks)
    if isinstance(policy, Natural):
        if logical_len < g:
            raise UsageError(f"natural split needs at least {g} elements, got {logical_len}")
        out, off = [], 0
        for r, n in zip(ranks, natural_counts(logical_len, g)):
            out.append((r, off, n, 0, 0))
            off += n
        return out
    if isinstance(policy, Blockwise):
        b = policy.block_len
        if b < 1:
            raise UsageError("block_len must be >= 1")
        if logical_len < 1:
            raise UsageError("blockwise split of an empty vector")
        nblocks = -(-logical_len // b)
        out, off = [], 0
        for r, nb in zip(ranks, natural_counts(nblocks, g)):
            if nb == 0:
                continue
            n = min(nb * b, logical_len - off)
            out.append((r, off, n, 0, 0))
            off += n
        return out
    if isinstance(policy, Clone):
        if logical_len < 1:
            raise UsageError("clone of an empty vector")
        return [(r, 0, logical_len, 0, 0) for r in ranks]
    if isinstance(policy, Overlap2D):
        rows, cols, halo = policy.rows, policy.cols, policy.halo
        if rows * cols != logical_len:
            raise UsageError(f"Overlap2D {rows}x{cols} does not match length {logical_len}")
        if rows < g:
            raise UsageError(f"Overlap2D needs at least {g} rows, got {rows}")
        if halo < 0:
            raise UsageError("halo must be >= 0")
        counts = natural_counts(rows, g)
        if g > 1 and halo > min(counts):
            raise UsageError(f"halo of {halo} rows exceeds the smallest row block ({min(counts)} rows)")
        out, row = [], 0
        for i, (r, nr) in enumerate(zip(ranks, counts)):
            lo = min(halo, row) if i > 0 else 0
            hi = min(halo, rows - row - nr) if i < g - 1 else 0
            out.append((r, (row - lo) * cols, (lo + nr + hi) * cols, lo, hi))
            row += nr
        return out
    raise UsageError(f"unknown split policy {policy!r}")


class SegVector:
    """Logical array of ``logical_len`` elements split across device arenas.

    Build with :func:`create_segmented`.  ``segments`` holds one
    :class:`SegmentDescriptor` per participating device, ordered by rank.
    """

    def __init__(self, env: Environment, logical_len: int, policy: SplitPolicy, dtype, ranks=None):
        self.env = env
        self.logical_len = int(logical_len)
        self.policy = policy
        self.dtype = np.dtype(dtype)
        ranks = list(env.ranks if ranks is None else ranks)
        for r in ranks:
            env.check_rank(r)
        if len(set(ranks)) != len(ranks):
            raise UsageError("duplicate ranks")
        ranks.sort()
        self.ranks_requested = ranks
        segs = []
        allocated = []
        try:
            for rank, goff, n, lo, hi in _layout(self.logical_len, policy, ranks):
                arena = env.device(rank).arena
                aoff, _ = arena.allocate(n, self.dtype)
                allocated.append((arena, aoff))
                segs.append(SegmentDescriptor(rank, goff, n, aoff, lo, hi))
        except Exception:
            for arena, aoff in allocated:
                arena.free(aoff)
            raise
        self.segments: Tuple[SegmentDescriptor, ...] = tuple(segs)
        self._by_rank = {s.rank: s for s in segs}
        for arena, aoff in allocated:
            weakref.finalize(self, arena.free, aoff)

    @property
    def ranks(self) -> List[int]:
        return [s.rank for s in self.segments]

    @property
    def itemsize(self) -> int:
        return self.dtype.itemsize

    @property
    def is_clone(self) -> bool:
        return isinstance(self.policy, Clone)

    def descriptor(self, rank: int) -> SegmentDescriptor:
        try:
            return self._by_rank[rank]
        except KeyError:
            raise UsageError(f"device {rank} holds no segment of this vector") from None

    def local_range(self, rank: int) -> np.ndarray:
        """View of ``rank``'s whole segment (halo rows included).

        Only commands running on ``rank``'s queue (or comm transfers naming
        it) may touch the returned memory.
        """
        d = self.descriptor(rank)
        return self.env.device(rank).arena.block(d.arena_offset)

    def local_or_empty(self, rank: int) -> np.ndarray:
        if rank in self._by_rank:
            return self.local_range(rank)
        return np.empty(0, dtype=self.dtype)

    def owned(self, rank: int) -> Tuple[int, int, int]:
        """(local_start, global_start, length) of the non-halo part of ``rank``'s segment."""
        d = self.descriptor(rank)
        if isinstance(self.policy, Overlap2D):
            c = self.policy.cols
            return d.halo_lo * c, d.global_offset + d.halo_lo * c, d.len - (d.halo_lo + d.halo_hi) * c
        return 0, d.global_offset, d.len

    def global_of(self, rank: int, local_index: int) -> int:
        d = self.descriptor(rank)
        if not 0 <= local_index < d.len:
            raise IndexError(f"local index {local_index} outside segment of length {d.len}")
        return d.global_offset + local_index

    def segment_of(self, global_index: int) -> Tuple[int, int]:
        """Owning (rank, local_index) of a global element.

        Clone vectors resolve to the first rank; halo copies are never owners.
        """
        if not 0 <= global_index < self.logical_len:
            raise IndexError(f"global index {global_index} outside [0, {self.logical_len})")
        if self.is_clone:
            return self.segments[0].rank, global_index
        for s in self.segments:
            lstart, gstart, n = self.owned(s.rank)
            if gstart <= global_index < gstart + n:
                return s.rank, lstart + global_index - gstart
        raise AssertionError("unreachable: owned ranges partition the vector")

    def __repr__(self):
        lens = [s.len for s in self.segments]
        return f"SegVector(len={self.logical_len}, {self.policy}, {self.dtype}, segments={lens})"


def create_segmented(
    env: Environment,
    logical_len: int,
    policy: Optional[SplitPolicy] = None,
    dtype="complex32",
    ranks=None,
) -> SegVector:
    """Allocate a segmented vector; contents are uninitialized.

    ``dtype`` accepts the element kind names of :data:`DTYPES` or a numpy dtype.
    ``ranks`` restricts the vector to a subset of the environment's group.
    """
    return SegVector(env, logical_len, policy or Natural(), _resolve_dtype(dtype), ranks)


def _resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        dtype = DTYPES[dtype]
    try:
        dtype = np.dtype(dtype)
    except TypeError:
        raise UsageError(f"unknown element type {dtype!r}") from None
    if dtype not in {np.dtype(t) for t in DTYPES.values()}:
        raise UsageError(f"unsupported element type {dtype}")
    return dtype


def like(v: SegVector, dtype=None) -> SegVector:
    """New uninitialized vector with the same layout as ``v``."""
    dtype = v.dtype if dtype is None else _resolve_dtype(dtype)
    return SegVector(v.env, v.logical_len, v.policy, dtype, v.ranks_requested)


def same_layout(a: SegVector, b: SegVector) -> bool:
    return a.logical_len == b.logical_len and [
        (s.rank, s.global_offset, s.len) for s in a.segments
    ] == [(s.rank, s.global_offset, s.len) for s in b.segments]
