"""Segment-aware numerical kernels.

All operations enqueue one command per participating device and return a
fence; only :func:`dot` blocks, since its result is a host scalar.  Operands
of element-wise ops must share one segmentation, and none of them moves data
between devices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import comm
from ..errors import UsageError
from ..runtime import Fence
from ..segvec import Clone, SegVector, create_segmented, same_layout
from . import fft as _fft
from .fft import DEFAULT_BACKEND, fft2, ifft2, is_pow2

__all__ = [
    "BatchedFftPlan",
    "fft_forward",
    "fft_inverse",
    "axpy",
    "pointwise_mul",
    "pointwise_conj_mul",
    "scale",
    "add",
    "apply_mask",
    "dot",
    "gemm",
    "fft2",
    "ifft2",
    "DEFAULT_BACKEND",
]


@dataclass(frozen=True)
class BatchedFftPlan:
    """``batch`` independent ``nx x ny`` transforms stored back to back."""

    nx: int
    ny: int
    batch: int
    backend: Optional[str] = None

    def __post_init__(self):
        if not (is_pow2(self.nx) and is_pow2(self.ny)):
            raise UsageError(f"FFT size {self.nx}x{self.ny} must be powers of two")
        if self.batch < 1:
            raise UsageError("batch must be >= 1")

    @property
    def matrix_len(self) -> int:
        return self.nx * self.ny

    def sub_batches(self, v: SegVector) -> dict:
        """Number of whole matrices each device transforms."""
        self._check(v)
        return {s.rank: s.len // self.matrix_len for s in v.segments}

    def _check(self, v: SegVector) -> None:
        if v.logical_len != self.matrix_len * self.batch:
            raise UsageError(
                f"vector length {v.logical_len} != {self.nx}x{self.ny}x{self.batch}"
            )
        for s in v.segments:
            if s.global_offset % self.matrix_len or s.len % self.matrix_len:
                raise UsageError(
                    f"segment on device {s.rank} is not aligned to {self.nx}x{self.ny} matrices"
                )

    def _run(self, src: SegVector, dst: SegVector, inverse: bool) -> Fence:
        self._check(src)
        self._check(dst)
        if not same_layout(src, dst):
            raise UsageError("FFT source and destination must share one segmentation")
        shape = (-1, self.nx, self.ny)
        backend = self.backend

        def kernel(a, b):
            if a.size:
                b[:] = _fft.fft2(a.reshape(shape), inverse, backend).reshape(-1)

        return src.env.invoke_kernel_all(kernel, src, dst)


def fft_forward(plan: BatchedFftPlan, src: SegVector, dst: SegVector) -> Fence:
    return plan._run(src, dst, inverse=False)


def fft_inverse(plan: BatchedFftPlan, src: SegVector, dst: SegVector) -> Fence:
    return plan._run(src, dst, inverse=True)


def _same(*vs: SegVector) -> None:
    for v in vs[1:]:
        if not same_layout(vs[0], v):
            raise UsageError("operands must share one segmentation")


def axpy(a, X: SegVector, Y: SegVector) -> Fence:
    """``Y <- a*X + Y``."""
    _same(X, Y)

    def kernel(x, y):
        y += y.dtype.type(a) * x

    return X.env.invoke_kernel_all(kernel, X, Y)


def pointwise_mul(X: SegVector, Y: SegVector, Z: SegVector) -> Fence:
    _same(X, Y, Z)

    def kernel(x, y, z):
        np.multiply(x, y, out=z)

    return X.env.invoke_kernel_all(kernel, X, Y, Z)


def pointwise_conj_mul(X: SegVector, Y: SegVector, Z: SegVector) -> Fence:
    """``Z = conj(X) * Y``."""
    _same(X, Y, Z)

    def kernel(x, y, z):
        np.multiply(np.conj(x), y, out=z)

    return X.env.invoke_kernel_all(kernel, X, Y, Z)


def scale(a, X: SegVector) -> Fence:
    def kernel(x):
        x *= x.dtype.type(a)

    return X.env.invoke_kernel_all(kernel, X)


def add(X: SegVector, Y: SegVector, Z: SegVector) -> Fence:
    _same(X, Y, Z)

    def kernel(x, y, z):
        np.add(x, y, out=z)

    return X.env.invoke_kernel_all(kernel, X, Y, Z)


def apply_mask(M: SegVector, X: SegVector) -> Fence:
    """``X <- M * X`` with a real mask of identical segmentation."""
    _same(M, X)
    if M.dtype.kind != "f":
        raise UsageError("mask must be real-valued")

    def kernel(m, x):
        x *= m

    return X.env.invoke_kernel_all(kernel, M, X)


def dot(X: SegVector, Y: SegVector) -> complex:
    """``sum(conj(X) * Y)`` over the logical vector.

    Every device reduces its owned span in double precision; the per-device
    partials are then combined with :func:`multidev.comm.reduce`, so the
    combine order is fixed (ascending rank) and independent of timing.
    """
    _same(X, Y)
    env = X.env
    owners = X.segments[:1] if X.is_clone else X.segments
    ranks = [s.rank for s in owners]
    partial = create_segmented(env, 1, Clone(), np.complex128, ranks=ranks)

    def kernel(rank):
        lstart, _, n = X.owned(rank)
        x = X.local_range(rank)[lstart : lstart + n]
        y = Y.local_range(rank)[lstart : lstart + n]
        partial.local_range(rank)[0] = np.vdot(
            x.astype(np.complex128, copy=False), y.astype(np.complex128, copy=False)
        )

    Fence.merge(env.submit(r, kernel, r) for r in ranks).wait()
    out = np.zeros(1, dtype=np.complex128)
    comm.reduce(partial, out).wait()
    return complex(out[0])


def gemm(A: SegVector, B: SegVector, C: SegVector, m: int, k: int, n: int) -> Fence:
    """``C = A @ B`` with ``A`` (m x k) and ``C`` (m x n) split by rows, ``B`` cloned.

    Each device multiplies its own rows, so no inter-device traffic happens
    here; the only transfer is the caller's broadcast of ``B``.
    """
    if A.logical_len != m * k or B.logical_len != k * n or C.logical_len != m * n:
        raise UsageError("gemm operand sizes do not match m, k, n")
    if not B.is_clone:
        raise UsageError("gemm needs B replicated with the Clone policy")
    if A.ranks != C.ranks or not set(A.ranks) <= set(B.ranks):
        raise UsageError("gemm operands live on different devices")
    for sa, sc in zip(A.segments, C.segments):
        if sa.len % k or sa.global_offset % k:
            raise UsageError(f"A segment on device {sa.rank} does not hold whole rows")
        if sc.global_offset // n != sa.global_offset // k or sc.len // n != sa.len // k or sc.len % n:
            raise UsageError(f"C rows on device {sc.rank} do not match A rows")

    def kernel(a, b, c):
        if a.size:
            np.matmul(a.reshape(-1, k), b.reshape(k, n), out=c.reshape(-1, n))

    return A.env.invoke_kernel_all(kernel, A, B, C)
