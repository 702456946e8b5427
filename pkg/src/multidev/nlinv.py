"""Nonlinear-inversion reconstruction distributed across simulated devices.

The unknown is ``x = (rho, chat)``: an image on the doubled grid and one
weighted-Fourier coil representation per channel, with ``c_j = W^-1 chat_j``.
The forward model per channel is

    F(x)_j = P * FFT(M * rho * c_j)

and it is inverted with the iteratively regularized Gauss-Newton method; the
regularized normal equations of every Newton step are solved by conjugate
gradients.

Data layout: channels (``chat``, coil maps, data) are split block-wise, one
``ng x ng`` matrix per block, contiguous per device with the remainder on the
lowest ranks.  ``rho`` is replicated on every device.  The adjoint forms a
partial image per device from its own channels and sums the partials with the
block-wise all-reduce, so every device ends up with the same ``rho`` update.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import comm
from . import numerics as nm
from .errors import ReconstructionDiverged, UsageError
from .numerics.fft import fft2, ifft2
from .runtime import Environment, Fence
from .segvec import Blockwise, Clone, SegVector, create_segmented, like

log = logging.getLogger(__name__)

PRECISIONS = {"single": (np.complex64, np.float32), "double": (np.complex128, np.float64)}


# --------------------------------------------------------------------------
# problem description


@dataclass(frozen=True)
class ReconGrid:
    n: int

    def __post_init__(self):
        if self.n < 1 or self.n & (self.n - 1):
            raise UsageError(f"base grid size {self.n} must be a power of two")

    @property
    def ng(self) -> int:
        return 2 * self.n

    def fov_mask(self, dtype=np.float32) -> np.ndarray:
        """1 on the centered ``n x n`` square of the doubled grid, 0 elsewhere."""
        m = np.zeros((self.ng, self.ng), dtype=dtype)
        lo = (self.ng - self.n) // 2
        m[lo : lo + self.n, lo : lo + self.n] = 1
        return m

    def crop(self, img: np.ndarray) -> np.ndarray:
        lo = (self.ng - self.n) // 2
        return img[..., lo : lo + self.n, lo : lo + self.n]

    def embed(self, img: np.ndarray) -> np.ndarray:
        out = np.zeros(img.shape[:-2] + (self.ng, self.ng), dtype=img.dtype)
        lo = (self.ng - self.n) // 2
        out[..., lo : lo + self.n, lo : lo + self.n] = img
        return out


@dataclass(frozen=True)
class WeightParams:
    """Sobolev-type weight ``w(k) = (1 + a |k|^2)^(b/2)``, k in [-1/2, 1/2)^2."""

    a: float = 220.0
    b: float = 32.0

    def grid(self, ng: int, dtype=np.float64) -> np.ndarray:
        k = np.fft.fftfreq(ng)
        k2 = k[:, None] ** 2 + k[None, :] ** 2
        return ((1.0 + self.a * k2) ** (self.b / 2)).astype(dtype)


@dataclass(frozen=True)
class RegSchedule:
    alpha0: float = 1.0
    q: float = 1.0 / 3.0
    newton_steps: int = 6

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise UsageError("alpha0 must be positive")
        if not 0 < self.q < 1:
            raise UsageError("q must lie in (0, 1)")
        if self.newton_steps < 1:
            raise UsageError("newton_steps must be >= 1")

    def alpha(self, step: int) -> float:
        return self.alpha0 * self.q**step

    def alphas(self) -> List[float]:
        return [self.alpha(i) for i in range(self.newton_steps)]


@dataclass(frozen=True)
class CgParams:
    max_iters: int = 30
    tol: float = 1e-2

    def __post_init__(self):
        if self.max_iters < 1:
            raise UsageError("cg max_iters must be >= 1")


@dataclass
class OpCounters:
    fft_count: int = 0
    elementwise_count: int = 0
    channel_sum_count: int = 0
    dot_count: int = 0
    allreduce_count: int = 0

    def __iadd__(self, other: "OpCounters"):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> Dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ReconProblem:
    """Everything one frame's reconstruction needs; arrays live on the host.

    ``y`` has shape ``(J, ng, ng)`` and is zero outside the sampling mask.
    ``x_ref`` is a ``(rho, chat)`` pair of host arrays or None for the
    default ``rho = 1, chat = 0``.
    """

    grid: ReconGrid
    y: np.ndarray
    mask: np.ndarray
    weights: WeightParams = field(default_factory=WeightParams)
    reg: RegSchedule = field(default_factory=RegSchedule)
    cg: CgParams = field(default_factory=CgParams)
    x_ref: Optional[tuple] = None
    precision: str = "single"
    data_scale: Optional[float] = 100.0

    def __post_init__(self):
        ng = self.grid.ng
        if self.y.ndim != 3 or self.y.shape[1:] != (ng, ng):
            raise UsageError(f"data must have shape (J, {ng}, {ng}), got {self.y.shape}")
        if self.mask.shape != (ng, ng):
            raise UsageError(f"mask must have shape ({ng}, {ng}), got {self.mask.shape}")
        if not np.any(self.mask):
            raise UsageError("sampling mask selects no samples")
        if self.precision not in PRECISIONS:
            raise UsageError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def J(self) -> int:
        return self.y.shape[0]

    @property
    def cdtype(self):
        return PRECISIONS[self.precision][0]

    @property
    def rdtype(self):
        return PRECISIONS[self.precision][1]


# --------------------------------------------------------------------------
# host-side weight transforms (also the per-device kernels)


def apply_weight_inv(chat: np.ndarray, weights: WeightParams) -> np.ndarray:
    """``c = IFFT(chat / w)`` over the last two axes."""
    ng = chat.shape[-1]
    winv = (1.0 / weights.grid(ng)).astype(chat.real.dtype)
    return ifft2(chat * winv)


def apply_weight_inv_adjoint(c: np.ndarray, weights: WeightParams) -> np.ndarray:
    """Adjoint of :func:`apply_weight_inv`: ``FFT(c) / (ng^2 w)``."""
    ng = c.shape[-1]
    s = (1.0 / (ng * ng * weights.grid(ng))).astype(c.real.dtype)
    return fft2(c) * s


def apply_weight(c: np.ndarray, weights: WeightParams) -> np.ndarray:
    """``W c = w * FFT(c)``, the inverse of :func:`apply_weight_inv`."""
    ng = c.shape[-1]
    return fft2(c) * weights.grid(ng).astype(c.real.dtype)


# --------------------------------------------------------------------------
# distributed unknowns


class Unknowns:
    """``(rho, chat)`` on the devices: rho replicated, chat split by channel."""

    def __init__(self, rho: SegVector, chat: SegVector, ng: int, J: int):
        self.rho = rho
        self.chat = chat
        self.ng = ng
        self.J = J

    @classmethod
    def allocate(cls, env: Environment, ng: int, J: int, dtype) -> "Unknowns":
        m = ng * ng
        rho = create_segmented(env, m, Clone(), dtype)
        chat = create_segmented(env, J * m, Blockwise(m), dtype)
        return cls(rho, chat, ng, J)

    @classmethod
    def from_host(cls, env: Environment, rho: np.ndarray, chat: np.ndarray, dtype) -> "Unknowns":
        ng, J = rho.shape[-1], chat.shape[0]
        x = cls.allocate(env, ng, J, dtype)
        Fence.merge(
            [
                comm.broadcast(np.ascontiguousarray(rho, dtype=dtype).reshape(-1), x.rho),
                comm.scatter(np.ascontiguousarray(chat, dtype=dtype).reshape(-1), x.chat),
            ]
        ).wait()
        return x

    def like(self) -> "Unknowns":
        return Unknowns(like(self.rho), like(self.chat), self.ng, self.J)

    def to_host(self):
        rho = comm.to_host(self.rho).reshape(self.ng, self.ng)
        chat = comm.to_host(self.chat).reshape(self.J, self.ng, self.ng)
        return rho, chat

    def fill(self, value) -> Fence:
        def kernel(r, c):
            r.fill(value)
            c.fill(value)

        return self.rho.env.invoke_kernel_all(kernel, self.rho, self.chat)

    def assign(self, other: "Unknowns") -> Fence:
        return comm.copy_seg(other.rho, self.rho) | comm.copy_seg(other.chat, self.chat)


class ArraySpace:
    """Vector-space operations on plain numpy arrays (for :func:`cg_solve`)."""

    @staticmethod
    def zeros_like(x):
        return np.zeros_like(x)

    @staticmethod
    def copy(x):
        return np.array(x, copy=True)

    @staticmethod
    def dot(a, b):
        return complex(np.vdot(a, b))

    @staticmethod
    def axpy(alpha, x, y):
        y += alpha * x
        return y

    @staticmethod
    def scale(alpha, x):
        x *= alpha
        return x


class UnknownsSpace:
    """Vector-space operations on distributed :class:`Unknowns`."""

    def __init__(self, counters: Optional[Callable[[], OpCounters]] = None):
        self._counters = counters

    def _count(self, **kw):
        if self._counters is not None:
            c = self._counters()
            for k, v in kw.items():
                setattr(c, k, getattr(c, k) + v)

    def zeros_like(self, x: Unknowns) -> Unknowns:
        z = x.like()
        z.fill(0).wait()
        return z

    def copy(self, x: Unknowns) -> Unknowns:
        z = x.like()
        z.assign(x).wait()
        return z

    def dot(self, a: Unknowns, b: Unknowns) -> complex:
        self._count(dot_count=1)
        return nm.dot(a.rho, b.rho) + nm.dot(a.chat, b.chat)

    def axpy(self, alpha, x: Unknowns, y: Unknowns) -> Unknowns:
        self._count(elementwise_count=1)
        (nm.axpy(alpha, x.rho, y.rho) | nm.axpy(alpha, x.chat, y.chat)).wait()
        return y

    def scale(self, alpha, x: Unknowns) -> Unknowns:
        self._count(elementwise_count=1)
        (nm.scale(alpha, x.rho) | nm.scale(alpha, x.chat)).wait()
        return x


# --------------------------------------------------------------------------
# conjugate gradients


@dataclass
class CgResult:
    x: object
    iterations: int
    residuals: List[float]
    breakdown: bool = False


def cg_solve(apply_op: Callable, rhs, params: CgParams, space=ArraySpace) -> CgResult:
    """Conjugate gradients from a zero start for a self-adjoint positive operator.

    Stops after ``params.max_iters`` iterations or once ``|r| / |rhs|`` drops to
    ``params.tol``.  A non-positive curvature ``<p, A p>`` stops the solve and
    returns the current iterate with ``breakdown=True``.
    """
    x = space.zeros_like(rhs)
    r = space.copy(rhs)
    p = space.copy(rhs)
    rr = space.dot(r, r).real
    rr0 = rr
    residuals = [1.0]
    if rr0 == 0.0:
        return CgResult(x, 0, [0.0])
    it = 0
    for it in range(1, params.max_iters + 1):
        Ap = apply_op(p)
        pAp = space.dot(p, Ap).real
        if not pAp > 1e-30 * rr:
            log.warning("CG breakdown at iteration %d (curvature %g)", it, pAp)
            return CgResult(x, it - 1, residuals, breakdown=True)
        a = rr / pAp
        space.axpy(a, p, x)
        space.axpy(-a, Ap, r)
        rr_new = space.dot(r, r).real
        residuals.append(math.sqrt(rr_new / rr0))
        if residuals[-1] <= params.tol:
            break
        space.scale(rr_new / rr, p)
        space.axpy(1.0, r, p)
        rr = rr_new
    return CgResult(x, it, residuals)


# --------------------------------------------------------------------------
# distributed operators


class NlinvOperator:
    """Forward model, derivative and adjoint bound to one environment.

    Masks and the inverse weights are replicated on every device once; the
    coil maps ``c_j`` of the current linearization point are cached per
    device by :meth:`forward` / :meth:`linearize`.
    """

    def __init__(self, env: Environment, grid: ReconGrid, J: int, mask: np.ndarray,
                 weights: WeightParams = WeightParams(), precision: str = "single"):
        self.env = env
        self.grid = grid
        self.J = J
        self.weights = weights
        self.precision = precision
        self.cdtype, self.rdtype = PRECISIONS[precision]
        ng = self.ng = grid.ng
        m = ng * ng
        self.plan = nm.BatchedFftPlan(ng, ng, J)
        w = weights.grid(ng)
        self._P = self._clone_real(mask)
        self._M = self._clone_real(grid.fov_mask())
        self._winv = self._clone_real(1.0 / w)
        self._winv_adj = self._clone_real(1.0 / (m * w))
        self.window = comm.Window2D.centered(ng, ng, grid.n, grid.n)
        # linearization point
        self.x_lin: Optional[Unknowns] = None
        self._c = self._channels()
        # scratch
        self._t1 = self._channels()
        self._t2 = self._channels()
        # channel partial sums and their all-reduce run in double precision so
        # the summed image does not depend on how channels map to devices
        self._rho_part = create_segmented(env, m, Clone(), np.complex128)
        self._rho_sum = create_segmented(env, m, Clone(), np.complex128)
        self._invoke_all(lambda r: r.fill(0), self._rho_sum).wait()
        self.counters: Dict[str, OpCounters] = {}
        self.totals = OpCounters()
        self._current: Optional[OpCounters] = None

    def _clone_real(self, arr: np.ndarray) -> SegVector:
        v = create_segmented(self.env, arr.size, Clone(), self.rdtype)
        comm.broadcast(np.ascontiguousarray(arr, dtype=self.rdtype).reshape(-1), v).wait()
        return v

    def _channels(self) -> SegVector:
        m = self.ng * self.ng
        return create_segmented(self.env, self.J * m, Blockwise(m), self.cdtype)

    def new_data(self) -> SegVector:
        return self._channels()

    def scatter_data(self, y: np.ndarray) -> SegVector:
        v = self._channels()
        comm.scatter(np.ascontiguousarray(y, dtype=self.cdtype).reshape(-1), v).wait()
        return v

    def new_unknowns(self) -> Unknowns:
        return Unknowns.allocate(self.env, self.ng, self.J, self.cdtype)

    # -- bookkeeping

    @contextmanager
    def _application(self, name: str):
        c = OpCounters()
        prev, self._current = self._current, c
        try:
            yield c
        finally:
            self._current = prev
            self.counters[name] = c
            self.totals += c

    def _bump(self, **kw):
        c = self._current
        target = c if c is not None else self.totals
        for k, v in kw.items():
            setattr(target, k, getattr(target, k) + v)

    def _invoke_all(self, fn, *args) -> Fence:
        return self.env.invoke_kernel_all(fn, *args)

    def _kernel(self, fn, *args) -> Fence:
        self._bump(elementwise_count=1)
        return self._invoke_all(fn, *args)

    def _fft(self, src, dst, inverse=False) -> Fence:
        self._bump(fft_count=1)
        return (nm.fft_inverse if inverse else nm.fft_forward)(self.plan, src, dst)

    def _shape(self, a):
        return a.reshape(-1, self.ng, self.ng)

    # -- operators

    def _weight_inv(self, chat: SegVector, out: SegVector) -> None:
        """``out = W^-1 chat`` (one batched FFT)."""
        sh = self._shape

        def kern(ch, wi, t):
            np.multiply(sh(ch), sh(wi), out=sh(t))

        self._kernel(kern, chat, self._winv, self._t1)
        self._fft(self._t1, out, inverse=True)

    def linearize(self, x: Unknowns) -> None:
        """Cache ``c_j = W^-1 chat_j`` for the point ``x`` without counting an application."""
        with self._application("linearize"):
            self._weight_inv(x.chat, self._c)
        self.x_lin = x
        self.env.barrier_fence()

    def forward(self, x: Unknowns, out: SegVector) -> SegVector:
        """``out_j = P * FFT(M * rho * c_j)``; also makes ``x`` the linearization point."""
        sh = self._shape
        with self._application("F"):
            self._weight_inv(x.chat, self._c)

            def kern(rho, c, M, z):
                np.multiply(sh(c), sh(rho), out=sh(z))
                sh(z)[...] *= sh(M)

            self._kernel(kern, x.rho, self._c, self._M, self._t2)
            self._fft(self._t2, out)
            self._kernel(self._apply_P, self._P, out)
            self.env.barrier_fence()
        self.x_lin = x
        return out

    def _apply_P(self, P, d):
        if d.size:
            self._shape(d)[...] *= self._shape(P)

    def derivative(self, dx: Unknowns, out: SegVector) -> SegVector:
        """``DF(dx)_j = P * FFT(M * (drho * c_j + rho * W^-1 dchat_j))``."""
        x = self._require_lin()
        sh = self._shape
        with self._application("DF"):
            self._weight_inv(dx.chat, self._t2)

            def kern(drho, c, rho, dc, M):
                if dc.size:
                    z = sh(dc)
                    z *= sh(rho)
                    z += sh(c) * sh(drho)
                    z *= sh(M)

            self._kernel(kern, dx.rho, self._c, x.rho, self._t2, self._M)
            self._fft(self._t2, out)
            self._kernel(self._apply_P, self._P, out)
            self.env.barrier_fence()
        return out

    def adjoint(self, dy: SegVector, out: Unknowns) -> Unknowns:
        """``DF^H dy``.

        ``u_j = M * ng^2 * IFFT(P * dy_j)`` (the adjoint of the unnormalized
        forward transform), ``drho = sum_j conj(c_j) u_j`` summed across
        devices, and ``dchat_j = W^-H (conj(rho) u_j)``.
        """
        x = self._require_lin()
        sh = self._shape
        m = self.ng * self.ng
        with self._application("DFH"):

            def kern_p(P, d, t):
                if d.size:
                    np.multiply(sh(d), sh(P), out=sh(t))

            self._kernel(kern_p, self._P, dy, self._t1)
            self._fft(self._t1, self._t2, inverse=True)

            def kern_m(M, u):
                if u.size:
                    sh(u)[...] *= sh(M) * self.rdtype(m)

            self._kernel(kern_m, self._M, self._t2)

            def kern_sum(c, u, part):
                # channel summation of this device's channels
                if u.size:
                    prod = np.conj(sh(c)).astype(np.complex128) * sh(u)
                    np.sum(prod, axis=0, out=sh(part)[0])
                else:
                    part.fill(0)

            self._bump(channel_sum_count=1)
            self._invoke_all(kern_sum, self._c, self._t2, self._rho_part)

            # partial images vanish outside the field of view, so only the
            # central window is summed; the rest of _rho_sum stays zero
            self._bump(allreduce_count=1)
            comm.all_reduce_blockwise(self._rho_part, self._rho_sum, window=self.window)

            def kern_cast(src, dst):
                dst[:] = src

            self._kernel(kern_cast, self._rho_sum, out.rho)

            def kern_conj(rho, u, t):
                if u.size:
                    np.multiply(sh(u), np.conj(sh(rho)), out=sh(t))

            self._kernel(kern_conj, x.rho, self._t2, self._t1)
            self._fft(self._t1, out.chat)

            def kern_w(wa, d):
                if d.size:
                    sh(d)[...] *= sh(wa)

            self._kernel(kern_w, self._winv_adj, out.chat)
            self.env.barrier_fence()
        return out

    def psf_convolve(self, z: SegVector, out: SegVector) -> SegVector:
        """``IFFT(P * FFT(z))`` per channel matrix (two FFTs)."""
        with self._application("PSF"):
            self._fft(z, self._t1)
            self._kernel(self._apply_P, self._P, self._t1)
            self._fft(self._t1, out, inverse=True)
            self.env.barrier_fence()
        return out

    def normal(self, alpha: float) -> Callable[[Unknowns], Unknowns]:
        """``dx -> DF^H DF dx + alpha dx`` at the current linearization point."""
        space = UnknownsSpace(lambda: self.totals)

        def apply(dx: Unknowns) -> Unknowns:
            dy = self.derivative(dx, self.new_data())
            v = self.adjoint(dy, self.new_unknowns())
            space.axpy(alpha, dx, v)
            return v

        return apply

    def _require_lin(self) -> Unknowns:
        if self.x_lin is None:
            raise UsageError("no linearization point; call forward() or linearize() first")
        return self.x_lin


# --------------------------------------------------------------------------
# Gauss-Newton driver


def _norm(v: SegVector) -> float:
    return math.sqrt(max(nm.dot(v, v).real, 0.0))


@dataclass
class StepInfo:
    alpha: float
    cg_iterations: int
    cg_breakdown: bool
    counters: OpCounters


def gauss_newton_step(op: NlinvOperator, y: SegVector, x: Unknowns, x_ref: Unknowns,
                      alpha: float, cg: CgParams) -> tuple:
    """One regularized Newton update; returns ``(x_next, StepInfo)``.

    Solves ``(DF^H DF + alpha I) dx = DF^H (y - F x) - alpha (x - x_ref)``
    and returns ``x + dx``.
    """
    before = replace(op.totals)
    space = UnknownsSpace(lambda: op.totals)
    r = op.forward(x, op.new_data())
    op.totals.elementwise_count += 1
    (nm.scale(-1, r)).wait()
    nm.axpy(1, y, r).wait()
    rhs = op.adjoint(r, op.new_unknowns())
    d = space.copy(x)
    space.axpy(-1.0, x_ref, d)
    space.axpy(-alpha, d, rhs)
    res = cg_solve(op.normal(alpha), rhs, cg, space)
    x_next = space.copy(x)
    space.axpy(1.0, res.x, x_next)
    step = OpCounters(**{k: v - getattr(before, k) for k, v in op.totals.as_dict().items()})
    return x_next, StepInfo(alpha, res.iterations, res.breakdown, step)


@dataclass
class ReconResult:
    image: np.ndarray
    rho: np.ndarray
    chat: np.ndarray
    coils: np.ndarray
    residuals: List[float]
    steps: List[StepInfo]
    counters: Dict[str, OpCounters]
    scale: float


def _initial(problem: ReconProblem):
    ng, J = problem.grid.ng, problem.J
    if problem.x_ref is not None:
        return problem.x_ref
    return np.ones((ng, ng), problem.cdtype), np.zeros((J, ng, ng), problem.cdtype)


def reconstruct_frame(env: Environment, problem: ReconProblem, x0: Optional[tuple] = None) -> ReconResult:
    """Run the Newton iterations for one frame.

    The data are scaled to norm ``problem.data_scale`` first (if set) and the
    scale is undone on the output.  The returned image is ``rho`` cropped to
    the field of view times the root-sum-of-squares of the final coil maps.
    Raises :class:`ReconstructionDiverged` if the data residual grows more
    than tenfold in one step.
    """
    grid = problem.grid
    op = NlinvOperator(env, grid, problem.J, problem.mask, problem.weights, problem.precision)
    ynorm = float(np.linalg.norm(problem.y))
    if ynorm == 0:
        raise UsageError("measured data are all zero")
    scale = problem.data_scale / ynorm if problem.data_scale else 1.0
    y = op.scatter_data(problem.y * scale)

    rho_ref, chat_ref = _initial(problem)
    x_ref = Unknowns.from_host(env, rho_ref, chat_ref, problem.cdtype)
    if x0 is None:
        x = Unknowns.from_host(env, rho_ref, chat_ref, problem.cdtype)
    else:
        x = Unknowns.from_host(env, x0[0], x0[1], problem.cdtype)

    yn = _norm(y)
    residuals = [_residual(op, x, y) / yn]
    steps = []
    for n, alpha in enumerate(problem.reg.alphas()):
        x, info = gauss_newton_step(op, y, x, x_ref, alpha, problem.cg)
        steps.append(info)
        residuals.append(_residual(op, x, y) / yn)
        log.info("newton step %d alpha=%.3g cg=%d residual=%.4g", n, alpha, info.cg_iterations, residuals[-1])
        if not np.isfinite(residuals[-1]) or residuals[-1] > 10 * residuals[-2]:
            raise ReconstructionDiverged(
                f"residual grew from {residuals[-2]:.3g} to {residuals[-1]:.3g} at Newton step {n}",
                residuals,
            )
    rho, chat = x.to_host()
    coils = apply_weight_inv(chat, problem.weights)
    rss = np.sqrt(np.sum(np.abs(coils) ** 2, axis=0))
    image = grid.crop(rho * rss) / scale
    return ReconResult(
        image=image,
        rho=rho,
        chat=chat,
        coils=coils,
        residuals=residuals,
        steps=steps,
        counters=dict(op.counters),
        scale=scale,
    )


def _residual(op: NlinvOperator, x: Unknowns, y: SegVector) -> float:
    fx = op.forward(x, op.new_data())
    nm.axpy(-1, y, fx).wait()
    return _norm(fx)


def reconstruct_series(env: Environment, frames: Sequence[tuple], grid: ReconGrid, *,
                       weights: WeightParams = WeightParams(), reg: RegSchedule = RegSchedule(),
                       cg: CgParams = CgParams(), precision: str = "single",
                       data_scale: Optional[float] = 100.0) -> List[ReconResult]:
    """Reconstruct frames in order; each frame starts from and is regularized
    toward the previous frame's solution.

    All frames share the data scale of the first frame so that the previous
    solution is a meaningful reference.
    """
    results = []
    prev = None
    fixed_scale = None
    for y, mask in frames:
        if fixed_scale is None:
            fixed_scale = data_scale / float(np.linalg.norm(y)) if data_scale else 1.0
        prob = ReconProblem(grid, y * fixed_scale, mask, weights, reg, cg,
                            x_ref=prev, precision=precision, data_scale=None)
        res = reconstruct_frame(env, prob, x0=prev)
        res.image = res.image / fixed_scale
        res.scale = fixed_scale
        results.append(res)
        prev = (res.rho, res.chat)
    return results


# --------------------------------------------------------------------------
# channel compression


@dataclass
class CompressedChannels:
    data: np.ndarray
    basis: np.ndarray
    energy_fraction: float
    eigenvalues: np.ndarray


def compress_channels(data: np.ndarray, target: int) -> CompressedChannels:
    """Project ``J`` channels onto their ``target`` principal components.

    ``data`` has the channel axis first.  Components are ordered by
    descending eigenvalue of the channel covariance; each basis vector is
    rotated so that its largest-magnitude entry is real and positive.
    """
    J = data.shape[0]
    if not 1 <= target <= J:
        raise UsageError(f"target channel count {target} outside [1, {J}]")
    X = data.reshape(J, -1).astype(np.complex128)
    cov = X @ X.conj().T
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order].real, 0, None)
    evecs = evecs[:, order]
    for i in range(J):
        k = np.argmax(np.abs(evecs[:, i]))
        evecs[:, i] *= np.conj(evecs[k, i]) / abs(evecs[k, i])
    basis = evecs[:, :target]
    out = (basis.conj().T @ X).reshape((target,) + data.shape[1:]).astype(data.dtype)
    total = evals.sum()
    frac = float(evals[:target].sum() / total) if total > 0 else 1.0
    return CompressedChannels(out, basis, frac, evals)
