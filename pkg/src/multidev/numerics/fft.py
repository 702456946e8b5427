"""Batched 2D FFT on host arrays, dispatching to the compiled row kernel.

The compiled extension is used when it imports; setting the environment
variable ``MULTIDEV_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

import numpy as np

from . import _fft_fallback

try:
    if os.environ.get("MULTIDEV_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _fftcore
except ImportError:
    _fftcore = None

BACKENDS = {"python": _fft_fallback}
if _fftcore is not None:
    BACKENDS["cython"] = _fftcore

DEFAULT_BACKEND = "cython" if _fftcore is not None else "python"


def is_pow2(n):
    return n > 0 and n & (n - 1) == 0


def _kernel(backend):
    name = backend or DEFAULT_BACKEND
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"FFT backend {name!r} unavailable (have {sorted(BACKENDS)})") from None


def fft2(x, inverse=False, backend=None):
    """2D DFT over the last two axes of ``x`` (any leading batch shape).

    Forward is unnormalized with the negative exponent; inverse uses the
    positive exponent and scales by ``1/(nx*ny)``.  Returns a new array of
    the same complex dtype.
    """
    x = np.asarray(x)
    if x.dtype not in (np.complex64, np.complex128):
        x = x.astype(np.complex64)
    nx, ny = x.shape[-2:]
    if not (is_pow2(nx) and is_pow2(ny)):
        raise ValueError(f"transform size {nx}x{ny} is not a power of two")
    kern = _kernel(backend)
    lead = x.shape[:-2]
    y = np.array(x, copy=True, order="C").reshape(-1, nx, ny)
    kern.fft_rows(y.reshape(-1, ny), inverse)
    t = np.ascontiguousarray(y.transpose(0, 2, 1))
    kern.fft_rows(t.reshape(-1, nx), inverse)
    y[:] = t.transpose(0, 2, 1)
    if inverse:
        y *= y.real.dtype.type(1.0 / (nx * ny))
    return y.reshape(*lead, nx, ny)


def ifft2(x, backend=None):
    return fft2(x, inverse=True, backend=backend)
