# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled radix-2 decimation-in-time FFT over the rows of a 2D array."""

cimport cython
import numpy as np

from libc.math cimport cos, sin, M_PI

ctypedef fused cplx:
    cython.floatcomplex
    cython.doublecomplex


cdef inline bint _is_pow2(Py_ssize_t n) nogil:
    return n > 0 and (n & (n - 1)) == 0


def fft_rows(cplx[:, ::1] a, bint inverse=False):
    """Unnormalized in-place DFT of every row of ``a``.

    The forward transform uses the negative exponent; ``inverse`` flips the
    sign without scaling.  Row length must be a power of two.
    """
    cdef Py_ssize_t rows = a.shape[0]
    cdef Py_ssize_t n = a.shape[1]
    if not _is_pow2(n):
        raise ValueError(f"row length {n} is not a power of two")
    if n == 1 or rows == 0:
        return

    cdef Py_ssize_t i, j, bit, r, m, half, step, start, k
    cdef double sign = 1.0 if inverse else -1.0
    cdef double ang
    cdef cplx u, v, w

    if cplx is cython.floatcomplex:
        dtype = np.complex64
    else:
        dtype = np.complex128
    tw_arr = np.empty(n // 2, dtype=dtype)
    cdef cplx[::1] tw = tw_arr
    for k in range(n // 2):
        ang = sign * 2.0 * M_PI * k / n
        tw[k] = cos(ang) + 1j * sin(ang)

    rev_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] rev = rev_arr
    rev[0] = 0
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j |= bit
        rev[i] = j

    with nogil:
        for r in range(rows):
            for i in range(n):
                j = rev[i]
                if j > i:
                    u = a[r, i]
                    a[r, i] = a[r, j]
                    a[r, j] = u
            m = 2
            while m <= n:
                half = m >> 1
                step = n // m
                start = 0
                while start < n:
                    for k in range(half):
                        w = tw[k * step]
                        u = a[r, start + k]
                        v = a[r, start + k + half] * w
                        a[r, start + k] = u + v
                        a[r, start + k + half] = u - v
                    start += m
                m <<= 1
