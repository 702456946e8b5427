"""Pure-Python (numpy-vectorized) radix-2 DIT transform, same contract as ``_fftcore``."""

import numpy as np


def _bit_reverse(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_rows(a, inverse=False):
    """Unnormalized in-place DFT of every row of the 2D array ``a``."""
    rows, n = a.shape
    if n < 1 or n & (n - 1):
        raise ValueError(f"row length {n} is not a power of two")
    if n == 1 or rows == 0:
        return
    sign = 1.0 if inverse else -1.0
    x = a[:, _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / m).astype(a.dtype)
        x = x.reshape(rows, n // m, m)
        u = x[..., :half]
        v = x[..., half:] * tw
        x = np.concatenate([u + v, u - v], axis=-1)
        m *= 2
    a[:] = x.reshape(rows, n)
