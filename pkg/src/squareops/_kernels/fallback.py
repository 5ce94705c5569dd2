"""NumPy implementations of the convolution rearrangement kernels.

`im2col` gathers every receptive-field patch of a padded NHWC tensor into
the rows of a matrix so the convolution itself becomes one matmul; `col2im`
is its adjoint (scatter-add). The compiled backend in `_core.pyx` implements
the same two functions with identical accumulation order, so both backends
agree bitwise.
"""

import numpy as np


def im2col(xpad: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Rearrange padded input (N,HP,WP,C) into patches of shape (N*oh*ow, k*k*C)."""
    n, _, _, c = xpad.shape
    cols = np.empty((n, oh, ow, k, k, c), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xpad[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols.reshape(n * oh * ow, k * k * c)


def col2im(cols: np.ndarray, n: int, hp: int, wp: int, c: int,
           k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add patch gradients (N*oh*ow, k*k*C) back onto a zeroed (N,HP,WP,C) buffer."""
    gx = np.zeros((n, hp, wp, c), dtype=np.float64)
    cols6 = cols.reshape(n, oh, ow, k, k, c)
    for i in range(k):
        for j in range(k):
            gx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols6[:, :, :, i, j, :]
    return gx
