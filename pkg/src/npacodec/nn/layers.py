"""Forward/backward pairs for the dense layers.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient,
followed by parameter gradients where the layer has parameters. Leading
dimensions are treated as batch dimensions throughout.
"""

import numpy as np
import scipy.sparse as sp

LAYERNORM_EPS = 1e-5


def linear_forward(x, matrix, bias):
    """y = x W^T + b with W of shape (d_out, d_in)."""
    return x @ matrix.T + bias, x


def linear_backward(dy, x, matrix):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ matrix, dy2.T @ x2, dy2.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def sigmoid_forward(x):
    # Two-branch form avoids overflow in exp for large |x|.
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def softmax_forward(x, mask=None):
    """Softmax over the last axis; entries with ``mask == False`` get zero weight."""
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=-1, keepdims=True)
    return y, y


def softmax_backward(dy, y):
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def layernorm_forward(x, scale, shift, eps=LAYERNORM_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    # constant rows normalize to exactly zero, not to rounding residue
    xc = np.where(np.ptp(x, axis=-1, keepdims=True) == 0, 0, xc)
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    return xhat * scale + shift, (xhat, inv_std, scale)


def layernorm_backward(dy, cache):
    xhat, inv_std, scale = cache
    dxhat = dy * scale
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    d = dy.shape[-1]
    dscale = (dy * xhat).reshape(-1, d).sum(axis=0)
    dshift = dy.reshape(-1, d).sum(axis=0)
    return dx, dscale, dshift


def segment_sum(index, values, n):
    """out[m] = sum of values[i] over all i with index[i] == m."""
    index = np.asarray(index).ravel()
    trailing = values.shape[1:]
    flat = values.reshape(len(index), int(np.prod(trailing)))
    mat = sp.csr_matrix(
        (np.ones(len(index), dtype=values.dtype), (index, np.arange(len(index)))),
        shape=(n, len(index)),
    )
    return np.asarray(mat @ flat).reshape((n,) + trailing)
