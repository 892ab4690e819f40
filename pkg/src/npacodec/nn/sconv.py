"""Sparse 3x3x3 convolution and the 1x1x1 stride-2 transposed convolution."""

import numpy as np

from ..errors import ShapeError
from .layers import segment_sum


def kernel_map(table):
    """Split a (Q, 27) neighbor table into per-offset (out_rows, in_rows) pairs."""
    pairs = []
    for o in range(table.shape[1]):
        rows = np.flatnonzero(table[:, o] >= 0)
        pairs.append((rows, table[rows, o]))
    return pairs


def _check(feats, kernel, bias):
    if feats.ndim != 2 or feats.shape[1] != kernel.shape[2]:
        raise ShapeError(
            f"feature dim {feats.shape[-1]} does not match kernel input {kernel.shape[2]}"
        )
    if bias.shape != (kernel.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} for {kernel.shape[1]} outputs")


def sconv_forward(feats, kmap, kernel, bias, n_out=None):
    """Sum over occupied offsets of W_o f_{u+o}, plus bias once per output.

    ``kmap`` comes from :func:`kernel_map`; ``n_out`` defaults to the input
    count (geometry-preserving convolution).
    """
    _check(feats, kernel, bias)
    if len(kmap) != kernel.shape[0]:
        raise ShapeError(f"{len(kmap)} offsets for a {kernel.shape[0]}-slice kernel")
    n_out = len(feats) if n_out is None else n_out
    out = np.empty((n_out, kernel.shape[1]), dtype=np.result_type(feats, kernel))
    out[:] = bias
    for o, (rows, src) in enumerate(kmap):
        if len(rows):
            out[rows] += feats[src] @ kernel[o].T
    return out, (feats, kmap)


def sconv_backward(dout, cache, kernel):
    feats, kmap = cache
    dfeats = np.zeros_like(feats, dtype=np.result_type(dout, feats))
    dkernel = np.zeros_like(kernel, dtype=np.result_type(dout, kernel))
    for o, (rows, src) in enumerate(kmap):
        if len(rows):
            g = dout[rows]
            dfeats[src] += g @ kernel[o]
            dkernel[o] = g.T @ feats[src]
    return dfeats, dkernel, dout.sum(axis=0)


def tsconv_forward(parent_feats, parent_index, kernel, bias):
    """1x1x1 stride-2 transposed convolution onto expanded children.

    Every child of parent u receives W f_u + b; ``parent_index`` maps each
    child row to its parent row.
    """
    if kernel.shape[0] != 1:
        raise ShapeError("transposed convolution expects a single kernel slice")
    _check(parent_feats, kernel, bias)
    y = parent_feats @ kernel[0].T + bias
    return y[parent_index], (parent_feats, parent_index)


def tsconv_backward(dchild, cache, kernel):
    parent_feats, parent_index = cache
    dy = segment_sum(parent_index, dchild, len(parent_feats))
    dkernel = (dy.T @ parent_feats)[None]
    return dy @ kernel[0], dkernel, dy.sum(axis=0)
