"""Neighborhood point attention and the transformer block built around it.

Keys and values are linear maps of ``concat(f_neighbor, c_neighbor - c_query)``.
The implementation splits each such map into a feature part, computed once
per point and gathered, and a 3-column offset part applied per pair. The
result is the same function with far less work per neighbor.

Parameter names inside an attention layer (relative to its prefix)::

    wq.matrix (d_e, d_in)      wq.bias (d_e,)
    wk.matrix (d_e, d_in + 3)  wk.bias (d_e,)
    wv.matrix (d_e, d_in + 3)  wv.bias (d_e,)
    out.matrix (d_out, d_e)    out.bias (d_out,)

Rows of the wq/wk/wv matrices are grouped by head: head h owns rows
``h*cph:(h+1)*cph``.
"""

import numpy as np
from numba import njit

from ..errors import ShapeError
from . import layers as L

def position_embed(nbh, gathered):
    """Concatenate gathered neighbor features with relative offsets.

    ``gathered`` is (N, k, d_in). Padding entries are zeroed.
    """
    rel = nbh.rel_offsets.astype(gathered.dtype)
    fe = np.concatenate([gathered, rel], axis=-1)
    fe[~nbh.valid_mask] = 0
    return fe


def _attend(Q, Kf, Vf, idx, rel, valid, wk_off, wv_off, bv, heads, scale):
    n, k = idx.shape
    de = Q.shape[1]
    c = de // heads
    Qh = Q.reshape(n, heads, c)
    Kg = Kf[idx].reshape(n, k, heads, c).transpose(0, 2, 3, 1)  # n,h,c,k
    Vg = Vf[idx].reshape(n, k, heads, c).transpose(0, 2, 1, 3)  # n,h,k,c
    relT = rel.transpose(0, 2, 1)  # n,3,k
    qc = np.einsum("nhc,hcx->nhx", Qh, wk_off)
    logits = (Qh[:, :, None, :] @ Kg)[:, :, 0, :] + qc @ relT
    logits *= scale
    A, _ = L.softmax_forward(logits, valid[:, None, :])
    r_bar = A @ rel  # n,h,3
    O = (A[:, :, None, :] @ Vg)[:, :, 0, :]
    O += np.einsum("nhx,hcx->nhc", r_bar, wv_off)
    O += bv.reshape(heads, c)
    return O.reshape(n, de), (Qh, Kg, Vg, A, r_bar, relT)


@njit(cache=True, fastmath={"nsz", "arcp", "contract", "reassoc"})
def _attend_fused(Q, Kf, Vf, idx, rel, valid, wk_off, wv_off, bv, heads, scale, out):
    """Inference-only attention, one query at a time without (n, h, k) temporaries."""
    n, k = idx.shape
    de = Q.shape[1]
    c = de // heads
    # scratch buffers share the input dtype so float64 runs stay float64
    prod = np.empty(de, dtype=Q.dtype)
    logits = np.empty((heads, k), dtype=Q.dtype)
    qc = np.zeros((heads, 3), dtype=Q.dtype)
    rb = np.zeros((heads, 3), dtype=Q.dtype)
    acc = np.zeros(de, dtype=Q.dtype)
    tot = np.zeros(1, dtype=Q.dtype)
    for i in range(n):
        for h in range(heads):
            for x in range(3):
                qc[h, x] = 0.0
                for ch in range(c):
                    qc[h, x] += Q[i, h * c + ch] * wk_off[h, ch, x]
        for j in range(k):
            r = idx[i, j]
            for ch in range(de):
                prod[ch] = Q[i, ch] * Kf[r, ch]
            for h in range(heads):
                s = qc[h, 0] * rel[i, j, 0] + qc[h, 1] * rel[i, j, 1] + qc[h, 2] * rel[i, j, 2]
                for ch in range(c):
                    s += prod[h * c + ch]
                logits[h, j] = s * scale if valid[i, j] else -np.inf
        acc[:] = 0.0
        for h in range(heads):
            m = logits[h, 0]
            for j in range(1, k):
                m = max(m, logits[h, j])
            tot[0] = 0.0
            for j in range(k):
                logits[h, j] = np.exp(logits[h, j] - m)
                tot[0] += logits[h, j]
            for j in range(k):
                logits[h, j] /= tot[0]
            rb[h, 0] = 0.0
            rb[h, 1] = 0.0
            rb[h, 2] = 0.0
        for j in range(k):
            r = idx[i, j]
            for h in range(heads):
                a = logits[h, j]
                rb[h, 0] += a * rel[i, j, 0]
                rb[h, 1] += a * rel[i, j, 1]
                rb[h, 2] += a * rel[i, j, 2]
                for ch in range(h * c, (h + 1) * c):
                    acc[ch] += a * Vf[r, ch]
        for h in range(heads):
            for ch in range(c):
                o = h * c + ch
                out[i, o] = (
                    acc[o] + rb[h, 0] * wv_off[h, ch, 0] + rb[h, 1] * wv_off[h, ch, 1]
                    + rb[h, 2] * wv_off[h, ch, 2] + bv[o]
                )


def npa_forward(x, nbh, p, prefix, heads, need_cache=True):
    """Multihead attention of every point over its k nearest neighbors.

    Logits are scaled by 1/sqrt(channels per head); padding neighbors are
    excluded from the softmax.
    """
    wq, bq = p[prefix + ".wq.matrix"], p[prefix + ".wq.bias"]
    wk, wv = p[prefix + ".wk.matrix"], p[prefix + ".wv.matrix"]
    bv = p[prefix + ".wv.bias"]
    wo, bo = p[prefix + ".out.matrix"], p[prefix + ".out.bias"]
    d_in = x.shape[1]
    if wq.shape[1] != d_in or wk.shape[1] != d_in + 3 or wv.shape[1] != d_in + 3:
        raise ShapeError(f"attention weights do not accept {d_in}-dim input")
    if nbh.query_count != len(x):
        raise ShapeError(f"neighborhood has {nbh.query_count} rows for {len(x)} points")
    de = wq.shape[0]
    if de % heads:
        raise ShapeError(f"{de} channels not divisible into {heads} heads")
    c = de // heads
    scale = 1.0 / np.sqrt(c)
    wk_off = wk[:, d_in:].reshape(heads, c, 3)
    wv_off = wv[:, d_in:].reshape(heads, c, 3)

    Q = x @ wq.T + bq
    Kf = x @ wk[:, :d_in].T
    Vf = x @ wv[:, :d_in].T
    rel = nbh.rel_offsets.astype(x.dtype)
    idx, valid = nbh.indices, nbh.valid_mask
    n = len(x)
    if need_cache:
        O, att = _attend(Q, Kf, Vf, idx, rel, valid, wk_off, wv_off, bv, heads, scale)
    else:
        O = np.empty((n, de), dtype=Q.dtype)
        att = None
        _attend_fused(
            np.ascontiguousarray(Q), np.ascontiguousarray(Kf), np.ascontiguousarray(Vf),
            np.ascontiguousarray(idx), np.ascontiguousarray(rel), np.ascontiguousarray(valid),
            np.ascontiguousarray(wk_off), np.ascontiguousarray(wv_off),
            np.ascontiguousarray(bv), heads, scale, O,
        )
    y = O @ wo.T + bo
    if not need_cache:
        return y, None
    return y, (x, idx, rel, O, att, heads, scale, prefix)


def npa_backward(dy, cache, p):
    x, idx, rel, O, att, heads, scale, prefix = cache
    Qh, Kg, Vg, A, r_bar, relT = att
    wq = p[prefix + ".wq.matrix"]
    wk, wv = p[prefix + ".wk.matrix"], p[prefix + ".wv.matrix"]
    wo = p[prefix + ".out.matrix"]
    n, d_in = x.shape
    k = idx.shape[1]
    de = wq.shape[0]
    c = de // heads
    wk_off = wk[:, d_in:].reshape(heads, c, 3)
    wv_off = wv[:, d_in:].reshape(heads, c, 3)
    g = {}

    dO, g[prefix + ".out.matrix"], g[prefix + ".out.bias"] = L.linear_backward(dy, O, wo)
    dOh = dO.reshape(n, heads, c)
    g[prefix + ".wv.bias"] = dO.sum(axis=0)

    # value path
    dwv_off = np.einsum("nhc,nhx->hcx", dOh, r_bar)
    dr_bar = np.einsum("nhc,hcx->nhx", dOh, wv_off)
    dA = (dOh[:, :, None, :] @ Vg.transpose(0, 1, 3, 2))[:, :, 0, :] + dr_bar @ relT
    dVg = A[:, :, :, None] * dOh[:, :, None, :]  # n,h,k,c
    dVf = L.segment_sum(idx, dVg.transpose(0, 2, 1, 3).reshape(n * k, de), n)

    # logits
    dl = L.softmax_backward(dA, A) * scale
    dQh = (dl[:, :, None, :] @ Kg.transpose(0, 1, 3, 2))[:, :, 0, :]
    dqc = dl @ rel  # n,h,3
    dQh += np.einsum("nhx,hcx->nhc", dqc, wk_off)
    dwk_off = np.einsum("nhc,nhx->hcx", Qh, dqc)
    dKg = dl[:, :, :, None] * Qh[:, :, None, :]  # n,h,k,c
    dKf = L.segment_sum(idx, dKg.transpose(0, 2, 1, 3).reshape(n * k, de), n)

    dQ = dQh.reshape(n, de)
    dx = dQ @ wq + dKf @ wk[:, :d_in] + dVf @ wv[:, :d_in]
    g[prefix + ".wq.matrix"] = dQ.T @ x
    g[prefix + ".wq.bias"] = dQ.sum(axis=0)
    g[prefix + ".wk.matrix"] = np.concatenate(
        [dKf.T @ x, dwk_off.reshape(de, 3)], axis=1
    )
    # A shared key bias shifts every logit of a row equally.
    g[prefix + ".wk.bias"] = np.zeros(de, dtype=dy.dtype)
    g[prefix + ".wv.matrix"] = np.concatenate(
        [dVf.T @ x, dwv_off.reshape(de, 3)], axis=1
    )
    return dx, g


def npaformer_forward(x, nbh, p, prefix, heads, need_cache=True):
    """Pre-norm block: x1 = x + NPA(Norm(x)); out = x1 + FFN(Norm(x1))."""
    h1, c_n1 = L.layernorm_forward(x, p[prefix + ".norm1.scale"], p[prefix + ".norm1.shift"])
    a, c_npa = npa_forward(h1, nbh, p, prefix + ".npa", heads, need_cache)
    x1 = x + a
    h2, c_n2 = L.layernorm_forward(x1, p[prefix + ".norm2.scale"], p[prefix + ".norm2.shift"])
    f1, _ = L.linear_forward(h2, p[prefix + ".ffn1.matrix"], p[prefix + ".ffn1.bias"])
    r, mask = L.relu_forward(f1)
    f2, _ = L.linear_forward(r, p[prefix + ".ffn2.matrix"], p[prefix + ".ffn2.bias"])
    out = x1 + f2
    if not need_cache:
        return out, None
    return out, (c_n1, c_npa, c_n2, h2, mask, r, prefix)


def npaformer_backward(dout, cache, p):
    c_n1, c_npa, c_n2, h2, mask, r, prefix = cache
    g = {}
    dr, g[prefix + ".ffn2.matrix"], g[prefix + ".ffn2.bias"] = L.linear_backward(
        dout, r, p[prefix + ".ffn2.matrix"]
    )
    df1 = L.relu_backward(dr, mask)
    dh2, g[prefix + ".ffn1.matrix"], g[prefix + ".ffn1.bias"] = L.linear_backward(
        df1, h2, p[prefix + ".ffn1.matrix"]
    )
    dx1n, g[prefix + ".norm2.scale"], g[prefix + ".norm2.shift"] = L.layernorm_backward(dh2, c_n2)
    dx1 = dout + dx1n
    dh1, g_npa = npa_backward(dx1, c_npa, p)
    g.update(g_npa)
    dxn, g[prefix + ".norm1.scale"], g[prefix + ".norm1.shift"] = L.layernorm_backward(dh1, c_n1)
    return dx1 + dxn, g
