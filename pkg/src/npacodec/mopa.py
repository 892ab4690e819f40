"""Staged occupancy prediction for one scale transition.

For a parent tensor at scale i-1 the predictor

1. lifts occupancy to 32 channels with a two-layer residual sparse-conv
   block and mixes it with an NPAFormer over each parent's kNN;
2. upsamples every parent to its 8 children (1x1x1 stride-2 transposed
   conv) and adds a learned per-octant embedding;
3. codes the children in 8 stages, one octant index per stage in ascending
   order. Stage g runs its own NPAFormer + two sparse convs + sigmoid over
   the full candidate set, with an occupancy embedding added to every child
   whose bit is already known (octants < g).

Probabilities of stage g are a function of the parents, the already-coded
bits and the weights only, so the decoder reproduces them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptStream, StageOrderViolation
from .entropy import quantize_prob
from .nn import attention as A
from .nn import layers as L
from .nn.sconv import (
    kernel_map, sconv_backward, sconv_forward, tsconv_backward, tsconv_forward,
)
from .nn.weights import ModelWeights
from .sparse_tensor import (
    Octants, SparseTensor, expand_octants, knn, neighborhood_33,
)

STAGE_ORDER = tuple(range(8))


@dataclass
class TransitionGeometry:
    parents: SparseTensor
    children: Octants
    groups: list  # groups[g] = child rows with octant g, aligned with parent order

    @classmethod
    def build(cls, parents: SparseTensor) -> "TransitionGeometry":
        children = expand_octants(parents)
        groups = [np.flatnonzero(children.octant == g) for g in STAGE_ORDER]
        return cls(parents, children, groups)

    def truth_bits(self, finer: SparseTensor) -> np.ndarray:
        return (finer.index.lookup(self.children.tensor.coords) >= 0).astype(np.int8)


def _check_known(geom: TransitionGeometry, g: int, known: np.ndarray) -> None:
    if np.any(known[geom.children.octant >= g] >= 0):
        raise StageOrderViolation(f"bits of stage >= {g} supplied to stage {g}")


# -- forward / backward pieces ----------------------------------------------


def aggregate_forward(parents, p, heads, k, need_cache=False):
    """Residual sparse-conv lift followed by an NPAFormer over parent kNN."""
    dtype = p["agg.conv1.kernel"].dtype
    km = kernel_map(neighborhood_33(parents))
    x0 = np.ones((len(parents), 1), dtype=dtype)
    a1, c1 = sconv_forward(x0, km, p["agg.conv1.kernel"], p["agg.conv1.bias"])
    r, mask = L.relu_forward(a1)
    a2, c2 = sconv_forward(r, km, p["agg.conv2.kernel"], p["agg.conv2.bias"])
    h = a1 + a2
    y, cf = A.npaformer_forward(h, knn(parents, k), p, "agg.former", heads, need_cache)
    return y, (c1, mask, c2, cf) if need_cache else None


def aggregate_backward(dy, cache, p):
    c1, mask, c2, cf = cache
    dh, g = A.npaformer_backward(dy, cf, p)
    dr, g["agg.conv2.kernel"], g["agg.conv2.bias"] = sconv_backward(dh, c2, p["agg.conv2.kernel"])
    da1 = dh + L.relu_backward(dr, mask)
    _, g["agg.conv1.kernel"], g["agg.conv1.bias"] = sconv_backward(da1, c1, p["agg.conv1.kernel"])
    return g


def upscale_forward(geom, y, p):
    ch = geom.children
    c, cache = tsconv_forward(y, ch.parent, p["tsconv.kernel"], p["tsconv.bias"])
    return c + p["octant_embed"][ch.octant], cache


def upscale_backward(dc, cache, geom, p):
    g = {}
    dy, g["tsconv.kernel"], g["tsconv.bias"] = tsconv_backward(dc, cache, p["tsconv.kernel"])
    g["octant_embed"] = L.segment_sum(geom.children.octant, dc, 8)
    return dy, g


@dataclass
class StageContext:
    geom: TransitionGeometry
    child_feats: np.ndarray
    nbh: object
    kmap: list
    group_kmaps: list
    caches: dict = field(default_factory=dict)


def build_context(geom, p, heads, k, need_cache=False) -> StageContext:
    y, agg_cache = aggregate_forward(geom.parents, p, heads, k, need_cache)
    c, up_cache = upscale_forward(geom, y, p)
    ct = geom.children.tensor
    kmap = kernel_map(neighborhood_33(ct))
    group_kmaps = [kernel_map(neighborhood_33(ct, ct.coords[rows])) for rows in geom.groups]
    ctx = StageContext(geom, c, knn(ct, k), kmap, group_kmaps)
    if need_cache:
        ctx.caches = {"agg": agg_cache, "up": up_cache}
    return ctx


def stage_forward(ctx, g, known, p, heads, need_cache=False):
    z = ctx.child_feats.copy()
    sel = np.flatnonzero(known >= 0)
    z[sel] += p["occupancy_embed"][known[sel]]
    pre = f"stage{g}"
    z2, cf = A.npaformer_forward(z, ctx.nbh, p, pre + ".former", heads, need_cache)
    u1, c1 = sconv_forward(z2, ctx.kmap, p[pre + ".conv1.kernel"], p[pre + ".conv1.bias"])
    u, mask = L.relu_forward(u1)
    v, c2 = sconv_forward(
        u, ctx.group_kmaps[g], p[pre + ".conv2.kernel"], p[pre + ".conv2.bias"],
        n_out=len(ctx.geom.groups[g]),
    )
    prob, _ = L.sigmoid_forward(v[:, 0])
    cache = (cf, c1, mask, c2, prob, sel, known[sel]) if need_cache else None
    return prob, cache


def stage_backward(dprob, cache, g, p):
    """Gradient w.r.t. the stage input features plus parameter grads."""
    cf, c1, mask, c2, prob, sel, bits = cache
    pre = f"stage{g}"
    grads = {}
    dv = L.sigmoid_backward(dprob, prob)[:, None]
    du, grads[pre + ".conv2.kernel"], grads[pre + ".conv2.bias"] = sconv_backward(
        dv, c2, p[pre + ".conv2.kernel"]
    )
    du1 = L.relu_backward(du, mask)
    dz2, grads[pre + ".conv1.kernel"], grads[pre + ".conv1.bias"] = sconv_backward(
        du1, c1, p[pre + ".conv1.kernel"]
    )
    dz, gf = A.npaformer_backward(dz2, cf, p)
    grads.update(gf)
    grads["occupancy_embed"] = L.segment_sum(bits, dz[sel], 2)
    return dz, grads


def _accumulate(total, grads):
    for name, v in grads.items():
        if name in total:
            total[name] = total[name] + v
        else:
            total[name] = v


def transition_loss(p, heads, k, parents, truth_bits, loss_fn, need_grad=True):
    """Teacher-forced loss summed over all 8 stages of one transition.

    ``truth_bits`` are per expanded child in canonical order. ``loss_fn``
    maps (probs, bits) to (summed loss, dloss/dprobs). Returns
    ``(loss, symbol_count, grads)``; grads is empty when ``need_grad`` is off.
    """
    geom = TransitionGeometry.build(parents)
    ctx = build_context(geom, p, heads, k, need_cache=need_grad)
    truth = np.asarray(truth_bits, dtype=np.int8)
    total = 0.0
    grads = {}
    dc = np.zeros_like(ctx.child_feats)
    for g in STAGE_ORDER:
        known = np.where(geom.children.octant < g, truth, -1).astype(np.int8)
        prob, cache = stage_forward(ctx, g, known, p, heads, need_cache=need_grad)
        loss, dprob = loss_fn(prob, truth[geom.groups[g]])
        total += loss
        if need_grad:
            dz, gs = stage_backward(dprob, cache, g, p)
            dc += dz
            _accumulate(grads, gs)
            del cache
    if need_grad:
        dy, gu = upscale_backward(dc, ctx.caches["up"], geom, p)
        _accumulate(grads, gu)
        _accumulate(grads, aggregate_backward(dy, ctx.caches["agg"], p))
    return total, len(truth), grads


# -- predictors --------------------------------------------------------------


class NpaPredictor:
    """Probability source backed by model weights (float32 by default)."""

    def __init__(self, weights: ModelWeights, k: int | None = None, dtype=np.float32):
        self.weights = weights
        self.params = {n: np.ascontiguousarray(a, dtype=dtype) for n, a in weights.params.items()}
        self.heads = weights.config.heads
        self.k = weights.config.k if k is None else int(k)
        self.hash = weights.hash

    def prepare(self, geom: TransitionGeometry) -> StageContext:
        return build_context(geom, self.params, self.heads, self.k)

    def stage_probs(self, ctx: StageContext, g: int, known: np.ndarray) -> np.ndarray:
        _check_known(ctx.geom, g, known)
        prob, _ = stage_forward(ctx, g, known, self.params, self.heads)
        return prob


class UniformPredictor:
    """Every child gets probability ``p``; the baseline for rate comparisons."""

    hash = bytes(32)

    def __init__(self, p: float = 0.5, k: int = 16):
        self.p = p
        self.k = k

    def prepare(self, geom: TransitionGeometry):
        return geom

    def stage_probs(self, geom, g, known):
        _check_known(geom, g, known)
        return np.full(len(geom.groups[g]), self.p)


def aggregate(parents: SparseTensor, weights: ModelWeights, k: int | None = None) -> SparseTensor:
    """Aggregated 32-channel features on the parent geometry."""
    pred = NpaPredictor(weights, k, dtype=weights.params["agg.conv1.kernel"].dtype)
    y, _ = aggregate_forward(parents, pred.params, pred.heads, pred.k)
    return parents.with_feats(y)


def predict_stage(predictor, ctx, g: int, known: np.ndarray) -> np.ndarray:
    """Occupancy probabilities of the stage-g children (parent order)."""
    return predictor.stage_probs(ctx, g, np.asarray(known, dtype=np.int8))


def code_scale(parents: SparseTensor, predictor, coder, finer: SparseTensor | None = None,
               trace: list | None = None) -> SparseTensor:
    """Code one transition with ``coder``.

    With ``finer`` given, the coder must be an encoder and the true child
    occupancy comes from ``finer``; otherwise the coder is a decoder and bits
    are read from it. Returns the occupied children with all-ones features.
    ``trace`` collects the quantized probabilities of each stage.
    """
    geom = TransitionGeometry.build(parents)
    ctx = predictor.prepare(geom)
    known = np.full(len(geom.children.octant), -1, dtype=np.int8)
    truth = geom.truth_bits(finer) if finer is not None else None
    for g in STAGE_ORDER:
        rows = geom.groups[g]
        p16 = quantize_prob(predictor.stage_probs(ctx, g, known))
        if trace is not None:
            trace.append(p16)
        if truth is not None:
            bits = truth[rows]
            coder.encode_bits(bits, p16)
        else:
            bits = coder.decode_bits(p16)
        known[rows] = bits
    occupied = geom.children.tensor.coords[known == 1]
    if len(occupied) == 0:
        raise CorruptStream("a scale decoded with no occupied voxels")
    level = geom.children.tensor.scale_level
    return SparseTensor(occupied, np.ones((len(occupied), 1)), level)
