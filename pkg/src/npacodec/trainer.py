"""Supervised training of the occupancy predictor with binary cross-entropy.

Training runs teacher-forced: every stage sees the true occupancy of the
octants coded before it, exactly what the encoder sees at coding time.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields

import numpy as np

from . import synthetic
from .codec import CodecConfig, encode
from .errors import TrainingDiverged
from .mopa import TransitionGeometry, UniformPredictor, transition_loss
from .nn.weights import ModelConfig, ModelWeights
from .sparse_tensor import SparseTensor, downscale

PROB_FLOOR = 1e-7


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch: int = 4
    steps: int = 200
    seed: int = 0
    min_level: int = 0
    max_level: int = 3
    k: int = 16
    heads: int = 4
    cph: int = 8
    precision: int = 32
    corpus_size: int = 24
    resolution: int = 48
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.batch < 1 or self.steps < 0 or self.corpus_size < 1:
            raise ValueError("lr must be >= 0; batch, corpus_size >= 1; steps >= 0")
        if self.k < 1 or self.heads < 1 or self.cph < 1 or self.resolution < 2:
            raise ValueError("k, heads, cph must be positive and resolution >= 2")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if not 0 <= self.min_level <= self.max_level:
            raise ValueError("need 0 <= min_level <= max_level")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def model_config(self) -> ModelConfig:
        return ModelConfig(k=self.k, heads=self.heads, cph=self.cph)


def read_config(path) -> TrainConfig:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            val = val.strip("\"'")
            try:
                values[key] = float(val) if types[key] in (float, "float") else int(val)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {val!r}") from exc
    return TrainConfig(**values)


def bce_loss(probs, bits):
    """Mean binary cross-entropy and its gradient w.r.t. ``probs``."""
    loss, grad = bce_sum(probs, bits)
    n = max(len(np.ravel(bits)), 1)
    return loss / n, grad / n


def bce_sum(probs, bits):
    p = np.asarray(probs)
    b = np.asarray(bits, dtype=p.dtype)
    pc = np.clip(p, PROB_FLOOR, 1 - PROB_FLOOR)
    loss = -np.sum(b * np.log(pc) + (1 - b) * np.log(1 - pc))
    # clamped entries have zero gradient
    inside = (p > PROB_FLOOR) & (p < 1 - PROB_FLOOR)
    grad = np.where(inside, (pc - b) / (pc * (1 - pc)), 0.0).astype(p.dtype)
    return float(loss), grad


@dataclass
class Pair:
    parents: SparseTensor
    truth: np.ndarray  # per expanded child, canonical order
    level: int  # scale level of the finer tensor


def make_pairs(cloud, min_level: int = 0, max_level: int | None = None) -> list:
    """(parents, child truth bits) for every transition whose finer level is in range."""
    t = cloud if isinstance(cloud, SparseTensor) else SparseTensor.build(cloud, dedupe=True)
    pairs = []
    level = 0
    while max_level is None or level <= max_level:
        parents = downscale(t)
        if level >= min_level:
            pairs.append(Pair(parents, TransitionGeometry.build(parents).truth_bits(t), level))
        if len(t) == 1:
            break  # coarser transitions repeat the same single-voxel pattern
        t = parents
        level += 1
    return pairs


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(a) for n, a in params.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name, g in grads.items():
            g = g.astype(params[name].dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params[name] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[name].dtype)


def batch_loss(params, heads, k, pairs, need_grad=True):
    """Mean BCE per symbol over ``pairs`` and its parameter gradients."""
    total = 0.0
    symbols = 0
    grads = {}
    for pair in pairs:
        loss, n, g = transition_loss(params, heads, k, pair.parents, pair.truth, bce_sum, need_grad)
        total += loss
        symbols += n
        for name, v in g.items():
            grads[name] = grads[name] + v if name in grads else v
    scale = 1.0 / max(symbols, 1)
    return total * scale, symbols, {n: v * scale for n, v in grads.items()}


def _check_finite(step, loss, grads):
    if not math.isfinite(loss):
        raise TrainingDiverged(f"step {step}: loss is {loss}")
    bad = sorted(n for n, g in grads.items() if not np.all(np.isfinite(g)))
    if bad:
        raise TrainingDiverged(f"step {step}: non-finite gradients in {', '.join(bad[:5])}")


def train_step(weights: ModelWeights, pairs, opt: Adam, step: int = 0, k: int | None = None) -> float:
    """One teacher-forced optimizer step in place; returns the pre-update loss."""
    k = weights.config.k if k is None else k
    loss, _, grads = batch_loss(weights.params, weights.config.heads, k, pairs)
    _check_finite(step, loss, grads)
    opt.step(weights.params, grads)
    return loss


@dataclass
class TrainResult:
    weights: ModelWeights
    log: list  # (step, loss)
    seconds: float


def build_corpus(cfg: TrainConfig, seed_offset: int = 0) -> list:
    """Per-cloud transition pairs of the synthetic training corpus."""
    clouds = synthetic.corpus(cfg.seed + seed_offset, cfg.corpus_size, cfg.resolution)
    out = []
    for c in clouds:
        pairs = make_pairs(c, cfg.min_level, cfg.max_level)
        if pairs:
            out.append(pairs)
    return out


def train(cfg: TrainConfig, corpus=None, log_path=None, progress=None) -> TrainResult:
    """Adam on random (cloud, transition) draws; deterministic given ``cfg.seed``."""
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    corpus = build_corpus(cfg) if corpus is None else corpus
    weights = ModelWeights.random(cfg.model_config(), seed=cfg.seed, dtype=cfg.dtype)
    opt = Adam(weights.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    log = []
    for step in range(cfg.steps):
        picks = rng.integers(0, len(corpus), size=cfg.batch)
        batch = [corpus[i][rng.integers(0, len(corpus[i]))] for i in picks]
        loss = train_step(weights, batch, opt, step, cfg.k)
        log.append((step, loss))
        if progress is not None:
            progress(step, loss)
    if log_path is not None:
        write_log(log, log_path)
    return TrainResult(weights, log, time.perf_counter() - start)


def write_log(log, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in log:
            w.writerow([step, repr(float(loss))])


def cross_entropy(weights: ModelWeights, clouds, min_level=0, max_level=None, k=None) -> float:
    """Teacher-forced mean BCE per symbol (nats) over every transition of ``clouds``."""
    k = weights.config.k if k is None else k
    pairs = [p for c in clouds for p in make_pairs(c, min_level, max_level)]
    loss, _, _ = batch_loss(weights.params, weights.config.heads, k, pairs, need_grad=False)
    return loss


def coded_bpp(clouds, model, threshold: int = 64) -> float:
    """Whole-stream bits over input points, pooled across ``clouds``."""
    cfg = CodecConfig(base_scale_threshold=threshold)
    bits = 0
    points = 0
    for c in clouds:
        bits += 8 * len(encode(c, cfg, model).to_bytes())
        points += len(c)
    return bits / points


def uniform_bpp(clouds, threshold: int = 64) -> float:
    return coded_bpp(clouds, UniformPredictor(0.5), threshold)
