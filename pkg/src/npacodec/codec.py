"""End-to-end geometry encoder and decoder."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .entropy import (
    Bitstream, Header, RangeDecoder, RangeEncoder, check_crc, geometry_crc,
)
from .errors import CorruptStream, EmptyInput, ModelMismatch
from .mopa import NpaPredictor, code_scale
from .nn.weights import ModelConfig, ModelWeights
from .sparse_tensor import SparseTensor, as_coords, downscale, lex_unique

MODEL_WIDTH = 32
MAX_SCALES = 32


@dataclass
class CodecConfig:
    k: int | None = None
    heads: int = 4
    cph: int = 8
    scale: Fraction = Fraction(1)
    base_scale_threshold: int = 64
    weights_path: str | None = None
    seed: int = 0
    allow_any_width: bool = False

    def __post_init__(self):
        self.scale = Fraction(self.scale)
        if self.scale <= 0 or self.scale > 1:
            raise ValueError(f"scale factor must lie in (0, 1], got {self.scale}")
        if self.heads * self.cph != MODEL_WIDTH and not self.allow_any_width:
            raise ValueError(f"heads * cph must be {MODEL_WIDTH}")
        if self.base_scale_threshold < 1:
            raise ValueError("base_scale_threshold must be >= 1")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")

    def load_weights(self) -> ModelWeights:
        if self.weights_path:
            return ModelWeights.load(self.weights_path)
        cfg = ModelConfig(k=self.k or 16, heads=self.heads, cph=self.cph)
        return ModelWeights.random(cfg, seed=self.seed, dtype=np.float32)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_mm(points, precision: float) -> np.ndarray:
    """Physical quantization: round(P / precision)."""
    if precision <= 0:
        raise ValueError("precision must be positive")
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return round_half_away(p / precision).astype(np.int64)


def quantize_depth(points, depth: int):
    """Octree-depth quantization of a cloud normalized to [-1, 1].

    Returns ``(coords, offset, step)`` with step = 2 / (2^depth - 1) and the
    per-axis minimum as offset.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    step = 2.0 / (2**depth - 1)
    offset = p.min(axis=0) if len(p) else np.zeros(3)
    return round_half_away((p - offset) / step).astype(np.int64), offset, step


def _rational_round(v: np.ndarray, num: int, den: int) -> np.ndarray:
    """round(v * num / den), half away from zero, in exact integer arithmetic."""
    t = v * num
    mag = (2 * np.abs(t) + den) // (2 * den)
    return np.sign(t) * mag


def scale_coords(coords, scale: Fraction) -> np.ndarray:
    s = Fraction(scale)
    return lex_unique(_rational_round(np.asarray(coords, dtype=np.int64), s.numerator, s.denominator))


def unscale_coords(coords, scale: Fraction) -> np.ndarray:
    s = Fraction(scale)
    return _rational_round(np.asarray(coords, dtype=np.int64), s.denominator, s.numerator)


def build_pyramid(coords: np.ndarray, threshold: int) -> list:
    """Scales from finest (index 0) down to the first with <= threshold points."""
    levels = [SparseTensor(coords, np.ones((len(coords), 1)), 0)]
    while len(levels[-1]) > threshold:
        levels.append(downscale(levels[-1]))
    return levels


def _predictor(model, k=None):
    if model is None:
        model = CodecConfig().load_weights()
    if isinstance(model, ModelWeights):
        return NpaPredictor(model, k)
    if isinstance(model, NpaPredictor) and k is not None and k != model.k:
        return NpaPredictor(model.weights, k)
    return model


def encode(points, cfg: CodecConfig | None = None, model=None) -> Bitstream:
    """Encode integer coordinates.

    ``model`` is a ``ModelWeights``, any predictor object, or None to use
    ``cfg.load_weights()``.
    """
    cfg = cfg or CodecConfig()
    pts = as_coords(points)
    if len(pts) == 0:
        raise EmptyInput("cannot encode an empty cloud")
    pred = _predictor(model if model is not None else cfg.load_weights(), cfg.k)
    coded = scale_coords(pts, cfg.scale) if cfg.scale != 1 else lex_unique(pts)
    offset = coded.min(axis=0)
    levels = build_pyramid(coded - offset, cfg.base_scale_threshold)

    enc = RangeEncoder()
    for j in range(len(levels) - 1, 0, -1):
        code_scale(levels[j], pred, enc, finer=levels[j - 1])
    payload = enc.finish() if len(levels) > 1 else b""
    header = Header(
        k=pred.k, scale_num=cfg.scale.numerator, scale_den=cfg.scale.denominator,
        offset=tuple(int(v) for v in offset), source_count=len(pts),
        point_count=len(coded), scale_count=len(levels) - 1,
        base_points=levels[-1].coords, model_hash=pred.hash,
        geometry_crc=geometry_crc(levels[0].coords),
    )
    return Bitstream(header, payload)


@dataclass
class DecodeResult:
    coords: np.ndarray  # coded-scale coordinates, offset restored
    points: np.ndarray  # reconstruction at the input scale
    header: Header


def decode(stream, cfg: CodecConfig | None = None, model=None) -> DecodeResult:
    cfg = cfg or CodecConfig()
    bs = stream if isinstance(stream, Bitstream) else Bitstream.from_bytes(stream)
    h = bs.header
    pred = _predictor(model if model is not None else cfg.load_weights(), h.k)
    if pred.hash != h.model_hash:
        raise ModelMismatch("bitstream was produced with different weights")

    base = h.base_points
    if len(base) == 0 or np.any(base < 0) or len(base) > h.point_count:
        raise CorruptStream("invalid base scale")
    if h.scale_count > MAX_SCALES:
        raise CorruptStream(f"{h.scale_count} scale transitions is out of range")
    t = SparseTensor.build(base, scale_level=h.scale_count)
    if h.scale_count:
        dec = RangeDecoder(bs.payload)
        for _ in range(h.scale_count):
            t = code_scale(t, pred, dec)
            # Coarser scales never hold more points than the finest one.
            if len(t) > h.point_count:
                raise CorruptStream("decoded scale exceeds the header point count")
        if dec.bytes_consumed != len(bs.payload):
            raise CorruptStream("payload length does not match decoded symbols")
    elif bs.payload:
        raise CorruptStream("unexpected payload after a header-only stream")
    if len(t) != h.point_count:
        raise CorruptStream(f"decoded {len(t)} points, header says {h.point_count}")
    check_crc(t.coords, h.geometry_crc)

    coords = t.coords + np.asarray(h.offset, dtype=np.int64)
    scale = Fraction(h.scale_num, h.scale_den)
    points = coords if scale == 1 else unscale_coords(coords, scale)
    return DecodeResult(coords, points, h)


def bits_per_point(stream: bytes, source_count: int) -> float:
    """Whole-stream bits divided by the input point count."""
    return 8 * len(stream) / source_count


__all__ = [
    "CodecConfig", "DecodeResult", "build_pyramid", "bits_per_point", "decode",
    "encode", "quantize_depth", "quantize_mm", "scale_coords", "unscale_coords",
]
