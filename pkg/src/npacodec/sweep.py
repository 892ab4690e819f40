"""Rate-distortion sweep over scaling factors."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .codec import CodecConfig, decode, encode
from .metrics import DEFAULT_NORMAL_K, RdPoint, d1_psnr, d2_psnr
from .sparse_tensor import lex_unique


@dataclass
class SweepRow:
    scale: Fraction
    point: RdPoint
    coded_points: int
    stream_bytes: int


def default_peak(coords: np.ndarray) -> float:
    """Largest bounding-box side of the reference lattice."""
    c = np.asarray(coords)
    return float(max(1, (c.max(axis=0) - c.min(axis=0)).max()))


def rd_sweep(coords, model, scales, peak: float | None = None,
             normal_k: int = DEFAULT_NORMAL_K, threshold: int = 64) -> list:
    """Encode, decode and measure at every scale, smallest scale first."""
    coords = np.asarray(coords, dtype=np.int64)
    ref = lex_unique(coords)
    peak = default_peak(ref) if peak is None else peak
    rows = []
    for s in sorted({Fraction(x) for x in scales}):
        cfg = CodecConfig(scale=s, base_scale_threshold=threshold)
        data = encode(coords, cfg, model).to_bytes()
        rec = decode(data, cfg, model)
        bpp = 8 * len(data) / len(coords)
        pt = RdPoint(bpp, d1_psnr(ref, rec.points, peak), d2_psnr(ref, rec.points, peak, normal_k))
        rows.append(SweepRow(s, pt, len(rec.coords), len(data)))
    return rows
