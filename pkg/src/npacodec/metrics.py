"""Geometry distortion (D1 point-to-point, D2 point-to-plane), rates and BD-rate."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, NoOverlap

DEFAULT_NORMAL_K = 9
TIE_CANDIDATES = 16


def _cloud(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise EmptyInput("distortion of an empty cloud is undefined")
    return a


def nearest(src: np.ndarray, dst: np.ndarray):
    """Nearest ``dst`` point for every ``src`` point.

    Ties go to the lowest ``dst`` index so results do not depend on the tree
    layout. Returns ``(index, squared distance)``.
    """
    tree = cKDTree(dst)
    kk = min(TIE_CANDIDATES, len(dst))
    _, cand = tree.query(src, k=kk)
    cand = cand.reshape(len(src), kk)
    d2 = ((dst[cand] - src[:, None, :]) ** 2).sum(axis=-1)
    dmin = d2.min(axis=1)
    tied = d2 == dmin[:, None]
    best = np.where(tied, cand, len(dst)).min(axis=1)
    if kk < len(dst):
        # every candidate tied: there may be more equidistant points beyond them
        for i in np.flatnonzero(tied.all(axis=1)):
            r = math.sqrt(dmin[i])
            around = np.asarray(tree.query_ball_point(src[i], r * (1 + 1e-9) + 1e-12), dtype=np.int64)
            dd = ((dst[around] - src[i]) ** 2).sum(axis=-1)
            best[i] = around[dd == dmin[i]].min()
    return best, dmin


def psnr(mse: float, peak: float) -> float:
    """10 log10(3 peak^2 / MSE); +inf for zero error."""
    if mse <= 0:
        return math.inf
    return 10.0 * math.log10(3.0 * peak * peak / mse)


def d1_mse(ref, rec) -> float:
    a, b = _cloud(ref), _cloud(rec)
    return max(float(nearest(a, b)[1].mean()), float(nearest(b, a)[1].mean()))


def d1_psnr(ref, rec, peak: float) -> float:
    """Symmetric point-to-point PSNR."""
    return psnr(d1_mse(ref, rec), peak)


def estimate_normals(points, k: int = DEFAULT_NORMAL_K):
    """Unit PCA normals from each point's k nearest neighbors (self included).

    Returns ``(normals, ok)``; ``ok`` is False where the neighborhood is
    collinear or too small to define a plane.
    """
    p = _cloud(points)
    kk = min(k, len(p))
    if kk < 3:
        return np.zeros_like(p), np.zeros(len(p), dtype=bool)
    _, idx = cKDTree(p).query(p, k=kk)
    nb = p[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / kk
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0]
    # a plane needs two directions of spread
    ok = w[:, 1] > 1e-10 * np.maximum(w[:, 2], 1e-300)
    return normals, ok & (w[:, 2] > 0)


def _d2_term(src, dst, normals, ok) -> float:
    """Mean squared projection of (nearest dst - src) onto the src normal."""
    j, d2 = nearest(src, dst)
    disp = dst[j] - src
    proj = np.einsum("ni,ni->n", disp, normals) ** 2
    return float(np.where(ok, proj, d2).mean())


def d2_mse(ref, rec, normal_k: int = DEFAULT_NORMAL_K) -> float:
    a, b = _cloud(ref), _cloud(rec)
    na, oka = estimate_normals(a, normal_k)
    nb, okb = estimate_normals(b, normal_k)
    return max(_d2_term(a, b, na, oka), _d2_term(b, a, nb, okb))


def d2_psnr(ref, rec, peak: float, normal_k: int = DEFAULT_NORMAL_K) -> float:
    """Symmetric point-to-plane PSNR; collinear neighborhoods fall back to D1."""
    return psnr(d2_mse(ref, rec, normal_k), peak)


# -- rate-distortion curves --------------------------------------------------


@dataclass(frozen=True)
class RdPoint:
    bpp: float
    psnr_d1: float
    psnr_d2: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        for v in (self.psnr_d1, self.psnr_d2):
            if math.isnan(v) or v == -math.inf:
                raise ValueError(f"PSNR must be finite or +inf, got {v}")


class RdCurve:
    """Rate-distortion points ordered by strictly increasing bpp."""

    MIN_POINTS = 4

    def __init__(self, points):
        self.points = list(points)
        if len(self.points) < self.MIN_POINTS:
            raise ValueError(f"an R-D curve needs at least {self.MIN_POINTS} points")
        rates = [p.bpp for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("R-D points must have strictly increasing bpp")

    def __len__(self):
        return len(self.points)

    def channel(self, name: str):
        """(bpp, psnr) arrays for ``d1`` or ``d2``."""
        if name not in ("d1", "d2"):
            raise ValueError(f"unknown channel {name!r}")
        bpp = np.array([p.bpp for p in self.points])
        q = np.array([p.psnr_d1 if name == "d1" else p.psnr_d2 for p in self.points])
        return bpp, q

    @classmethod
    def from_csv(cls, path) -> "RdCurve":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        try:
            pts = [RdPoint(float(r["bpp"]), float(r["d1_psnr"]), float(r["d2_psnr"])) for r in rows]
        except KeyError as exc:
            raise ValueError(f"{path}: missing column {exc}") from exc
        return cls(pts)

    def to_csv(self, path) -> None:
        write_rd_csv(self.points, path)


def write_rd_csv(points, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bpp", "d1_psnr", "d2_psnr"])
        for p in points:
            w.writerow([repr(float(p.bpp)), repr(float(p.psnr_d1)), repr(float(p.psnr_d2))])


def bd_rate(anchor: RdCurve, test: RdCurve, channel: str = "d1") -> float:
    """Average rate difference in percent at equal quality.

    log10(bpp) is fitted as a least-squares cubic in PSNR for each curve and
    the fits are integrated over the shared PSNR range. Points with infinite
    PSNR (lossless) carry no position on the quality axis and are left out.
    """
    fits = []
    ranges = []
    for curve in (anchor, test):
        bpp, q = curve.channel(channel)
        keep = np.isfinite(q)
        if keep.sum() < RdCurve.MIN_POINTS:
            raise ValueError(f"need {RdCurve.MIN_POINTS} finite-PSNR points for the cubic fit")
        fits.append(np.polynomial.Polynomial.fit(q[keep], np.log10(bpp[keep]), 3).convert())
        ranges.append((q[keep].min(), q[keep].max()))
    lo = max(r[0] for r in ranges)
    hi = min(r[1] for r in ranges)
    if not hi > lo:
        raise NoOverlap(f"PSNR ranges do not overlap ({lo:.3f} >= {hi:.3f})")
    ia, it = (f.integ() for f in fits)
    avg = ((it(hi) - it(lo)) - (ia(hi) - ia(lo))) / (hi - lo)
    return float((10.0**avg - 1.0) * 100.0)
