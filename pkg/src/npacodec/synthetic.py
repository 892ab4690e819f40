"""Voxelized synthetic scenes: planar patches, line segments, Lissajous surfaces.

Shapes are parametric maps from [0, 1]^m into the unit cube. They are sampled
on a parameter grid fine enough that consecutive samples land less than a
voxel apart, so voxelized surfaces come out without holes.
"""

from __future__ import annotations

import numpy as np

from .sparse_tensor import lex_unique

KINDS = ("plane", "line", "lissajous")
MAX_SAMPLES = 20_000_000


def _random_frame(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    return q


def make_plane(rng):
    """Rectangular patch with random orientation, side lengths in [0.3, 0.9]."""
    frame = _random_frame(rng)
    sides = rng.uniform(0.3, 0.9, size=2)
    center = rng.uniform(0.35, 0.65, size=3)

    def f(u, v):
        a = (u - 0.5)[..., None] * sides[0] * frame[0]
        b = (v - 0.5)[..., None] * sides[1] * frame[1]
        return center + a + b

    return f, 2


def make_line(rng):
    a, b = rng.uniform(0.05, 0.95, size=(2, 3))

    def f(u):
        return a + u[..., None] * (b - a)

    return f, 1


def make_lissajous(rng):
    """Closed surface x = sin(a*s + p), y = sin(b*t), z = sin(c*s + e*t)."""
    fa, fb, fc, fe = rng.integers(1, 3, size=4)
    phase = rng.uniform(0, np.pi)
    amp = rng.uniform(0.25, 0.45)
    center = rng.uniform(0.45, 0.55, size=3)
    tau = 2 * np.pi

    def f(u, v):
        s, t = tau * u, tau * v
        pts = np.stack(
            [np.sin(fa * s + phase), np.sin(fb * t), np.sin(fc * s + fe * t)], axis=-1
        )
        return center + amp * pts

    return f, 2


MAKERS = {"plane": make_plane, "line": make_line, "lissajous": make_lissajous}


def _grid_counts(f, dim, resolution):
    """Samples per parameter axis so that neighboring samples are < 0.5 voxel apart."""
    g = np.linspace(0.0, 1.0, 65)
    h = 1e-4
    if dim == 1:
        speed = np.linalg.norm(f(g + h) - f(g), axis=-1).max() / h
        return [int(np.ceil(2 * resolution * speed)) + 2]
    u, v = np.meshgrid(g, g, indexing="ij")
    su = np.linalg.norm(f(u + h, v) - f(u, v), axis=-1).max() / h
    sv = np.linalg.norm(f(u, v + h) - f(u, v), axis=-1).max() / h
    return [int(np.ceil(2 * resolution * su)) + 2, int(np.ceil(2 * resolution * sv)) + 2]


def sample_shape(f, dim, resolution):
    counts = _grid_counts(f, dim, resolution)
    total = int(np.prod(counts))
    if total > MAX_SAMPLES:
        shrink = (MAX_SAMPLES / total) ** (1 / dim)
        counts = [max(2, int(c * shrink)) for c in counts]
    axes = [np.linspace(0.0, 1.0, c) for c in counts]
    if dim == 1:
        return f(axes[0])
    u, v = np.meshgrid(*axes, indexing="ij")
    return f(u, v).reshape(-1, 3)


def voxelize(points, resolution: int) -> np.ndarray:
    """Map unit-cube points onto a resolution^3 grid, deduplicated."""
    p = np.clip(np.asarray(points, dtype=np.float64), 0.0, 1.0)
    return lex_unique(np.floor(p * (resolution - 1) + 0.5).astype(np.int64))


class Scene:
    """A fixed set of shapes that can be voxelized at any resolution."""

    def __init__(self, shapes):
        self.shapes = shapes

    @classmethod
    def random(cls, rng, kinds=KINDS, max_shapes: int = 3) -> "Scene":
        count = int(rng.integers(1, max_shapes + 1))
        picks = rng.choice(len(kinds), size=count)
        return cls([MAKERS[kinds[i]](rng) for i in picks])

    def voxelize(self, resolution: int) -> np.ndarray:
        parts = [voxelize(sample_shape(f, dim, resolution), resolution) for f, dim in self.shapes]
        return lex_unique(np.concatenate(parts))


def fit_resolution(scene: Scene, target: int, max_resolution: int = 1 << 16,
                   iters: int = 8) -> np.ndarray:
    """Voxelize ``scene`` at the resolution whose point count lands nearest ``target``."""
    res = 64
    best = None
    prev = None
    for _ in range(iters):
        coords = scene.voxelize(res)
        n = len(coords)
        if best is None or abs(np.log(n / target)) < abs(np.log(len(best) / target)):
            best = coords
        if abs(n - target) <= 0.02 * target:
            break
        # counts grow like res^slope; estimate the slope from the last two probes
        slope = 2.0
        if prev is not None and prev[0] != res and prev[1] != n:
            slope = float(np.clip(np.log(n / prev[1]) / np.log(res / prev[0]), 0.5, 3.0))
        prev = (res, n)
        nxt = int(round(res * (target / n) ** (1 / slope)))
        nxt = int(np.clip(nxt, 2, max_resolution))
        if nxt == res:
            break
        res = nxt
    return best


def random_cloud(rng, target: int, extent: int = 1 << 16, kinds=KINDS) -> np.ndarray:
    """Scene with about ``target`` voxels, shifted to a random place inside [0, extent)^3."""
    scene = Scene.random(rng, kinds)
    coords = fit_resolution(scene, target, max_resolution=extent)
    span = coords.max(axis=0) + 1
    shift = rng.integers(0, np.maximum(extent - span, 0) + 1)
    return coords + shift


def corpus(seed: int, count: int, resolution: int, kinds=KINDS) -> list:
    """``count`` scenes voxelized at a fixed resolution (training data)."""
    rng = np.random.default_rng(seed)
    return [Scene.random(rng, kinds).voxelize(resolution) for _ in range(count)]
