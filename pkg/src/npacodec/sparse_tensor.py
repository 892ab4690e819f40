"""Voxel sets with per-voxel features, dyadic rescaling and exact neighbor search.

Coordinates are integer voxel indices kept in canonical (lexicographic x, y, z)
order, so that the row index of a voxel doubles as its lexicographic rank.
Every neighbor query relies on that property for deterministic tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyTensor, OverflowCoordinate, ShapeError

MAX_COORD = 1 << 30

# Below this size the O(N^2) search is cheaper than building a tree.
BRUTE_FORCE_LIMIT = 256

# 3x3x3 kernel offsets as (ix, iy, iz), ordered with iz most significant.
OFFSETS_27 = np.array(
    [(ix, iy, iz) for iz in (-1, 0, 1) for iy in (-1, 0, 1) for ix in (-1, 0, 1)],
    dtype=np.int64,
)
CENTER_OFFSET = 13

# Octant o = ox + 2*oy + 4*oz.
OCTANT_OFFSETS = np.array(
    [(o & 1, (o >> 1) & 1, (o >> 2) & 1) for o in range(8)], dtype=np.int64
)


def as_coords(coords) -> np.ndarray:
    """Validate and convert to an (N, 3) int64 array."""
    arr = np.asarray(coords)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeError(f"coordinates must be (N, 3), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ShapeError("coordinates must be integers")
    arr = arr.astype(np.int64)
    if np.any(np.abs(arr) > MAX_COORD):
        raise OverflowCoordinate(f"coordinate magnitude exceeds 2^30")
    return arr


def canonical_order(coords: np.ndarray) -> np.ndarray:
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def lex_unique(coords: np.ndarray) -> np.ndarray:
    """Sorted unique rows of an integer coordinate array."""
    if len(coords) == 0:
        return coords.reshape(0, 3)
    order = canonical_order(coords)
    c = coords[order]
    keep = np.ones(len(c), dtype=bool)
    keep[1:] = np.any(c[1:] != c[:-1], axis=1)
    return c[keep]


class CoordIndex:
    """Hash-free sorted-key index mapping coordinates to row numbers.

    Coordinates are packed into a mixed-radix int64 key over a bounding box
    padded by one voxel, which keeps lexicographic order and lets +-1 shifted
    queries stay in range. Boxes too large for 63 bits fall back to comparing
    raw big-endian bytes.
    """

    def __init__(self, coords: np.ndarray):
        self.n = len(coords)
        if self.n == 0:
            self._lo = self._hi = None
            return
        self._lo = coords.min(axis=0) - 1
        self._hi = coords.max(axis=0) + 1
        ext = (self._hi - self._lo + 1).astype(object)
        self._packed = ext[0] * ext[1] * ext[2] < (1 << 62)
        self._ey = int(ext[1])
        self._ez = int(ext[2])
        self.keys = self._key(coords)

    def _key(self, q: np.ndarray) -> np.ndarray:
        if self._packed:
            r = q - self._lo
            return (r[:, 0] * self._ey + r[:, 1]) * self._ez + r[:, 2]
        u = np.ascontiguousarray((q + (1 << 31)).astype(">u4"))
        return u.view("V12").ravel()

    def lookup(self, q: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, or -1 when absent."""
        q = np.asarray(q, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(q), -1, dtype=np.int64)
        if self.n == 0 or len(q) == 0:
            return out
        inside = np.all((q >= self._lo) & (q <= self._hi), axis=1)
        if not np.any(inside):
            return out
        qi = q[inside]
        keys = self._key(qi)
        pos = np.searchsorted(self.keys, keys)
        pos = np.minimum(pos, self.n - 1)
        hit = self.keys[pos] == keys
        res = np.where(hit, pos, -1)
        out[inside] = res
        return out


@dataclass(frozen=True, eq=False)
class SparseTensor:
    coords: np.ndarray
    feats: np.ndarray
    scale_level: int = 0

    def __post_init__(self):
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ShapeError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.feats.ndim != 2 or len(self.feats) != len(self.coords):
            raise ShapeError(
                f"feats {self.feats.shape} do not match {len(self.coords)} coords"
            )
        if self.scale_level < 0:
            raise ValueError("scale_level must be >= 0")

    @classmethod
    def build(cls, coords, feats=None, scale_level: int = 0, dedupe: bool = False):
        """Canonicalize ``coords`` (and reorder ``feats`` with them).

        Duplicate coordinates raise ``ShapeError`` unless ``dedupe`` is set, in
        which case the first occurrence's feature wins.
        """
        c = as_coords(coords)
        if feats is None:
            f = np.ones((len(c), 1))
        else:
            f = np.asarray(feats)
            if f.ndim == 1:
                f = f[:, None]
            if len(f) != len(c):
                raise ShapeError(f"{len(f)} feature rows for {len(c)} coords")
        order = canonical_order(c) if len(c) else np.zeros(0, dtype=np.int64)
        c, f = c[order], f[order]
        if len(c) > 1:
            dup = np.all(c[1:] == c[:-1], axis=1)
            if np.any(dup):
                if not dedupe:
                    raise ShapeError("duplicate coordinates")
                keep = np.concatenate([[True], ~dup])
                c, f = c[keep], f[keep]
        return cls(c, f, scale_level)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def dim(self) -> int:
        return self.feats.shape[1]

    @cached_property
    def index(self) -> CoordIndex:
        return CoordIndex(self.coords)

    def with_feats(self, feats: np.ndarray) -> "SparseTensor":
        return SparseTensor(self.coords, feats, self.scale_level)


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Per-query kNN table.

    ``indices[i, j]`` is the row of the j-th nearest neighbor of point i,
    ``rel_offsets[i, j]`` its coordinate minus point i's, and
    ``valid_mask[i, j]`` is False on padding rows (tensor smaller than k).
    Padding entries point at the query itself with zero offset.
    """

    indices: np.ndarray
    rel_offsets: np.ndarray
    valid_mask: np.ndarray

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


@dataclass(frozen=True, eq=False)
class Octants:
    """Children produced by :func:`expand_octants`."""

    tensor: SparseTensor
    octant: np.ndarray
    parent: np.ndarray


def downscale(t: SparseTensor) -> SparseTensor:
    if len(t) == 0:
        raise EmptyTensor("cannot downscale an empty tensor")
    parents = lex_unique(np.floor_divide(t.coords, 2))
    return SparseTensor(parents, np.ones((len(parents), 1)), t.scale_level + 1)


def expand_octants(t: SparseTensor) -> Octants:
    if len(t) == 0:
        raise EmptyTensor("cannot expand an empty tensor")
    n = len(t)
    child = (2 * t.coords)[:, None, :] + OCTANT_OFFSETS[None, :, :]
    child = child.reshape(-1, 3)
    octant = np.tile(np.arange(8, dtype=np.int64), n)
    parent = np.repeat(np.arange(n, dtype=np.int64), 8)
    order = canonical_order(child)
    tensor = SparseTensor(
        child[order], t.feats[parent[order]], max(t.scale_level - 1, 0)
    )
    return Octants(tensor, octant[order], parent[order])


def _finish(coords: np.ndarray, idx: np.ndarray, valid: np.ndarray) -> Neighborhood:
    rel = coords[idx] - coords[:, None, :]
    rel[~valid] = 0
    return Neighborhood(idx, rel, valid)


def knn_brute_force(coords: np.ndarray, k: int) -> Neighborhood:
    """Exhaustive O(N^2) search; also serves as the reference in tests."""
    n = len(coords)
    d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
    order = np.argsort(d2, axis=1, kind="stable")
    kk = min(k, n)
    idx = np.empty((n, k), dtype=np.int64)
    idx[:, :kk] = order[:, :kk]
    idx[:, kk:] = np.arange(n)[:, None]
    valid = np.zeros((n, k), dtype=bool)
    valid[:, :kk] = True
    return _finish(coords, idx, valid)


def knn(t: SparseTensor, k: int) -> Neighborhood:
    """Exact k nearest neighbors of every point, the point itself included.

    Ties on squared distance are broken by row index, which equals
    lexicographic coordinate order on a canonical tensor.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    coords = t.coords
    n = len(coords)
    if n == 0:
        z = np.zeros((0, k), dtype=np.int64)
        return Neighborhood(z, np.zeros((0, k, 3), dtype=np.int64), z.astype(bool))
    if n < BRUTE_FORCE_LIMIT or k >= n:
        return knn_brute_force(coords, k)

    tree = cKDTree(coords.astype(np.float64))
    idx = np.empty((n, k), dtype=np.int64)
    rows = np.arange(n)
    m = min(n, k + 8)
    while len(rows):
        _, cand = tree.query(coords[rows].astype(np.float64), k=m)
        cand = np.asarray(cand, dtype=np.int64).reshape(len(rows), m)
        d2 = np.sum((coords[cand] - coords[rows][:, None, :]) ** 2, axis=-1)
        order = np.lexsort((cand, d2), axis=-1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        # Certain once something strictly farther than the k-th pick was seen.
        done = (d2[:, -1] > d2[:, k - 1]) | (m == n)
        idx[rows[done]] = cand[done, :k]
        rows = rows[~done]
        m = min(n, 2 * m)
    return _finish(coords, idx, np.ones((n, k), dtype=bool))


def neighborhood_33(t: SparseTensor, query_coords: np.ndarray | None = None) -> np.ndarray:
    """Occupied 3x3x3 offsets per point.

    Returns an (Q, 27) table whose entry ``[u, o]`` is the row in ``t`` of
    ``u + OFFSETS_27[o]`` or -1 if that voxel is empty. Queries default to
    the tensor's own coordinates.
    """
    q = t.coords if query_coords is None else np.asarray(query_coords, dtype=np.int64)
    table = np.empty((len(q), 27), dtype=np.int64)
    for o, off in enumerate(OFFSETS_27):
        table[:, o] = t.index.lookup(q + off)
    return table
