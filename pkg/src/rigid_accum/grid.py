"""Bird's-eye-view pillar grids.

A grid covers ``extent = (x_min, x_max, y_min, y_max)`` with cells of size
``pillar_size = (dx, dy, dz)``. Cell ``(i, j)`` spans
``[x_min + i*dx, x_min + (i+1)*dx)`` and likewise in y; its center is used for
bilinear sampling. Vertically a pillar spans ``[z_min, z_min + dz)``.

Learned pillar encoders are out of scope; per-point features come from a
pluggable featurizer and are max-pooled per cell.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Frame, RigidTransform
from .errors import EmptyGrid

DEFAULT_EXTENT = (-35.0, 35.0, -35.0, 35.0)
DEFAULT_PILLAR = (0.25, 0.25, 8.0)
DEFAULT_Z_MIN = -3.0


class RawPositionFeaturizer:
    """Feature = the point's own coordinates."""

    name = "raw"
    dim = 3

    def __call__(self, points, *, target=None, intensity=None):
        return np.asarray(points, dtype=float)

    def embed(self, pooled):
        return _unit_rows(pooled)


class GeometricFeaturizer:
    """Height statistics: ``(z, z^2, 1[, intensity])``.

    After max-pooling a cell carries its top height and squared height
    next to an occupancy bit. Weakly discriminative on purpose; it is a stand-in for a
    learned encoder and mostly useful together with the support mask.
    """

    name = "geometric"

    def __init__(self, use_intensity: bool = False):
        self.use_intensity = use_intensity
        self.dim = 4 if use_intensity else 3

    def __call__(self, points, *, target=None, intensity=None):
        z = np.asarray(points, dtype=float)[:, 2]
        cols = [z, z * z, np.ones_like(z)]
        if self.use_intensity:
            cols.append(np.zeros_like(z) if intensity is None else np.asarray(intensity, float))
        return np.stack(cols, axis=1)

    def embed(self, pooled):
        return _unit_rows(pooled)


class OraclePositionFeaturizer:
    """Feature = ground-truth target-frame position of the point (tests and
    oracle runs only).

    The embedding used for matching is a random Fourier encoding of the
    pooled position, so ``2 - 2<f, g>`` behaves like a squared distance
    ``~ |p - q|^2 / bandwidth^2`` for nearby positions and saturates near 2
    for distant ones. Rows are exactly unit norm.
    """

    name = "oracle-position"
    dim = 3

    def __init__(self, bandwidth: float = 0.5, n_freq: int = 64, seed: int = 0):
        self.bandwidth = bandwidth
        rng = np.random.default_rng(seed)
        self.freqs = rng.normal(size=(3, n_freq)) / bandwidth

    def __call__(self, points, *, target=None, intensity=None):
        if target is None:
            raise ValueError("oracle-position featurizer needs target-frame positions")
        return np.asarray(target, dtype=float)

    def embed(self, pooled):
        phase = np.asarray(pooled, dtype=float) @ self.freqs
        n = self.freqs.shape[1]
        return np.concatenate([np.cos(phase), np.sin(phase)], axis=1) / np.sqrt(n)


FEATURIZERS = {
    "raw": RawPositionFeaturizer,
    "geometric": GeometricFeaturizer,
    "oracle-position": OraclePositionFeaturizer,
}


def make_featurizer(name: str, **kw):
    try:
        return FEATURIZERS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown featurizer {name!r}; choose from {sorted(FEATURIZERS)}") from None


def _unit_rows(a):
    a = np.asarray(a, dtype=float)
    n = np.linalg.norm(a, axis=1, keepdims=True)
    return np.divide(a, n, out=np.zeros_like(a), where=n > 0)


@dataclass(frozen=True, eq=False)
class PillarGrid:
    extent: tuple
    pillar_size: tuple
    z_min: float
    counts: np.ndarray       # (nx, ny) int
    centroids: np.ndarray    # (nx, ny, 3)
    features: np.ndarray     # (nx, ny, C)
    occupancy: np.ndarray    # (nx, ny) bool
    n_dropped: int = 0
    point_cell: np.ndarray | None = None   # flat cell id per input point, -1 if dropped

    @property
    def shape(self):
        return self.counts.shape

    def cell_centers(self) -> np.ndarray:
        """``(nx, ny, 2)`` array of cell-center xy coordinates."""
        x0, _, y0, _ = self.extent
        dx, dy = self.pillar_size[:2]
        nx, ny = self.shape
        cx = x0 + (np.arange(nx) + 0.5) * dx
        cy = y0 + (np.arange(ny) + 0.5) * dy
        return np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1)

    def occupied(self):
        """Occupied cells in row-major order: flat index, centroid, feature."""
        idx = np.flatnonzero(self.occupancy.ravel())
        C = self.features.shape[-1]
        return idx, self.centroids.reshape(-1, 3)[idx], self.features.reshape(-1, C)[idx]


def grid_shape(extent, pillar_size):
    x0, x1, y0, y1 = extent
    dx, dy = pillar_size[:2]
    if not (dx > 0 and dy > 0 and pillar_size[2] > 0):
        raise ValueError("pillar size must be strictly positive")
    if not (x1 > x0 and y1 > y0):
        raise ValueError("grid extent is empty")
    return int(round((x1 - x0) / dx)), int(round((y1 - y0) / dy))


def pillarize(frame, extent=DEFAULT_EXTENT, pillar_size=DEFAULT_PILLAR, featurizer=None,
              *, z_min: float = DEFAULT_Z_MIN, target=None) -> PillarGrid:
    """Scatter a frame into a pillar grid with max-pooled point features.

    ``frame`` may be a :class:`Frame` or an ``(n, 3)`` array. ``target`` is
    forwarded to the featurizer (oracle positions). Points outside the extent
    or the pillar's vertical span are dropped and counted in ``n_dropped``.
    """
    if isinstance(frame, Frame):
        pts, intensity = frame.points, frame.intensity
    else:
        pts, intensity = np.asarray(frame, dtype=float).reshape(-1, 3), None
    featurizer = featurizer or GeometricFeaturizer()
    nx, ny = grid_shape(extent, pillar_size)
    x0, _, y0, _ = extent
    dx, dy, dz = pillar_size

    ix = np.floor((pts[:, 0] - x0) / dx).astype(np.int64)
    iy = np.floor((pts[:, 1] - y0) / dy).astype(np.int64)
    inside = ((ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
              & (pts[:, 2] >= z_min) & (pts[:, 2] < z_min + dz))
    if not inside.any():
        raise EmptyGrid("no points fall inside the grid extent")
    cell = np.where(inside, ix * ny + iy, -1)

    feats = np.asarray(featurizer(pts, target=target, intensity=intensity), dtype=float)
    C = feats.shape[1]
    sel = np.flatnonzero(inside)
    # canonical per-cell order (by coordinates) so results ignore input order
    p = pts[sel]
    order = sel[np.lexsort((p[:, 2], p[:, 1], p[:, 0], cell[sel]))]
    c_sorted = cell[order]
    starts = np.flatnonzero(np.r_[True, c_sorted[1:] != c_sorted[:-1]])
    cells = c_sorted[starts]
    cnt = np.diff(np.r_[starts, len(order)])

    counts = np.zeros(nx * ny, dtype=np.int64)
    counts[cells] = cnt
    centroids = np.zeros((nx * ny, 3))
    centroids[cells] = np.add.reduceat(pts[order], starts, axis=0) / cnt[:, None]
    features = np.zeros((nx * ny, C))
    features[cells] = np.maximum.reduceat(feats[order], starts, axis=0)
    return PillarGrid(
        extent=tuple(extent), pillar_size=tuple(pillar_size), z_min=z_min,
        counts=counts.reshape(nx, ny), centroids=centroids.reshape(nx, ny, 3),
        features=features.reshape(nx, ny, C), occupancy=(counts > 0).reshape(nx, ny),
        n_dropped=int((~inside).sum()), point_cell=cell,
    )


def _bilinear_weights(nx, ny, extent, queries):
    x0, x1, y0, y1 = extent
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    q = np.asarray(queries, dtype=float).reshape(-1, 2)
    outside = (q[:, 0] < x0) | (q[:, 0] > x1) | (q[:, 1] < y0) | (q[:, 1] > y1)
    u = np.clip((q[:, 0] - x0) / dx - 0.5, 0.0, nx - 1)
    v = np.clip((q[:, 1] - y0) / dy - 0.5, 0.0, ny - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), max(nx - 2, 0))
    j0 = np.minimum(np.floor(v).astype(np.int64), max(ny - 2, 0))
    fu = u - i0
    fv = v - j0
    i1 = np.minimum(i0 + 1, nx - 1)
    j1 = np.minimum(j0 + 1, ny - 1)
    idx = [(i0, j0), (i1, j0), (i0, j1), (i1, j1)]
    w = [(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv]
    return idx, w, outside


def bilinear_sample(feature_map, extent, queries):
    """Bilinearly interpolate a ``(nx, ny[, C])`` map at xy ``queries``.

    Interpolation nodes are cell centers. Queries beyond the outermost
    centers are clamped to the border cells; the second return value counts
    queries that lay outside ``extent`` altogether.
    """
    F = np.asarray(feature_map, dtype=float)
    scalar = F.ndim == 2
    if scalar:
        F = F[..., None]
    nx, ny = F.shape[:2]
    single = np.ndim(queries) == 1
    idx, w, outside = _bilinear_weights(nx, ny, extent, queries)
    out = sum(wk[:, None] * F[i, j] for (i, j), wk in zip(idx, w))
    if scalar:
        out = out[:, 0]
    if single:
        out = out[0]
    return out, int(outside.sum())


def _planar(T: RigidTransform):
    """Yaw and xy translation of a transform (vertical parts ignored)."""
    return T.yaw, T.translation[:2]


def warp_grid(grid: PillarGrid, T_ego: RigidTransform) -> PillarGrid:
    """Resample ``grid`` into the frame that ``T_ego`` maps it to.

    Output cell ``(i, j)`` takes the bilinear sample of the input at the
    inverse-mapped location of its center. Only yaw and planar translation
    are used since pillars span the whole vertical range. Cells whose source
    location lies outside the input extent are empty.
    """
    yaw, txy = _planar(T_ego)
    c, s = np.cos(yaw), np.sin(yaw)
    nx, ny = grid.shape
    centers = grid.cell_centers().reshape(-1, 2)
    d = centers - txy
    src = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)

    idx, w, outside = _bilinear_weights(nx, ny, grid.extent, src)
    F = grid.features
    feats = sum(wk[:, None] * F[i, j] for (i, j), wk in zip(idx, w))
    occ = np.zeros(len(src), dtype=bool)
    for (i, j), wk in zip(idx, w):
        occ |= (wk > 0) & grid.occupancy[i, j]
    occ &= ~outside
    feats[~occ] = 0.0

    # nearest source cell supplies count and centroid
    x0, _, y0, _ = grid.extent
    dx, dy = grid.pillar_size[:2]
    ni = np.clip(np.floor((src[:, 0] - x0) / dx).astype(np.int64), 0, nx - 1)
    nj = np.clip(np.floor((src[:, 1] - y0) / dy).astype(np.int64), 0, ny - 1)
    counts = np.where(occ, grid.counts[ni, nj], 0)
    cen = grid.centroids[ni, nj].copy()
    cxy = cen[:, :2]
    cen[:, :2] = np.stack([c * cxy[:, 0] - s * cxy[:, 1], s * cxy[:, 0] + c * cxy[:, 1]], 1) + txy
    cen[~occ] = 0.0
    return PillarGrid(
        extent=grid.extent, pillar_size=grid.pillar_size, z_min=grid.z_min,
        counts=counts.reshape(nx, ny), centroids=cen.reshape(nx, ny, 3),
        features=feats.reshape(nx, ny, -1), occupancy=occ.reshape(nx, ny),
        n_dropped=0,
    )
