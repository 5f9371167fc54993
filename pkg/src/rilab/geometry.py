"""Lattice geometry: points, boxes, windows, neighborhoods and boundaries.

Points of Z^d are plain integer numpy vectors of length d (d >= 3 throughout;
d <= 2 is rejected because the simple random walk is recurrent there and
nothing downstream would terminate).  The coordinate plane Z^2 is embedded as
Z e_1 + Z e_2, i.e. (a, b) -> (a, b, 0, ..., 0).

Finite site sets are (n, d) integer arrays.  Windows -- the finite regions on
which interlacement occupancy is read off -- are axis-aligned boxes with an
optional site mask, which covers both d-dimensional boxes and planar shapes
such as rectangles and disks embedded in the z=0 plane.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


def as_point(coords, d=None):
    p = np.asarray(coords, dtype=np.int64)
    if p.ndim != 1:
        raise ValueError("a lattice point is a 1-d integer vector")
    if d is not None and p.shape[0] != d:
        raise ValueError(f"expected dimension {d}, got {p.shape[0]}")
    if p.shape[0] < 3:
        raise ValueError("dimension must be >= 3")
    return p


def as_point_set(points, d=None):
    arr = np.asarray(points, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError("a point set is an (n, d) integer array")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"expected dimension {d}, got {arr.shape[1]}")
    return np.unique(arr, axis=0)


def embed_plane(a, b, d):
    """Map (a, b) in Z^2 to (a, b, 0, ..., 0) in Z^d."""
    p = np.zeros(d, dtype=np.int64)
    p[0] = a
    p[1] = b
    return p


def enumerate_neighbors(x, adjacency="nn"):
    """Neighbors of x: 'nn' for |y-x| = 1 (2d points), 'star' for
    |y-x|_inf = 1 (3^d - 1 points)."""
    x = as_point(x)
    d = x.shape[0]
    if adjacency == "nn":
        out = np.repeat(x.reshape(1, -1), 2 * d, axis=0)
        for i in range(d):
            out[2 * i, i] += 1
            out[2 * i + 1, i] -= 1
        return out
    if adjacency == "star":
        offs = [o for o in itertools.product((-1, 0, 1), repeat=d) if any(o)]
        return x + np.array(offs, dtype=np.int64)
    raise ValueError(f"unknown adjacency {adjacency!r}")


def _point_key_set(points):
    return {tuple(int(v) for v in p) for p in points}


def boundary(points, kind="outer"):
    """Boundary of a finite set U.

    'outer': sites outside U with a nearest neighbor in U.
    'inner': sites of U with a nearest neighbor outside U.
    """
    pts = as_point_set(points)
    d = pts.shape[1]
    inset = _point_key_set(pts)
    out = []
    if kind == "outer":
        seen = set()
        for p in pts:
            for q in enumerate_neighbors(p, "nn"):
                key = tuple(int(v) for v in q)
                if key not in inset and key not in seen:
                    seen.add(key)
                    out.append(key)
    elif kind == "inner":
        for p in pts:
            for q in enumerate_neighbors(p, "nn"):
                if tuple(int(v) for v in q) not in inset:
                    out.append(tuple(int(v) for v in p))
                    break
    else:
        raise ValueError(f"unknown boundary kind {kind!r}")
    if not out:
        return np.empty((0, d), dtype=np.int64)
    return np.array(sorted(out), dtype=np.int64)


def euclidean_ball(center, radius, d=None):
    """Sites of the closed Euclidean ball B(center, radius)."""
    c = as_point(center, d)
    d = c.shape[0]
    r = int(np.floor(radius))
    rng = np.arange(-r, r + 1)
    grids = np.meshgrid(*([rng] * d), indexing="ij")
    r2 = sum(g.astype(np.int64) ** 2 for g in grids)
    mask = r2 <= radius * radius + 1e-9
    offs = np.stack([g[mask] for g in grids], axis=1)
    return c + offs


@dataclass(frozen=True)
class Window:
    """A finite window of Z^d: an axis-aligned box plus an optional mask.

    Membership is exact: y belongs to the window iff |y_j - center_j| <=
    half_sides_j on every axis and (if masked) the mask bit of y is set.
    Degenerate axes (half side 0) express planar shapes such as the
    rectangles and disks the percolation events live on.
    """

    center: np.ndarray
    half_sides: np.ndarray
    mask: np.ndarray | None = field(default=None, compare=False)

    # ---- constructors -------------------------------------------------

    @staticmethod
    def box(center, half_sides) -> "Window":
        c = as_point(center)
        h = np.asarray(half_sides, dtype=np.int64)
        if h.shape != c.shape or (h < 0).any():
            raise ValueError("half_sides must be nonnegative, one per axis")
        return Window(c, h)

    @staticmethod
    def cube(center, half_side) -> "Window":
        c = as_point(center)
        return Window(c, np.full(c.shape, int(half_side), dtype=np.int64))

    @staticmethod
    def point_set(points) -> "Window":
        """Smallest masked window holding an arbitrary finite set."""
        pts = as_point_set(points)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        center = (lo + hi) // 2
        half = np.maximum(hi - center, center - lo)
        w = Window(center, half)
        mask = np.zeros(w.bbox_shape, dtype=bool)
        idx = tuple((pts - (center - half)).T)
        mask[idx] = True
        return Window(center, half, mask)

    @staticmethod
    def plane_rect(x_range, y_range, d) -> "Window":
        """Rectangle [x0, x1] x [y0, y1] x {0}^(d-2)."""
        x0, x1 = map(int, x_range)
        y0, y1 = map(int, y_range)
        if (x1 - x0) % 2 or (y1 - y0) % 2:
            # keep integer centers by widening the mask arithmetic instead
            pts = [
                embed_plane(a, b, d)
                for a in range(x0, x1 + 1)
                for b in range(y0, y1 + 1)
            ]
            return Window.point_set(np.array(pts))
        c = embed_plane((x0 + x1) // 2, (y0 + y1) // 2, d)
        h = np.zeros(d, dtype=np.int64)
        h[0] = (x1 - x0) // 2
        h[1] = (y1 - y0) // 2
        return Window(c, h)

    @staticmethod
    def plane_square(half_side, d, center2=(0, 0)) -> "Window":
        c = embed_plane(center2[0], center2[1], d)
        h = np.zeros(d, dtype=np.int64)
        h[0] = h[1] = int(half_side)
        return Window(c, h)

    @staticmethod
    def plane_disk(radius, d) -> "Window":
        """Trace of B(0, radius) on the embedded plane: a Euclidean disk."""
        r = int(np.floor(radius))
        ax = np.arange(-r, r + 1)
        xx, yy = np.meshgrid(ax, ax, indexing="ij")
        mask2 = xx * xx + yy * yy <= radius * radius + 1e-9
        c = embed_plane(0, 0, d)
        h = np.zeros(d, dtype=np.int64)
        h[0] = h[1] = r
        mask = mask2.reshape(mask2.shape + (1,) * (d - 2))
        return Window(c, h, mask.copy())

    # ---- basic queries -------------------------------------------------

    @property
    def d(self) -> int:
        return int(self.center.shape[0])

    @property
    def bbox_shape(self):
        return tuple(int(2 * h + 1) for h in self.half_sides)

    @property
    def lo(self):
        return self.center - self.half_sides

    def contains(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.int64)
        single = pts.ndim == 1
        pts = pts.reshape(-1, self.d)
        inside = (np.abs(pts - self.center) <= self.half_sides).all(axis=1)
        if self.mask is not None and inside.any():
            rel = pts[inside] - self.lo
            inside[inside.nonzero()[0]] = self.mask[tuple(rel.T)]
        return bool(inside[0]) if single else inside

    def sites(self) -> np.ndarray:
        """All window sites as an (n, d) array, lexicographic order."""
        axes = [np.arange(lo, lo + n) for lo, n in zip(self.lo, self.bbox_shape)]
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        if self.mask is not None:
            pts = pts[self.mask.ravel()]
        return pts

    @property
    def n_sites(self) -> int:
        if self.mask is not None:
            return int(self.mask.sum())
        return int(np.prod(self.bbox_shape))

    def linear_index(self, points) -> np.ndarray:
        """Dense row-major index of points into the bounding box."""
        rel = np.asarray(points, dtype=np.int64).reshape(-1, self.d) - self.lo
        return np.ravel_multi_index(tuple(rel.T), self.bbox_shape)

    def diam_inf(self) -> int:
        return int(2 * self.half_sides.max())

    def is_planar(self) -> bool:
        return bool((self.half_sides[2:] == 0).all())

    def plane_trace_mask(self) -> np.ndarray:
        """2-d occupancy-mask template of the window's z=0 plane trace."""
        if not self.is_planar():
            raise ValueError("window is not contained in the embedded plane")
        shape2 = self.bbox_shape[:2]
        if self.mask is None:
            return np.ones(shape2, dtype=bool)
        return self.mask.reshape(shape2).copy()

    def describe(self) -> str:
        c = ",".join(map(str, self.center.tolist()))
        h = ",".join(map(str, self.half_sides.tolist()))
        kind = "masked" if self.mask is not None else "box"
        return f"{kind}[c=({c});h=({h});n={self.n_sites}]"


# Alias for the plain-box reading used throughout the interfaces.
BoxRegion = Window
