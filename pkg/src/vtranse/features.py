"""Object features: classeme, relative location and bilinearly sampled
visual features, plus their gradients back to the box coordinates.

Coordinates on a :class:`FeatureMap` are in cell units. Cell ``(a, b)`` of
``values[a, b, :]`` sits at map coordinate ``(a, b)``; a pixel coordinate
``p`` maps to ``p / stride``.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import DegenerateBoxError, DimensionError
from .numerics import check_finite

__all__ = [
    "BoundingBox",
    "FeatureMap",
    "ObjectFeature",
    "location_feature",
    "location_feature_backward",
    "grid_positions",
    "grid_backward",
    "bilinear_sample",
    "bilinear_backward",
    "visual_feature",
    "fuse",
    "fuse_backward",
    "feature_dim",
]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left corner ``(x, y)`` and extent ``(w, h)`` in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = tuple(float(v) for v in (self.x, self.y, self.w, self.h))
        for name, v in zip("xywh", vals):
            object.__setattr__(self, name, v)
        if not all(np.isfinite(v) for v in vals):
            raise DegenerateBoxError(f"non-finite box coordinates {vals}")
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBoxError(f"box needs w > 0 and h > 0, got {vals}")

    @classmethod
    def from_array(cls, arr):
        x, y, w, h = (float(v) for v in np.asarray(arr, dtype=np.float64).reshape(4))
        return cls(x, y, w, h)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls(float(x1), float(y1), float(x2 - x1), float(y2 - y1))

    def as_array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def as_list(self):
        return [self.x, self.y, self.w, self.h]

    @property
    def x2(self):
        return self.x + self.w

    @property
    def y2(self):
        return self.y + self.h

    @property
    def area(self):
        return self.w * self.h

    def union(self, other):
        """Smallest box enclosing both boxes."""
        return BoundingBox.from_corners(
            min(self.x, other.x),
            min(self.y, other.y),
            max(self.x2, other.x2),
            max(self.y2, other.y2),
        )

    def clamp(self, width, height):
        """Clip to ``[0, width] x [0, height]``; raise if nothing is left.

        A box already inside the bounds is returned unchanged.
        """
        if self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height:
            return self
        x1 = min(max(self.x, 0.0), width)
        y1 = min(max(self.y, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return BoundingBox.from_corners(x1, y1, x2, y2)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Dense ``W' x H' x C`` grid of reals with a pixel stride per cell."""

    values: np.ndarray
    stride: float = 1.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 1:
            raise DimensionError(f"feature map must be W x H x C, got {vals.shape}")
        check_finite(vals, "feature map")
        if not self.stride > 0:
            raise ValueError("stride must be positive")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "stride", float(self.stride))

    @property
    def width(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


def feature_dim(num_classes, X, Y, channels):
    """Fused length ``M = (N + 1) + 4 + X*Y*C``."""
    return (num_classes + 1) + 4 + X * Y * channels


def location_feature(subject, counterpart):
    """Scale-invariant offset and log-scale ratio of ``subject`` w.r.t. ``counterpart``.

    Returns ``(t_x, t_y, t_w, t_h)``.
    """
    if not (counterpart.w > 0 and counterpart.h > 0 and subject.w > 0 and subject.h > 0):
        raise DegenerateBoxError("location feature needs positive box extents")
    return np.array(
        [
            (subject.x - counterpart.x) / counterpart.w,
            (subject.y - counterpart.y) / counterpart.h,
            np.log(subject.w / counterpart.w),
            np.log(subject.h / counterpart.h),
        ]
    )


def location_feature_backward(subject, counterpart, upstream):
    """Gradients of ``upstream . location_feature(subject, counterpart)``
    with respect to both boxes, each as an ``(x, y, w, h)`` 4-vector."""
    g = np.asarray(upstream, dtype=np.float64).reshape(4)
    x, y, w, h = subject.as_array()
    xc, yc, wc, hc = counterpart.as_array()
    d_sub = np.array([g[0] / wc, g[1] / hc, g[2] / w, g[3] / h])
    d_cp = np.array(
        [
            -g[0] / wc,
            -g[1] / hc,
            -g[0] * (x - xc) / wc**2 - g[2] / wc,
            -g[1] * (y - yc) / hc**2 - g[3] / hc,
        ]
    )
    return d_sub, d_cp


def grid_positions(box, X, Y, stride=1.0):
    """Centres of an even ``X x Y`` split of ``box``, in map coordinates.

    Returns an array of shape ``(X, Y, 2)``; entry ``[i, j]`` is
    ``((x + (i + 0.5) w / X) / stride, (y + (j + 0.5) h / Y) / stride)``
    for zero-based ``i, j``. The result is affine in ``(x, y, w, h)``.
    """
    if X < 1 or Y < 1:
        raise ValueError("grid needs X, Y >= 1")
    if not (box.w > 0 and box.h > 0):
        raise DegenerateBoxError("grid of a degenerate box")
    fx = (np.arange(X) + 0.5) / X
    fy = (np.arange(Y) + 0.5) / Y
    grid = np.empty((X, Y, 2))
    grid[..., 0] = ((box.x + fx * box.w) / stride)[:, None]
    grid[..., 1] = ((box.y + fy * box.h) / stride)[None, :]
    return grid


def grid_backward(dG, stride=1.0):
    """Chain a gradient on grid positions through :func:`grid_positions`."""
    dG = np.asarray(dG, dtype=np.float64)
    X, Y = dG.shape[:2]
    fx = (np.arange(X) + 0.5) / X
    fy = (np.arange(Y) + 0.5) / Y
    gx = dG[..., 0]
    gy = dG[..., 1]
    return np.array(
        [gx.sum(), gy.sum(), (fx[:, None] * gx).sum(), (fy[None, :] * gy).sum()]
    ) / stride


def _corners(fmap, grid):
    gx = grid[..., 0]
    gy = grid[..., 1]
    x0 = np.floor(gx).astype(np.int64)
    y0 = np.floor(gy).astype(np.int64)
    fx = gx - x0
    fy = gy - y0
    W, H = fmap.width, fmap.height
    xs = np.stack([x0, x0 + 1], axis=-1)  # (X, Y, 2)
    ys = np.stack([y0, y0 + 1], axis=-1)
    vx = (xs >= 0) & (xs < W)
    vy = (ys >= 0) & (ys < H)
    # corner values, zero outside the map: shape (X, Y, 2, 2, C)
    vals = np.zeros(grid.shape[:2] + (2, 2, fmap.channels))
    for a in range(2):
        for b in range(2):
            ok = vx[..., a] & vy[..., b]
            vals[ok, a, b] = fmap.values[xs[..., a][ok], ys[..., b][ok]]
    return xs, ys, vx, vy, fx, fy, vals


def bilinear_sample(fmap, grid):
    """Sample ``fmap`` at every grid position with the tent kernel
    ``k(t) = max(0, 1 - |t|)``.

    Returns an ``(X, Y, C)`` array. Cells outside the map count as zero.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[2] != 2:
        raise DimensionError(f"grid must be X x Y x 2, got {grid.shape}")
    check_finite(grid, "grid")
    _, _, _, _, fx, fy, vals = _corners(fmap, grid)
    wx = np.stack([1.0 - fx, fx], axis=-1)
    wy = np.stack([1.0 - fy, fy], axis=-1)
    weights = wx[..., :, None] * wy[..., None, :]  # (X, Y, 2, 2)
    return np.einsum("xyab,xyabc->xyc", weights, vals)


def bilinear_backward(fmap, grid, dV):
    """Back-propagate ``dV`` (same shape as the sampled block).

    Returns ``(dF, dG, dBox)``: gradients for the map values, the grid
    positions and the ``(x, y, w, h)`` box that produced ``grid`` via
    :func:`grid_positions` with ``fmap.stride``. The kernel derivative is
    taken as 0 where ``|t|`` is 0 or 1.
    """
    grid = np.asarray(grid, dtype=np.float64)
    dV = np.asarray(dV, dtype=np.float64)
    if dV.shape != grid.shape[:2] + (fmap.channels,):
        raise DimensionError(
            f"upstream gradient {dV.shape} does not match grid {grid.shape[:2]} "
            f"and {fmap.channels} channels"
        )
    xs, ys, vx, vy, fx, fy, vals = _corners(fmap, grid)
    wx = np.stack([1.0 - fx, fx], axis=-1)
    wy = np.stack([1.0 - fy, fy], axis=-1)

    dF = np.zeros_like(fmap.values)
    for a in range(2):
        for b in range(2):
            ok = vx[..., a] & vy[..., b]
            w = (wx[..., a] * wy[..., b])[..., None] * dV
            np.add.at(dF, (xs[..., a][ok], ys[..., b][ok]), w[ok])

    # projections of the upstream gradient onto each corner value
    proj = np.einsum("xyabc,xyc->xyab", vals, dV)
    dgx = wy[..., 0] * (proj[..., 1, 0] - proj[..., 0, 0]) + wy[..., 1] * (
        proj[..., 1, 1] - proj[..., 0, 1]
    )
    dgy = wx[..., 0] * (proj[..., 0, 1] - proj[..., 0, 0]) + wx[..., 1] * (
        proj[..., 1, 1] - proj[..., 1, 0]
    )
    dgx = np.where(fx == 0.0, 0.0, dgx)
    dgy = np.where(fy == 0.0, 0.0, dgy)
    dG = np.stack([dgx, dgy], axis=-1)
    return dF, dG, grid_backward(dG, fmap.stride)


def visual_feature(fmap, box, X, Y):
    """Flattened ``X*Y*C`` visual block for ``box`` and the grid used."""
    grid = grid_positions(box, X, Y, fmap.stride)
    return bilinear_sample(fmap, grid).reshape(-1), grid


def _split_sizes(fused_len, n_classeme, n_visual):
    if fused_len != n_classeme + 4 + n_visual:
        raise DimensionError(
            f"fused length {fused_len} != {n_classeme} + 4 + {n_visual}"
        )


def fuse(classeme, location, visual, scales):
    """Weighted concatenation ``[s0*classeme, s1*location, s2*visual]``.

    Works on single vectors or on batches stacked along the leading axis.
    """
    classeme = np.asarray(classeme, dtype=np.float64)
    location = np.asarray(location, dtype=np.float64)
    visual = np.asarray(visual, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if scales.shape != (3,):
        raise DimensionError("expected three block scales")
    if location.shape[-1] != 4:
        raise DimensionError(f"location block must have 4 entries, got {location.shape[-1]}")
    if not (classeme.shape[:-1] == location.shape[:-1] == visual.shape[:-1]):
        raise DimensionError("feature blocks disagree on batch shape")
    return np.concatenate(
        [scales[0] * classeme, scales[1] * location, scales[2] * visual], axis=-1
    )


def fuse_backward(classeme, location, visual, scales, dfused):
    """Gradients of :func:`fuse`: ``(dclasseme, dlocation, dvisual, dscales)``.

    For batched input ``dscales`` is summed over the batch.
    """
    classeme = np.asarray(classeme, dtype=np.float64)
    location = np.asarray(location, dtype=np.float64)
    visual = np.asarray(visual, dtype=np.float64)
    dfused = np.asarray(dfused, dtype=np.float64)
    nc, nv = classeme.shape[-1], visual.shape[-1]
    _split_sizes(dfused.shape[-1], nc, nv)
    dc = dfused[..., :nc]
    dl = dfused[..., nc:nc + 4]
    dv = dfused[..., nc + 4:]
    dscales = np.array(
        [np.sum(dc * classeme), np.sum(dl * location), np.sum(dv * visual)]
    )
    return scales[0] * dc, scales[1] * dl, scales[2] * dv, dscales


@dataclass
class ObjectFeature:
    """The three feature blocks of one object in a pair, and their fusion."""

    classeme: np.ndarray
    location: np.ndarray
    visual: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        self.classeme = np.asarray(self.classeme, dtype=np.float64)
        if np.any(self.classeme < 0) or np.any(self.classeme > 1):
            raise ValueError("classeme entries must lie in [0, 1]")
        if abs(self.classeme.sum() - 1.0) > 1e-9:
            raise ValueError("classeme must sum to 1")

    @property
    def fused(self):
        return fuse(self.classeme, self.location, self.visual, self.scales)
