"""Stereo geometry: disparity/depth conversion and pseudo-lidar ROIs.

A region of the disparity map is handled in two forms. The *2.5D ROI* is a
``G x G`` resampled disparity patch. The *3D ROI* is the same patch
back-projected to an ordered point set of ``(u, v, d)`` triples, where
``u, v`` are normalized cell-center coordinates and ``d`` is the raw
disparity in pixels. Every point remembers the flat index of the patch cell
it came from, so per-point predictions can be scattered back onto the grid.
"""
from dataclasses import dataclass

import numpy as np

from ._validation import check_grid_size

DEFAULT_GRID = 14
DEFAULT_N_POINTS = 1024


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair: horizontal focal length (px) and baseline (m)."""

    focal_length_px: float
    baseline_m: float

    def __post_init__(self):
        if not self.focal_length_px > 0:
            raise ValueError("focal_length_px must be positive")
        if not self.baseline_m > 0:
            raise ValueError("baseline_m must be positive")

    @property
    def fb(self):
        return self.focal_length_px * self.baseline_m

    def max_range(self, min_disparity=1.0):
        """Depth reached at ``min_disparity`` pixels (1 px by default)."""
        return disparity_to_depth(min_disparity, self)


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned half-open box ``[x0, x1) x [y0, y1)`` in pixels."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_array(self):
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)

    def clip(self, height, width):
        """Clip to an image of the given size; raise if nothing is left."""
        box = RoiBox(
            min(max(self.x0, 0.0), width),
            min(max(self.y0, 0.0), height),
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
        )
        if box.x1 <= box.x0 or box.y1 <= box.y0:
            raise ValueError(f"degenerate box after clipping: {self}")
        return box

    def rounded(self):
        """Integer box with the same extent, rounded to the nearest pixel."""
        x0, y0 = int(round(self.x0)), int(round(self.y0))
        x1 = max(int(round(self.x1)), x0 + 1)
        y1 = max(int(round(self.y1)), y0 + 1)
        return RoiBox(x0, y0, x1, y1)


@dataclass
class DisparityMap:
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.valid.shape:
            raise ValueError("values and valid must be 2-D arrays of equal shape")
        if np.any(self.values[self.valid] <= 0):
            raise ValueError("valid disparities must be positive")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass
class DisparityPatch:
    grid: np.ndarray
    valid: np.ndarray
    source_box: RoiBox

    @property
    def grid_size(self):
        return self.grid.shape[0]


@dataclass
class PointSet3D:
    """Ordered pseudo-lidar points; ``points[:, 2]`` holds raw disparity."""

    points: np.ndarray
    source_index: np.ndarray
    grid_size: int

    def __len__(self):
        return len(self.points)

    def permuted(self, order):
        order = np.asarray(order)
        return PointSet3D(self.points[order], self.source_index[order], self.grid_size)


def disparity_to_depth(d, rig):
    """Depth in meters for disparity ``d`` (px): ``f * b / d``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("disparity must be positive (zero marks an invalid/sky pixel)")
    z = rig.fb / d
    return float(z) if z.ndim == 0 else z


def depth_to_disparity(z, rig):
    z = np.asarray(z, dtype=np.float64)
    if np.any(~(z > 0)):
        raise ValueError("depth must be positive")
    d = rig.fb / z
    return float(d) if d.ndim == 0 else d


def bilinear_taps(start, length, G, size, scale=1.0):
    """Sample positions for ``G`` cell centers spanning ``[start, start+length)``.

    Returns ``(lo, hi, w_hi)`` index/weight arrays along one axis of a map of
    ``size`` samples whose stride relative to image pixels is ``1/scale``.
    Sample ``j`` sits at image coordinate ``start + (j + 0.5) * length / G``;
    map pixel ``i`` has its center at image coordinate ``(i + 0.5) / scale``.
    """
    centers = start + (np.arange(G) + 0.5) * (length / G)
    pos = np.clip(centers * scale - 0.5, 0.0, size - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, size - 1)
    w_hi = pos - lo
    return lo, hi, w_hi


def resample_box(values, box, G=DEFAULT_GRID):
    """Bilinear ``G x G`` resampling of a 2-D array inside ``box`` (cell centers)."""
    values = np.asarray(values, dtype=np.float64)
    H, W = values.shape
    box = box.clip(H, W)
    ylo, yhi, wy = bilinear_taps(box.y0, box.height, G, H)
    xlo, xhi, wx = bilinear_taps(box.x0, box.width, G, W)
    WY, WX = wy[:, None], wx[None, :]
    Y0, Y1, X0, X1 = ylo[:, None], yhi[:, None], xlo[None, :], xhi[None, :]
    # lerp form a + w * (b - a) reproduces constant regions exactly
    top = values[Y0, X0] + WX * (values[Y0, X1] - values[Y0, X0])
    bottom = values[Y1, X0] + WX * (values[Y1, X1] - values[Y1, X0])
    return top + WY * (bottom - top)


def crop_roi_disparity(dmap, box, G=DEFAULT_GRID):
    """Resample the disparity inside ``box`` onto a ``G x G`` grid (2.5D ROI).

    A cell is valid only when every source pixel with non-zero bilinear
    weight is valid; invalid cells hold 0.
    """
    G = check_grid_size(G)
    box = box.clip(dmap.height, dmap.width)
    ylo, yhi, wy = bilinear_taps(box.y0, box.height, G, dmap.height)
    xlo, xhi, wx = bilinear_taps(box.x0, box.width, G, dmap.width)

    grid = resample_box(dmap.values, box, G)
    Y0, X0 = ylo[:, None], xlo[None, :]
    Y1, X1 = yhi[:, None], xhi[None, :]
    WY, WX = wy[:, None], wx[None, :]
    ok = dmap.valid
    valid = (
        ok[Y0, X0]
        & (ok[Y0, X1] | (WX == 0))
        & (ok[Y1, X0] | (WY == 0))
        & (ok[Y1, X1] | (WX == 0) | (WY == 0))
    )
    grid = np.where(valid, grid, 0.0)
    return DisparityPatch(grid=grid, valid=valid, source_box=box)


def backproject_roi(patch):
    """One ``(u, v, d)`` point per valid cell, in row-major order."""
    G = patch.grid_size
    flat = np.flatnonzero(patch.valid.ravel())
    if flat.size == 0:
        raise ValueError("empty ROI: no valid disparity cells")
    rows, cols = np.divmod(flat, G)
    points = np.stack(
        [(cols + 0.5) / G, (rows + 0.5) / G, patch.grid.ravel()[flat]], axis=1
    )
    return PointSet3D(points=points, source_index=flat.astype(np.int64), grid_size=G)


def sample_points(ps, n=DEFAULT_N_POINTS, seed=0):
    """Uniformly resample ``ps`` to exactly ``n`` points.

    Draws without replacement when there are enough points and with
    replacement otherwise. Selected indices are sorted so the original point
    order is kept.
    """
    n = int(n)
    if n <= 0:
        raise ValueError(f"point count must be positive, got {n}")
    m = len(ps)
    if m == 0:
        raise ValueError("cannot sample from an empty point set")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(m, size=n, replace=m < n))
    return PointSet3D(ps.points[idx], ps.source_index[idx], ps.grid_size)


def nearest_fill_index(occupied):
    """For every cell of a boolean grid, the flat index of the occupied cell to copy.

    Occupied cells map to themselves. Empty cells take the nearest occupied
    cell by Euclidean center distance; ties go to the smaller flat index.
    """
    occupied = np.asarray(occupied, dtype=bool)
    G = occupied.shape[0]
    flat_occ = np.flatnonzero(occupied.ravel())
    if flat_occ.size == 0:
        raise ValueError("no occupied cells")
    out = np.arange(G * G)
    empty = np.flatnonzero(~occupied.ravel())
    if empty.size:
        er, ec = np.divmod(empty, G)
        orow, ocol = np.divmod(flat_occ, G)
        d2 = (er[:, None] - orow[None, :]) ** 2 + (ec[:, None] - ocol[None, :]) ** 2
        # argmin returns the first minimum, and flat_occ is ascending
        out[empty] = flat_occ[np.argmin(d2, axis=1)]
    return out


def reproject_points(ps, per_point, G=None):
    """Scatter per-point values back onto the ``G x G`` grid.

    Cells hit by several points take their mean; cells hit by none take
    the value of the nearest occupied cell.
    """
    G = ps.grid_size if G is None else check_grid_size(G)
    values = np.asarray(per_point, dtype=np.float64)
    if len(ps) == 0:
        raise ValueError("cannot re-project an empty point set")
    if values.shape != (len(ps),):
        raise ValueError(f"expected {len(ps)} per-point values, got shape {values.shape}")
    if np.any(ps.source_index >= G * G) or np.any(ps.source_index < 0):
        raise ValueError("source_index out of range for grid size")
    sums = np.bincount(ps.source_index, weights=values, minlength=G * G)
    counts = np.bincount(ps.source_index, minlength=G * G)
    occupied = counts > 0
    mean = np.zeros(G * G)
    mean[occupied] = sums[occupied] / counts[occupied]
    filled = mean[nearest_fill_index(occupied.reshape(G, G))]
    return filled.reshape(G, G)

