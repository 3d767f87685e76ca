"""Rotated regular grids on a planar km frame, plus nearest/bilinear regridding.

Grids are regular lattices described by an origin (first cell center), a
spacing, a rotation and a row/column count.  The cell at index (i, j) sits at

    origin + R(rotation) @ (j * spacing, i * spacing)

so columns run along the grid's rotated x axis and rows along its y axis.
A grid's extent is the rotated square covering all cells, i.e. cell centers
padded by half a spacing on every side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfExtent, ShapeMismatch

# Slack (in index units) when testing whether a point lies inside an extent,
# so cells that sit exactly on the boundary survive rotation round-off.
_EXTENT_TOL = 1e-9


@dataclass(frozen=True)
class GridSpec:
    """Geometry of one regular grid in the shared planar frame (km)."""

    origin_x_km: float
    origin_y_km: float
    spacing_km: float
    rotation_deg: float
    n_rows: int
    n_cols: int

    def __post_init__(self):
        if self.spacing_km <= 0:
            raise ValueError(f"spacing_km must be > 0, got {self.spacing_km}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("n_rows and n_cols must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def origin(self) -> np.ndarray:
        return np.array([self.origin_x_km, self.origin_y_km], dtype=np.float64)

    def rotation_matrix(self) -> np.ndarray:
        theta = math.radians(self.rotation_deg)
        c, s = math.cos(theta), math.sin(theta)
        return np.array([[c, -s], [s, c]], dtype=np.float64)

    def side_lengths_km(self) -> tuple[float, float]:
        """Extent side lengths (along-x, along-y) in the grid's own frame."""
        return (self.n_cols * self.spacing_km, self.n_rows * self.spacing_km)

    def extent_corner(self) -> np.ndarray:
        """Lower-left corner of the extent in the shared frame."""
        half = 0.5 * self.spacing_km
        return self.origin - self.rotation_matrix() @ np.array([half, half])

    def center(self) -> np.ndarray:
        local = np.array(
            [(self.n_cols - 1) * self.spacing_km / 2.0, (self.n_rows - 1) * self.spacing_km / 2.0]
        )
        return self.origin + self.rotation_matrix() @ local

    def to_json(self) -> dict:
        return {
            "origin_x_km": self.origin_x_km,
            "origin_y_km": self.origin_y_km,
            "spacing_km": self.spacing_km,
            "rotation_deg": self.rotation_deg,
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GridSpec":
        return cls(
            origin_x_km=float(obj["origin_x_km"]),
            origin_y_km=float(obj["origin_y_km"]),
            spacing_km=float(obj["spacing_km"]),
            rotation_deg=float(obj["rotation_deg"]),
            n_rows=int(obj["n_rows"]),
            n_cols=int(obj["n_cols"]),
        )


def cell_centers(grid: GridSpec) -> np.ndarray:
    """(n_rows, n_cols, 2) array of cell-center (x, y) positions in km."""
    jj, ii = np.meshgrid(np.arange(grid.n_cols), np.arange(grid.n_rows))
    local = np.stack([jj * grid.spacing_km, ii * grid.spacing_km], axis=-1).astype(np.float64)
    rot = grid.rotation_matrix()
    return local @ rot.T + grid.origin


@dataclass
class Field2D:
    """A 2D field of 32-bit values attached to a grid."""

    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.shape != self.grid.shape:
            raise ShapeMismatch(
                f"field shape {self.values.shape} != grid shape {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Field2D values must all be finite")


def _to_index_coords(grid: GridSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map shared-frame points to fractional (row, col) index coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    local = (pts - grid.origin) @ grid.rotation_matrix()  # R^T applied row-wise
    col_f = local[..., 0] / grid.spacing_km
    row_f = local[..., 1] / grid.spacing_km
    return row_f, col_f


def points_in_extent(grid: GridSpec, points: np.ndarray) -> np.ndarray:
    """Boolean mask of points lying inside the grid's extent."""
    row_f, col_f = _to_index_coords(grid, points)
    lo = -0.5 - _EXTENT_TOL
    return (
        (row_f >= lo)
        & (row_f <= grid.n_rows - 0.5 + _EXTENT_TOL)
        & (col_f >= lo)
        & (col_f <= grid.n_cols - 0.5 + _EXTENT_TOL)
    )


def _check_extent(src: GridSpec, dst: GridSpec, clamp: bool) -> None:
    if clamp:
        return
    centers = cell_centers(dst).reshape(-1, 2)
    inside = points_in_extent(src, centers)
    if not np.all(inside):
        bad = int(np.argmin(inside))
        raise OutOfExtent(
            f"{int((~inside).sum())} destination cell centers fall outside the "
            f"source extent (first offender: flat index {bad}); "
            "pass clamp=True to clamp instead"
        )


class NearestMap:
    """Precomputed source-cell lookup for nearest-neighbour regridding.

    The nearest source cell is found by brute-force squared-distance
    comparison over all source centers; ties go to the lowest row index,
    then the lowest column index (row-major argmin).
    """

    def __init__(self, src_grid: GridSpec, dst_grid: GridSpec, clamp: bool = False):
        _check_extent(src_grid, dst_grid, clamp)
        src = cell_centers(src_grid).reshape(-1, 2)
        dst = cell_centers(dst_grid).reshape(-1, 2)
        d2 = ((dst[:, None, :] - src[None, :, :]) ** 2).sum(axis=2)
        self.flat_index = np.argmin(d2, axis=1)
        self.src_shape = src_grid.shape
        self.dst_shape = dst_grid.shape

    def apply(self, values: np.ndarray) -> np.ndarray:
        """Gather source values; leading batch/channel dims pass through."""
        values = np.asarray(values)
        if values.shape[-2:] != self.src_shape:
            raise ShapeMismatch(
                f"values shape {values.shape[-2:]} != source grid {self.src_shape}"
            )
        flat = values.reshape(*values.shape[:-2], -1)
        out = flat[..., self.flat_index]
        return out.reshape(*values.shape[:-2], *self.dst_shape)


class BilinearMap:
    """Precomputed 4-point blend for bilinear regridding in index space.

    Fractional index coordinates are clamped to [0, n-1] before blending, so
    points in the half-cell rim of the extent use constant extrapolation from
    the border cells; interior points reproduce linear fields exactly.
    """

    def __init__(self, src_grid: GridSpec, dst_grid: GridSpec, clamp: bool = False):
        _check_extent(src_grid, dst_grid, clamp)
        centers = cell_centers(dst_grid).reshape(-1, 2)
        row_f, col_f = _to_index_coords(src_grid, centers)
        row_f = np.clip(row_f, 0.0, src_grid.n_rows - 1.0)
        col_f = np.clip(col_f, 0.0, src_grid.n_cols - 1.0)
        r0 = np.floor(row_f).astype(np.int64)
        c0 = np.floor(col_f).astype(np.int64)
        r0 = np.minimum(r0, src_grid.n_rows - 2) if src_grid.n_rows > 1 else r0 * 0
        c0 = np.minimum(c0, src_grid.n_cols - 2) if src_grid.n_cols > 1 else c0 * 0
        fr = row_f - r0
        fc = col_f - c0
        nc = src_grid.n_cols
        r1 = np.minimum(r0 + 1, src_grid.n_rows - 1)
        c1 = np.minimum(c0 + 1, src_grid.n_cols - 1)
        self.idx = np.stack([r0 * nc + c0, r0 * nc + c1, r1 * nc + c0, r1 * nc + c1])
        self.w = np.stack(
            [(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc]
        )
        self.src_shape = src_grid.shape
        self.dst_shape = dst_grid.shape

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        if values.shape[-2:] != self.src_shape:
            raise ShapeMismatch(
                f"values shape {values.shape[-2:]} != source grid {self.src_shape}"
            )
        flat = values.reshape(*values.shape[:-2], -1).astype(np.float64)
        out = sum(flat[..., self.idx[k]] * self.w[k] for k in range(4))
        return out.reshape(*values.shape[:-2], *self.dst_shape)


def regrid_nearest(src: Field2D, dst_grid: GridSpec, clamp: bool = False) -> Field2D:
    """Resample a field onto dst_grid, copying the nearest source cell."""
    out = NearestMap(src.grid, dst_grid, clamp=clamp).apply(src.values)
    return Field2D(grid=dst_grid, values=out)


def regrid_bilinear(src: Field2D, dst_grid: GridSpec, clamp: bool = False) -> Field2D:
    """Resample a field onto dst_grid by bilinear blending of 4 source cells."""
    out = BilinearMap(src.grid, dst_grid, clamp=clamp).apply(src.values)
    return Field2D(grid=dst_grid, values=out.astype(np.float32))


@dataclass(frozen=True)
class DomainGeometry:
    """The paired low-/high-resolution grid layout for one spatial domain.

    The low-resolution grid and the high-resolution input grid share extent
    and rotation; the target grid is smaller and deliberately rotated against
    them.  ``crop_margin_px`` cells on every side of the target grid are
    predicted but excluded from all reported metrics.
    """

    lr_grid: GridSpec
    hr_pred_grid: GridSpec
    predictand_grid: GridSpec
    crop_margin_px: int = 4

    def __post_init__(self):
        lr, hr = self.lr_grid, self.hr_pred_grid
        if abs(lr.rotation_deg - hr.rotation_deg) > 1e-9:
            raise ValueError("lr_grid and hr_pred_grid must share rotation")
        if lr.n_rows * lr.spacing_km != hr.n_rows * hr.spacing_km or (
            lr.n_cols * lr.spacing_km != hr.n_cols * hr.spacing_km
        ):
            raise ValueError("lr_grid and hr_pred_grid must cover the same extent")
        if not np.allclose(lr.extent_corner(), hr.extent_corner(), atol=1e-9):
            raise ValueError("lr_grid and hr_pred_grid extents are offset")
        centers = cell_centers(self.predictand_grid).reshape(-1, 2)
        if not np.all(points_in_extent(self.lr_grid, centers)):
            raise ValueError("predictand cell centers leave the lr_grid extent")
        interior = self.predictand_grid.n_rows - 2 * self.crop_margin_px
        if interior < 1:
            raise ValueError("crop margin leaves no interior cells")

    @property
    def interior_shape(self) -> tuple[int, int]:
        m = self.crop_margin_px
        return (self.predictand_grid.n_rows - 2 * m, self.predictand_grid.n_cols - 2 * m)

    def crop_interior(self, values: np.ndarray) -> np.ndarray:
        """Drop the padding margin from the trailing two axes."""
        m = self.crop_margin_px
        if m == 0:
            return values
        return values[..., m:-m, m:-m]

    def to_json(self) -> dict:
        return {
            "lr_grid": self.lr_grid.to_json(),
            "hr_pred_grid": self.hr_pred_grid.to_json(),
            "predictand_grid": self.predictand_grid.to_json(),
            "crop_margin_px": self.crop_margin_px,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DomainGeometry":
        return cls(
            lr_grid=GridSpec.from_json(obj["lr_grid"]),
            hr_pred_grid=GridSpec.from_json(obj["hr_pred_grid"]),
            predictand_grid=GridSpec.from_json(obj["predictand_grid"]),
            crop_margin_px=int(obj["crop_margin_px"]),
        )


def _aligned_pair(
    origin_xy: tuple[float, float],
    rotation_deg: float,
    lr_n: int,
    lr_spacing: float,
    hr_n: int,
) -> tuple[GridSpec, GridSpec]:
    """LR grid plus an HR grid with the same extent and rotation."""
    lr = GridSpec(
        origin_x_km=origin_xy[0],
        origin_y_km=origin_xy[1],
        spacing_km=lr_spacing,
        rotation_deg=rotation_deg,
        n_rows=lr_n,
        n_cols=lr_n,
    )
    hr_spacing = lr_n * lr_spacing / hr_n
    # Same extent corner: shift the origin by the half-spacing difference.
    delta = 0.5 * (hr_spacing - lr_spacing)
    off = lr.rotation_matrix() @ np.array([delta, delta])
    hr = GridSpec(
        origin_x_km=origin_xy[0] + off[0],
        origin_y_km=origin_xy[1] + off[1],
        spacing_km=hr_spacing,
        rotation_deg=rotation_deg,
        n_rows=hr_n,
        n_cols=hr_n,
    )
    return lr, hr


def _centered_rotated(
    center: np.ndarray, spacing: float, rotation_deg: float, n: int
) -> GridSpec:
    half = (n - 1) * spacing / 2.0
    theta = math.radians(rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    origin = center - rot @ np.array([half, half])
    return GridSpec(
        origin_x_km=float(origin[0]),
        origin_y_km=float(origin[1]),
        spacing_km=spacing,
        rotation_deg=rotation_deg,
        n_rows=n,
        n_cols=n,
    )


def canonical_geometry(
    rotation_offset_deg: float = 15.0,
    lr_rotation_deg: float = 0.0,
    origin_xy: tuple[float, float] = (0.0, 0.0),
) -> DomainGeometry:
    """The production-scale layout: 16x16 @ 10 km in, 48x48 @ 2.5 km out.

    The target grid is rotated ``rotation_offset_deg`` against its predictors
    so the two lattices are genuinely non-collocated.
    """
    lr, hr = _aligned_pair(origin_xy, lr_rotation_deg, lr_n=16, lr_spacing=10.0, hr_n=64)
    predictand = _centered_rotated(
        lr.center(), spacing=2.5, rotation_deg=lr_rotation_deg + rotation_offset_deg, n=48
    )
    return DomainGeometry(lr_grid=lr, hr_pred_grid=hr, predictand_grid=predictand)


def mini_geometry(
    rotation_offset_deg: float = 15.0,
    lr_rotation_deg: float = 0.0,
    origin_xy: tuple[float, float] = (0.0, 0.0),
) -> DomainGeometry:
    """Reduced 8x8 / 32x32 / 24x24 layout for fast desk tests."""
    lr, hr = _aligned_pair(origin_xy, lr_rotation_deg, lr_n=8, lr_spacing=10.0, hr_n=32)
    predictand = _centered_rotated(
        lr.center(), spacing=2.5, rotation_deg=lr_rotation_deg + rotation_offset_deg, n=24
    )
    return DomainGeometry(lr_grid=lr, hr_pred_grid=hr, predictand_grid=predictand)


def geometry_digest(geometry: DomainGeometry) -> str:
    import hashlib

    blob = json.dumps(geometry.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
