"""Regular lattice geometry and the mapping matrices that move values between
points, base-grid cells and coarser proxy pixels.

Cells are linearized row-major: cell (r, c) has index ``r * ncol + c``.  Row
``r`` spans ``y`` in ``[y0 + r*h, y0 + (r+1)*h)`` and column ``c`` spans ``x``
in ``[x0 + c*h, x0 + (c+1)*h)``, where ``(x0, y0)`` is the lower-left origin.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp


class GridError(ValueError):
    """Raised for malformed grids or points that do not fall in a grid."""


@dataclass(frozen=True, eq=False)
class RegularGrid:
    nrow: int
    ncol: int
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    land_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.nrow < 1 or self.ncol < 1:
            raise GridError(f"grid dimensions must be positive, got {self.nrow}x{self.ncol}")
        if not self.cell_size > 0:
            raise GridError("cell_size must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        if self.land_mask is None:
            mask = np.ones(self.nrow * self.ncol, dtype=bool)
        else:
            mask = np.asarray(self.land_mask, dtype=bool).ravel().copy()
            if mask.size != self.nrow * self.ncol:
                raise GridError(
                    f"land mask has {mask.size} entries, grid has {self.nrow * self.ncol} cells"
                )
        mask.setflags(write=False)
        object.__setattr__(self, "land_mask", mask)

    @property
    def size(self) -> int:
        return self.nrow * self.ncol

    @property
    def shape(self) -> tuple[int, int]:
        return self.nrow, self.ncol

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax)."""
        x0, y0 = self.origin
        return x0, x0 + self.ncol * self.cell_size, y0, y0 + self.nrow * self.cell_size

    @property
    def land_indices(self) -> np.ndarray:
        return np.flatnonzero(self.land_mask)

    def index(self, row, col):
        return np.asarray(row) * self.ncol + np.asarray(col)

    def row_col(self, index):
        index = np.asarray(index)
        return index // self.ncol, index % self.ncol

    def centroids(self) -> np.ndarray:
        """(size, 2) array of cell-centre (x, y) coordinates in linear order."""
        x0, y0 = self.origin
        h = self.cell_size
        rows, cols = np.divmod(np.arange(self.size), self.ncol)
        return np.column_stack([x0 + (cols + 0.5) * h, y0 + (rows + 0.5) * h])

    def with_land_mask(self, mask) -> "RegularGrid":
        return RegularGrid(self.nrow, self.ncol, self.cell_size, self.origin, mask)

    def to_field(self, values) -> np.ndarray:
        """Reshape a linear-order vector to an (nrow, ncol) array."""
        return np.asarray(values).reshape(self.nrow, self.ncol)


@dataclass(frozen=True, eq=False)
class MappingMatrix:
    """Sparse nonnegative weights from source cells (columns) to targets (rows).

    ``excluded`` flags target rows that should not enter a likelihood (for
    example proxy pixels that are mostly over water).
    """

    matrix: sp.csr_matrix
    excluded: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def retained(self) -> sp.csr_matrix:
        return self.matrix[~self.excluded]

    def retained_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.excluded)

    def apply(self, values) -> np.ndarray:
        return self.matrix @ np.asarray(values)

    def selected_cells(self) -> np.ndarray:
        """Column index of the single unit entry in each row (selection maps only)."""
        m = self.matrix.tocsr()
        counts = np.diff(m.indptr)
        if not np.all(counts == 1):
            raise GridError("mapping is not a selection (rows must hold exactly one entry)")
        return m.indices.copy()


def point_to_cell(grid: RegularGrid, points) -> MappingMatrix:
    """Map points to the cell that contains them.

    A point on an interior cell edge goes to the cell with the larger index
    along that axis; points on the outer upper/right edge stay in the last
    row/column.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != 2:
        raise GridError("points must be (n, 2) coordinate pairs")
    xmin, xmax, ymin, ymax = grid.extent
    inside = (pts[:, 0] >= xmin) & (pts[:, 0] <= xmax) & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise GridError(f"point {bad} at {tuple(pts[bad])} lies outside the grid extent")
    col = np.floor((pts[:, 0] - xmin) / grid.cell_size).astype(int)
    row = np.floor((pts[:, 1] - ymin) / grid.cell_size).astype(int)
    col = np.minimum(col, grid.ncol - 1)
    row = np.minimum(row, grid.nrow - 1)
    idx = grid.index(row, col)
    n = pts.shape[0]
    mat = sp.csr_matrix((np.ones(n), (np.arange(n), idx)), shape=(n, grid.size))
    return MappingMatrix(mat, np.zeros(n, dtype=bool))


def selection_matrix(indices, ncols: int) -> sp.csr_matrix:
    indices = np.asarray(indices, dtype=int)
    n = indices.size
    return sp.csr_matrix((np.ones(n), (np.arange(n), indices)), shape=(n, ncols))


def _interval_overlap(lo_a, hi_a, lo_b, hi_b) -> np.ndarray:
    # |[lo_a, hi_a] ∩ [lo_b, hi_b]| for every (a, b) pair
    lo = np.maximum(lo_a[:, None], lo_b[None, :])
    hi = np.minimum(hi_a[:, None], hi_b[None, :])
    return np.clip(hi - lo, 0.0, None)


def overlap_weights(
    fine: RegularGrid,
    coarse: RegularGrid,
    land_only: bool = True,
    min_land_fraction: float = 0.40,
) -> MappingMatrix:
    """Area-overlap averaging weights from fine cells to coarse cells.

    Row ``j`` holds the fraction of coarse cell ``j`` covered by each fine cell
    (restricted to fine land cells when ``land_only``), renormalized to sum to
    one.  With ``land_only``, a coarse cell is retained only if its land
    fraction exceeds ``min_land_fraction``; with the default of 0.40, a pixel
    with 60% or more water is excluded.
    """
    fx0, fy0 = fine.origin
    cx0, cy0 = coarse.origin
    hf, hc = fine.cell_size, coarse.cell_size
    fxl = fx0 + np.arange(fine.ncol) * hf
    fyl = fy0 + np.arange(fine.nrow) * hf
    cxl = cx0 + np.arange(coarse.ncol) * hc
    cyl = cy0 + np.arange(coarse.nrow) * hc
    ox = sp.csr_matrix(_interval_overlap(cxl, cxl + hc, fxl, fxl + hf))
    oy = sp.csr_matrix(_interval_overlap(cyl, cyl + hc, fyl, fyl + hf))
    # row-major on both sides: area[(rc, cc), (rf, cf)] = oy[rc, rf] * ox[cc, cf]
    area = sp.kron(oy, ox, format="csr")
    if land_only:
        area = area @ sp.diags(fine.land_mask.astype(float))
        area = sp.csr_matrix(area)
        area.eliminate_zeros()
    covered = np.asarray(area.sum(axis=1)).ravel()
    fraction = covered / hc**2
    if land_only:
        excluded = fraction <= min_land_fraction + 1e-12
    else:
        excluded = covered <= 0
    scale = np.where(covered > 0, 1.0 / np.where(covered > 0, covered, 1.0), 0.0)
    weights = sp.csr_matrix(sp.diags(scale) @ area)
    return MappingMatrix(weights, excluded)


def read_land_mask(path, grid: RegularGrid | None = None) -> np.ndarray:
    """Read a one-column CSV of 0/1 land flags in linear (row-major) order."""
    frame = pd.read_csv(path)
    if frame.shape[1] != 1:
        raise GridError(f"{path}: land mask CSV must have exactly one column")
    values = frame.iloc[:, 0].to_numpy()
    if not np.isin(values, (0, 1)).all():
        raise GridError(f"{path}: land mask entries must be 0 or 1")
    if grid is not None and values.size != grid.size:
        raise GridError(f"{path}: {values.size} rows, grid has {grid.size} cells")
    return values.astype(bool)


def write_land_mask(path, mask) -> None:
    pd.DataFrame({"land": np.asarray(mask, dtype=int)}).to_csv(Path(path), index=False)


def grid_from_config(block: dict, land_mask=None) -> RegularGrid:
    missing = {"nrow", "ncol"} - set(block)
    if missing:
        raise GridError(f"grid block is missing {sorted(missing)}")
    return RegularGrid(
        int(block["nrow"]),
        int(block["ncol"]),
        float(block.get("cell_size", 1.0)),
        tuple(block.get("origin", (0.0, 0.0))),
        land_mask,
    )
