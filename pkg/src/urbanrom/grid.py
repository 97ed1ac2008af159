"""Structured 2D finite-volume grid with rectangular obstacles and road cells.

Cells are ordered row-major over the active (non-obstacle) cells, so the
cell at column ``i`` and row ``j`` gets a smaller index than ``(i + 1, j)``
and ``(i, j + 1)``.  Interior faces therefore always have
``owner < neighbour`` with the face normal pointing from owner to
neighbour (+x or +y).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "BOUNDARY_TAGS",
    "GridConfig",
    "GridError",
    "StructuredGrid",
    "build_grid",
    "grid_from_config",
    "inner_product",
    "load_grid_config",
    "write_grid_csv",
]

#: Outer boundary sides, indexed by ``StructuredGrid.boundary_tag``.
BOUNDARY_TAGS = ("West", "East", "South", "North")
_OUTWARD = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])


class GridError(ValueError):
    """Raised for invalid grid configurations."""


@dataclass(frozen=True)
class GridConfig:
    """Geometry description of a case domain (lengths in metres)."""

    lx: float
    ly: float
    nx: int
    ny: int
    obstacles: tuple = ()
    roads: tuple = ()

    def validate(self, require_roads: bool = False) -> None:
        if self.nx < 4 or self.ny < 4:
            raise GridError(f"nx, ny must be >= 4, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise GridError("domain extents must be positive")
        for rect in self.obstacles:
            x0, y0, x1, y1 = rect
            if not (0 <= x0 < x1 <= self.lx and 0 <= y0 < y1 <= self.ly):
                raise GridError(f"obstacle {rect} lies outside the domain")
        if require_roads and not self.roads:
            raise GridError("emissions requested but no road segments given")


@dataclass(frozen=True, eq=False)
class StructuredGrid:
    """Immutable cell/face connectivity of a cartesian grid with unit depth.

    Face arrays come in three groups: interior faces joining two active
    cells, boundary faces on the outer rectangle, and wall faces against
    obstacle cells.  A face vector (e.g. a flux field) is laid out as
    ``[interior..., boundary...]``; wall faces never carry flux.
    """

    nx: int
    ny: int
    dx: float
    dy: float
    blocked: np.ndarray  # (ny, nx) bool
    cell_id: np.ndarray  # (ny, nx) int, -1 where blocked
    cell_i: np.ndarray
    cell_j: np.ndarray
    owner: np.ndarray
    neighbour: np.ndarray
    face_axis: np.ndarray  # 0: normal +x, 1: normal +y
    face_area: np.ndarray
    face_delta: np.ndarray
    boundary_cell: np.ndarray
    boundary_tag: np.ndarray
    boundary_area: np.ndarray
    wall_cell: np.ndarray
    wall_normal: np.ndarray
    wall_area: np.ndarray
    road_cells: np.ndarray
    road_id: np.ndarray
    road_arclength: np.ndarray
    depth: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_cells(self) -> int:
        """Number of active cells (the unknown count N_FV)."""
        return int(self.cell_i.size)

    @property
    def n_interior(self) -> int:
        return int(self.owner.size)

    @property
    def n_boundary(self) -> int:
        return int(self.boundary_cell.size)

    @property
    def n_faces(self) -> int:
        """Length of a face vector (interior + outer boundary faces)."""
        return self.n_interior + self.n_boundary

    @property
    def volumes(self) -> np.ndarray:
        vol = self._cache.get("volumes")
        if vol is None:
            vol = np.full(self.n_cells, self.dx * self.dy * self.depth)
            vol.setflags(write=False)
            self._cache["volumes"] = vol
        return vol

    @property
    def centers(self) -> np.ndarray:
        """Cell centres, shape (N_FV, 2)."""
        return np.column_stack(
            [(self.cell_i + 0.5) * self.dx, (self.cell_j + 0.5) * self.dy]
        )

    @property
    def boundary_normal(self) -> np.ndarray:
        return _OUTWARD[self.boundary_tag]

    @property
    def face_normal(self) -> np.ndarray:
        n = np.zeros((self.n_interior, 2))
        n[self.face_axis == 0, 0] = 1.0
        n[self.face_axis == 1, 1] = 1.0
        return n

    def cell_face_vector_sum(self) -> np.ndarray:
        """Per-cell sum of outward area-weighted normals; zero for a closed cell."""
        total = np.zeros((self.n_cells, 2))
        sn = self.face_normal * self.face_area[:, None]
        np.add.at(total, self.owner, sn)
        np.add.at(total, self.neighbour, -sn)
        np.add.at(total, self.boundary_cell, self.boundary_normal * self.boundary_area[:, None])
        np.add.at(total, self.wall_cell, self.wall_normal * self.wall_area[:, None])
        return total


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray):
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        s = np.zeros(len(p))
    else:
        s = np.clip((p - a) @ ab / denom, 0.0, 1.0)
    closest = a + s[:, None] * ab
    return np.linalg.norm(p - closest, axis=1), s * np.sqrt(denom)


def build_grid(
    nx: int,
    ny: int,
    lx: float | None = None,
    ly: float | None = None,
    obstacles: Sequence[Sequence[float]] = (),
    roads: Sequence[Sequence[Sequence[float]]] = (),
    *,
    dx: float = 1.0,
    dy: float = 1.0,
    blocked_cells: Sequence[tuple[int, int]] = (),
    check_connected: bool = True,
) -> StructuredGrid:
    """Build a grid from domain extents, obstacle rectangles and road polylines.

    Parameters
    ----------
    nx, ny : int
        Cell counts along x and y.
    lx, ly : float, optional
        Domain extents; when given they override ``dx``/``dy``.
    obstacles : sequence of (x0, y0, x1, y1)
        Rectangles; a cell is blocked when its centre lies inside one.
    roads : sequence of polylines
        Each polyline is a list of (x, y) vertices.  Road cells are the
        active cells whose centre is within half a cell width of a segment.
    blocked_cells : sequence of (i, j)
        Extra cells to block by index.
    """
    if nx < 1 or ny < 1:
        raise GridError("grid needs at least one cell per axis")
    if lx is not None:
        dx = lx / nx
    if ly is not None:
        dy = ly / ny
    lx, ly = nx * dx, ny * dy

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    xc = (ii + 0.5) * dx
    yc = (jj + 0.5) * dy
    blocked = np.zeros((ny, nx), dtype=bool)
    for rect in obstacles:
        x0, y0, x1, y1 = map(float, rect)
        if not (0 <= x0 < x1 <= lx and 0 <= y0 < y1 <= ly):
            raise GridError(f"obstacle {tuple(rect)} lies outside the domain")
        blocked |= (xc > x0) & (xc < x1) & (yc > y0) & (yc < y1)
    for i, j in blocked_cells:
        blocked[j, i] = True
    if blocked.all():
        raise GridError("all cells are blocked")
    if check_connected:
        _, ncomp = ndimage.label(~blocked)
        if ncomp > 1:
            raise GridError(f"obstacles split the active region into {ncomp} components")

    cell_id = np.full((ny, nx), -1, dtype=np.int64)
    active = ~blocked
    n_cells = int(active.sum())
    cell_id[active] = np.arange(n_cells)
    cell_j, cell_i = np.nonzero(active)

    owners, neighs, axes, areas, deltas = [], [], [], [], []
    wall_cell, wall_normal, wall_area = [], [], []
    # x-normal faces between (i, j) and (i + 1, j)
    left, right = cell_id[:, :-1], cell_id[:, 1:]
    both = (left >= 0) & (right >= 0)
    owners.append(left[both])
    neighs.append(right[both])
    axes.append(np.zeros(both.sum(), dtype=np.int8))
    areas.append(np.full(both.sum(), dy))
    deltas.append(np.full(both.sum(), dx))
    for src, other, nvec, area in (
        (left, right, (1.0, 0.0), dy),
        (right, left, (-1.0, 0.0), dy),
    ):
        wall = (src >= 0) & (other < 0)
        wall_cell.append(src[wall])
        wall_normal.append(np.tile(nvec, (wall.sum(), 1)))
        wall_area.append(np.full(wall.sum(), area))
    # y-normal faces between (i, j) and (i, j + 1)
    below, above = cell_id[:-1, :], cell_id[1:, :]
    both = (below >= 0) & (above >= 0)
    owners.append(below[both])
    neighs.append(above[both])
    axes.append(np.ones(both.sum(), dtype=np.int8))
    areas.append(np.full(both.sum(), dx))
    deltas.append(np.full(both.sum(), dy))
    for src, other, nvec, area in (
        (below, above, (0.0, 1.0), dx),
        (above, below, (0.0, -1.0), dx),
    ):
        wall = (src >= 0) & (other < 0)
        wall_cell.append(src[wall])
        wall_normal.append(np.tile(nvec, (wall.sum(), 1)))
        wall_area.append(np.full(wall.sum(), area))

    owner = np.concatenate(owners)
    neighbour = np.concatenate(neighs)
    order = np.lexsort((neighbour, owner))

    # outer boundary faces: West, East, South, North
    b_cells, b_tags, b_areas = [], [], []
    for tag, ids, area in (
        (0, cell_id[:, 0], dy),
        (1, cell_id[:, -1], dy),
        (2, cell_id[0, :], dx),
        (3, cell_id[-1, :], dx),
    ):
        ok = ids >= 0
        b_cells.append(ids[ok])
        b_tags.append(np.full(ok.sum(), tag, dtype=np.int8))
        b_areas.append(np.full(ok.sum(), area))
    boundary_cell = np.concatenate(b_cells)
    boundary_tag = np.concatenate(b_tags)
    boundary_area = np.concatenate(b_areas)
    w_cell = np.concatenate(wall_cell).astype(np.int64)
    w_normal = np.concatenate(wall_normal) if w_cell.size else np.zeros((0, 2))
    w_area = np.concatenate(wall_area)
    worder = np.argsort(w_cell, kind="stable")

    # road cells
    centers = np.column_stack([(cell_i + 0.5) * dx, (cell_j + 0.5) * dy])
    tol = 0.5 * min(dx, dy) * (1.0 + 1e-9)
    best = np.full(n_cells, np.inf)
    road_id = np.full(n_cells, -1, dtype=np.int64)
    road_s = np.zeros(n_cells)
    for r, poly in enumerate(roads):
        poly = np.asarray(poly, dtype=float)
        if poly.ndim != 2 or poly.shape[0] < 2 or poly.shape[1] != 2:
            raise GridError(f"road {r} must be a polyline with >= 2 (x, y) vertices")
        # blocked-cell check against the full (unmasked) cell set
        all_centers = np.column_stack([xc[blocked], yc[blocked]])
        s0 = 0.0
        for a, b in zip(poly[:-1], poly[1:]):
            if all_centers.size:
                dblk, _ = _point_segment_distance(all_centers, a, b)
                if np.any(dblk <= tol):
                    raise GridError(f"road {r} intersects an obstacle")
            dist, s = _point_segment_distance(centers, a, b)
            hit = (dist <= tol) & (dist < best)
            best[hit] = dist[hit]
            road_id[hit] = r
            road_s[hit] = s0 + s[hit]
            s0 += float(np.linalg.norm(b - a))
    road_cells = np.nonzero(road_id >= 0)[0]

    arrays = dict(
        blocked=blocked,
        cell_id=cell_id,
        cell_i=cell_i.astype(np.int64),
        cell_j=cell_j.astype(np.int64),
        owner=owner[order].astype(np.int64),
        neighbour=neighbour[order].astype(np.int64),
        face_axis=np.concatenate(axes)[order],
        face_area=np.concatenate(areas)[order],
        face_delta=np.concatenate(deltas)[order],
        boundary_cell=boundary_cell.astype(np.int64),
        boundary_tag=boundary_tag,
        boundary_area=boundary_area,
        wall_cell=w_cell[worder],
        wall_normal=w_normal[worder],
        wall_area=w_area[worder],
        road_cells=road_cells,
        road_id=road_id[road_cells],
        road_arclength=road_s[road_cells],
    )
    for arr in arrays.values():
        arr.setflags(write=False)
    return StructuredGrid(nx=nx, ny=ny, dx=float(dx), dy=float(dy), **arrays)


def grid_from_config(cfg: GridConfig, require_roads: bool = False) -> StructuredGrid:
    cfg.validate(require_roads=require_roads)
    g = build_grid(cfg.nx, cfg.ny, cfg.lx, cfg.ly, cfg.obstacles, cfg.roads)
    if require_roads and g.road_cells.size == 0:
        raise GridError("road polylines select no active cells")
    return g


def load_grid_config(section: dict) -> GridConfig:
    """Build a :class:`GridConfig` from the ``[grid]`` table of a case file."""
    try:
        return GridConfig(
            lx=float(section["lx"]),
            ly=float(section["ly"]),
            nx=int(section["nx"]),
            ny=int(section["ny"]),
            obstacles=tuple(tuple(float(v) for v in r) for r in section.get("obstacles", [])),
            roads=tuple(
                tuple(tuple(float(v) for v in pt) for pt in poly)
                for poly in section.get("roads", [])
            ),
        )
    except KeyError as exc:
        raise GridError(f"grid config is missing key {exc}") from None


def inner_product(g: StructuredGrid, a, b) -> float:
    """Volume-weighted discrete L2 inner product of two cell fields."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != (g.n_cells,) or b.shape != (g.n_cells,):
        raise ValueError(
            f"fields must have length {g.n_cells}, got {a.shape} and {b.shape}"
        )
    return float(np.dot(a * b, g.volumes))


def write_grid_csv(g: StructuredGrid, path) -> None:
    """Write one row per active cell: index, centre, flags.

    Flag bits: 1 road cell, 2 touches the outer boundary, 4 touches an obstacle.
    """
    flags = np.zeros(g.n_cells, dtype=np.int64)
    flags[g.road_cells] |= 1
    flags[g.boundary_cell] |= 2
    flags[g.wall_cell] |= 4
    c = g.centers
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "x", "y", "flags"])
        for k in range(g.n_cells):
            w.writerow([k, repr(float(c[k, 0])), repr(float(c[k, 1])), int(flags[k])])
