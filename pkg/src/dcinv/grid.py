"""Uniform tensor grids on the unit square/cube.

Potentials live on nodes, conductivities on cells. Boundary segments (the
four edges in 2D, six faces in 3D) are enumerated with segment-local
coordinates so that boundary operators can be built per segment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SEGMENT_IDS_2D = ("left", "right", "bottom", "top")
SEGMENT_IDS_3D = ("left", "right", "front", "back", "bottom", "top")

# Segment id -> (axis held constant, 0 for the low face / 1 for the high face).
_SEGMENT_AXIS = {
    "left": (0, 0),
    "right": (0, 1),
    "bottom": (1, 0),  # 2D: y=0; replaced below for 3D
    "top": (1, 1),
    "front": (1, 0),
    "back": (1, 1),
}


def _segment_axis(dim: int, seg_id: str) -> tuple[int, int]:
    if dim == 3 and seg_id in ("bottom", "top"):
        return (2, 0) if seg_id == "bottom" else (2, 1)
    return _SEGMENT_AXIS[seg_id]


@dataclass(frozen=True)
class BoundarySegment:
    """One smooth piece of the boundary: an edge (2D) or a face (3D).

    ``node_indices`` are global node ids ordered by ``local_coords``
    (strictly increasing arclength in 2D, lexicographic surface coordinates
    in 3D). Corner/edge nodes of the domain are included, so adjacent
    segments overlap there.
    """

    id: str
    node_indices: np.ndarray
    local_coords: np.ndarray  # (m,) in 2D, (m, 2) in 3D
    spacing: float


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered tensor grid on the unit square/cube.

    Immutable after construction; safe to share across threads.
    """

    dim: int
    n_cells_per_axis: tuple[int, ...]
    h: tuple[float, ...]
    segments: dict[str, BoundarySegment] = field(repr=False)

    @property
    def node_shape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.n_cells_per_axis)

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return self.n_cells_per_axis

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.node_shape))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.cell_shape))

    def node_index(self, multi) -> np.ndarray:
        """Global node id(s) from per-axis integer indices."""
        return np.ravel_multi_index(multi, self.node_shape)

    def node_multi(self, ids) -> tuple[np.ndarray, ...]:
        """Per-axis integer indices from global node id(s)."""
        return np.unravel_index(ids, self.node_shape)

    def cell_index(self, multi) -> np.ndarray:
        return np.ravel_multi_index(multi, self.cell_shape)

    def node_coords(self, ids) -> np.ndarray:
        """Physical coordinates of nodes, shape (len(ids), dim)."""
        multi = self.node_multi(np.atleast_1d(ids))
        return np.stack([m * h for m, h in zip(multi, self.h)], axis=-1)

    def cell_centers(self) -> np.ndarray:
        """Coordinates of all cell centers, shape (n_cells, dim)."""
        axes = [(np.arange(n) + 0.5) * h for n, h in zip(self.cell_shape, self.h)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def boundary_node_ids(self) -> np.ndarray:
        """Sorted global ids of all boundary nodes."""
        mask = np.zeros(self.node_shape, dtype=bool)
        for ax in range(self.dim):
            idx_lo = [slice(None)] * self.dim
            idx_lo[ax] = 0
            mask[tuple(idx_lo)] = True
            idx_lo[ax] = -1
            mask[tuple(idx_lo)] = True
        return np.flatnonzero(mask.ravel())

    def corner_node_ids(self) -> np.ndarray:
        """Global ids of the 2**dim domain corners."""
        corners = []
        for code in range(2**self.dim):
            multi = tuple(
                (self.n_cells_per_axis[ax] if (code >> ax) & 1 else 0)
                for ax in range(self.dim)
            )
            corners.append(int(self.node_index(multi)))
        return np.array(sorted(corners))

    def nearest_boundary_node(self, x) -> int:
        """Global id of the boundary node closest to physical point x."""
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a point with {self.dim} coordinates, got {x.shape}")
        ids = self.boundary_node_ids()
        coords = self.node_coords(ids)
        return int(ids[np.argmin(np.sum((coords - x) ** 2, axis=1))])


def build_grid(dim: int, n: int) -> Grid:
    """Build a uniform grid with n cells per axis on the unit square/cube.

    n must be at least 4; coarser grids degenerate the boundary stencils.
    """
    if dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {dim}")
    n = int(n)
    if n < 4:
        raise ValueError(f"need at least 4 cells per axis, got {n}")
    shape = (n,) * dim
    h = (1.0 / n,) * dim
    segments = _build_segments(dim, shape, h)
    return Grid(dim=dim, n_cells_per_axis=shape, h=h, segments=segments)


def _build_segments(dim, shape, h) -> dict[str, BoundarySegment]:
    node_shape = tuple(n + 1 for n in shape)
    seg_ids = SEGMENT_IDS_2D if dim == 2 else SEGMENT_IDS_3D
    segments = {}
    for seg_id in seg_ids:
        axis, side = _segment_axis(dim, seg_id)
        other_axes = [ax for ax in range(dim) if ax != axis]
        ranges = [np.arange(node_shape[ax]) for ax in other_axes]
        if dim == 2:
            (t,) = ranges
            multi = [None] * dim
            multi[axis] = np.full_like(t, side * shape[axis])
            multi[other_axes[0]] = t
            ids = np.ravel_multi_index(tuple(multi), node_shape)
            local = t * h[other_axes[0]]
        else:
            t0, t1 = np.meshgrid(*ranges, indexing="ij")
            multi = [None] * dim
            multi[axis] = np.full_like(t0, side * shape[axis])
            multi[other_axes[0]] = t0
            multi[other_axes[1]] = t1
            ids = np.ravel_multi_index(tuple(multi), node_shape).ravel()
            local = np.stack(
                [t0.ravel() * h[other_axes[0]], t1.ravel() * h[other_axes[1]]], axis=-1
            )
        segments[seg_id] = BoundarySegment(
            id=seg_id,
            node_indices=ids,
            local_coords=local,
            spacing=h[other_axes[0]],
        )
    return segments


def segment_interior_nodes(grid: Grid, segment: BoundarySegment) -> np.ndarray:
    """Segment nodes with the corner (2D) or boundary-ring (3D) nodes removed.

    Sources and receivers are always placed on these nodes: corners are
    avoided so that the boundary fields stay regular near the patch.
    """
    if grid.segments.get(segment.id) is not segment:
        raise ValueError(f"segment {segment.id!r} does not belong to this grid")
    if grid.dim == 2:
        return segment.node_indices[1:-1]
    m = int(np.sqrt(segment.node_indices.size))
    lattice = segment.node_indices.reshape(m, m)
    return lattice[1:-1, 1:-1].ravel()
