"""Structured quadrilateral meshes of the unit square and coarse patches.

Nodes are numbered lexicographically with x running fastest, so node
``(ix, iy)`` has index ``iy * (n + 1) + ix``. Element ``(i, j)`` has index
``j * n + i`` and its corners are stored counter-clockwise::

    3 (NW) ---- 2 (NE)
      |           |
    0 (SW) ---- 1 (SE)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np

# offsets (dx, dy) of the four element corners, counter-clockwise from SW
CORNER_OFFSETS = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])


@dataclass(frozen=True)
class StructuredMesh:
    """Uniform ``n x n`` quadrilateral partition of [0, 1]^2."""

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"n_per_side must be a positive integer, got {self.n!r}")

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_nodes(self) -> int:
        return (self.n + 1) ** 2

    @property
    def n_elements(self) -> int:
        return self.n**2

    def node_index(self, ix, iy):
        return np.asarray(iy) * (self.n + 1) + np.asarray(ix)

    def element_index(self, i, j):
        return np.asarray(j) * self.n + np.asarray(i)

    @cached_property
    def node_coords(self) -> np.ndarray:
        t = np.linspace(0.0, 1.0, self.n + 1)
        x, y = np.meshgrid(t, t, indexing="xy")
        return np.column_stack([x.ravel(), y.ravel()])

    @cached_property
    def element_corners(self) -> np.ndarray:
        """(n_elements, 4) node indices in counter-clockwise corner order."""
        i, j = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="xy")
        i, j = i.ravel(), j.ravel()
        cols = [self.node_index(i + dx, j + dy) for dx, dy in CORNER_OFFSETS]
        return np.column_stack(cols)

    @cached_property
    def element_midpoints(self) -> np.ndarray:
        t = (np.arange(self.n) + 0.5) * self.h
        x, y = np.meshgrid(t, t, indexing="xy")
        return np.column_stack([x.ravel(), y.ravel()])

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        ix, iy = np.meshgrid(np.arange(self.n + 1), np.arange(self.n + 1), indexing="xy")
        on = (ix == 0) | (ix == self.n) | (iy == 0) | (iy == self.n)
        return on.ravel()

    @cached_property
    def free_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary_mask)

    @cached_property
    def free_index(self) -> np.ndarray:
        """Position of each node in ``free_nodes``; -1 on the boundary."""
        idx = np.full(self.n_nodes, -1, dtype=np.int64)
        idx[self.free_nodes] = np.arange(self.free_nodes.size)
        return idx

    @property
    def n_free(self) -> int:
        return max(self.n - 1, 0) ** 2


@dataclass(frozen=True)
class MeshPair:
    coarse: StructuredMesh
    fine: StructuredMesh

    def __post_init__(self):
        if self.fine.n % self.coarse.n:
            raise ValueError(
                f"fine n={self.fine.n} is not a multiple of coarse n={self.coarse.n}"
            )

    @classmethod
    def from_sizes(cls, n_coarse: int, n_fine: int) -> MeshPair:
        return cls(StructuredMesh(n_coarse), StructuredMesh(n_fine))

    @property
    def ratio(self) -> int:
        return self.fine.n // self.coarse.n

    def fine_elements_in(self, i0: int, i1: int, j0: int, j1: int) -> np.ndarray:
        """Fine elements covered by coarse element box ``[i0, i1) x [j0, j1)``."""
        r = self.ratio
        fi, fj = np.meshgrid(np.arange(i0 * r, i1 * r), np.arange(j0 * r, j1 * r), indexing="xy")
        return self.fine.element_index(fi.ravel(), fj.ravel())

    def fine_elements_of(self, T: int) -> np.ndarray:
        i, j = T % self.coarse.n, T // self.coarse.n
        return self.fine_elements_in(i, i + 1, j, j + 1)


@dataclass(frozen=True)
class Patch:
    """k-layer coarse patch around element ``center``.

    ``box`` is the half-open coarse element range ``(i0, i1, j0, j1)``.
    ``fine_interior_nodes`` are the fine nodes strictly inside the box, which
    excludes both the patch boundary and any part of the domain boundary.
    """

    center: int
    k: int
    box: tuple[int, int, int, int]
    elements: np.ndarray = field(repr=False)
    fine_interior_nodes: np.ndarray = field(repr=False)
    fine_elements: np.ndarray = field(repr=False)

    @property
    def coarse_shape(self) -> tuple[int, int]:
        i0, i1, j0, j1 = self.box
        return i1 - i0, j1 - j0


def build_mesh(n_per_side: int) -> StructuredMesh:
    return StructuredMesh(n_per_side)


def patch_box(n: int, T: int, k: int) -> tuple[int, int, int, int]:
    i, j = T % n, T // n
    return max(i - k, 0), min(i + k + 1, n), max(j - k, 0), min(j + k + 1, n)


def build_patch(pair: MeshPair, T: int, k: int) -> Patch:
    coarse = pair.coarse
    if not 0 <= T < coarse.n_elements:
        raise IndexError(f"coarse element {T} out of range [0, {coarse.n_elements})")
    if k < 0:
        raise ValueError("oversampling parameter k must be non-negative")
    # on a tensor grid, vertex-touching closure growth is a box grown by one per layer
    i0, i1, j0, j1 = patch_box(coarse.n, T, k)
    ci, cj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="xy")
    elements = coarse.element_index(ci.ravel(), cj.ravel())

    r = pair.ratio
    fx, fy = np.meshgrid(np.arange(i0 * r + 1, i1 * r), np.arange(j0 * r + 1, j1 * r), indexing="xy")
    interior = pair.fine.node_index(fx.ravel(), fy.ravel())
    return Patch(
        center=T,
        k=k,
        box=(i0, i1, j0, j1),
        elements=elements,
        fine_interior_nodes=interior,
        fine_elements=pair.fine_elements_in(i0, i1, j0, j1),
    )


def patch_count_bound(mesh: StructuredMesh, k: int) -> int:
    """Largest number of coarse elements in any k-layer patch."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return min(2 * k + 1, mesh.n) ** 2


@lru_cache(maxsize=16)
def mesh_for(n: int) -> StructuredMesh:
    """Shared mesh instance, so cached index maps are computed once per size."""
    return StructuredMesh(n)
