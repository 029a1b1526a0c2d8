"""Binary occupancy grid, AOE geometry, slot validity and PVF projection.

A vertex's Area of Effect (AOE) is the volume of intersection between its
support box (the union of the grid voxels touching the vertex, i.e. an
axis-aligned box of half-width 1/resolution centered on the vertex, clipped to
the unit cube) and the union of occupied occupancy cells.  A vertex with zero
AOE never influences any sample drawn inside occupied space, so its hash slot
can be dropped from the coded set whenever all colliding vertices share that
fate.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .grid import (
    InverseHashMap,
    LevelEmbedding,
    PLANE_AXES,
    vertex_coords,
)

PVF_NEUTRAL = 0.5

# cell indices dropped when projecting onto each tri-plane; cells are [x, y, z]
_PLANE_DROP_AXIS = {"xy": 2, "xz": 1, "yz": 0}
_PLANE_KEEP_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


class DegenerateSceneError(ValueError):
    """Raised when occupancy derivation finds no occupied cell."""


class InvalidSlotError(ValueError):
    """Raised when a zero-AOE slot is asked for fusion weights."""


@dataclass
class OccupancyGrid:
    cells: np.ndarray  # (R, R, R) bool, indexed [x, y, z]

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=bool)
        if self.cells.ndim != 3 or len(set(self.cells.shape)) != 1:
            raise ValueError("occupancy cells must be a cubic 3D array")

    @property
    def resolution(self) -> int:
        return self.cells.shape[0]

    @property
    def occupied_fraction(self) -> float:
        return float(self.cells.mean())

    def plane_projection(self, axis: str) -> np.ndarray:
        """2D mask: plane cell occupied iff any occupied cell projects onto it."""
        return self.cells.any(axis=_PLANE_DROP_AXIS[axis])

    def serialize(self) -> bytes:
        """<u16 resolution> + packed little-endian bits, row-major, x fastest."""
        flat = self.cells.flatten(order="F")
        return struct.pack("<H", self.resolution) + np.packbits(
            flat, bitorder="little"
        ).tobytes()

    @classmethod
    def deserialize(cls, data: bytes) -> "OccupancyGrid":
        (res,) = struct.unpack_from("<H", data, 0)
        nbits = res**3
        bits = np.unpackbits(
            np.frombuffer(data, dtype=np.uint8, offset=2), bitorder="little"
        )[:nbits]
        return cls(bits.astype(bool).reshape((res, res, res), order="F"))


def derive_occupancy(
    target_field,
    resolution: int,
    threshold: float = 1e-2,
    stencil: int = 2,
) -> OccupancyGrid:
    """Mark cells where max |field| over a stencil^3 interior grid > threshold."""
    offsets = (np.arange(stencil) + 0.5) / stencil  # interior sample offsets
    cell = np.arange(resolution)
    ox, oy, oz = np.meshgrid(offsets, offsets, offsets, indexing="ij")
    off = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)
    cx, cy, cz = np.meshgrid(cell, cell, cell, indexing="ij")
    corners = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1)
    pts = (corners[:, None, :] + off[None, :, :]) / resolution
    vals = np.asarray(target_field(pts.reshape(-1, 3)))
    if vals.ndim == 1:
        vals = vals[:, None]
    peak = np.abs(vals).max(axis=1).reshape(resolution**3, stencil**3).max(axis=1)
    cells = (peak > threshold).reshape((resolution,) * 3)
    if not cells.any():
        raise DegenerateSceneError("no occupied cells; scene is empty")
    return OccupancyGrid(cells)


def support_bounds(vertex: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Clipped support box [v/res - 1/res, v/res + 1/res] of a lattice vertex."""
    v = np.asarray(vertex, dtype=np.float64) / resolution
    half = 1.0 / resolution
    return np.maximum(v - half, 0.0), np.minimum(v + half, 1.0)


def aoe(vertex: np.ndarray, level_resolution: int, occ: OccupancyGrid) -> float:
    """Exact AOE of one vertex: sum of box overlaps with occupied cells.

    Direct per-cell reference; the vectorized path is :func:`aoe_lattice`.
    """
    lo, hi = support_bounds(vertex, level_resolution)
    r = occ.resolution
    first = np.floor(lo * r).astype(int)
    last = np.minimum(np.ceil(hi * r).astype(int), r)
    total = 0.0
    for cx in range(first[0], last[0]):
        wx = min(hi[0], (cx + 1) / r) - max(lo[0], cx / r)
        if wx <= 0:
            continue
        for cy in range(first[1], last[1]):
            wy = min(hi[1], (cy + 1) / r) - max(lo[1], cy / r)
            if wy <= 0:
                continue
            for cz in range(first[2], last[2]):
                if not occ.cells[cx, cy, cz]:
                    continue
                wz = min(hi[2], (cz + 1) / r) - max(lo[2], cz / r)
                if wz > 0:
                    total += wx * wy * wz
    return total


def axis_overlap_matrix(level_resolution: int, occ_resolution: int) -> np.ndarray:
    """Per-axis overlap lengths: entry [u, c] is the 1D overlap between the
    clipped support interval of lattice coordinate u and occupancy cell c."""
    u = np.arange(level_resolution + 1, dtype=np.float64) / level_resolution
    half = 1.0 / level_resolution
    lo = np.maximum(u - half, 0.0)[:, None]
    hi = np.minimum(u + half, 1.0)[:, None]
    c = np.arange(occ_resolution, dtype=np.float64)[None, :]
    cell_lo = c / occ_resolution
    cell_hi = (c + 1) / occ_resolution
    return np.maximum(np.minimum(hi, cell_hi) - np.maximum(lo, cell_lo), 0.0)


def aoe_lattice(level_resolution: int, occ: OccupancyGrid) -> np.ndarray:
    """AOE of every lattice vertex of a 3D level, shape (S, S, S), S = res+1."""
    o = axis_overlap_matrix(level_resolution, occ.resolution)
    t = np.tensordot(occ.cells.astype(np.float64), o, axes=([2], [1]))  # (x,y,Sz)
    t = np.tensordot(t, o, axes=([1], [1]))  # (x, Sz, Sy)
    t = np.tensordot(t, o, axes=([0], [1]))  # (Sz, Sy, Sx)
    return np.ascontiguousarray(t.transpose(2, 1, 0))


def aoe_lattice_2d(
    level_resolution: int, occ: OccupancyGrid, plane_axis: str
) -> np.ndarray:
    """AOE (area) of every 2D plane vertex against the projected occupancy."""
    o = axis_overlap_matrix(level_resolution, occ.resolution)
    proj = occ.plane_projection(plane_axis).astype(np.float64)
    t = np.tensordot(proj, o, axes=([1], [1]))  # (a, Sb)
    t = np.tensordot(t, o, axes=([0], [1]))  # (Sb, Sa)
    return np.ascontiguousarray(t.T)


def fusion_weights(aoes: np.ndarray) -> np.ndarray:
    """Normalize per-vertex AOEs of one slot into fusion weights."""
    aoes = np.asarray(aoes, dtype=np.float64)
    total = aoes.sum()
    if total <= 0.0:
        raise InvalidSlotError("slot has zero total AOE; caller must skip it")
    return aoes / total


@dataclass
class LevelValidity:
    """Per-slot validity and per-vertex AOE for one level.

    ``vertex_aoe`` is aligned with the inverse map's ``vertex_by_slot`` order.
    """

    slot_valid: np.ndarray  # (table_size,) bool
    vertex_aoe: np.ndarray  # float32, grouped by slot

    @property
    def valid_slot_count(self) -> int:
        return int(self.slot_valid.sum())


def level_validity(inv: InverseHashMap, aoe_by_vertex: np.ndarray) -> LevelValidity:
    """Validity from a flat per-vertex-id AOE array (lattice raveled x fastest)."""
    aoe_sorted = aoe_by_vertex.ravel(order="F")[inv.vertex_by_slot]
    positive = (aoe_sorted > 0).astype(np.int64)
    csum = np.concatenate([[0], np.cumsum(positive)])
    npos = csum[inv.offsets[1:]] - csum[inv.offsets[:-1]]
    return LevelValidity(npos > 0, aoe_sorted.astype(np.float32))


def slot_aoe_sums(inv: InverseHashMap, validity: LevelValidity) -> np.ndarray:
    """Total AOE per slot (float64)."""
    return np.bincount(
        inv.slot_ids_grouped(),
        weights=validity.vertex_aoe.astype(np.float64),
        minlength=inv.table_size,
    )


def build_level_validity(
    level: LevelEmbedding, inv: InverseHashMap, occ: OccupancyGrid
) -> LevelValidity:
    if level.dims == 3:
        lattice = aoe_lattice(level.resolution, occ)
    else:
        lattice = aoe_lattice_2d(level.resolution, occ, level.plane_axis)
    return level_validity(inv, lattice)


def cell_membership_validity(inv: InverseHashMap, occ: OccupancyGrid) -> LevelValidity:
    """Alternative (over-discarding) criterion: a vertex counts only if the
    cell containing it is occupied.  Kept for the failure-mode regression."""
    coords = vertex_coords(inv.vertex_by_slot, inv.resolution, inv.dims)
    if inv.dims != 3:
        raise ValueError("cell-membership validity is defined for 3D levels")
    cell = np.minimum(
        (coords * occ.resolution) // inv.resolution, occ.resolution - 1
    )
    inside = occ.cells[cell[:, 0], cell[:, 1], cell[:, 2]]
    csum = np.concatenate([[0], np.cumsum(inside.astype(np.int64))])
    npos = csum[inv.offsets[1:]] - csum[inv.offsets[:-1]]
    return LevelValidity(npos > 0, inside.astype(np.float32))


@dataclass
class Pvf:
    """Per-plane +1 frequencies of the finest 3D level, one channel per
    feature dimension; entries with no valid contributor sit at 0.5."""

    planes: dict[str, np.ndarray]  # axis -> (S, S, F) float32


def project_pvf(
    level: LevelEmbedding, inv: InverseHashMap, validity: LevelValidity
) -> Pvf:
    feature_dim = level.feature_dim
    size = level.resolution + 1
    keep = validity.vertex_aoe > 0  # AOE-omission rule: skip zero-AOE vertices
    ids = inv.vertex_by_slot[keep]
    slots = inv.slot_ids_grouped()[keep]
    coords = vertex_coords(ids, level.resolution, 3)
    signs = level.signs()[slots]
    planes: dict[str, np.ndarray] = {}
    for axis in PLANE_AXES:
        a, b = _PLANE_KEEP_AXES[axis]
        key = coords[:, a] * size + coords[:, b]
        denom = np.bincount(key, minlength=size * size)
        grid = np.full((size * size, feature_dim), PVF_NEUTRAL, dtype=np.float64)
        for f in range(feature_dim):
            plus = np.bincount(
                key, weights=(signs[:, f] > 0).astype(np.float64),
                minlength=size * size,
            )
            np.divide(plus, denom, out=grid[:, f], where=denom > 0)
        planes[axis] = grid.reshape(size, size, feature_dim).astype(np.float32)
    return Pvf(planes)
