"""Multi-resolution hash grids with sign-binarized feature tables.

A grid level stores a table of continuous latents; all reads go through the
binarized (+1/-1) view.  Levels whose vertex count exceeds the table size are
indexed by spatial hashing, smaller levels by a plain row-major linear index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

# Multiplicative constants for the XOR spatial hash (x gets no multiplier).
HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

PLANE_AXES = ("xy", "xz", "yz")

VALID_FEATURE_DIMS = (1, 2, 4, 8)

LATENT_INIT_SCALE = 1e-4


def level_resolutions(num_levels: int, min_res: int, max_res: int) -> list[int]:
    """Geometric resolution schedule from min_res to max_res, inclusive."""
    if num_levels < 1:
        raise ValueError(f"num_levels must be >= 1, got {num_levels}")
    if max_res < min_res:
        raise ValueError(f"max_res {max_res} < min_res {min_res}")
    if num_levels == 1:
        if max_res != min_res:
            raise ValueError("single-level grid requires min_res == max_res")
        return [min_res]
    growth = (max_res / min_res) ** (1.0 / (num_levels - 1))
    res = [int(round(min_res * growth**i)) for i in range(num_levels)]
    res[-1] = max_res  # guard against last-digit float rounding
    for a, b in zip(res, res[1:]):
        if b <= a:
            raise ValueError(f"resolutions not strictly increasing: {res}")
    return res


@dataclass(frozen=True)
class GridConfig:
    """One multi-resolution grid: a 3D volume or a single 2D tri-plane."""

    num_levels: int
    min_res: int
    max_res: int
    table_size_log2: int
    feature_dim: int
    plane_axis: str | None = None  # None for 3D, else one of PLANE_AXES

    def __post_init__(self):
        if self.feature_dim not in VALID_FEATURE_DIMS:
            raise ValueError(f"feature_dim must be one of {VALID_FEATURE_DIMS}")
        if self.plane_axis is not None and self.plane_axis not in PLANE_AXES:
            raise ValueError(f"unknown plane axis {self.plane_axis!r}")
        if self.table_size_log2 < 1:
            raise ValueError("table_size_log2 must be positive")
        level_resolutions(self.num_levels, self.min_res, self.max_res)

    @property
    def dims(self) -> int:
        return 2 if self.plane_axis is not None else 3

    def resolutions(self) -> list[int]:
        return level_resolutions(self.num_levels, self.min_res, self.max_res)

    def table_size(self, resolution: int) -> int:
        return min(1 << self.table_size_log2, (resolution + 1) ** self.dims)

    def is_hashed(self, resolution: int) -> bool:
        return (resolution + 1) ** self.dims > (1 << self.table_size_log2)


def vertex_count(resolution: int, dims: int) -> int:
    return (resolution + 1) ** dims


def vertex_coords(linear_ids: np.ndarray, resolution: int, dims: int) -> np.ndarray:
    """Linear vertex ids (x fastest) -> integer coordinates, shape (N, dims)."""
    stride = resolution + 1
    ids = np.asarray(linear_ids)
    out = np.empty(ids.shape + (dims,), dtype=np.int64)
    rem = ids.astype(np.int64)
    for k in range(dims):
        out[..., k] = rem % stride
        rem = rem // stride
    return out


def vertex_linear_ids(coords: np.ndarray, resolution: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    stride = resolution + 1
    ids = np.zeros(coords.shape[:-1], dtype=np.int64)
    for k in range(coords.shape[-1]):
        ids += coords[..., k] * stride**k
    return ids


def spatial_hash(
    coords: np.ndarray, resolution: int, table_size: int, hashed: bool
) -> np.ndarray:
    """Map integer vertex coordinates to table slots.

    Non-hashed levels use the row-major linear index (x fastest); hashed levels
    XOR prime-multiplied coordinates modulo the table size.
    """
    coords = np.asarray(coords)
    if coords.size and (coords.min() < 0 or coords.max() > resolution):
        raise ValueError("vertex coordinates out of bounds")
    if not hashed:
        return vertex_linear_ids(coords, resolution)
    acc = coords[..., 0].astype(np.uint64) * HASH_PRIMES[0]
    for k in range(1, coords.shape[-1]):
        acc = acc ^ (coords[..., k].astype(np.uint64) * HASH_PRIMES[k])
    return (acc % np.uint64(table_size)).astype(np.int64)


@dataclass
class InverseHashMap:
    """All grid vertices grouped by the table slot they hash to."""

    resolution: int
    dims: int
    table_size: int
    hashed: bool
    vertex_by_slot: np.ndarray  # int32 linear vertex ids, grouped by slot
    offsets: np.ndarray  # int64, length table_size + 1

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def vertices_of(self, slot: int) -> np.ndarray:
        return self.vertex_by_slot[self.offsets[slot] : self.offsets[slot + 1]]

    def slot_of_vertex(self) -> np.ndarray:
        """Slot index per vertex id (inverse of the grouping)."""
        out = np.empty(len(self.vertex_by_slot), dtype=np.int64)
        out[self.vertex_by_slot] = np.repeat(
            np.arange(self.table_size), self.counts
        )
        return out

    def slot_ids_grouped(self) -> np.ndarray:
        """Slot index aligned with vertex_by_slot order."""
        return np.repeat(np.arange(self.table_size, dtype=np.int64), self.counts)


def build_inverse_map(
    resolution: int, dims: int, table_size: int, hashed: bool
) -> InverseHashMap:
    """Exhaustively enumerate all vertices of a level, grouped by slot."""
    total = vertex_count(resolution, dims)
    if total >= 2**31:
        raise ValueError("level too large for int32 vertex ids")
    ids = np.arange(total, dtype=np.int64)
    slots = spatial_hash(vertex_coords(ids, resolution, dims), resolution,
                         table_size, hashed)
    order = np.argsort(slots, kind="stable").astype(np.int32)
    counts = np.bincount(slots, minlength=table_size)
    offsets = np.zeros(table_size + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return InverseHashMap(resolution, dims, table_size, hashed, order, offsets)


def binarize(latent: np.ndarray) -> np.ndarray:
    """sign(x) with the +1 tie-break at zero; output values are +1/-1."""
    return np.where(np.asarray(latent) >= 0, 1, -1).astype(np.int8)


def ste_mask(latent: np.ndarray) -> np.ndarray:
    """Straight-through gradient gate: pass where |latent| <= 1, else clip."""
    return (np.abs(latent) <= 1.0).astype(latent.dtype)


@dataclass
class LevelEmbedding:
    """One level's latent table plus its binarized read view.

    ``signs()`` is the view every consumer (interpolation, context models,
    reconstruction) reads: invalid slots are pinned to +1 so that encoder,
    decoder and trainer all see the same values.
    """

    resolution: int
    latent: np.ndarray  # (table_size, feature_dim) float32
    hashed: bool
    plane_axis: str | None = None
    valid_mask: np.ndarray | None = None  # (table_size,) bool; None = all valid

    @property
    def table_size(self) -> int:
        return self.latent.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.latent.shape[1]

    @property
    def dims(self) -> int:
        return 2 if self.plane_axis is not None else 3

    def raw_signs(self) -> np.ndarray:
        return binarize(self.latent)

    def signs(self) -> np.ndarray:
        s = self.raw_signs()
        if self.valid_mask is not None:
            s[~self.valid_mask] = 1
        return s


def init_level(
    cfg: GridConfig, resolution: int, rng: np.random.Generator
) -> LevelEmbedding:
    table = cfg.table_size(resolution)
    latent = rng.uniform(
        -LATENT_INIT_SCALE, LATENT_INIT_SCALE, size=(table, cfg.feature_dim)
    ).astype(np.float32)
    return LevelEmbedding(resolution, latent, cfg.is_hashed(resolution),
                          plane_axis=cfg.plane_axis)


def _corner_setup(pos: np.ndarray, resolution: int, dims: int):
    pos = np.asarray(pos, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != dims:
        raise ValueError(f"expected positions of shape (N, {dims})")
    if pos.size and (pos.min() < 0.0 or pos.max() > 1.0):
        raise ValueError("positions must lie in the unit cube")
    scaled = pos * resolution
    base = np.floor(scaled).astype(np.int64)
    np.clip(base, 0, resolution - 1, out=base)
    frac = scaled - base
    return base, frac


def interpolate(
    pos: np.ndarray, level: LevelEmbedding, signs: np.ndarray | None = None
) -> np.ndarray:
    """Tri/bilinear blend of corner sign vectors at normalized positions."""
    if signs is None:
        signs = level.signs()
    dims = level.dims
    base, frac = _corner_setup(pos, level.resolution, dims)
    out = np.zeros((len(base), level.feature_dim), dtype=np.float64)
    for corner in product((0, 1), repeat=dims):
        w = np.ones(len(base), dtype=np.float64)
        for axis, bit in enumerate(corner):
            w *= frac[:, axis] if bit else 1.0 - frac[:, axis]
        slots = spatial_hash(base + np.array(corner, dtype=np.int64),
                             level.resolution, level.table_size, level.hashed)
        out += w[:, None] * signs[slots]
    return out


def interpolation_corners(pos: np.ndarray, level: LevelEmbedding):
    """Corner slots and weights for every position; used by training backward.

    Returns (slots, weights) of shapes (N, 2^dims) and (N, 2^dims).
    """
    dims = level.dims
    base, frac = _corner_setup(pos, level.resolution, dims)
    n = len(base)
    ncorner = 1 << dims
    slots = np.empty((n, ncorner), dtype=np.int64)
    weights = np.empty((n, ncorner), dtype=np.float64)
    for ci, corner in enumerate(product((0, 1), repeat=dims)):
        w = np.ones(n, dtype=np.float64)
        for axis, bit in enumerate(corner):
            w *= frac[:, axis] if bit else 1.0 - frac[:, axis]
        slots[:, ci] = spatial_hash(base + np.array(corner, dtype=np.int64),
                                    level.resolution, level.table_size,
                                    level.hashed)
        weights[:, ci] = w
    return slots, weights


def sample_dense_grid(values: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Bi/trilinear sampling of a dense vertex grid of shape (S, ..., S, F).

    Grid vertex i sits at i / (S - 1) along each axis.
    """
    dims = values.ndim - 1
    resolution = values.shape[0] - 1
    base, frac = _corner_setup(pos, resolution, dims)
    out = np.zeros((len(base), values.shape[-1]), dtype=np.float64)
    for corner in product((0, 1), repeat=dims):
        w = np.ones(len(base), dtype=np.float64)
        for axis, bit in enumerate(corner):
            w *= frac[:, axis] if bit else 1.0 - frac[:, axis]
        idx = tuple((base[:, k] + corner[k]) for k in range(dims))
        out += w[:, None] * values[idx]
    return out
