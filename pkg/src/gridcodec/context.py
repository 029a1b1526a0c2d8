"""Probability prediction for sign coding.

Level-wise context: each vertex of the current level is predicted from
interpolated sign features of up to ``lc`` previously decoded levels plus the
current level's +1 frequency, through a small fuser network shared by all
levels with the same effective context depth.  2D plane levels additionally
see the PVF (projected +1 frequencies of the finest 3D level) sampled at the
vertex.  Per-vertex probabilities of one hash slot are fused into a single
slot probability with AOE-normalized weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .entropy import EPS_P, clamp_probability
from .grid import InverseHashMap, LevelEmbedding, interpolate, sample_dense_grid, vertex_coords
from .nn import DenseNet
from .occupancy import InvalidSlotError, LevelValidity, Pvf

FUSER_HIDDEN = 32

FREQ_SCALE = 65535  # 16-bit fixed point for stored level frequencies


class EmptyLevelError(ValueError):
    """Level has no valid signs; nothing to code."""


def frequency(level: LevelEmbedding, validity: LevelValidity | None) -> float:
    """Occurrence frequency of +1 over the level's valid signs."""
    signs = level.raw_signs()
    if validity is not None:
        signs = signs[validity.slot_valid]
    if signs.size == 0:
        raise EmptyLevelError("no valid signs in level")
    return float((signs > 0).sum() / signs.size)


def quantize_frequency(f: float) -> int:
    return int(round(f * FREQ_SCALE))


def dequantize_frequency(q: int) -> float:
    return q / FREQ_SCALE


def coding_probability(f: float) -> float:
    return float(np.clip(f, EPS_P, 1.0 - EPS_P))


def fuser_3d_widths(feature_dim: int, eff_lc: int) -> list[int]:
    return [feature_dim * eff_lc + 1, FUSER_HIDDEN, FUSER_HIDDEN, feature_dim]


def fuser_2d_widths(feature_dim: int, eff_lc: int, use_pvf: bool) -> list[int]:
    extra = feature_dim if use_pvf else 0
    return [feature_dim * eff_lc + 1 + extra, feature_dim]


@dataclass
class FuserBank:
    """One fuser per distinct effective context depth, shared across levels."""

    fusers_3d: dict[int, DenseNet]
    fusers_2d: dict[int, DenseNet]
    feature_dim: int
    use_pvf: bool = True

    def params(self) -> list[np.ndarray]:
        out = []
        for eff in sorted(self.fusers_3d):
            out += self.fusers_3d[eff].params
        for eff in sorted(self.fusers_2d):
            out += self.fusers_2d[eff].params
        return out

    def param_vector(self) -> np.ndarray:
        if not self.fusers_3d and not self.fusers_2d:
            return np.array([], dtype=np.float32)
        return np.concatenate([p.ravel() for p in self.params()]).astype(np.float32)

    def set_param_vector(self, vec: np.ndarray) -> None:
        pos = 0
        for p in self.params():
            p[...] = vec[pos : pos + p.size].reshape(p.shape).astype(p.dtype)
            pos += p.size
        if pos != len(vec):
            raise ValueError("fuser parameter vector size mismatch")


def effective_lc(level_index: int, lc: int) -> int:
    """Context depth available at a 1-based level index."""
    return min(lc, level_index - 1)


def build_fusers(
    feature_dim: int,
    num_levels_3d: int,
    num_levels_2d: int,
    lc: int,
    rng: np.random.Generator,
    use_pvf: bool = True,
    with_3d: bool = True,
    with_2d: bool = True,
) -> FuserBank:
    fusers_3d: dict[int, DenseNet] = {}
    fusers_2d: dict[int, DenseNet] = {}
    if with_3d:
        for l in range(2, num_levels_3d + 1):
            eff = effective_lc(l, lc)
            if eff not in fusers_3d:
                fusers_3d[eff] = DenseNet(
                    fuser_3d_widths(feature_dim, eff),
                    ["leaky_relu", "leaky_relu", "sigmoid"],
                    rng=rng,
                )
    if with_2d:
        for l in range(2, num_levels_2d + 1):
            eff = effective_lc(l, lc)
            if eff not in fusers_2d:
                fusers_2d[eff] = DenseNet(
                    fuser_2d_widths(feature_dim, eff, use_pvf), ["sigmoid"],
                    rng=rng,
                )
    return FuserBank(fusers_3d, fusers_2d, feature_dim, use_pvf)


def assemble_level_context(
    pos: np.ndarray,
    level_index: int,
    prev_levels: list[LevelEmbedding],
    f_g: float,
    lc: int,
) -> np.ndarray:
    """Concatenate interpolated features of the previous eff_lc levels with
    the current level's frequency; shape (N, F*eff_lc + 1)."""
    eff = effective_lc(level_index, lc)
    if eff < 1:
        raise ValueError("level 1 has no previous-level context")
    parts = [
        interpolate(pos, prev_levels[j])
        for j in range(level_index - 1 - eff, level_index - 1)
    ]
    parts.append(np.full((len(pos), 1), f_g, dtype=np.float64))
    return np.concatenate(parts, axis=1)


def predict_vertex_probs(fuser: DenseNet, ctx: np.ndarray):
    """Forward pass -> clamped probabilities plus training bookkeeping."""
    raw, cache = fuser.forward(ctx)
    p = clamp_probability(raw)
    clamp_open = (raw > EPS_P) & (raw < 1.0 - EPS_P)
    return p, cache, clamp_open


def _gather_segments(offsets: np.ndarray, slot_ids: np.ndarray):
    """Flat indices into a slot-grouped array for the requested slots.

    Returns (flat_idx, seg_id) where seg_id maps each entry back to its
    position in ``slot_ids``.
    """
    starts = offsets[slot_ids]
    counts = offsets[slot_ids + 1] - starts
    total = int(counts.sum())
    seg_id = np.repeat(np.arange(len(slot_ids)), counts)
    shift = np.concatenate([[0], np.cumsum(counts)[:-1]])
    flat_idx = np.repeat(starts - shift, counts) + np.arange(total)
    return flat_idx, seg_id


@dataclass
class SlotProbResult:
    """Per-slot fused probabilities plus everything backward needs."""

    p_slots: np.ndarray  # (n_slots, F) float64, clamped
    fuser: DenseNet | None = None
    cache: tuple | None = None
    seg_id: np.ndarray | None = None
    weights: np.ndarray | None = None  # (m,) AOE fusion weights
    clamp_open: np.ndarray | None = None  # (m, F) gradient gate


def slot_probabilities(
    slot_ids: np.ndarray,
    level_index: int,
    level: LevelEmbedding,
    prev_levels: list[LevelEmbedding],
    f_g: float,
    inv: InverseHashMap,
    validity: LevelValidity,
    fusers: FuserBank,
    lc: int,
    pvf: Pvf | None = None,
    keep_cache: bool = False,
) -> SlotProbResult:
    """Fused +1 probabilities for the given (valid) slots of one level."""
    slot_ids = np.asarray(slot_ids, dtype=np.int64)
    flat_idx, seg_id = _gather_segments(inv.offsets, slot_ids)
    aoe = validity.vertex_aoe[flat_idx].astype(np.float64)
    keep = aoe > 0
    flat_idx, seg_id, aoe = flat_idx[keep], seg_id[keep], aoe[keep]
    seg_sums = np.bincount(seg_id, weights=aoe, minlength=len(slot_ids))
    if np.any(seg_sums <= 0):
        raise InvalidSlotError("requested slot has zero total AOE")
    weights = aoe / seg_sums[seg_id]

    coords = vertex_coords(inv.vertex_by_slot[flat_idx], level.resolution,
                           level.dims)
    pos = coords.astype(np.float64) / level.resolution
    ctx = assemble_level_context(pos, level_index, prev_levels, f_g, lc)
    if level.dims == 2:
        fuser = fusers.fusers_2d[effective_lc(level_index, lc)]
        if fusers.use_pvf:
            if pvf is None:
                raise ValueError("2D prediction requires a PVF")
            ctx = np.concatenate(
                [ctx, sample_dense_grid(pvf.planes[level.plane_axis], pos)],
                axis=1,
            )
    else:
        fuser = fusers.fusers_3d[effective_lc(level_index, lc)]

    p_vertex, cache, clamp_open = predict_vertex_probs(fuser, ctx)
    p_slots = np.zeros((len(slot_ids), level.feature_dim), dtype=np.float64)
    np.add.at(p_slots, seg_id, weights[:, None] * p_vertex)
    p_slots = clamp_probability(p_slots)
    if not keep_cache:
        return SlotProbResult(p_slots)
    return SlotProbResult(p_slots, fuser, cache, seg_id, weights, clamp_open)


def slot_probability_backward(result: SlotProbResult, d_p_slots: np.ndarray):
    """Backprop d(loss)/d(slot probability) into the fuser parameters.

    Contexts are treated as constants; only the coded sign's own latent (via
    the bit estimator's theta partial) and the fuser receive gradient.
    Returns the fuser parameter gradients, aligned with ``result.fuser.params``.
    """
    g_vertex = result.weights[:, None] * d_p_slots[result.seg_id]
    g_vertex = g_vertex * result.clamp_open
    grads, _ = result.fuser.backward(g_vertex, result.cache)
    return grads
