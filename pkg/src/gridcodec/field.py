"""Field reconstruction, training and rate-distortion evaluation.

A field is a function on the unit cube.  Reconstruction concatenates the
interpolated sign features of every 3D level and every tri-plane level and
feeds them to the dense reconstruction network.  Training jointly minimizes
the masked reconstruction error and (scaled by lambda) the estimated bits of
all coded signs.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .context import frequency, slot_probabilities, slot_probability_backward
from .entropy import (
    EntropyLossReport,
    bit_estimate,
    bit_gradients,
    clamp_probability,
    entropy_loss,
    total_loss,
)
from .grid import PLANE_AXES, interpolate, interpolation_corners, ste_mask
from .model import ModelState, TrainConfig, build_model
from .nn import Adam, lr_schedule
from .occupancy import _PLANE_KEEP_AXES, OccupancyGrid, derive_occupancy

PSNR_CAP = 99.0

DIVERGENCE_PATIENCE = 10


class NumericError(RuntimeError):
    """Training diverged: repeated non-finite losses."""


# ---------------------------------------------------------------------------
# synthetic target fields

FIELD_KINDS = ("shell", "blobs", "checker")


def synth_field(kind: str = "shell", seed: int = 0, channels: int = 1):
    """Deterministic synthetic test scenes; returns f(pts (N,3)) -> (N, C)."""
    rng = np.random.default_rng(seed)
    if kind == "shell":
        center = 0.5 + rng.uniform(-0.05, 0.05, size=3)
        gains = rng.uniform(0.6, 1.0, size=channels)

        def f(pts):
            r = np.linalg.norm(np.asarray(pts) - center, axis=1)
            shell = np.exp(-(((r - 0.3) / 0.02) ** 2))
            return shell[:, None] * gains[None, :]

        return f
    if kind == "blobs":
        k = 5
        centers = rng.uniform(0.2, 0.8, size=(k, 3))
        widths = rng.uniform(0.05, 0.12, size=k)
        amps = rng.uniform(0.5, 1.0, size=(k, channels))

        def f(pts):
            pts = np.asarray(pts)
            out = np.zeros((len(pts), channels))
            for c, wdt, a in zip(centers, widths, amps):
                d2 = ((pts - c) ** 2).sum(axis=1)
                out += np.exp(-d2 / (2 * wdt**2))[:, None] * a[None, :]
            return np.clip(out, 0.0, 1.0)

        return f
    if kind == "checker":
        center = 0.5 + rng.uniform(-0.03, 0.03, size=3)
        freq = int(rng.integers(4, 7))

        def f(pts):
            pts = np.asarray(pts)
            r = np.linalg.norm(pts - center, axis=1)
            inside = (r < 0.35).astype(np.float64)
            stripes = np.prod(np.sin(np.pi * freq * pts), axis=1)
            val = inside * (0.5 + 0.5 * np.sign(stripes))
            return np.repeat(val[:, None], channels, axis=1)

        return f
    raise ValueError(f"unknown field kind {kind!r}; pick from {FIELD_KINDS}")


# ---------------------------------------------------------------------------
# reconstruction

def _plane_positions(pts: np.ndarray, axis: str) -> np.ndarray:
    a, b = _PLANE_KEEP_AXES[axis]
    return pts[:, (a, b)]


def feature_stack(state: ModelState, pts: np.ndarray) -> np.ndarray:
    """All interpolated sign features at the given positions, fixed order."""
    parts = [interpolate(pts, level) for level in state.levels_3d]
    for axis in PLANE_AXES:
        p2 = _plane_positions(pts, axis)
        parts += [interpolate(p2, level) for level in state.planes[axis]]
    return np.concatenate(parts, axis=1)


def reconstruct(state: ModelState, pts: np.ndarray) -> np.ndarray:
    return state.recon_net.forward_only(feature_stack(state, pts))


# ---------------------------------------------------------------------------
# evaluation

def evaluate_psnr(state: ModelState, target, res: int = 64,
                  batch: int = 65536) -> float:
    """PSNR over a res^3 lattice restricted to occupied cells (peak = 1)."""
    t = (np.arange(res) + 0.5) / res
    gx, gy, gz = np.meshgrid(t, t, t, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    occ = state.occupancy
    cell = np.minimum((pts * occ.resolution).astype(int), occ.resolution - 1)
    keep = occ.cells[cell[:, 0], cell[:, 1], cell[:, 2]]
    pts = pts[keep]
    err = 0.0
    for lo in range(0, len(pts), batch):
        chunk = pts[lo : lo + batch]
        diff = reconstruct(state, chunk) - target(chunk)
        err += float((diff**2).sum())
    mse = err / max(1, pts.size // 3 * state.cfg.channels)
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(1.0 / mse)))


# ---------------------------------------------------------------------------
# training

def sample_occupied_positions(occ: OccupancyGrid, n: int,
                              rng: np.random.Generator) -> np.ndarray:
    """Uniform positions inside occupied cells."""
    idx = np.argwhere(occ.cells)
    pick = idx[rng.integers(0, len(idx), size=n)]
    return (pick + rng.random((n, 3))) / occ.resolution


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    bits_per_theta: list = field(default_factory=list)
    skipped_steps: int = 0


def _latent_index(state: ModelState) -> dict:
    """Position of each level's latent in trainable_params() order."""
    pos = {}
    i = 0
    for level in state.levels_3d:
        pos[id(level)] = i
        i += 1
    for axis in PLANE_AXES:
        for level in state.planes[axis]:
            pos[id(level)] = i
            i += 1
    return pos


def _entropy_step(state: ModelState, grads: list, latent_pos: dict,
                  rng: np.random.Generator):
    """Estimate total coded bits from a slot subsample and accumulate the
    entropy gradients (scaled by lambda / M) into ``grads``.

    Contexts are detached: previous levels only feed forward.  Fusers get
    gradient through the fused slot probability; the coded latents through
    the bit estimator's theta partial under the straight-through gate.
    """
    cfg = state.cfg
    m_total = state.theta_total()
    coeff = cfg.lam / m_total
    fuser_params = state.fusers.params()
    fuser_offset = len(latent_pos)
    fuser_pos = {id(p): fuser_offset + i for i, p in enumerate(fuser_params)}

    levels = [entry for entry in state.all_levels()
              if entry[5].valid_slot_count > 0]
    weights = np.array([e[5].valid_slot_count for e in levels], dtype=float)
    quota = np.maximum(
        1, np.round(cfg.theta_samples * weights / weights.sum()).astype(int)
    )

    total_bits = 0.0
    total_valid = 0
    for (dims, axis, index, level, inv, validity), n_s in zip(levels, quota):
        valid_ids = np.flatnonzero(validity.slot_valid)
        n_s = min(n_s, len(valid_ids))
        slots = rng.choice(valid_ids, size=n_s, replace=False)
        slots.sort()
        thetas = level.raw_signs()[slots].astype(np.float64)
        f_g = frequency(level, validity)
        if cfg.uses_fuser(dims, index):
            prev = state.levels_3d if dims == 3 else state.planes[axis]
            res = slot_probabilities(
                slots, index, level, prev, f_g, inv, validity,
                state.fusers, cfg.lc, pvf=state.pvf, keep_cache=True,
            )
            probs = res.p_slots
        else:
            res = None
            probs = np.full_like(thetas, clamp_probability(np.float64(f_g)))

        scale = len(valid_ids) / n_s
        bits = bit_estimate(probs, thetas)
        total_bits += float(bits.sum()) * scale
        total_valid += len(valid_ids) * level.feature_dim

        d_theta, d_p = bit_gradients(probs, thetas)
        g_lat = grads[latent_pos[id(level)]]
        gate = ste_mask(level.latent[slots].astype(np.float64))
        np.add.at(g_lat, slots, coeff * scale * d_theta * gate)
        if res is not None:
            f_grads = slot_probability_backward(res, coeff * scale * d_p)
            for p, g in zip(res.fuser.params, f_grads):
                grads[fuser_pos[id(p)]] += g
    return EntropyLossReport(total_bits, total_valid, m_total,
                             int(quota.sum()))


def train(state: ModelState, target, log=None) -> TrainReport:
    """Joint reconstruction + rate training of a prepared model, in place."""
    cfg = state.cfg
    # separate streams so the batch sequence is identical across lambdas
    rng = np.random.default_rng(cfg.seed)
    rng_entropy = np.random.default_rng(cfg.seed + 1)
    params = state.trainable_params()
    opt = Adam(params)
    latent_pos = _latent_index(state)
    n_latents = len(latent_pos)
    n_fuser = len(state.fusers.params())
    report = TrainReport()
    bad_streak = 0

    for it in range(cfg.iterations):
        lr = lr_schedule(it, cfg.iterations, cfg.base_lr)
        grads = [np.zeros(p.shape, dtype=np.float64) for p in params]

        pts = sample_occupied_positions(state.occupancy, cfg.batch_size, rng)
        y = np.asarray(target(pts), dtype=np.float64)
        feats = feature_stack(state, pts)
        pred, cache = state.recon_net.forward(feats)
        resid = pred - y
        l_mse = float((resid**2).mean())
        g_out = 2.0 * resid / resid.size
        recon_grads, g_feats = state.recon_net.backward(g_out, cache)
        for gi, g in enumerate(recon_grads):
            grads[n_latents + n_fuser + gi] += g

        # scatter feature gradients back into the latent tables
        col = 0
        fdim = cfg.feature_dim
        order = list(state.levels_3d)
        pts2 = {a: _plane_positions(pts, a) for a in PLANE_AXES}
        for axis in PLANE_AXES:
            order += state.planes[axis]
        for level in order:
            gf = g_feats[:, col : col + fdim]
            col += fdim
            lpts = pts if level.dims == 3 else pts2[level.plane_axis]
            slots, wts = interpolation_corners(lpts, level)
            gate = ste_mask(level.latent.astype(np.float64))
            contrib = wts[:, :, None] * gf[:, None, :]
            g_lat = grads[latent_pos[id(level)]]
            np.add.at(g_lat, slots.ravel(),
                      contrib.reshape(-1, fdim))
            g_lat *= gate
            if level.valid_mask is not None:
                g_lat[~level.valid_mask] = 0.0  # pinned signs are constants

        if cfg.lam > 0:
            ent = _entropy_step(state, grads, latent_pos, rng_entropy)
            loss = total_loss(l_mse, ent, cfg.lam)
            report.bits_per_theta.append(ent.loss_value)
        else:
            loss = l_mse
            report.bits_per_theta.append(0.0)
        report.losses.append(loss)
        report.mse.append(l_mse)

        if not np.isfinite(loss):
            bad_streak += 1
            if bad_streak >= DIVERGENCE_PATIENCE:
                raise NumericError(
                    f"loss non-finite for {bad_streak} consecutive iterations"
                )
        else:
            bad_streak = 0

        opt.step(grads, lr)
        if cfg.pvf_interval > 0 and (it + 1) % cfg.pvf_interval == 0:
            state.refresh_pvf()
        if log is not None:
            log(it, loss, l_mse)

    report.skipped_steps = opt.state.skipped
    state.refresh_pvf()
    return report


def undecodable_needed_slots(level, validity, occ: OccupancyGrid,
                             rng: np.random.Generator,
                             n: int = 8192) -> np.ndarray:
    """Slots a decoder would need for occupied-space queries but that the
    given validity marks invalid.  Empty for a safe validity criterion."""
    pts = sample_occupied_positions(occ, n, rng)
    if level.dims == 2:
        pts = _plane_positions(pts, level.plane_axis)
    slots, wts = interpolation_corners(pts, level)
    needed = np.unique(slots[wts > 0])
    return needed[~validity.slot_valid[needed]]


# ---------------------------------------------------------------------------
# post-hoc fuser refits (ablation comparisons on frozen signs)

def estimate_coded_bits(state: ModelState, dims_filter=(2, 3)) -> float:
    """Exact estimated bits of all valid signs under the current fusers."""
    total = 0.0
    for dims, axis, index, level, inv, validity in state.all_levels():
        if dims not in dims_filter or validity.valid_slot_count == 0:
            continue
        slots = np.flatnonzero(validity.slot_valid)
        thetas = level.raw_signs()[slots].astype(np.float64)
        f_g = frequency(level, validity)
        if state.cfg.uses_fuser(dims, index):
            prev = state.levels_3d if dims == 3 else state.planes[axis]
            res = slot_probabilities(
                slots, index, level, prev, f_g, inv, validity,
                state.fusers, state.cfg.lc, pvf=state.pvf,
            )
            probs = res.p_slots
        else:
            probs = np.full_like(thetas, clamp_probability(np.float64(f_g)))
        total += float(bit_estimate(probs, thetas).sum())
    return total


def estimate_2d_bits(state: ModelState) -> float:
    return estimate_coded_bits(state, dims_filter=(2,))


def refit_fusers(state: ModelState, iterations: int = 200,
                 samples: int = 512, seed: int = 0,
                 dims_filter=(2, 3)) -> float:
    """Retrain only the fusers against the frozen signs; returns the final
    exact bit estimate over the selected level kinds.  Used to compare
    context variants on identical signs."""
    cfg = state.cfg
    rng = np.random.default_rng(seed)
    params = state.fusers.params()
    levels = [e for e in state.all_levels()
              if e[0] in dims_filter and e[5].valid_slot_count > 0
              and cfg.uses_fuser(e[0], e[2])]
    if not params or not levels:
        return estimate_coded_bits(state, dims_filter)
    opt = Adam(params)
    fuser_pos = {id(p): i for i, p in enumerate(params)}
    for it in range(iterations):
        lr = lr_schedule(it, iterations, cfg.base_lr)
        grads = [np.zeros(p.shape, dtype=np.float64) for p in params]
        for dims, axis, index, level, inv, validity in levels:
            valid_ids = np.flatnonzero(validity.slot_valid)
            n_s = min(samples, len(valid_ids))
            slots = rng.choice(valid_ids, size=n_s, replace=False)
            slots.sort()
            thetas = level.raw_signs()[slots].astype(np.float64)
            f_g = frequency(level, validity)
            prev = state.levels_3d if dims == 3 else state.planes[axis]
            res = slot_probabilities(
                slots, index, level, prev, f_g, inv, validity,
                state.fusers, cfg.lc, pvf=state.pvf, keep_cache=True,
            )
            _, d_p = bit_gradients(res.p_slots, thetas)
            f_grads = slot_probability_backward(res, d_p / n_s)
            for p, g in zip(res.fuser.params, f_grads):
                grads[fuser_pos[id(p)]] += g
        opt.step(grads, lr)
    return estimate_coded_bits(state, dims_filter)


def refit_2d_fusers(state: ModelState, iterations: int = 200,
                    samples: int = 512, seed: int = 0) -> float:
    return refit_fusers(state, iterations, samples, seed, dims_filter=(2,))


# ---------------------------------------------------------------------------
# rate-distortion sweeps

@dataclass
class RdPoint:
    lam: float
    total_bytes: int
    emb3d_bytes: int
    emb2d_bytes: int
    mlp_bytes: int
    ctx_bytes: int
    occ_bytes: int
    psnr_db: float
    seconds: float


CSV_HEADER = ("lambda,total_bytes,emb3d_bytes,emb2d_bytes,mlp_bytes,"
              "ctx_bytes,occ_bytes,psnr_db,seconds")


def run_point(cfg: TrainConfig, target, lam: float):
    """Train and encode one rate-distortion point; returns (point, state)."""
    from dataclasses import replace

    from .codec import encode_model

    cfg = replace(cfg, lam=lam)
    occ = derive_occupancy(target, cfg.occ_res)
    state = build_model(cfg, occ, np.random.default_rng(cfg.seed))
    t0 = time.perf_counter()
    train(state, target)
    stream, sizes = encode_model(state)
    seconds = time.perf_counter() - t0
    psnr = evaluate_psnr(state, target)
    point = RdPoint(lam, sizes.total, sizes.emb3d, sizes.emb2d, sizes.mlp,
                    sizes.ctx, sizes.occ, psnr, seconds)
    return point, state, stream


def write_rd_csv(points: list[RdPoint], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER.split(","))
        for p in points:
            writer.writerow([
                p.lam, p.total_bytes, p.emb3d_bytes, p.emb2d_bytes,
                p.mlp_bytes, p.ctx_bytes, p.occ_bytes,
                f"{p.psnr_db:.4f}", f"{p.seconds:.3f}",
            ])


def write_rd_json(points: list[RdPoint], path: str) -> None:
    with open(path, "w") as fh:
        json.dump([p.__dict__ for p in points], fh, indent=2)


def rd_sweep(cfg: TrainConfig, target, lambdas, csv_path=None,
             json_path=None) -> list[RdPoint]:
    points = []
    for lam in lambdas:
        point, _, _ = run_point(cfg, target, lam)
        points.append(point)
    if csv_path:
        write_rd_csv(points, csv_path)
    if json_path:
        write_rd_json(points, json_path)
    return points
