import numpy as np
import pytest

from gridcodec.context import (
    EmptyLevelError,
    FREQ_SCALE,
    assemble_level_context,
    build_fusers,
    coding_probability,
    dequantize_frequency,
    effective_lc,
    frequency,
    quantize_frequency,
    slot_probabilities,
    slot_probability_backward,
)
from gridcodec.entropy import EPS_P
from gridcodec.grid import (
    GridConfig,
    LevelEmbedding,
    build_inverse_map,
    init_level,
    interpolate,
    sample_dense_grid,
    vertex_coords,
)
from gridcodec.occupancy import (
    InvalidSlotError,
    LevelValidity,
    OccupancyGrid,
    Pvf,
    build_level_validity,
    project_pvf,
)

F = 4


def make_levels(num_levels=4, min_res=2, max_res=8, log2=4, seed=0,
                plane_axis=None):
    cfg = GridConfig(num_levels, min_res, max_res, log2, F,
                     plane_axis=plane_axis)
    rng = np.random.default_rng(seed)
    return cfg, [init_level(cfg, r, rng) for r in cfg.resolutions()]


def full_occupancy(res=4):
    return OccupancyGrid(np.ones((res, res, res), dtype=bool))


class TestFrequency:
    def test_counts_plus_fraction(self):
        latent = np.array([[1.0], [-1.0], [1.0], [1.0]], dtype=np.float32)
        level = LevelEmbedding(1, latent, hashed=False)
        assert frequency(level, None) == pytest.approx(0.75)

    def test_restricted_to_valid_slots(self):
        latent = np.array([[1.0], [-1.0], [1.0], [1.0]], dtype=np.float32)
        level = LevelEmbedding(1, latent, hashed=False)
        validity = LevelValidity(
            np.array([False, True, True, False]), np.zeros(4, np.float32)
        )
        assert frequency(level, validity) == pytest.approx(0.5)

    def test_empty_level_raises(self):
        level = LevelEmbedding(1, np.ones((4, 1), dtype=np.float32),
                               hashed=False)
        validity = LevelValidity(np.zeros(4, dtype=bool),
                                 np.zeros(4, np.float32))
        with pytest.raises(EmptyLevelError):
            frequency(level, validity)

    def test_quantization_round_trip(self):
        for f in (0.0, 0.25, 0.5, 0.317, 1.0):
            q = quantize_frequency(f)
            assert 0 <= q <= FREQ_SCALE
            assert abs(dequantize_frequency(q) - f) <= 0.5 / FREQ_SCALE

    def test_coding_probability_clamps(self):
        assert coding_probability(0.0) == EPS_P
        assert coding_probability(1.0) == 1.0 - EPS_P
        assert coding_probability(0.3) == pytest.approx(0.3)


class TestFuserBank:
    def test_shared_by_effective_depth(self):
        rng = np.random.default_rng(0)
        bank = build_fusers(F, num_levels_3d=8, num_levels_2d=3, lc=3, rng=rng)
        assert set(bank.fusers_3d) == {1, 2, 3}
        assert set(bank.fusers_2d) == {1, 2}

    def test_widths(self):
        rng = np.random.default_rng(0)
        bank = build_fusers(F, 8, 3, 3, rng)
        net = bank.fusers_3d[2]
        assert net.widths == [F * 2 + 1, 32, 32, F]
        assert len(net.params) == 6
        flat = bank.fusers_2d[1]
        # one affine layer; PVF adds F extra inputs
        assert flat.widths == [F * 1 + 1 + F, F]

    def test_no_pvf_narrows_2d_input(self):
        rng = np.random.default_rng(0)
        bank = build_fusers(F, 8, 3, 3, rng, use_pvf=False)
        assert bank.fusers_2d[1].widths[0] == F + 1

    def test_param_vector_round_trip(self):
        rng = np.random.default_rng(3)
        bank = build_fusers(F, 6, 3, 2, rng)
        vec = bank.param_vector()
        other = build_fusers(F, 6, 3, 2, np.random.default_rng(99))
        assert not np.array_equal(other.param_vector(), vec)
        other.set_param_vector(vec)
        assert np.array_equal(other.param_vector(), vec)

    def test_effective_lc(self):
        assert effective_lc(1, 3) == 0
        assert effective_lc(2, 3) == 1
        assert effective_lc(4, 3) == 3
        assert effective_lc(9, 3) == 3


class TestAssembleContext:
    def test_shape_and_frequency_column(self):
        _, levels = make_levels()
        pos = np.random.default_rng(1).uniform(size=(10, 3))
        ctx = assemble_level_context(pos, 4, levels, f_g=0.7, lc=2)
        assert ctx.shape == (10, F * 2 + 1)
        assert np.all(ctx[:, -1] == 0.7)

    def test_matches_interpolation(self):
        _, levels = make_levels()
        pos = np.random.default_rng(2).uniform(size=(5, 3))
        ctx = assemble_level_context(pos, 3, levels, 0.5, lc=3)
        # level 3 sees levels 1 and 2 in order
        assert np.allclose(ctx[:, :F], interpolate(pos, levels[0]))
        assert np.allclose(ctx[:, F : 2 * F], interpolate(pos, levels[1]))

    def test_level_one_has_no_context(self):
        _, levels = make_levels()
        with pytest.raises(ValueError):
            assemble_level_context(np.zeros((1, 3)), 1, levels, 0.5, 3)

    def test_causality_only_previous_window(self):
        accessed = []

        class Recorder(LevelEmbedding):
            def signs(self):
                accessed.append(self.resolution)
                return super().signs()

        cfg, levels = make_levels()
        spies = [
            Recorder(l.resolution, l.latent, l.hashed) for l in levels
        ]
        assemble_level_context(np.full((2, 3), 0.5), 4, spies, 0.5, lc=2)
        assert sorted(accessed) == sorted(
            [spies[1].resolution, spies[2].resolution]
        )


def prob_setup(lc=2, plane_axis=None, seed=0, use_pvf=True):
    cfg, levels = make_levels(plane_axis=plane_axis, seed=seed)
    occ = full_occupancy()
    level_index = 3
    level = levels[level_index - 1]
    inv = build_inverse_map(level.resolution, level.dims,
                            level.table_size, level.hashed)
    validity = build_level_validity(level, inv, occ)
    bank = build_fusers(F, len(levels), len(levels), lc,
                        np.random.default_rng(seed + 10), use_pvf=use_pvf)
    pvf = None
    if plane_axis is not None:
        fine = levels[-1]
        cfg3 = GridConfig(1, fine.resolution, fine.resolution, 16, F)
        lvl3 = init_level(cfg3, fine.resolution, np.random.default_rng(7))
        inv3 = build_inverse_map(lvl3.resolution, 3, lvl3.table_size,
                                 lvl3.hashed)
        pvf = project_pvf(lvl3, inv3, build_level_validity(lvl3, inv3, occ))
    slot_ids = np.flatnonzero(validity.slot_valid)
    return levels, level_index, level, inv, validity, bank, pvf, slot_ids


class TestSlotProbabilities:
    def test_zero_params_give_half(self):
        levels, li, level, inv, validity, bank, _, slots = prob_setup()
        bank.set_param_vector(np.zeros_like(bank.param_vector()))
        res = slot_probabilities(slots, li, level, levels, 0.5, inv,
                                 validity, bank, lc=2)
        assert res.p_slots.shape == (len(slots), F)
        assert np.allclose(res.p_slots, 0.5)

    def test_clamped_at_extremes(self):
        levels, li, level, inv, validity, bank, _, slots = prob_setup()
        vec = np.zeros_like(bank.param_vector())
        bank.set_param_vector(vec)
        # saturate the output layer bias of the active fuser
        bank.fusers_3d[2].params[-1][...] = 50.0
        res = slot_probabilities(slots, li, level, levels, 0.5, inv,
                                 validity, bank, lc=2)
        assert np.allclose(res.p_slots, 1.0 - EPS_P, atol=1e-12)
        bank.fusers_3d[2].params[-1][...] = -50.0
        res = slot_probabilities(slots, li, level, levels, 0.5, inv,
                                 validity, bank, lc=2)
        assert np.allclose(res.p_slots, EPS_P, atol=1e-12)

    def test_matches_naive_per_slot_loop(self):
        levels, li, level, inv, validity, bank, _, slots = prob_setup(seed=4)
        f_g = 0.6
        res = slot_probabilities(slots, li, level, levels, f_g, inv,
                                 validity, bank, lc=2)
        fuser = bank.fusers_3d[2]
        for row, s in enumerate(slots[:32]):
            verts = inv.vertices_of(s)
            aoes = validity.vertex_aoe[inv.offsets[s] : inv.offsets[s + 1]]
            keep = aoes > 0
            verts, aoes = verts[keep], aoes.astype(np.float64)[keep]
            w = aoes / aoes.sum()
            expected = np.zeros(F)
            for v, wv in zip(verts, w):
                pos = vertex_coords(np.array([v]), level.resolution,
                                    3).astype(np.float64) / level.resolution
                ctx = assemble_level_context(pos, li, levels, f_g, 2)
                p = np.clip(fuser.forward_only(ctx)[0], EPS_P, 1 - EPS_P)
                expected += wv * p
            assert np.allclose(res.p_slots[row], expected, atol=1e-12)

    def test_invalid_slot_rejected(self):
        levels, li, level, inv, validity, bank, _, _ = prob_setup()
        # shrink occupancy to one corner cell so most slots lose all AOE
        cells = np.zeros((4, 4, 4), dtype=bool)
        cells[0, 0, 0] = True
        occ = OccupancyGrid(cells)
        validity = build_level_validity(level, inv, occ)
        bad = np.flatnonzero(~validity.slot_valid)[:1]
        with pytest.raises(InvalidSlotError):
            slot_probabilities(bad, li, level, levels, 0.5, inv, validity,
                               bank, lc=2)

    def test_deterministic(self):
        levels, li, level, inv, validity, bank, _, slots = prob_setup(seed=5)
        a = slot_probabilities(slots, li, level, levels, 0.5, inv, validity,
                               bank, lc=2).p_slots
        b = slot_probabilities(slots, li, level, levels, 0.5, inv, validity,
                               bank, lc=2).p_slots
        assert np.array_equal(a, b)


class TestSlotProbabilities2D:
    def test_pvf_required_and_used(self):
        levels, li, level, inv, validity, bank, pvf, slots = prob_setup(
            plane_axis="xy"
        )
        with pytest.raises(ValueError):
            slot_probabilities(slots, li, level, levels, 0.5, inv, validity,
                               bank, lc=2)
        res = slot_probabilities(slots, li, level, levels, 0.5, inv,
                                 validity, bank, lc=2, pvf=pvf)
        assert res.p_slots.shape == (len(slots), F)
        # perturbing the PVF changes the prediction
        shifted = Pvf({k: np.clip(v + 0.3, 0, 1) for k, v in pvf.planes.items()})
        other = slot_probabilities(slots, li, level, levels, 0.5, inv,
                                   validity, bank, lc=2, pvf=shifted)
        assert not np.allclose(res.p_slots, other.p_slots)

    def test_pvf_ablated_bank_ignores_pvf(self):
        levels, li, level, inv, validity, bank, pvf, slots = prob_setup(
            plane_axis="xy", use_pvf=False
        )
        res = slot_probabilities(slots, li, level, levels, 0.5, inv,
                                 validity, bank, lc=2)
        assert res.p_slots.shape == (len(slots), F)


class TestBackward:
    def test_matches_finite_difference(self):
        levels, li, level, inv, validity, bank, _, slots = prob_setup(seed=8)
        slots = slots[:40]
        fuser = bank.fusers_3d[2]
        kwargs = dict(level_index=li, level=level, prev_levels=levels,
                      f_g=0.5, inv=inv, validity=validity, fusers=bank, lc=2)

        res = slot_probabilities(slots, keep_cache=True, **kwargs)
        grads = slot_probability_backward(res, np.ones_like(res.p_slots))

        rng = np.random.default_rng(0)
        h = 1e-4
        for pi, param in enumerate(fuser.params):
            flat = param.reshape(-1)
            for idx in rng.choice(flat.size, size=min(5, flat.size),
                                  replace=False):
                orig = flat[idx]
                flat[idx] = orig + h
                hi = float(flat[idx])  # float32 rounds the step
                up = slot_probabilities(slots, **kwargs).p_slots.sum()
                flat[idx] = orig - h
                lo = float(flat[idx])
                dn = slot_probabilities(slots, **kwargs).p_slots.sum()
                flat[idx] = orig
                fd = (up - dn) / (hi - lo)
                got = grads[pi].reshape(-1)[idx]
                assert got == pytest.approx(fd, rel=1e-3, abs=1e-6)

    def test_clamp_gate_blocks_gradient(self):
        levels, li, level, inv, validity, bank, _, slots = prob_setup()
        bank.set_param_vector(np.zeros_like(bank.param_vector()))
        bank.fusers_3d[2].params[-1][...] = 50.0  # saturated output
        res = slot_probabilities(slots, li, level, levels, 0.5, inv,
                                 validity, bank, lc=2, keep_cache=True)
        grads = slot_probability_backward(res, np.ones_like(res.p_slots))
        assert all(np.allclose(g, 0.0) for g in grads)
