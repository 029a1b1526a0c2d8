import numpy as np
import pytest

from gridcodec import grid
from gridcodec.grid import (
    GridConfig,
    LevelEmbedding,
    binarize,
    build_inverse_map,
    init_level,
    interpolate,
    interpolation_corners,
    level_resolutions,
    sample_dense_grid,
    spatial_hash,
    ste_mask,
    vertex_coords,
    vertex_linear_ids,
)


class TestLevelResolutions:
    def test_full_scale_schedule_endpoints(self):
        res = level_resolutions(12, 16, 512)
        assert len(res) == 12
        assert res[0] == 16 and res[-1] == 512
        assert all(b > a for a, b in zip(res, res[1:]))

    def test_single_level(self):
        assert level_resolutions(1, 16, 16) == [16]

    def test_power_of_two_closed_form(self):
        # growth factor is exactly 2 here
        assert level_resolutions(4, 128, 1024) == [128, 256, 512, 1024]

    def test_rejects_decreasing(self):
        with pytest.raises(ValueError):
            level_resolutions(4, 64, 32)


class TestSpatialHash:
    def test_non_hashed_row_major(self):
        # row-major over (res+1) vertices per axis, x fastest
        idx = spatial_hash(np.array([[1, 2, 3]]), 4, 125, hashed=False)
        assert idx[0] == 1 + 2 * 5 + 3 * 25

    def test_origin_hashes_to_zero(self):
        idx = spatial_hash(np.array([[0, 0, 0]]), 8, 64, hashed=True)
        assert idx[0] == 0

    def test_pigeonhole_collision(self):
        res, table = 8, 64
        ids = np.arange((res + 1) ** 3)
        slots = spatial_hash(vertex_coords(ids, res, 3), res, table, hashed=True)
        assert len(np.unique(slots)) <= table
        assert np.bincount(slots, minlength=table).max() >= 2

    def test_rejects_out_of_bounds(self):
        with pytest.raises(ValueError):
            spatial_hash(np.array([[0, 5, 0]]), 4, 125, hashed=False)

    def test_determinism(self):
        coords = np.random.default_rng(0).integers(0, 9, size=(100, 3))
        a = spatial_hash(coords, 8, 64, hashed=True)
        b = spatial_hash(coords, 8, 64, hashed=True)
        assert np.array_equal(a, b)


class TestInverseMap:
    def test_non_hashed_identity(self):
        m = build_inverse_map(4, 3, 125, hashed=False)
        assert np.all(m.counts == 1)
        assert len(m.vertex_by_slot) == 125

    def test_conservation(self):
        m = build_inverse_map(8, 3, 64, hashed=True)
        assert m.counts.sum() == 9**3

    def test_round_trip_rehash(self):
        m = build_inverse_map(8, 3, 64, hashed=True)
        for slot in [0, 7, 63]:
            verts = m.vertices_of(slot)
            coords = vertex_coords(verts, 8, 3)
            rehash = spatial_hash(coords, 8, 64, hashed=True)
            assert np.all(rehash == slot)

    def test_slot_of_vertex_inverse(self):
        m = build_inverse_map(6, 3, 32, hashed=True)
        per_vertex = m.slot_of_vertex()
        ids = np.arange(7**3)
        direct = spatial_hash(vertex_coords(ids, 6, 3), 6, 32, hashed=True)
        assert np.array_equal(per_vertex, direct)

    def test_vertex_coord_round_trip(self):
        ids = np.arange(9**3)
        coords = vertex_coords(ids, 8, 3)
        assert np.array_equal(vertex_linear_ids(coords, 8), ids)


class TestBinarize:
    def test_signs(self):
        s = binarize(np.array([0.3, -0.7, 0.0]))
        assert list(s) == [1, -1, 1]

    def test_forward_always_pm_one(self):
        x = np.random.default_rng(1).normal(scale=10.0, size=1000)
        assert set(np.unique(binarize(x))) <= {-1, 1}

    def test_ste_gate(self):
        lat = np.array([0.5, 1.5, -1.0, -2.0])
        up = np.ones(4)
        grad = up * ste_mask(lat)
        assert list(grad) == [1.0, 0.0, 1.0, 0.0]

    def test_ste_matches_hard_tanh_finite_difference(self):
        # the STE surrogate is hard-tanh; its derivative gates the gradient
        h = 1e-6
        for x in [0.5, 1.5, -0.3, -1.2]:
            surrogate = lambda v: np.clip(v, -1.0, 1.0)
            fd = (surrogate(x + h) - surrogate(x - h)) / (2 * h)
            assert ste_mask(np.array([float(x)]))[0] == pytest.approx(fd, abs=1e-6)


def _level(res=4, feature_dim=2, seed=0, table_log2=12):
    cfg = GridConfig(1, res, res, table_log2, feature_dim)
    return init_level(cfg, res, np.random.default_rng(seed))


class TestInterpolate:
    def test_on_vertex_returns_vertex_sign(self):
        lvl = _level()
        pos = np.array([[0.25, 0.5, 0.75]])  # vertex (1, 2, 3) at res 4
        slot = spatial_hash(np.array([[1, 2, 3]]), 4, lvl.table_size, lvl.hashed)
        out = interpolate(pos, lvl)
        assert np.allclose(out[0], lvl.signs()[slot[0]])

    def test_all_plus_one(self):
        lvl = _level()
        lvl.latent[:] = 0.5
        out = interpolate(np.random.default_rng(2).uniform(size=(10, 3)), lvl)
        assert np.allclose(out, 1.0)

    def test_cell_center_is_corner_mean(self):
        lvl = _level()
        pos = np.array([[0.125, 0.125, 0.125]])  # center of cell (0,0,0)
        corners = np.array(
            [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)]
        )
        slots = spatial_hash(corners, 4, lvl.table_size, lvl.hashed)
        expected = lvl.signs()[slots].mean(axis=0)
        assert np.allclose(interpolate(pos, lvl)[0], expected)

    def test_convex_combination_weights(self):
        lvl = _level(res=7)
        pos = np.random.default_rng(3).uniform(size=(200, 3))
        _, weights = interpolation_corners(pos, lvl)
        assert np.all(weights >= 0)
        assert np.allclose(weights.sum(axis=1), 1.0, atol=1e-12)

    def test_corners_match_interpolate(self):
        lvl = _level(res=5, feature_dim=4)
        pos = np.random.default_rng(4).uniform(size=(50, 3))
        slots, weights = interpolation_corners(pos, lvl)
        manual = (weights[:, :, None] * lvl.signs()[slots]).sum(axis=1)
        assert np.allclose(manual, interpolate(pos, lvl))

    def test_output_in_sign_range(self):
        lvl = _level(res=6, feature_dim=8)
        out = interpolate(np.random.default_rng(5).uniform(size=(100, 3)), lvl)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_2d_plane(self):
        cfg = GridConfig(1, 4, 4, 12, 2, plane_axis="xy")
        lvl = init_level(cfg, 4, np.random.default_rng(6))
        out = interpolate(np.array([[0.5, 0.5]]), lvl)
        slot = spatial_hash(np.array([[2, 2]]), 4, lvl.table_size, lvl.hashed)
        assert np.allclose(out[0], lvl.signs()[slot[0]])


class TestValidMaskView:
    def test_invalid_slots_read_plus_one(self):
        lvl = _level()
        lvl.latent[:, :] = -0.5
        mask = np.ones(lvl.table_size, dtype=bool)
        mask[0] = False
        lvl.valid_mask = mask
        s = lvl.signs()
        assert np.all(s[0] == 1)
        assert np.all(s[1:] == -1)
        assert np.all(lvl.raw_signs() == -1)


class TestSampleDenseGrid:
    def test_vertex_identity(self):
        vals = np.random.default_rng(7).uniform(size=(5, 5, 3))
        out = sample_dense_grid(vals, np.array([[0.25, 0.75]]))
        assert np.allclose(out[0], vals[1, 3])

    def test_midpoint_mean(self):
        vals = np.zeros((3, 3, 1))
        vals[0, 0, 0] = 1.0
        out = sample_dense_grid(vals, np.array([[0.25, 0.25]]))
        assert np.allclose(out[0, 0], 0.25)


class TestGridConfig:
    def test_rejects_bad_feature_dim(self):
        with pytest.raises(ValueError):
            GridConfig(2, 4, 8, 10, 3)

    def test_rejects_bad_axis(self):
        with pytest.raises(ValueError):
            GridConfig(2, 4, 8, 10, 2, plane_axis="zz")

    def test_hashed_flag(self):
        cfg = GridConfig(2, 4, 64, 6, 2)
        assert not cfg.is_hashed(2)  # 27 <= 64
        assert cfg.is_hashed(4)  # 125 > 64
        assert cfg.table_size(2) == 27
        assert cfg.table_size(4) == 64
