"""Estimator-style wrapper around the trainer and codec.

``FieldCompressor`` follows the scikit-learn protocol: hyperparameters in
``__init__``, learned state on ``fit`` (trailing-underscore attributes),
``predict``/``score`` for evaluation, and ``get_params``/``set_params`` for
grid search and cloning.  Point samples are rasterized into a voxel-mean
target so the trainer can query the field anywhere.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .codec import decode_model, encode_model
from .field import evaluate_psnr, reconstruct, train
from .model import ModelState, TrainConfig, build_model
from .occupancy import DegenerateSceneError, OccupancyGrid


class FieldCompressor(RegressorMixin, BaseEstimator):
    """Compress a scalar field given point samples on the unit cube."""

    def __init__(self, lam=2e-3, iterations=200, seed=0, feature_dim=8,
                 lc=3, ld=None, ablate="none", occ_res=16,
                 levels_3d=4, min_res_3d=8, max_res_3d=32, log2_3d=10,
                 levels_2d=2, min_res_2d=16, max_res_2d=32, log2_2d=9,
                 hidden=(32, 32), batch_size=1024, theta_samples=512,
                 occ_threshold=1e-2):
        self.lam = lam
        self.iterations = iterations
        self.seed = seed
        self.feature_dim = feature_dim
        self.lc = lc
        self.ld = ld
        self.ablate = ablate
        self.occ_res = occ_res
        self.levels_3d = levels_3d
        self.min_res_3d = min_res_3d
        self.max_res_3d = max_res_3d
        self.log2_3d = log2_3d
        self.levels_2d = levels_2d
        self.min_res_2d = min_res_2d
        self.max_res_2d = max_res_2d
        self.log2_2d = log2_2d
        self.hidden = hidden
        self.batch_size = batch_size
        self.theta_samples = theta_samples
        self.occ_threshold = occ_threshold

    def _train_config(self, channels: int) -> TrainConfig:
        return TrainConfig(
            levels_3d=self.levels_3d, min_res_3d=self.min_res_3d,
            max_res_3d=self.max_res_3d, log2_3d=self.log2_3d,
            levels_2d=self.levels_2d, min_res_2d=self.min_res_2d,
            max_res_2d=self.max_res_2d, log2_2d=self.log2_2d,
            feature_dim=self.feature_dim, channels=channels, lc=self.lc,
            ld=self.ld, ablate=self.ablate, occ_res=self.occ_res,
            hidden=tuple(self.hidden), iterations=self.iterations,
            batch_size=self.batch_size, theta_samples=self.theta_samples,
            lam=self.lam, seed=self.seed,
        )

    def _validate_positions(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError("positions must have shape (n_samples, 3)")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("positions must lie in the unit cube")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        X = self._validate_positions(X)
        if y.ndim == 1:
            y = y[:, None]
        channels = y.shape[1]

        # voxel-mean rasterization of the samples; queried as piecewise
        # constant so the trainer can sample positions it never saw
        res = self.occ_res
        cell = np.minimum((X * res).astype(int), res - 1)
        flat = (cell[:, 0] * res + cell[:, 1]) * res + cell[:, 2]
        counts = np.bincount(flat, minlength=res**3).astype(np.float64)
        means = np.zeros((res**3, channels))
        for c in range(channels):
            sums = np.bincount(flat, weights=y[:, c], minlength=res**3)
            np.divide(sums, counts, out=means[:, c], where=counts > 0)
        grid = means.reshape(res, res, res, channels)

        def target(pts):
            idx = np.minimum((np.asarray(pts) * res).astype(int), res - 1)
            return grid[idx[:, 0], idx[:, 1], idx[:, 2]]

        occupied = (np.abs(means).max(axis=1) > self.occ_threshold).reshape(
            (res,) * 3
        )
        if not occupied.any():
            raise DegenerateSceneError("no sample exceeds the occupancy "
                                       "threshold; nothing to compress")
        cfg = self._train_config(channels)
        self.state_ = build_model(cfg, OccupancyGrid(occupied),
                                  np.random.default_rng(cfg.seed))
        self.report_ = train(self.state_, target)
        self.target_ = target
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        X = self._validate_positions(X)
        out = reconstruct(self.state_, X)
        return out[:, 0] if out.shape[1] == 1 else out

    def psnr(self) -> float:
        check_is_fitted(self, "state_")
        return evaluate_psnr(self.state_, self.target_)

    def to_bytes(self) -> bytes:
        """Encode the fitted model; also usable for transport or storage."""
        check_is_fitted(self, "state_")
        stream, _ = encode_model(self.state_)
        return stream

    @classmethod
    def from_bytes(cls, data: bytes) -> "FieldCompressor":
        state = decode_model(data)
        cfg = state.cfg
        est = cls(
            lam=cfg.lam, seed=cfg.seed, feature_dim=cfg.feature_dim,
            lc=cfg.lc, ld=cfg.ld, ablate=cfg.ablate, occ_res=cfg.occ_res,
            levels_3d=cfg.levels_3d, min_res_3d=cfg.min_res_3d,
            max_res_3d=cfg.max_res_3d, log2_3d=cfg.log2_3d,
            levels_2d=cfg.levels_2d, min_res_2d=cfg.min_res_2d,
            max_res_2d=cfg.max_res_2d, log2_2d=cfg.log2_2d,
            hidden=cfg.hidden,
        )
        est.state_ = state
        est.n_features_in_ = 3
        return est
