"""Model state: grids, fusers, reconstruction head and their construction.

The trainable state of one compressed field bundles a 3D multi-resolution
hash grid, three 2D tri-plane grids, the probability fusers, and a small
dense reconstruction network.  Everything derived (inverse hash maps, slot
validity, the PVF) is recomputed from the occupancy grid so that encoder and
decoder agree without shipping it in the bitstream.
"""
from __future__ import annotations

import pickle
from dataclasses import dataclass, field, replace

import numpy as np

from .context import FuserBank, build_fusers
from .grid import (
    GridConfig,
    InverseHashMap,
    LevelEmbedding,
    PLANE_AXES,
    build_inverse_map,
    init_level,
)
from .nn import DenseNet
from .occupancy import (
    LevelValidity,
    OccupancyGrid,
    Pvf,
    build_level_validity,
    project_pvf,
)

ABLATE_MODES = ("none", "2d", "3d", "dim", "all")

QUANT_BITS_DEFAULT = 13


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training/compression run."""

    # 3D grid
    levels_3d: int = 8
    min_res_3d: int = 16
    max_res_3d: int = 256
    log2_3d: int = 15
    # tri-plane grids (one per axis pair)
    levels_2d: int = 3
    min_res_2d: int = 64
    max_res_2d: int = 256
    log2_2d: int = 13
    # shared
    feature_dim: int = 8
    channels: int = 1
    lc: int = 3  # context depth (previous levels seen by a fuser)
    ld: int | None = None  # levels >= ld fall back to frequency coding
    ablate: str = "none"
    occ_res: int = 32
    quant_bits: int = QUANT_BITS_DEFAULT
    hidden: tuple[int, ...] = (64, 64)
    # optimization
    iterations: int = 600
    batch_size: int = 4096
    theta_samples: int = 2048
    pvf_interval: int = 20
    lam: float = 2e-3
    base_lr: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.ablate not in ABLATE_MODES:
            raise ValueError(f"ablate must be one of {ABLATE_MODES}")
        if self.ld is not None and self.ld < 1:
            raise ValueError("ld must be >= 1 when set")
        if not 1 <= self.quant_bits <= 16:
            raise ValueError("quant_bits must be in [1, 16]")

    def grid_3d(self) -> GridConfig:
        return GridConfig(self.levels_3d, self.min_res_3d, self.max_res_3d,
                          self.log2_3d, self.feature_dim)

    def grid_2d(self, axis: str) -> GridConfig:
        return GridConfig(self.levels_2d, self.min_res_2d, self.max_res_2d,
                          self.log2_2d, self.feature_dim, plane_axis=axis)

    @property
    def use_pvf(self) -> bool:
        return self.ablate not in ("dim", "all")

    def uses_fuser(self, dims: int, level_index: int) -> bool:
        """Whether a level's signs are coded with a learned context model
        (as opposed to the plain level frequency)."""
        if level_index < 2:
            return False
        if self.ld is not None and level_index >= self.ld:
            return False
        if self.ablate == "all":
            return False
        if self.ablate == "3d" and dims == 3:
            return False
        if self.ablate == "2d" and dims == 2:
            return False
        return True

    def recon_input_width(self) -> int:
        return self.feature_dim * (self.levels_3d + 3 * self.levels_2d)


def paper_scale(cfg: TrainConfig | None = None) -> TrainConfig:
    """Full-scale settings; the defaults above are desk-sized for fast runs."""
    base = cfg or TrainConfig()
    return replace(
        base,
        levels_3d=12, min_res_3d=16, max_res_3d=512, log2_3d=19,
        levels_2d=4, min_res_2d=128, max_res_2d=1024, log2_2d=17,
        occ_res=128, iterations=20000, hidden=(160, 160),
    )


@dataclass
class ModelState:
    """Everything that defines a compressed field.

    ``inv_3d``/``validity_3d`` etc. are derived caches filled by
    :meth:`prepare`; they are deterministic functions of the configs and the
    occupancy grid.
    """

    cfg: TrainConfig
    occupancy: OccupancyGrid
    levels_3d: list[LevelEmbedding]
    planes: dict[str, list[LevelEmbedding]]  # axis -> levels
    fusers: FuserBank
    recon_net: DenseNet
    inv_3d: list[InverseHashMap] = field(default_factory=list)
    inv_2d: dict[str, list[InverseHashMap]] = field(default_factory=dict)
    validity_3d: list[LevelValidity] = field(default_factory=list)
    validity_2d: dict[str, list[LevelValidity]] = field(default_factory=dict)
    pvf: Pvf | None = None

    def prepare(self) -> "ModelState":
        """Build inverse maps and validity, and project the initial PVF."""
        self.inv_3d = [
            build_inverse_map(l.resolution, 3, l.table_size, l.hashed)
            for l in self.levels_3d
        ]
        self.validity_3d = [
            build_level_validity(l, inv, self.occupancy)
            for l, inv in zip(self.levels_3d, self.inv_3d)
        ]
        self.inv_2d, self.validity_2d = {}, {}
        for axis in PLANE_AXES:
            self.inv_2d[axis] = [
                build_inverse_map(l.resolution, 2, l.table_size, l.hashed)
                for l in self.planes[axis]
            ]
            self.validity_2d[axis] = [
                build_level_validity(l, inv, self.occupancy)
                for l, inv in zip(self.planes[axis], self.inv_2d[axis])
            ]
        for levels, vals in [(self.levels_3d, self.validity_3d)] + [
            (self.planes[a], self.validity_2d[a]) for a in PLANE_AXES
        ]:
            for level, v in zip(levels, vals):
                level.valid_mask = v.slot_valid.copy()
        self.refresh_pvf()
        return self

    def refresh_pvf(self) -> None:
        self.pvf = project_pvf(self.levels_3d[-1], self.inv_3d[-1],
                               self.validity_3d[-1])

    def all_levels(self):
        """(dims, axis, level_index, level, inv, validity) for every level,
        3D first, then planes in fixed axis order, coarse to fine."""
        for i, (l, inv, v) in enumerate(
            zip(self.levels_3d, self.inv_3d, self.validity_3d)
        ):
            yield 3, None, i + 1, l, inv, v
        for axis in PLANE_AXES:
            for i, (l, inv, v) in enumerate(
                zip(self.planes[axis], self.inv_2d[axis],
                    self.validity_2d[axis])
            ):
                yield 2, axis, i + 1, l, inv, v

    def theta_total(self) -> int:
        """M: every sign scalar in every table, valid or not."""
        total = sum(l.table_size * l.feature_dim for l in self.levels_3d)
        for axis in PLANE_AXES:
            total += sum(
                l.table_size * l.feature_dim for l in self.planes[axis]
            )
        return total

    def trainable_params(self) -> list[np.ndarray]:
        """Latents, fuser weights and reconstruction weights, fixed order."""
        out = [l.latent for l in self.levels_3d]
        for axis in PLANE_AXES:
            out += [l.latent for l in self.planes[axis]]
        out += self.fusers.params()
        out += self.recon_net.params
        return out


def build_model(cfg: TrainConfig, occupancy: OccupancyGrid,
                rng: np.random.Generator) -> ModelState:
    g3 = cfg.grid_3d()
    levels_3d = [init_level(g3, r, rng) for r in g3.resolutions()]
    planes = {}
    for axis in PLANE_AXES:
        g2 = cfg.grid_2d(axis)
        planes[axis] = [init_level(g2, r, rng) for r in g2.resolutions()]
    # only build fusers for levels that actually code with a context model
    def cap(dims: int, num: int) -> int:
        used = [i + 1 for i in range(num) if cfg.uses_fuser(dims, i + 1)]
        return max(used, default=0)

    fusers = build_fusers(
        cfg.feature_dim, cap(3, cfg.levels_3d), cap(2, cfg.levels_2d),
        cfg.lc, rng, use_pvf=cfg.use_pvf,
    )
    recon = DenseNet(
        [cfg.recon_input_width(), *cfg.hidden, cfg.channels],
        ["leaky_relu"] * len(cfg.hidden) + ["linear"],
        rng=rng,
    )
    state = ModelState(cfg, occupancy, levels_3d, planes, fusers, recon)
    return state.prepare()


def save_checkpoint(state: ModelState, path: str) -> None:
    """Byte-deterministic checkpoint: configs plus raw parameter arrays."""
    blob = {
        "cfg": state.cfg,
        "occupancy": state.occupancy.cells,
        "latents_3d": [l.latent for l in state.levels_3d],
        "latents_2d": {a: [l.latent for l in state.planes[a]]
                       for a in PLANE_AXES},
        "fusers": state.fusers.param_vector(),
        "recon": state.recon_net.param_vector(),
    }
    with open(path, "wb") as fh:
        pickle.dump(blob, fh, protocol=4)


def load_checkpoint(path: str) -> ModelState:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    cfg: TrainConfig = blob["cfg"]
    state = build_model(cfg, OccupancyGrid(blob["occupancy"]),
                        np.random.default_rng(cfg.seed))
    for level, latent in zip(state.levels_3d, blob["latents_3d"]):
        level.latent[...] = latent
    for axis in PLANE_AXES:
        for level, latent in zip(state.planes[axis], blob["latents_2d"][axis]):
            level.latent[...] = latent
    state.fusers.set_param_vector(blob["fusers"])
    state.recon_net.set_param_vector(blob["recon"])
    state.refresh_pvf()
    return state
