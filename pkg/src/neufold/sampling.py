"""Batch generation for fitting: importance maps, point sampling, pair making."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldConfig, FieldParams, forward
from .losses import PairBatch
from .plane import PlaneFrame, lift, plane_scale
from .volume import Volume, importance_floor, sample_trilinear

# second pair points may leave the unit square by this much before resampling
_PAIR_MARGIN = 0.25
_PAIR_ATTEMPTS = 16


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    scheme: str = "importance"
    pairs_per_epoch: int = 50_000
    delta_min: float = 0.5
    delta_max: float = 40.0
    map_resolution: tuple[int, int] = (64, 64)
    map_refresh_epochs: int = 100
    alpha: float = 30.0
    beta: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("uniform", "importance"):
            raise SamplingError(f"unknown sampling scheme {self.scheme!r}")
        if not (0 < self.delta_min <= self.delta_max):
            raise SamplingError("need 0 < delta_min <= delta_max")
        if self.pairs_per_epoch < 1:
            raise SamplingError("pairs_per_epoch must be >= 1")
        if min(self.map_resolution) < 8:
            raise SamplingError("importance map needs >= 8 cells per axis")
        if self.map_refresh_epochs < 1:
            raise SamplingError("map_refresh_epochs must be >= 1")


@dataclass
class ImportanceMap:
    """2D sampling weights over the unit square; grid[iu, iv] covers the cell
    [iu/nu, (iu+1)/nu) x [iv/nv, (iv+1)/nv). cdf caches the flattened
    normalized cumulative sum for inverse-transform cell selection."""

    grid: np.ndarray
    epoch_built: int
    cdf: np.ndarray = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        if not np.all(grid > 0):
            raise SamplingError("importance map entries must all be positive")
        self.grid = grid
        flat = grid.ravel()
        self.cdf = np.cumsum(flat) / flat.sum()


def build_importance_map(
    params: FieldParams,
    frame: PlaneFrame,
    field_cfg: FieldConfig,
    cfg: SamplerConfig,
    weight_volume: Volume,
    epoch: int = 0,
) -> ImportanceMap:
    """Push a coarse plane grid through the current field and read the weight
    volume at the deformed positions; off-volume cells get the floor weight."""
    nu, nv = cfg.map_resolution
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    u = np.column_stack([(iu.ravel() + 0.5) / nu, (iv.ravel() + 0.5) / nv])
    x = lift(frame, u)
    xh = x + np.asarray(forward(params, x, frame, field_cfg), dtype=np.float64)
    vals = sample_trilinear(weight_volume, xh, background=importance_floor(cfg.alpha, cfg.beta))
    return ImportanceMap(grid=vals.reshape(nu, nv), epoch_built=epoch)


def sample_points(imap: ImportanceMap | None, n: int, rng: np.random.Generator) -> np.ndarray:
    """n plane points in [0,1]^2: uniform when imap is None, else cell-weighted
    with uniform jitter inside the chosen cell."""
    if n < 1:
        raise SamplingError("need n >= 1 sample points")
    if imap is None:
        return rng.random((n, 2))
    nu, nv = imap.grid.shape
    cells = np.searchsorted(imap.cdf, rng.random(n), side="right")
    cells = np.minimum(cells, imap.cdf.size - 1)
    iu, iv = np.divmod(cells, nv)
    jitter = rng.random((n, 2))
    return np.column_stack([(iu + jitter[:, 0]) / nu, (iv + jitter[:, 1]) / nv])


def make_pairs(
    points: np.ndarray,
    frame: PlaneFrame,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> PairBatch:
    """Attach a partner to each point: random direction, random physical
    distance in [delta_min, delta_max] mm, converted to plane coordinates.

    Partners escaping the padded unit square are redrawn a bounded number of
    times, then clamped; pair_mm always stores the realized plane distance.
    """
    u1 = np.asarray(points, dtype=np.float64)
    scale = plane_scale(frame)
    u2 = _draw_partners(u1, scale, cfg, rng)
    lo, hi = -_PAIR_MARGIN, 1.0 + _PAIR_MARGIN
    for _ in range(_PAIR_ATTEMPTS):
        bad = np.any((u2 < lo) | (u2 > hi), axis=1)
        if not bad.any():
            break
        u2[bad] = _draw_partners(u1[bad], scale, cfg, rng)
    np.clip(u2, lo, hi, out=u2)
    pair_mm = np.sqrt((((u2 - u1) * scale) ** 2).sum(axis=1))
    return PairBatch(u1=u1, u2=u2, pair_mm=pair_mm)


def _draw_partners(u1, scale, cfg, rng):
    n = u1.shape[0]
    theta = rng.random(n) * (2.0 * np.pi)
    delta = cfg.delta_min + rng.random(n) * (cfg.delta_max - cfg.delta_min)
    offset_mm = delta[:, None] * np.column_stack([np.cos(theta), np.sin(theta)])
    return u1 + offset_mm / scale
