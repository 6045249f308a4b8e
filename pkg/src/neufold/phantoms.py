"""Synthetic tubular-structure volumes with analytic centerline annotations.

Each phantom is a parametric space curve rasterized as a Gaussian-profile tube
into a scalar volume, plus the curve samples as the target point set. The
Gaussian profile (sigma = tube_radius / 2) leaves a graded intensity
neighborhood around the tube, which intensity-based losses rely on. Distances
to the curve are defined against a dense polyline sampling at arc steps of at
most a quarter voxel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .plane import TargetSet, save_targets_csv
from .volume import Volume, save_volume

PHANTOM_KINDS = ("planar_sine", "helix", "bifurcation_y", "ring", "organ_ellipsoid")


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    kind: str = "helix"
    dims: tuple[int, int, int] = (128, 128, 128)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tube_radius_mm: float = 2.0
    tube_intensity: float = 300.0
    background: float = 0.0
    noise_sigma: float = 0.0
    centerline_samples: int = 300
    seed: int = 0
    # helix shape knobs (ignored by the other kinds)
    helix_radius_mm: float = 20.0
    helix_pitch_mm: float = 40.0
    helix_turns: float = 1.5

    def __post_init__(self):
        if self.kind not in PHANTOM_KINDS:
            raise PhantomError(f"unknown phantom kind {self.kind!r}")
        if self.tube_radius_mm < max(self.spacing_mm):
            raise PhantomError("tube radius must be at least one voxel")
        if self.centerline_samples < 50:
            raise PhantomError("need at least 50 centerline samples")


def _volume_center(spec: PhantomSpec) -> np.ndarray:
    """Central voxel center (curves anchored here hit voxel centers exactly)."""
    return np.rint((np.array(spec.dims) - 1) / 2.0) * np.array(spec.spacing_mm)


def _curve_points(spec: PhantomSpec, t: np.ndarray) -> np.ndarray:
    """Evaluate the phantom centerline at parameters t in [0, 1], world mm."""
    c = _volume_center(spec)
    if spec.kind == "planar_sine":
        x = c[0] - 50.0 + 100.0 * t
        y = c[1] + 18.0 * np.sin(2.0 * np.pi * 1.25 * t)
        z = np.full_like(t, c[2])
        return np.column_stack([x, y, z])
    if spec.kind == "helix":
        theta = 2.0 * np.pi * spec.helix_turns * t
        span = spec.helix_pitch_mm * spec.helix_turns
        x = c[0] + spec.helix_radius_mm * np.cos(theta)
        y = c[1] + spec.helix_radius_mm * np.sin(theta)
        z = c[2] - span / 2.0 + span * t
        return np.column_stack([x, y, z])
    if spec.kind == "bifurcation_y":
        # stem for t < 1/3, then the two branches, in construction order
        pts = np.empty((t.size, 3))
        stem_a = c + np.array([-40.0, 0.0, -6.0])
        junction = c
        tip1 = c + np.array([40.0, 22.0, 10.0])
        tip2 = c + np.array([40.0, -22.0, -2.0])
        seg = np.minimum((t * 3).astype(int), 2)
        local = t * 3 - seg
        for s, (a, b) in enumerate([(stem_a, junction), (junction, tip1), (junction, tip2)]):
            m = seg == s
            pts[m] = a + local[m, None] * (b - a)
        return pts
    if spec.kind == "ring":
        e1 = np.array([1.0, 0.0, 0.0])
        e2 = np.array([0.0, np.cos(np.pi / 6), np.sin(np.pi / 6)])
        theta = 2.0 * np.pi * t
        return c + 28.0 * (np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2))
    if spec.kind == "organ_ellipsoid":
        x = c[0] - 40.0 + 80.0 * t
        y = c[1] + 10.0 * np.sin(np.pi * t)
        z = np.full_like(t, c[2])
        return np.column_stack([x, y, z])
    raise PhantomError(spec.kind)


def _target_params(spec: PhantomSpec) -> np.ndarray:
    n = spec.centerline_samples
    if spec.kind == "ring":
        return np.arange(n) / n  # closed curve: no duplicate endpoint
    return np.linspace(0.0, 1.0, n)


def _dense_curve(spec: PhantomSpec) -> np.ndarray:
    coarse = _curve_points(spec, np.linspace(0.0, 1.0, 512))
    length = np.linalg.norm(np.diff(coarse, axis=0), axis=1).sum()
    step = min(spec.spacing_mm) / 4.0
    n = max(int(np.ceil(length / step)) + 1, 1024)
    return _curve_points(spec, np.linspace(0.0, 1.0, n))


def _ellipsoid(spec: PhantomSpec):
    c = _volume_center(spec)
    center = c + np.array([0.0, 0.0, 12.0])
    semi = np.array([30.0, 20.0, 14.0])
    return center, semi


def generate(spec: PhantomSpec):
    """Build (intensity volume, targets, mask-or-None) for the spec.

    The mask is only emitted by the organ_ellipsoid kind.
    """
    spacing = np.asarray(spec.spacing_mm, dtype=np.float64)
    origin = np.zeros(3)
    dims = tuple(int(n) for n in spec.dims)
    hull_max = origin + (np.array(dims) - 1) * spacing

    dense = _dense_curve(spec)
    margin = 2.0 * spec.tube_radius_mm
    if np.any(dense < origin + margin) or np.any(dense > hull_max - margin):
        raise PhantomError(
            f"{spec.kind} centerline leaves the volume (needs {margin} mm margin)"
        )
    targets = TargetSet(_curve_points(spec, _target_params(spec)))

    grid = np.stack(
        np.meshgrid(
            origin[0] + spacing[0] * np.arange(dims[0]),
            origin[1] + spacing[1] * np.arange(dims[1]),
            origin[2] + spacing[2] * np.arange(dims[2]),
            indexing="ij",
        ),
        axis=-1,
    ).reshape(-1, 3)
    dist, _ = cKDTree(dense).query(grid, k=1)
    sigma = spec.tube_radius_mm / 2.0
    data = spec.background + (spec.tube_intensity - spec.background) * np.exp(
        -(dist**2) / (2.0 * sigma**2)
    )
    data = data.reshape(dims)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.normal(0.0, spec.noise_sigma, size=dims)
    volume = Volume(data, spacing, origin, kind="intensity")

    mask = None
    if spec.kind == "organ_ellipsoid":
        center, semi = _ellipsoid(spec)
        inside = ((grid - center) / semi) ** 2
        mask = Volume(
            (inside.sum(axis=1) <= 1.0).astype(np.float64).reshape(dims),
            spacing,
            origin,
            kind="mask",
        )
    return volume, targets, mask


def drop_segment(targets: TargetSet, fraction: float, rng: np.random.Generator):
    """Remove one contiguous run (in construction order) of ~fraction*N points.

    Returns (kept, removed) as TargetSets; their union is the input.
    """
    if not 0.0 < fraction < 1.0:
        raise PhantomError("drop fraction must be in (0, 1)")
    n = len(targets)
    n_remove = int(round(fraction * n))
    n_remove = min(max(n_remove, 1), n - 1)
    start = int(rng.integers(0, n - n_remove + 1))
    sel = np.zeros(n, dtype=bool)
    sel[start : start + n_remove] = True
    return TargetSet(targets.points[~sel]), TargetSet(targets.points[sel])


def write_phantom(spec: PhantomSpec, out_dir) -> dict:
    """Generate and persist a phantom; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    volume, targets, mask = generate(spec)
    save_volume(volume, out / "volume.json")
    save_targets_csv(targets, out / "targets.csv")
    files = {"volume": "volume.json", "targets": "targets.csv"}
    if mask is not None:
        save_volume(mask, out / "mask.json")
        files["mask"] = "mask.json"
    manifest = {"spec": asdict(spec), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
