"""Volumetric scalar grids: trilinear sampling, rasterization, distance transforms.

Voxel-to-world convention (used everywhere in this package): voxel centers sit
at ``world = origin_mm + index * spacing_mm``, so index ``(0, 0, 0)`` is the
world point ``origin_mm`` and the voxel-center hull spans
``[origin, origin + (dims - 1) * spacing]`` along each axis.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dep, guard for docs builds
    njit = None

VOLUME_KINDS = ("intensity", "mask", "weight")

# Stand-in for +inf inside the distance transform. Real squared distances in mm
# never exceed ~1e9, so envelope decisions against this value are unambiguous,
# while inf itself would produce nan in the parabola intersections.
_EDT_BIG = 1e30


class VolumeError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    """A scalar field on a regular 3D lattice.

    data is indexed ``data[ix, iy, iz]`` and held in float64; ``kind`` tags the
    interpretation (raw intensities, a {0,1} mask, or nonnegative weights).
    """

    data: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray
    kind: str = "intensity"

    def __post_init__(self):
        data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        spacing = np.asarray(self.spacing_mm, dtype=np.float64).reshape(3)
        origin = np.asarray(self.origin_mm, dtype=np.float64).reshape(3)
        if data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {data.shape}")
        if any(n < 2 for n in data.shape):
            raise VolumeError(f"volume dims must all be >= 2, got {data.shape}")
        if not np.all(spacing > 0):
            raise VolumeError(f"spacing_mm must be positive, got {spacing}")
        if self.kind not in VOLUME_KINDS:
            raise VolumeError(f"unknown volume kind {self.kind!r}")
        if self.kind == "mask":
            vals = np.unique(data)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise VolumeError("mask volume must contain only values in {0, 1}")
        for arr in (data, spacing, origin):
            arr.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def hull_min(self) -> np.ndarray:
        """World position of the first voxel center."""
        return self.origin_mm

    @property
    def hull_max(self) -> np.ndarray:
        """World position of the last voxel center."""
        return self.origin_mm + (np.array(self.dims) - 1) * self.spacing_mm


def _as_points(points) -> tuple[np.ndarray, bool]:
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    return np.atleast_2d(pts), single


def sample_trilinear(vol: Volume, points, background: float = 0.0):
    """Trilinear interpolation of ``vol`` at world points (mm).

    Points outside the voxel-center hull return ``background`` (hard switch,
    no blending). Accepts a single (3,) point or an (M, 3) batch.
    """
    pts, single = _as_points(points)
    g = (pts - vol.origin_mm) / vol.spacing_mm
    dims = np.array(vol.dims)
    with np.errstate(invalid="ignore"):
        inside = np.all((g >= 0.0) & (g <= dims - 1), axis=1)
    g = np.where(np.isfinite(g), g, 0.0)
    i0 = np.clip(np.floor(g).astype(np.intp), 0, dims - 2)
    f = np.clip(g - i0, 0.0, 1.0)
    vals = _gather_trilinear(vol.data, i0, f)
    out = np.where(inside, vals, background)
    return float(out[0]) if single else out


def _gather_trilinear(data, i0, f):
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    return (
        data[ix, iy, iz] * gx * gy * gz
        + data[ix + 1, iy, iz] * fx * gy * gz
        + data[ix, iy + 1, iz] * gx * fy * gz
        + data[ix, iy, iz + 1] * gx * gy * fz
        + data[ix + 1, iy + 1, iz] * fx * fy * gz
        + data[ix + 1, iy, iz + 1] * fx * gy * fz
        + data[ix, iy + 1, iz + 1] * gx * fy * fz
        + data[ix + 1, iy + 1, iz + 1] * fx * fy * fz
    )


def sample_gradient(vol: Volume, points):
    """Analytic spatial gradient of the trilinear interpolant, value/mm.

    Zero for points outside the voxel-center hull. On interior cell faces the
    gradient of the floor-side cell is returned.
    """
    pts, single = _as_points(points)
    g = (pts - vol.origin_mm) / vol.spacing_mm
    dims = np.array(vol.dims)
    with np.errstate(invalid="ignore"):
        inside = np.all((g >= 0.0) & (g <= dims - 1), axis=1)
    g = np.where(np.isfinite(g), g, 0.0)
    i0 = np.clip(np.floor(g).astype(np.intp), 0, dims - 2)
    f = np.clip(g - i0, 0.0, 1.0)

    d = vol.data
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    c000 = d[ix, iy, iz]
    c100 = d[ix + 1, iy, iz]
    c010 = d[ix, iy + 1, iz]
    c001 = d[ix, iy, iz + 1]
    c110 = d[ix + 1, iy + 1, iz]
    c101 = d[ix + 1, iy, iz + 1]
    c011 = d[ix, iy + 1, iz + 1]
    c111 = d[ix + 1, iy + 1, iz + 1]

    dx = (
        (c100 - c000) * gy * gz
        + (c110 - c010) * fy * gz
        + (c101 - c001) * gy * fz
        + (c111 - c011) * fy * fz
    )
    dy = (
        (c010 - c000) * gx * gz
        + (c110 - c100) * fx * gz
        + (c011 - c001) * gx * fz
        + (c111 - c101) * fx * fz
    )
    dz = (
        (c001 - c000) * gx * gy
        + (c101 - c100) * fx * gy
        + (c011 - c010) * gx * fy
        + (c111 - c110) * fx * fy
    )
    grad = np.stack([dx, dy, dz], axis=1) / vol.spacing_mm
    grad[~inside] = 0.0
    return grad[0] if single else grad


def rasterize_points(points, dims, spacing_mm, origin_mm) -> Volume:
    """Mark the voxel whose center is nearest to each point; returns a mask volume."""
    pts, _ = _as_points(points)
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    origin = np.asarray(origin_mm, dtype=np.float64)
    dims = tuple(int(n) for n in dims)
    idx = np.rint((pts - origin) / spacing).astype(np.intp)
    bad = np.any((idx < 0) | (idx >= np.array(dims)), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise VolumeError(f"target point {pts[i].tolist()} mm falls outside the grid")
    data = np.zeros(dims, dtype=np.float64)
    data[idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return Volume(data, spacing, origin, kind="mask")


def _edt_rows_py(f, s2):
    """Exact 1D squared-distance transform (lower envelope of parabolas),
    applied independently to each row of ``f``; parabola spacing ``sqrt(s2)``."""
    rows, n = f.shape
    out = np.empty_like(f)
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    for r in range(rows):
        k = 0
        v[0] = 0
        z[0] = -1e308
        z[1] = 1e308
        for q in range(1, n):
            fq = f[r, q]
            s = ((fq - f[r, v[k]]) / s2 + (q + v[k]) * (q - v[k])) / (2.0 * (q - v[k]))
            while s <= z[k]:
                k -= 1
                s = ((fq - f[r, v[k]]) / s2 + (q + v[k]) * (q - v[k])) / (2.0 * (q - v[k]))
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = 1e308
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            dq = q - v[k]
            out[r, q] = dq * dq * s2 + f[r, v[k]]
    return out


if njit is not None:
    _edt_rows = njit(cache=True)(_edt_rows_py)
else:  # pragma: no cover
    _edt_rows = _edt_rows_py


def edt(mask: Volume) -> Volume:
    """Exact Euclidean distance transform of a mask, in mm.

    Every voxel receives the distance to the nearest foreground voxel center,
    with anisotropic spacing respected. Separable lower-envelope algorithm, so
    the result equals a brute-force nearest-foreground scan exactly.
    """
    fg = mask.data > 0.5
    if not fg.any():
        raise VolumeError("distance transform needs at least one foreground voxel")
    d2 = np.where(fg, 0.0, _EDT_BIG)
    for axis in range(3):
        moved = np.moveaxis(d2, axis, -1)
        shape = moved.shape
        rows = np.ascontiguousarray(moved.reshape(-1, shape[-1]))
        s = float(mask.spacing_mm[axis])
        rows = _edt_rows(rows, s * s)
        d2 = np.moveaxis(rows.reshape(shape), -1, axis)
    return Volume(np.sqrt(d2), mask.spacing_mm, mask.origin_mm, kind="weight")


def importance_volume(dist: Volume, alpha: float, beta: float) -> Volume:
    """Distance-derived importance weights: 1 on the target, beta/(alpha+beta) beyond alpha."""
    if alpha <= 0:
        raise VolumeError("alpha must be > 0")
    if beta < 0:
        raise VolumeError("beta must be >= 0")
    w = (np.abs(np.minimum(dist.data - alpha, 0.0)) + beta) / (alpha + beta)
    return Volume(w, dist.spacing_mm, dist.origin_mm, kind="weight")


def importance_floor(alpha: float, beta: float) -> float:
    """Weight assigned at or beyond the clip distance alpha."""
    return beta / (alpha + beta)


def save_volume(vol: Volume, json_path) -> None:
    """Write the JSON sidecar + raw little-endian f32 file (x-fastest order)."""
    json_path = Path(json_path)
    raw_name = json_path.stem + ".raw"
    # data[i,j,k] with i fastest on disk == Fortran order of the (nx,ny,nz) array
    raw = np.asfortranarray(vol.data.astype("<f4"))
    (json_path.parent / raw_name).write_bytes(raw.tobytes(order="F"))
    sidecar = {
        "dims": list(vol.dims),
        "spacing_mm": vol.spacing_mm.tolist(),
        "origin_mm": vol.origin_mm.tolist(),
        "dtype": "f32le",
        "data": raw_name,
    }
    json_path.write_text(json.dumps(sidecar, indent=2) + "\n")


def load_volume(json_path, kind: str = "intensity") -> Volume:
    """Load a JSON-sidecar volume; converts to float64 internally."""
    json_path = Path(json_path)
    try:
        sidecar = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeError(f"cannot read volume sidecar {json_path}: {exc}") from exc
    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "data"):
        if key not in sidecar:
            raise VolumeError(f"{json_path}: sidecar missing key {key!r}")
    if sidecar["dtype"] != "f32le":
        raise VolumeError(f"{json_path}: unsupported dtype {sidecar['dtype']!r}")
    dims = tuple(int(n) for n in sidecar["dims"])
    raw_path = json_path.parent / sidecar["data"]
    raw = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise VolumeError(
            f"{raw_path}: expected {int(np.prod(dims))} samples, found {raw.size}"
        )
    data = raw.reshape(dims, order="F").astype(np.float64)
    return Volume(data, sidecar["spacing_mm"], sidecar["origin_mm"], kind=kind)
