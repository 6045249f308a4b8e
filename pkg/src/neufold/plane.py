"""PCA plane initialization: the linear 2D -> 3D lift the neural field deforms.

The unit square u in [0,1]^2 is centered at (0.5, 0.5) and scaled per principal
axis, so u = (0.5, 0.5) maps to the target centroid and the plane spans
``margin_factor`` times the target extent along each principal direction.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class TargetSet:
    """Unordered 3D target points, mm. Construction order is preserved
    (phantom generators emit curve order, which segment dropping relies on)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"target points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise GeometryError("target set is empty")
        if not np.isfinite(pts).all():
            raise GeometryError("target points contain non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


def load_targets_csv(path) -> TargetSet:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["x_mm", "y_mm", "z_mm"]:
            raise GeometryError(f"{path}:1: expected header 'x_mm,y_mm,z_mm'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise GeometryError(f"{path}:{lineno}: {exc}") from exc
            if len(row) != 3:
                raise GeometryError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
    if not rows:
        raise GeometryError(f"{path}: no target points")
    return TargetSet(np.array(rows))


def save_targets_csv(targets: TargetSet, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x_mm", "y_mm", "z_mm"])
    for p in targets.points:
        writer.writerow([repr(float(v)) for v in p])
    Path(path).write_text(buf.getvalue())


@dataclass(frozen=True)
class PlaneFrame:
    """PCA-derived 2D -> 3D map plus the embedding normalization constant.

    basis columns are the three principal directions (unit, orthogonal); the
    first two span the plane. h_mm scales the centered unit square per
    principal axis, so lift(u) = basis[:, :2] @ (h_mm[:2] * (u - 0.5)) + t_mean.
    """

    basis: np.ndarray
    h_mm: np.ndarray
    t_mean: np.ndarray
    c: float
    margin_factor: float = 2.0
    degenerate_axis: bool = False

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=np.float64).reshape(3, 3)
        h = np.asarray(self.h_mm, dtype=np.float64).reshape(3)
        t = np.asarray(self.t_mean, dtype=np.float64).reshape(3)
        if np.abs(basis.T @ basis - np.eye(3)).max() > 1e-10:
            raise GeometryError("plane basis is not orthonormal")
        if not np.all(h > 0):
            raise GeometryError(f"plane scaling must be positive, got {h}")
        if not self.c > 0:
            raise GeometryError(f"normalization constant must be positive, got {self.c}")
        basis.setflags(write=False)
        h.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "h_mm", h)
        object.__setattr__(self, "t_mean", t)

    @property
    def A(self) -> np.ndarray:
        """The 3x2 plane-spanning map (first two principal directions)."""
        return self.basis[:, :2]

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "normal": self.basis[:, 2].tolist(),
            "h_mm": self.h_mm.tolist(),
            "t_mean": self.t_mean.tolist(),
            "c": self.c,
            "margin_factor": self.margin_factor,
            "degenerate_axis": self.degenerate_axis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlaneFrame":
        A = np.asarray(d["A"], dtype=np.float64)
        normal = np.asarray(d["normal"], dtype=np.float64)
        basis = np.column_stack([A, normal])
        return cls(
            basis=basis,
            h_mm=d["h_mm"],
            t_mean=d["t_mean"],
            c=float(d["c"]),
            margin_factor=float(d.get("margin_factor", 2.0)),
            degenerate_axis=bool(d.get("degenerate_axis", False)),
        )


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    """Deterministic sign: the largest-magnitude component is positive."""
    i = int(np.argmax(np.abs(vec)))
    return -vec if vec[i] < 0 else vec


def fit_plane_frame(
    targets, margin_factor: float = 2.0, c: float | None = None
) -> PlaneFrame:
    """PCA plane through the targets.

    Axis extents are measured along the principal directions and scaled by
    ``margin_factor``; c defaults to half the larger plane side. Collinear
    targets get a canonical orthogonal second axis plus a degenerate flag.
    """
    pts = targets.points if isinstance(targets, TargetSet) else TargetSet(targets).points
    n = pts.shape[0]
    if n < 3:
        raise GeometryError(f"plane fit needs at least 3 target points, got {n}")
    if margin_factor <= 0:
        raise GeometryError("margin_factor must be positive")

    t_mean = pts.mean(axis=0)
    centered = pts - t_mean
    cov = centered.T @ centered / n
    evals, evecs = np.linalg.eigh(cov)  # ascending
    order = [2, 1, 0]
    evals = evals[order]
    evecs = evecs[:, order]

    if evals[0] <= 1e-18 * max(1.0, float(np.abs(pts).max()) ** 2):
        raise GeometryError("degenerate target: all points coincide")

    d1 = _fix_sign(evecs[:, 0])
    degenerate = evals[1] < 1e-9 * evals[0]
    if degenerate:
        # collinear: take the smallest-index canonical axis, rejected against d1
        for axis in np.eye(3):
            cand = axis - (axis @ d1) * d1
            norm = np.linalg.norm(cand)
            if norm > 1e-6:
                d2 = _fix_sign(cand / norm)
                break
    else:
        d2 = evecs[:, 1]
        d2 = _fix_sign(d2 - (d2 @ d1) * d1)
        d2 /= np.linalg.norm(d2)
    d3 = np.cross(d1, d2)
    d3 = _fix_sign(d3 / np.linalg.norm(d3))
    basis = np.column_stack([d1, d2, d3])

    proj = centered @ basis
    extents = proj.max(axis=0) - proj.min(axis=0)
    # degenerate axes (collinear or planar targets) widen to the dominant extent
    h = margin_factor * np.where(extents > 1e-12, extents, extents[0])
    h[2] = max(h[2], 1e-9)
    if c is None:
        c = max(h[0], h[1]) / 2.0
    return PlaneFrame(
        basis=basis,
        h_mm=h,
        t_mean=t_mean,
        c=float(c),
        margin_factor=float(margin_factor),
        degenerate_axis=bool(degenerate),
    )


def lift(frame: PlaneFrame, u):
    """Map normalized plane coordinates to world mm; linear, extrapolates freely.

    Accepts a single (2,) point or an (M, 2) batch.
    """
    u_arr = np.asarray(u, dtype=np.float64)
    single = u_arr.ndim == 1
    u_arr = np.atleast_2d(u_arr)
    scaled = (u_arr - 0.5) * frame.h_mm[:2]
    world = scaled @ frame.A.T + frame.t_mean
    return world[0] if single else world


def plane_scale(frame: PlaneFrame) -> np.ndarray:
    """Physical (width, height) in mm of the u in [0,1]^2 plane domain."""
    return np.array(
        [
            np.linalg.norm(frame.A[:, 0] * frame.h_mm[0]),
            np.linalg.norm(frame.A[:, 1] * frame.h_mm[1]),
        ]
    )
