"""Inference: evaluate the fitted field on a pixel grid, read out the volume,
and compute distortion / distance-to-target statistics.

Pixel layout: image row j follows the plane's v axis, column i the u axis.
Pixel centers sit at ((i + 0.5) * delta, (j + 0.5) * delta) in plane-physical
mm, so direct neighbors are exactly delta apart and the grid covers the whole
unit square (ceil sizing may extend marginally beyond it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .field import FieldConfig, FieldParams, forward
from .plane import PlaneFrame, lift, plane_scale
from .volume import Volume, sample_trilinear


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    pixel_spacing_mm: float = 0.5
    window: tuple[float, float] = (0.0, 500.0)
    emit_coordinate_map: bool = True
    emit_distortion_map: bool = True

    def __post_init__(self):
        if self.pixel_spacing_mm <= 0:
            raise RenderError("pixel spacing must be positive")
        if not self.window[0] < self.window[1]:
            raise RenderError("window low must be below window high")


@dataclass
class MetricsRecord:
    distortion_max: float | None = None
    distortion_mean: float | None = None
    distortion_median: float | None = None
    distortion_std_dev: float | None = None
    distance_mean: float | None = None
    distance_median: float | None = None
    distance_std_dev: float | None = None
    relevant_pixel_count: int | None = None
    mask_coverage_cm2: float | None = None

    def to_dict(self) -> dict:
        d = {
            "distortion_max": self.distortion_max,
            "distortion_mean": self.distortion_mean,
            "distortion_median": self.distortion_median,
            "distortion_std_dev": self.distortion_std_dev,
            "distance_mean": self.distance_mean,
            "distance_median": self.distance_median,
            "distance_std_dev": self.distance_std_dev,
            "relevant_pixel_count": self.relevant_pixel_count,
        }
        if self.mask_coverage_cm2 is not None:
            d["mask_coverage_cm2"] = self.mask_coverage_cm2
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass
class UnfoldResult:
    width: int
    height: int
    pixel_spacing_mm: float
    intensity: np.ndarray  # (H, W)
    coords: np.ndarray  # (H, W, 3) world mm
    distortion: np.ndarray | None = None  # (H, W) max |d| over incident pairs
    metrics: MetricsRecord | None = None


def render(
    params: FieldParams,
    frame: PlaneFrame,
    volume: Volume,
    cfg: RenderConfig = RenderConfig(),
    field_cfg: FieldConfig | None = None,
) -> UnfoldResult:
    """Deform the pixel grid and read out the volume."""
    if field_cfg is None:
        field_cfg = FieldConfig(c=frame.c)
    delta = cfg.pixel_spacing_mm
    scale = plane_scale(frame)
    width = int(np.ceil(scale[0] / delta))
    height = int(np.ceil(scale[1] / delta))
    cols, rows = np.meshgrid(np.arange(width), np.arange(height), indexing="xy")
    u = np.column_stack(
        [
            (cols.ravel() + 0.5) * delta / scale[0],
            (rows.ravel() + 0.5) * delta / scale[1],
        ]
    )
    x = lift(frame, u)
    xh = x + np.asarray(forward(params, x, frame, field_cfg), dtype=np.float64)
    coords = xh.reshape(height, width, 3)
    intensity = sample_trilinear(volume, xh).reshape(height, width)
    result = UnfoldResult(
        width=width,
        height=height,
        pixel_spacing_mm=delta,
        intensity=intensity,
        coords=coords,
    )
    if cfg.emit_distortion_map:
        result.distortion = distortion_map(coords, delta)
    return result


def neighbor_distortions(coords: np.ndarray, delta: float):
    """Signed distortion d = |xh_i - xh_j| - delta for horizontal and vertical
    neighbor pairs; d > 0 is contraction of the image relative to 3D."""
    horiz = np.linalg.norm(coords[:, 1:] - coords[:, :-1], axis=2) - delta
    vert = np.linalg.norm(coords[1:, :] - coords[:-1, :], axis=2) - delta
    return horiz, vert


def distortion_map(coords: np.ndarray, delta: float) -> np.ndarray:
    """Per-pixel max |d| over the pixel's incident neighbor pairs."""
    horiz, vert = neighbor_distortions(coords, delta)
    out = np.zeros(coords.shape[:2])
    ah, av = np.abs(horiz), np.abs(vert)
    np.maximum(out[:, 1:], ah, out=out[:, 1:])
    np.maximum(out[:, :-1], ah, out=out[:, :-1])
    np.maximum(out[1:, :], av, out=out[1:, :])
    np.maximum(out[:-1, :], av, out=out[:-1, :])
    return out


def distortion_stats(
    result: UnfoldResult, targets: np.ndarray, radius_mm: float = 10.0
) -> MetricsRecord:
    """|d| statistics restricted to neighbor pairs with either endpoint within
    radius_mm of the nearest target; also fills result.distortion/metrics."""
    coords = result.coords
    delta = result.pixel_spacing_mm
    horiz, vert = neighbor_distortions(coords, delta)
    pix_dist = _pixel_target_distances(coords, targets)
    near = pix_dist <= radius_mm
    relevant_count = int(near.sum())
    if relevant_count == 0:
        raise RenderError("target not covered: no rendered point within the relevant area")
    keep_h = near[:, 1:] | near[:, :-1]
    keep_v = near[1:, :] | near[:-1, :]
    vals = np.concatenate([np.abs(horiz[keep_h]), np.abs(vert[keep_v])])
    rec = result.metrics if result.metrics is not None else MetricsRecord()
    rec.distortion_max = float(vals.max())
    rec.distortion_mean = float(vals.mean())
    rec.distortion_median = float(np.median(vals))
    rec.distortion_std_dev = float(vals.std())
    rec.relevant_pixel_count = relevant_count
    result.metrics = rec
    if result.distortion is None:
        result.distortion = distortion_map(coords, delta)
    return rec


def _pixel_target_distances(coords: np.ndarray, targets: np.ndarray) -> np.ndarray:
    tree = cKDTree(np.asarray(targets, dtype=np.float64))
    d, _ = tree.query(coords.reshape(-1, 3), k=1)
    return d.reshape(coords.shape[:2])


def distance_stats(result: UnfoldResult, targets: np.ndarray) -> MetricsRecord:
    """Distance from every target to its nearest rendered readout coordinate."""
    d = target_distances(result.coords, targets)
    rec = result.metrics if result.metrics is not None else MetricsRecord()
    rec.distance_mean = float(d.mean())
    rec.distance_median = float(np.median(d))
    rec.distance_std_dev = float(d.std())
    result.metrics = rec
    return rec


def target_distances(coords: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-target distance to the nearest rendered coordinate, mm."""
    tree = cKDTree(coords.reshape(-1, 3))
    d, _ = tree.query(np.asarray(targets, dtype=np.float64), k=1)
    return np.asarray(d, dtype=np.float64)


def mask_coverage(result: UnfoldResult, mask: Volume) -> float:
    """Unfolded-image area reading inside the mask, cm^2."""
    if mask.kind != "mask":
        raise RenderError("coverage needs a mask volume")
    vals = sample_trilinear(mask, result.coords.reshape(-1, 3))
    count = int((vals >= 0.5).sum())
    return count * result.pixel_spacing_mm**2 / 100.0


def compute_metrics(
    result: UnfoldResult,
    targets: np.ndarray,
    radius_mm: float = 10.0,
    mask: Volume | None = None,
) -> MetricsRecord:
    """Full metrics record for a rendered unfolding."""
    distortion_stats(result, targets, radius_mm)
    distance_stats(result, targets)
    if mask is not None:
        result.metrics.mask_coverage_cm2 = mask_coverage(result, mask)
    return result.metrics


def window_to_uint16(intensity: np.ndarray, window: tuple[float, float]) -> np.ndarray:
    """Linear windowing to a 16-bit range, rounding half-up."""
    lo, hi = window
    norm = np.clip((intensity - lo) / (hi - lo), 0.0, 1.0)
    return np.floor(norm * 65535.0 + 0.5).astype(np.uint16)


def save_pgm(path, gray16: np.ndarray) -> None:
    """Binary 16-bit PGM (P5, big-endian samples)."""
    h, w = gray16.shape
    header = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + gray16.astype(">u2").tobytes())


def _save_raw_f32(path_base: Path, arr: np.ndarray, role: str, dims, extra=None) -> None:
    raw_path = path_base.with_suffix(".raw")
    raw_path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    sidecar = {"dims": list(dims), "role": role}
    if extra:
        sidecar.update(extra)
    path_base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def save_unfold_result(result: UnfoldResult, out_dir, cfg: RenderConfig) -> dict:
    """Persist the rendered image set; returns the file manifest.

    Raw maps are little-endian f32, row-major from (H, W[, 3]) arrays, i.e.
    x (column) fastest, channel innermost for the coordinate map.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    gray = window_to_uint16(result.intensity, cfg.window)
    save_pgm(out / "unfolded.pgm", gray)
    files["image_pgm"] = "unfolded.pgm"
    _save_raw_f32(
        out / "intensity", result.intensity, "intensity", (result.width, result.height)
    )
    files["intensity"] = "intensity.raw"
    if cfg.emit_coordinate_map:
        _save_raw_f32(
            out / "coords",
            result.coords,
            "coords",
            (result.width, result.height),
            extra={"channels": 3, "layout": "row-major, channel-last"},
        )
        files["coords"] = "coords.raw"
    if cfg.emit_distortion_map and result.distortion is not None:
        _save_raw_f32(
            out / "distortion",
            result.distortion,
            "distortion",
            (result.width, result.height),
        )
        files["distortion"] = "distortion.raw"
    return files


def load_raw_map(json_path) -> np.ndarray:
    """Inverse of the raw-f32 export; returns (H, W) or (H, W, 3)."""
    json_path = Path(json_path)
    sidecar = json.loads(json_path.read_text())
    w, h = sidecar["dims"]
    channels = sidecar.get("channels", 1)
    raw = np.frombuffer(json_path.with_suffix(".raw").read_bytes(), dtype="<f4")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return raw.reshape(shape).astype(np.float64)
