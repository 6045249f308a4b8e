"""Loss terms and their gradients with respect to the deformed sample points.

All losses are pure functions of numpy arrays: they return the scalar value
plus dL/d(deformed point) so the caller can chain into the field's backward
pass. Gradients use the same dtype as the inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from . import field as nf
from .volume import Volume, sample_gradient, sample_trilinear

# below this many target x sample distances, a full distance matrix is cheaper
# than a KD-tree and guarantees the smallest-index tie rule exactly
_BRUTE_FORCE_LIMIT = 2_000_000

_COINCIDENT_EPS = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    w_t: float = 2.0
    w_d: float = 1.0
    w_im: float = 0.0

    def __post_init__(self):
        if min(self.w_t, self.w_d, self.w_im) < 0:
            raise LossError("loss weights must be nonnegative")
        if max(self.w_t, self.w_d, self.w_im) <= 0:
            raise LossError("at least one loss weight must be positive")


@dataclass
class PairBatch:
    """Jointly sampled point pairs: plane coordinates, their lifted and
    deformed world positions, the pair's physical 2D distance, and the
    per-pair importance weight (held fixed within an update step)."""

    u1: np.ndarray
    u2: np.ndarray
    pair_mm: np.ndarray
    x1: np.ndarray | None = None
    x2: np.ndarray | None = None
    xh1: np.ndarray | None = None
    xh2: np.ndarray | None = None
    w_s: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.u1)
        if not (len(self.u2) == len(self.pair_mm) == n):
            raise LossError("pair batch arrays disagree in length")
        if not np.all(np.asarray(self.pair_mm) > 0):
            raise LossError("pair distances must be positive")

    def __len__(self):
        return len(self.u1)


@dataclass
class ImageLossSpec:
    """Configuration of the optional image-based loss.

    sink mode rewards readout intensities near v_mean (double-sigmoid well,
    half-width l, slope k); mask_coverage mode rewards readout inside a binary
    mask (expected value y).
    """

    mode: str = "none"
    volume: Volume | None = None
    v_mean: float | None = None
    k: float = 0.06
    l: float = 200.0
    y: float = 1.0

    def __post_init__(self):
        if self.mode not in ("none", "sink", "mask_coverage"):
            raise LossError(f"unknown image loss mode {self.mode!r}")
        if self.mode == "sink":
            if self.volume is None or self.volume.kind == "mask":
                raise LossError("sink loss needs an intensity volume")
            if self.v_mean is None:
                raise LossError("sink loss needs v_mean")
        if self.mode == "mask_coverage":
            if self.volume is None:
                raise LossError("mask loss needs a mask volume")
            if self.volume.kind != "mask":
                raise LossError("mask loss volume must be a binary mask")


def nearest_sample_indices(targets: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Index of the nearest sample for every target (exact; ties at the
    brute-force size resolve to the smallest sample index)."""
    n, s = targets.shape[0], samples.shape[0]
    if n * s <= _BRUTE_FORCE_LIMIT:
        d2 = ((targets[:, None, :] - samples[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)
    tree = cKDTree(samples)
    _, idx = tree.query(targets, k=1)
    return np.asarray(idx, dtype=np.intp)


def target_loss(targets: np.ndarray, xh: np.ndarray):
    """Mean squared distance of each target to its closest deformed sample.

    Returns (value, dL/dxh, argmin indices); the gradient touches only each
    target's nearest sample.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if xh.shape[0] == 0:
        raise LossError("target loss needs a non-empty sample batch")
    idx = nearest_sample_indices(targets, np.asarray(xh, dtype=np.float64))
    diff = xh[idx].astype(np.float64) - targets
    value = float((diff**2).sum(axis=1).mean())
    grad = np.zeros_like(xh)
    scale = 2.0 / targets.shape[0]
    np.add.at(grad, idx, (scale * diff).astype(xh.dtype))
    return value, grad, idx


def distortion_loss(xh1, xh2, pair_mm, w_s=None):
    """Weighted squared deviation between 3D pair distance and plane distance.

    Returns (value, dL/dxh1, dL/dxh2). Coincident deformed points get a zero
    gradient direction.
    """
    diff = xh1 - xh2
    r = np.sqrt((diff**2).sum(axis=1))
    err = r - pair_mm
    if w_s is None:
        w_s = np.ones_like(r)
    s = r.shape[0]
    value = float((w_s * err**2).mean())
    safe_r = np.where(r > _COINCIDENT_EPS, r, 1.0)
    coef = np.where(r > _COINCIDENT_EPS, 2.0 * w_s * err / (s * safe_r), 0.0)
    g1 = coef[:, None] * diff
    return value, g1, -g1


def sink_weight(intensity, v_mean: float, k: float = 0.06, l: float = 200.0):
    """Double-sigmoid intensity well centered at v_mean (value and d/dI)."""
    a1 = k * (v_mean + l - intensity)
    a2 = k * (-v_mean + l + intensity)
    s1 = expit(-a1)
    s2 = expit(-a2)
    h = s1 + s2
    dh = k * (s1 * (1.0 - s1) - s2 * (1.0 - s2))
    return h, dh


def image_loss(spec: ImageLossSpec, xh: np.ndarray):
    """Image-based loss over deformed samples; returns (value, dL/dxh).

    Gradients chain through the trilinear readout, so samples outside the
    volume hull contribute the background value with zero gradient.
    """
    if spec.mode == "none":
        raise LossError("image loss called with mode 'none'")
    s = xh.shape[0]
    xh64 = np.asarray(xh, dtype=np.float64)
    vals = sample_trilinear(spec.volume, xh64)
    if spec.mode == "sink":
        h, dh = sink_weight(vals, spec.v_mean, spec.k, spec.l)
        value = float(h.mean())
        dval = dh / s
    else:
        value = float((spec.y - vals).mean())
        dval = np.full(s, -1.0 / s)
    grad = dval[:, None] * sample_gradient(spec.volume, xh64)
    return value, grad.astype(xh.dtype)


def _det3(j):
    return (
        j[:, 0, 0] * (j[:, 1, 1] * j[:, 2, 2] - j[:, 1, 2] * j[:, 2, 1])
        - j[:, 0, 1] * (j[:, 1, 0] * j[:, 2, 2] - j[:, 1, 2] * j[:, 2, 0])
        + j[:, 0, 2] * (j[:, 1, 0] * j[:, 2, 1] - j[:, 1, 1] * j[:, 2, 0])
    )


def _cofactor3(j):
    """d det(J) / dJ, per batch element."""
    c = np.empty_like(j)
    c[:, 0, 0] = j[:, 1, 1] * j[:, 2, 2] - j[:, 1, 2] * j[:, 2, 1]
    c[:, 0, 1] = j[:, 1, 2] * j[:, 2, 0] - j[:, 1, 0] * j[:, 2, 2]
    c[:, 0, 2] = j[:, 1, 0] * j[:, 2, 1] - j[:, 1, 1] * j[:, 2, 0]
    c[:, 1, 0] = j[:, 0, 2] * j[:, 2, 1] - j[:, 0, 1] * j[:, 2, 2]
    c[:, 1, 1] = j[:, 0, 0] * j[:, 2, 2] - j[:, 0, 2] * j[:, 2, 0]
    c[:, 1, 2] = j[:, 0, 1] * j[:, 2, 0] - j[:, 0, 0] * j[:, 2, 1]
    c[:, 2, 0] = j[:, 0, 1] * j[:, 1, 2] - j[:, 0, 2] * j[:, 1, 1]
    c[:, 2, 1] = j[:, 0, 2] * j[:, 1, 0] - j[:, 0, 0] * j[:, 1, 2]
    c[:, 2, 2] = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
    return c


def jacobian_reg(params, points, frame, cfg, variant: str, step: float = 1e-2):
    """Jacobian-determinant regularizers over a point batch.

    variant "J1" sums |1 - det J|, "J2" averages relu(-det J). Returns
    (value, parameter gradients); gradients differentiate through the central
    finite-difference stencil that defines J.
    """
    if variant not in ("J1", "J2"):
        raise LossError(f"unknown jacobian regularizer variant {variant!r}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    m = pts.shape[0]
    stencil = nf._fd_stencil(pts, step)
    disp, cache = nf.forward_with_cache(params, stencil, frame, cfg)
    g = stencil.astype(disp.dtype) + disp
    g = g.reshape(m, 3, 2, 3)
    jac = np.swapaxes((g[:, :, 0, :] - g[:, :, 1, :]) / disp.dtype.type(2.0 * step), 1, 2)
    det = _det3(jac)
    if variant == "J1":
        value = float(np.abs(1.0 - det).sum())
        ddet = -np.sign(1.0 - det)
    else:
        value = float(np.maximum(-det, 0.0).mean())
        ddet = np.where(det < 0, -1.0 / m, 0.0).astype(det.dtype)
    djac = ddet[:, None, None] * _cofactor3(jac)
    # undo the stencil arithmetic: J[:, i, a] came from (g_plus - g_minus)/2h
    dg = np.empty((m, 3, 2, 3), dtype=disp.dtype)
    scale = disp.dtype.type(1.0 / (2.0 * step))
    dg[:, :, 0, :] = np.swapaxes(djac, 1, 2) * scale
    dg[:, :, 1, :] = -dg[:, :, 0, :]
    grads, _ = nf.backward(params, cache, dg.reshape(m * 6, 3))
    return value, grads


def total_loss(weights: LossWeights, l_t: float, l_d: float, l_im: float = 0.0,
               l_reg: float = 0.0, reg_weight: float = 0.0) -> float:
    """Weighted combination of the loss parts."""
    return (
        weights.w_t * l_t
        + weights.w_d * l_d
        + weights.w_im * l_im
        + reg_weight * l_reg
    )
