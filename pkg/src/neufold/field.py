"""The deformation field: frequency embedding + small LeakyReLU MLP.

Maps a 3D world point to a 3D displacement in mm. Forward and reverse-mode
passes are hand-rolled on numpy so gradients are exact and reductions happen
in a fixed order. The compute dtype follows the parameter arrays; fitting runs
float32 for speed, every check in this package uses the float64 default.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .plane import PlaneFrame


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    """Architecture + embedding settings. c is the coordinate normalization
    constant in mm, copied from the plane frame."""

    c: float
    hidden_layers: int = 3
    hidden_width: int = 128
    n_frequencies: int = 3
    leaky_slope: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise FieldError("need at least one hidden layer and one hidden unit")
        if self.n_frequencies < 0:
            raise FieldError("n_frequencies must be >= 0")
        if not self.c > 0:
            raise FieldError("normalization constant c must be positive")

    @property
    def embed_dim(self) -> int:
        return 3 * (1 + 2 * self.n_frequencies)

    def layer_dims(self) -> list[int]:
        return [self.embed_dim] + [self.hidden_width] * self.hidden_layers + [3]

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "hidden_layers": self.hidden_layers,
            "hidden_width": self.hidden_width,
            "n_frequencies": self.n_frequencies,
            "leaky_slope": self.leaky_slope,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldConfig":
        return cls(**d)


@dataclass
class FieldParams:
    """Per-layer weight matrices (d_in, d_out) and bias vectors.

    The flat vector view orders layers first-to-last, weight (row-major) then
    bias within each layer.
    """

    weights: list
    biases: list

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def dtype(self):
        return self.weights[0].dtype

    def to_vector(self) -> np.ndarray:
        chunks = []
        for w, b in zip(self.weights, self.biases):
            chunks.append(w.ravel())
            chunks.append(b.ravel())
        return np.concatenate(chunks)

    def with_vector(self, vec: np.ndarray) -> "FieldParams":
        vec = np.asarray(vec)
        weights, biases, off = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[off : off + w.size].reshape(w.shape).astype(w.dtype))
            off += w.size
            biases.append(vec[off : off + b.size].reshape(b.shape).astype(b.dtype))
            off += b.size
        if off != vec.size:
            raise FieldError(f"parameter vector has {vec.size} entries, expected {off}")
        return FieldParams(weights, biases)

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
        )

    def copy(self) -> "FieldParams":
        return FieldParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_params(cfg: FieldConfig) -> FieldParams:
    """He-style uniform hidden layers, zeroed final layer (identity field)."""
    rng = np.random.default_rng(cfg.seed)
    dims = cfg.layer_dims()
    gain = np.sqrt(2.0 / (1.0 + cfg.leaky_slope**2))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = gain * np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    weights[-1][:] = 0.0
    return FieldParams(weights, biases)


def _omegas(cfg: FieldConfig) -> np.ndarray:
    return (2.0 ** np.arange(cfg.n_frequencies)) * np.pi


def normalize_points(points, frame: PlaneFrame, cfg: FieldConfig) -> np.ndarray:
    """World mm -> PCA-aligned coordinates divided by c."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return (pts - frame.t_mean) @ frame.basis / cfg.c


def embed(points, frame: PlaneFrame, cfg: FieldConfig, dtype=np.float64) -> np.ndarray:
    """Trigonometric embedding, component-major: per normalized coordinate v_k
    the block [v_k, sin(2^j pi v_k), cos(2^j pi v_k) for j < n_frequencies]."""
    v = normalize_points(points, frame, cfg)
    return _embed_features(v.astype(dtype), cfg)


def _embed_features(v: np.ndarray, cfg: FieldConfig) -> np.ndarray:
    m = v.shape[0]
    width = 1 + 2 * cfg.n_frequencies
    feat = np.empty((m, 3, width), dtype=v.dtype)
    feat[:, :, 0] = v
    if cfg.n_frequencies:
        ang = v[:, :, None] * _omegas(cfg).astype(v.dtype)
        feat[:, :, 1::2] = np.sin(ang)
        feat[:, :, 2::2] = np.cos(ang)
    return feat.reshape(m, 3 * width)


def _check_finite(params: FieldParams) -> None:
    for w, b in zip(params.weights, params.biases):
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise FieldError("non-finite field parameter")


def forward(params: FieldParams, points, frame: PlaneFrame, cfg: FieldConfig):
    """Displacement in mm at world points; (3,) in, (3,) out, batches likewise."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    out, _ = forward_with_cache(params, np.atleast_2d(pts), frame, cfg)
    return out[0] if single else out


def forward_with_cache(params: FieldParams, points, frame: PlaneFrame, cfg: FieldConfig):
    """Forward pass keeping per-layer activations for a later backward call."""
    _check_finite(params)
    dtype = params.dtype
    v = normalize_points(points, frame, cfg).astype(dtype)
    acts = [_embed_features(v, cfg)]
    a = acts[0]
    slope = dtype.type(cfg.leaky_slope)
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = a @ w + b
        a = np.where(z > 0, z, slope * z)
        acts.append(a)
    out = a @ params.weights[-1] + params.biases[-1]
    cache = {"acts": acts, "v": v, "slope": slope}
    return out, cache


def backward(
    params: FieldParams,
    cache: dict,
    upstream: np.ndarray,
    frame: PlaneFrame | None = None,
    cfg: FieldConfig | None = None,
    need_input_grad: bool = False,
):
    """Reverse-mode pass.

    upstream is dL/d(displacement), shape (M, 3). Returns a FieldParams of
    gradients and, when requested, dL/d(world point) chained through the
    trigonometric embedding (frame and cfg required for that).
    """
    acts = cache["acts"]
    dtype = params.dtype
    delta = np.asarray(upstream, dtype=dtype)
    slope = cache["slope"]
    g_w = [None] * len(params.weights)
    g_b = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        g_w[i] = acts[i].T @ delta
        g_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ params.weights[i].T
            delta *= np.where(acts[i] > 0, dtype.type(1.0), slope)
        elif need_input_grad:
            delta = delta @ params.weights[0].T
    grads = FieldParams(g_w, g_b)
    if not need_input_grad:
        return grads, None
    if frame is None or cfg is None:
        raise FieldError("input gradients need the plane frame and field config")
    input_grad = _embed_backward(delta, cache["v"], frame, cfg)
    return grads, input_grad


def _embed_backward(delta_feat, v, frame: PlaneFrame, cfg: FieldConfig) -> np.ndarray:
    """Chain dL/d(embedding) to dL/d(world point)."""
    m = v.shape[0]
    width = 1 + 2 * cfg.n_frequencies
    d = delta_feat.reshape(m, 3, width)
    dv = d[:, :, 0].copy()
    if cfg.n_frequencies:
        om = _omegas(cfg).astype(v.dtype)
        ang = v[:, :, None] * om
        dv += (d[:, :, 1::2] * np.cos(ang) * om).sum(axis=2)
        dv -= (d[:, :, 2::2] * np.sin(ang) * om).sum(axis=2)
    return (dv @ frame.basis.T.astype(v.dtype)) / v.dtype.type(cfg.c)


def total_map(params: FieldParams, points, frame: PlaneFrame, cfg: FieldConfig):
    """The fitted transform g(x) = x + f(x)."""
    pts = np.asarray(points, dtype=np.float64)
    return pts + forward(params, pts, frame, cfg)


def jacobian_fd(params, points, frame: PlaneFrame, cfg: FieldConfig, step: float = 1e-2):
    """Central finite-difference Jacobian of the total map g, per point.

    Returns (3, 3) for a single point or (M, 3, 3) for a batch;
    J[m, i, j] = dg_i/dx_j. step is in mm.
    """
    if step <= 0:
        raise FieldError("finite-difference step must be positive")
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    stencil = _fd_stencil(pts, step)
    g = stencil + forward(params, stencil, frame, cfg)
    g = g.reshape(pts.shape[0], 3, 2, 3)
    jac = (g[:, :, 0, :] - g[:, :, 1, :]) / (2.0 * step)
    jac = np.swapaxes(jac, 1, 2)
    return jac[0] if single else jac


def _fd_stencil(pts: np.ndarray, step: float) -> np.ndarray:
    """Per point: x + step*e_a and x - step*e_a for a in (0,1,2), flattened."""
    m = pts.shape[0]
    stencil = np.repeat(pts[:, None, None, :], 3, axis=1).repeat(2, axis=2)
    for a in range(3):
        stencil[:, a, 0, a] += step
        stencil[:, a, 1, a] -= step
    return stencil.reshape(m * 6, 3)


CHECKPOINT_VERSION = 1


def _encode_array(arr: np.ndarray) -> dict:
    arr64 = np.ascontiguousarray(arr, dtype="<f8")
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr64.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    return arr.reshape(d["shape"]).astype(np.float64)


def save_checkpoint(path, params: FieldParams, frame: PlaneFrame, cfg: FieldConfig) -> None:
    """Self-contained JSON checkpoint: config, plane frame, f64le parameters."""
    p64 = params.astype(np.float64)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "field_config": cfg.to_dict(),
        "plane_frame": frame.to_dict(),
        "layers": [
            {"weight": _encode_array(w), "bias": _encode_array(b)}
            for w, b in zip(p64.weights, p64.biases)
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path):
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise FieldError(f"unsupported checkpoint format_version {version!r}")
    cfg = FieldConfig.from_dict(doc["field_config"])
    frame = PlaneFrame.from_dict(doc["plane_frame"])
    weights = [_decode_array(layer["weight"]) for layer in doc["layers"]]
    biases = [_decode_array(layer["bias"]) for layer in doc["layers"]]
    return FieldParams(weights, biases), frame, cfg
