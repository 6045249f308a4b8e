"""SGD fitting loop: single-batch epochs, importance sampling and weighting,
early stopping on probe-point displacement drift."""

from __future__ import annotations

import json
import time
from collections import deque
from dataclasses import dataclass, field as dc_field, replace as dc_replace
from pathlib import Path

import numpy as np

from . import field as nf
from .losses import (
    ImageLossSpec,
    LossWeights,
    distortion_loss,
    image_loss,
    jacobian_reg,
    target_loss,
)
from .plane import PlaneFrame, TargetSet, fit_plane_frame, lift
from .sampling import SamplerConfig, build_importance_map, make_pairs, sample_points
from .volume import (
    Volume,
    edt,
    importance_floor,
    importance_volume,
    rasterize_points,
    sample_trilinear,
)


class FitError(RuntimeError):
    pass


class FitDiverged(FitError):
    """Raised when a loss or gradient goes non-finite; carries a snapshot."""

    def __init__(self, epoch: int, parts: dict, max_abs_grad: float):
        self.epoch = epoch
        self.parts = parts
        self.max_abs_grad = max_abs_grad
        super().__init__(
            f"non-finite loss at epoch {epoch}: parts={parts}, "
            f"max|grad|={max_abs_grad:.3e}"
        )


@dataclass(frozen=True)
class FitConfig:
    epochs: int = 5000
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weights: LossWeights = dc_field(default_factory=LossWeights)
    sampler: SamplerConfig = dc_field(default_factory=SamplerConfig)
    image_spec: ImageLossSpec | None = None
    use_ws_weighting: bool = True
    regularizer: str = "none"  # none | J1 | J2
    reg_weight: float = 1.0
    reg_fd_step: float = 1e-2
    early_stop: bool = True
    stop_G: int = 512
    stop_epsilon: float | None = None  # mm; None -> 0.05 * stop_G
    stop_gap: int = 100
    grad_clip_norm: float | None = None
    checkpoint_every: int = 500
    margin_factor: float = 2.0
    c_override: float | None = None
    hidden_layers: int = 3
    hidden_width: int = 128
    n_frequencies: int = 3
    leaky_slope: float = 0.01
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise FitError("epochs must be >= 1")
        if self.learning_rate < 0:
            raise FitError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise FitError("momentum must be in [0, 1)")
        if self.regularizer not in ("none", "J1", "J2"):
            raise FitError(f"unknown regularizer {self.regularizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise FitError("dtype must be float32 or float64")

    @property
    def resolved_stop_epsilon(self) -> float:
        return 0.05 * self.stop_G if self.stop_epsilon is None else self.stop_epsilon


@dataclass
class FitReport:
    loss_t: list = dc_field(default_factory=list)
    loss_d: list = dc_field(default_factory=list)
    loss_im: list = dc_field(default_factory=list)
    loss_reg: list = dc_field(default_factory=list)
    loss_total: list = dc_field(default_factory=list)
    stop_epoch: int | None = None
    epochs_run: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "loss_t": self.loss_t,
            "loss_d": self.loss_d,
            "loss_im": self.loss_im,
            "loss_reg": self.loss_reg,
            "loss_total": self.loss_total,
            "stop_epoch": self.stop_epoch,
            "epochs_run": self.epochs_run,
            "wall_time_s": self.wall_time_s,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")


def _subseeds(seed: int, n: int) -> list[int]:
    """Deterministically split one master seed into independent module seeds."""
    state = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
    return [int(s) for s in state]


def importance_weights(targets: TargetSet, volume: Volume, sampler: SamplerConfig) -> Volume:
    """Rasterize targets into the volume grid, distance-transform, and clip
    into the importance weight volume."""
    mask = rasterize_points(targets.points, volume.dims, volume.spacing_mm, volume.origin_mm)
    return importance_volume(edt(mask), sampler.alpha, sampler.beta)


def stopping_check(
    params_now: nf.FieldParams,
    params_then: nf.FieldParams,
    probe_points: np.ndarray,
    epsilon: float,
    frame: PlaneFrame,
    field_cfg: nf.FieldConfig,
) -> bool:
    """True when total probe displacement drift between the two parameter
    states is below epsilon (mm)."""
    d_now = nf.forward(params_now, probe_points, frame, field_cfg)
    d_then = nf.forward(params_then, probe_points, frame, field_cfg)
    drift = float(np.linalg.norm(d_now - d_then, axis=1).sum())
    return drift < epsilon


def fit(
    volume: Volume,
    targets: TargetSet,
    cfg: FitConfig,
    frame: PlaneFrame | None = None,
    out_dir=None,
    callback=None,
):
    """Fit the deformation field; returns (float64 params, FitReport).

    The run is bit-deterministic for a fixed config and seed. callback, when
    given, is invoked as callback(epoch, params, parts) after each update
    (params are live buffers: copy before keeping).
    """
    t_start = time.perf_counter()
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    field_seed, sampler_seed, probe_seed = _subseeds(cfg.seed, 3)

    if frame is None:
        frame = fit_plane_frame(targets, cfg.margin_factor, c=cfg.c_override)
    field_cfg = nf.FieldConfig(
        c=frame.c,
        hidden_layers=cfg.hidden_layers,
        hidden_width=cfg.hidden_width,
        n_frequencies=cfg.n_frequencies,
        leaky_slope=cfg.leaky_slope,
        seed=field_seed,
    )
    params = nf.init_params(field_cfg).astype(dtype)
    velocity = [np.zeros_like(w) for w in params.weights] + [
        np.zeros_like(b) for b in params.biases
    ]

    sampler = cfg.sampler
    use_importance = sampler.scheme == "importance"
    need_ve = use_importance or cfg.use_ws_weighting
    ve = importance_weights(targets, volume, sampler) if need_ve else None
    ve_floor = importance_floor(sampler.alpha, sampler.beta)

    image_spec = cfg.image_spec
    use_image = (
        image_spec is not None and image_spec.mode != "none" and cfg.weights.w_im > 0
    )
    if use_image and image_spec.mode == "sink" and image_spec.v_mean is None:
        v_mean = float(np.mean(sample_trilinear(image_spec.volume, targets.points)))
        image_spec = dc_replace(image_spec, v_mean=v_mean)

    rng = np.random.default_rng(sampler_seed)
    probe_u = np.random.default_rng(probe_seed).random((cfg.stop_G, 2))
    probe_x = lift(frame, probe_u)
    probe_history: deque = deque(maxlen=cfg.stop_gap + 1)
    stop_eps = cfg.resolved_stop_epsilon

    report = FitReport()
    imap = None
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    w = cfg.weights
    s_pairs = sampler.pairs_per_epoch
    for epoch in range(cfg.epochs):
        if use_importance and (
            imap is None or epoch - imap.epoch_built >= sampler.map_refresh_epochs
        ):
            imap = build_importance_map(params, frame, field_cfg, sampler, ve, epoch)

        u1 = sample_points(imap, s_pairs, rng)
        batch = make_pairs(u1, frame, sampler, rng)
        x1 = lift(frame, batch.u1)
        x2 = lift(frame, batch.u2)
        x_all = np.vstack([x1, x2])
        disp, cache = nf.forward_with_cache(params, x_all, frame, field_cfg)
        xh = x_all.astype(dtype) + disp
        xh1, xh2 = xh[:s_pairs], xh[s_pairs:]

        if cfg.use_ws_weighting:
            w_s = 0.5 * (
                sample_trilinear(ve, xh1, background=ve_floor)
                + sample_trilinear(ve, xh2, background=ve_floor)
            ).astype(dtype)
        else:
            w_s = None

        l_t, g_t, _ = target_loss(targets.points, xh1)
        pair_mm = batch.pair_mm.astype(dtype)
        l_d, g_d1, g_d2 = distortion_loss(xh1, xh2, pair_mm, w_s)
        parts = {"t": l_t, "d": l_d, "im": 0.0, "reg": 0.0}

        up1 = (w.w_t * g_t + w.w_d * g_d1).astype(dtype)
        up2 = (w.w_d * g_d2).astype(dtype)
        if use_image:
            l_im, g_im = image_loss(image_spec, xh1)
            parts["im"] = l_im
            up1 += (w.w_im * g_im).astype(dtype)
        upstream = np.vstack([up1, up2])
        grads, _ = nf.backward(params, cache, upstream)

        if cfg.regularizer != "none":
            l_reg, reg_grads = jacobian_reg(
                params, x1, frame, field_cfg, cfg.regularizer, cfg.reg_fd_step
            )
            parts["reg"] = l_reg
            for gw, rw in zip(grads.weights, reg_grads.weights):
                gw += dtype(cfg.reg_weight) * rw
            for gb, rb in zip(grads.biases, reg_grads.biases):
                gb += dtype(cfg.reg_weight) * rb

        total = (
            w.w_t * parts["t"]
            + w.w_d * parts["d"]
            + w.w_im * parts["im"]
            + cfg.reg_weight * parts["reg"]
        )
        grad_arrays = list(grads.weights) + list(grads.biases)
        if not np.isfinite(total):
            max_g = max(float(np.abs(g).max()) for g in grad_arrays)
            raise FitDiverged(epoch, parts, max_g)

        if cfg.grad_clip_norm is not None:
            norm = float(np.sqrt(sum(float((g**2).sum()) for g in grad_arrays)))
            if norm > cfg.grad_clip_norm:
                scale = dtype(cfg.grad_clip_norm / norm)
                for g in grad_arrays:
                    g *= scale

        lr = dtype(cfg.learning_rate)
        mu = dtype(cfg.momentum)
        p_arrays = list(params.weights) + list(params.biases)
        for p, v, g in zip(p_arrays, velocity, grad_arrays):
            v *= mu
            v += g
            p -= lr * v

        report.loss_t.append(parts["t"])
        report.loss_d.append(parts["d"])
        report.loss_im.append(parts["im"])
        report.loss_reg.append(parts["reg"])
        report.loss_total.append(float(total))
        if callback is not None:
            callback(epoch, params, parts)

        probe_disp = nf.forward(params, probe_x, frame, field_cfg)
        probe_history.append(np.asarray(probe_disp, dtype=np.float64))
        should_stop = False
        if cfg.early_stop and len(probe_history) == cfg.stop_gap + 1:
            drift = float(
                np.linalg.norm(probe_history[-1] - probe_history[0], axis=1).sum()
            )
            if drift < stop_eps:
                report.stop_epoch = epoch
                should_stop = True

        if out_path is not None and (
            (epoch + 1) % cfg.checkpoint_every == 0 or should_stop
        ):
            nf.save_checkpoint(
                out_path / f"checkpoint_epoch{epoch + 1}.json", params, frame, field_cfg
            )
        if should_stop:
            break

    report.epochs_run = len(report.loss_total)
    report.wall_time_s = time.perf_counter() - t_start
    params64 = params.astype(np.float64)
    if out_path is not None:
        nf.save_checkpoint(out_path / "checkpoint.json", params64, frame, field_cfg)
        report.save(out_path / "fit_report.json")
    return params64, report
