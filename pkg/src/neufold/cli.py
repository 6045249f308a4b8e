"""Command-line entry point: phantom generation, fitting, rendering, metrics,
and the ablation presets.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

from .field import load_checkpoint
from .fitting import FitConfig, FitDiverged, FitError, fit
from .losses import ImageLossSpec, LossError, LossWeights
from .phantoms import PHANTOM_KINDS, PhantomError, PhantomSpec, write_phantom
from .plane import GeometryError, load_targets_csv
from .render import (
    RenderConfig,
    RenderError,
    UnfoldResult,
    compute_metrics,
    load_raw_map,
    render,
    save_unfold_result,
)
from .sampling import SamplerConfig, SamplingError
from .volume import VolumeError, load_volume

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 1, 2, 3

_DATA_ERRORS = (
    VolumeError,
    GeometryError,
    PhantomError,
    LossError,
    SamplingError,
    RenderError,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
)

# flat config keys (config file [fit] section and --override) -> value parser
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(s: str) -> bool:
    try:
        return _BOOL[s.strip().lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {s!r}")


def _parse_optional_float(s: str):
    return None if s.strip().lower() in ("none", "") else float(s)


FIT_KEYS = {
    "epochs": int,
    "learning_rate": float,
    "momentum": float,
    "w_t": float,
    "w_d": float,
    "w_im": float,
    "scheme": str,
    "pairs_per_epoch": int,
    "delta_min": float,
    "delta_max": float,
    "map_resolution": int,
    "map_refresh_epochs": int,
    "alpha": float,
    "beta": float,
    "use_ws_weighting": _parse_bool,
    "regularizer": str,
    "reg_weight": float,
    "reg_fd_step": float,
    "early_stop": _parse_bool,
    "stop_G": int,
    "stop_epsilon": _parse_optional_float,
    "stop_gap": int,
    "grad_clip_norm": _parse_optional_float,
    "checkpoint_every": int,
    "margin_factor": float,
    "c_override": _parse_optional_float,
    "hidden_layers": int,
    "hidden_width": int,
    "n_frequencies": int,
    "leaky_slope": float,
    "dtype": str,
    "seed": int,
    "image_mode": str,
    "image_k": float,
    "image_l": float,
    "image_v_mean": _parse_optional_float,
    "image_y": float,
}

_FIT_DEFAULTS = {
    "image_mode": "none",
    "image_k": 0.06,
    "image_l": 200.0,
    "image_v_mean": None,
    "image_y": 1.0,
}


def default_flat_config() -> dict:
    cfg = FitConfig()
    flat = {
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "w_t": cfg.weights.w_t,
        "w_d": cfg.weights.w_d,
        "w_im": cfg.weights.w_im,
        "scheme": cfg.sampler.scheme,
        "pairs_per_epoch": cfg.sampler.pairs_per_epoch,
        "delta_min": cfg.sampler.delta_min,
        "delta_max": cfg.sampler.delta_max,
        "map_resolution": cfg.sampler.map_resolution[0],
        "map_refresh_epochs": cfg.sampler.map_refresh_epochs,
        "alpha": cfg.sampler.alpha,
        "beta": cfg.sampler.beta,
        "use_ws_weighting": cfg.use_ws_weighting,
        "regularizer": cfg.regularizer,
        "reg_weight": cfg.reg_weight,
        "reg_fd_step": cfg.reg_fd_step,
        "early_stop": cfg.early_stop,
        "stop_G": cfg.stop_G,
        "stop_epsilon": cfg.stop_epsilon,
        "stop_gap": cfg.stop_gap,
        "grad_clip_norm": cfg.grad_clip_norm,
        "checkpoint_every": cfg.checkpoint_every,
        "margin_factor": cfg.margin_factor,
        "c_override": cfg.c_override,
        "hidden_layers": cfg.hidden_layers,
        "hidden_width": cfg.hidden_width,
        "n_frequencies": cfg.n_frequencies,
        "leaky_slope": cfg.leaky_slope,
        "dtype": cfg.dtype,
        "seed": cfg.seed,
    }
    flat.update(_FIT_DEFAULTS)
    return flat


def flat_to_fit_config(flat: dict, image_volume=None, mask_volume=None) -> FitConfig:
    weights = LossWeights(w_t=flat["w_t"], w_d=flat["w_d"], w_im=flat["w_im"])
    res = int(flat["map_resolution"])
    sampler = SamplerConfig(
        scheme=flat["scheme"],
        pairs_per_epoch=flat["pairs_per_epoch"],
        delta_min=flat["delta_min"],
        delta_max=flat["delta_max"],
        map_resolution=(res, res),
        map_refresh_epochs=flat["map_refresh_epochs"],
        alpha=flat["alpha"],
        beta=flat["beta"],
        seed=flat["seed"],
    )
    image_spec = None
    if flat["image_mode"] != "none":
        volume = mask_volume if flat["image_mode"] == "mask_coverage" else image_volume
        if volume is None:
            raise LossError(
                f"image loss mode {flat['image_mode']!r} needs "
                + ("--mask" if flat["image_mode"] == "mask_coverage" else "an intensity volume")
            )
        image_spec = ImageLossSpec(
            mode=flat["image_mode"],
            volume=volume,
            v_mean=flat["image_v_mean"],
            k=flat["image_k"],
            l=flat["image_l"],
            y=flat["image_y"],
        )
    return FitConfig(
        epochs=flat["epochs"],
        learning_rate=flat["learning_rate"],
        momentum=flat["momentum"],
        weights=weights,
        sampler=sampler,
        image_spec=image_spec,
        use_ws_weighting=flat["use_ws_weighting"],
        regularizer=flat["regularizer"],
        reg_weight=flat["reg_weight"],
        reg_fd_step=flat["reg_fd_step"],
        early_stop=flat["early_stop"],
        stop_G=flat["stop_G"],
        stop_epsilon=flat["stop_epsilon"],
        stop_gap=flat["stop_gap"],
        grad_clip_norm=flat["grad_clip_norm"],
        checkpoint_every=flat["checkpoint_every"],
        margin_factor=flat["margin_factor"],
        c_override=flat["c_override"],
        hidden_layers=flat["hidden_layers"],
        hidden_width=flat["hidden_width"],
        n_frequencies=flat["n_frequencies"],
        leaky_slope=flat["leaky_slope"],
        dtype=flat["dtype"],
        seed=flat["seed"],
    )


def _coerce(key: str, raw: str):
    if key not in FIT_KEYS:
        raise KeyError(f"unknown config key {key!r}")
    try:
        return FIT_KEYS[key](raw)
    except ValueError as exc:
        raise ValueError(f"bad value for {key!r}: {exc}") from exc


def load_flat_config(path) -> dict:
    """INI-style flat config: one [fit] section, keys as in FIT_KEYS."""
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise GeometryError(f"cannot parse config {path}: {exc}") from exc
    if not parser.has_section("fit"):
        raise GeometryError(f"{path}: missing [fit] section")
    out = {}
    for key, raw in parser.items("fit"):
        out[key] = _coerce(key, raw)
    return out


def apply_overrides(flat: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise GeometryError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in FIT_KEYS:
            raise GeometryError(f"unknown override key {key!r}")
        flat[key] = _coerce(key, raw)
    return flat


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neufold", description=__doc__)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pp = sub.add_parser("phantom", help="generate a synthetic phantom")
    pp.add_argument("--kind", choices=PHANTOM_KINDS, required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--dims", type=int, nargs=3, default=(128, 128, 128))
    pp.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    pp.add_argument("--samples", type=int, default=300)
    pp.add_argument("--tube-radius", type=float, default=2.0)
    pp.add_argument("--tube-intensity", type=float, default=300.0)
    pp.add_argument("--noise", type=float, default=0.0)
    pp.add_argument("--helix-radius", type=float, default=20.0)
    pp.add_argument("--helix-pitch", type=float, default=40.0)
    pp.add_argument("--helix-turns", type=float, default=1.5)
    pp.add_argument("--seed", type=int, default=0)

    fp = sub.add_parser("fit", help="fit the deformation field")
    fp.add_argument("--volume", required=True)
    fp.add_argument("--targets", required=True)
    fp.add_argument("--out", required=True)
    fp.add_argument("--config", default=None, help="INI file with a [fit] section")
    fp.add_argument("--override", action="append", metavar="KEY=VALUE")
    fp.add_argument(
        "--image-loss",
        choices=("none", "sink", "mask"),
        default=None,
        help="shorthand for image_mode (mask -> mask_coverage)",
    )
    fp.add_argument("--image-volume", default=None, help="sink readout volume (default: --volume)")
    fp.add_argument("--mask", default=None, help="binary mask volume for mask_coverage")
    fp.add_argument("--seed", type=int, default=None)

    rp = sub.add_parser("render", help="render an unfolded image from a checkpoint")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--volume", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--pixel-spacing", type=float, default=0.5)
    rp.add_argument("--window", type=float, nargs=2, default=(0.0, 500.0))

    mp = sub.add_parser("metrics", help="distortion and distance statistics")
    mp.add_argument("--targets", required=True)
    mp.add_argument("--out", required=True)
    mp.add_argument("--render-dir", default=None)
    mp.add_argument("--checkpoint", default=None)
    mp.add_argument("--volume", default=None)
    mp.add_argument("--mask", default=None)
    mp.add_argument("--radius", type=float, default=10.0)
    mp.add_argument("--pixel-spacing", type=float, default=0.5)

    ap = sub.add_parser("ablate", help="run a named comparison preset")
    ap.add_argument("--preset", choices=("regularizer", "importance_map", "sampler"), required=True)
    ap.add_argument("--volume", required=True)
    ap.add_argument("--targets", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", default=None)
    ap.add_argument("--override", action="append", metavar="KEY=VALUE")
    ap.add_argument("--seed", type=int, default=None)
    return p


def _cmd_phantom(args) -> int:
    spec = PhantomSpec(
        kind=args.kind,
        dims=tuple(args.dims),
        spacing_mm=tuple(args.spacing),
        tube_radius_mm=args.tube_radius,
        tube_intensity=args.tube_intensity,
        noise_sigma=args.noise,
        centerline_samples=args.samples,
        seed=args.seed,
        helix_radius_mm=args.helix_radius,
        helix_pitch_mm=args.helix_pitch,
        helix_turns=args.helix_turns,
    )
    manifest = write_phantom(spec, args.out)
    _write_json(Path(args.out) / "resolved_config.json", manifest["spec"])
    print(f"phantom '{args.kind}' written to {args.out}")
    return 0


def _resolve_fit_flat(args) -> dict:
    flat = default_flat_config()
    if args.config:
        flat.update(load_flat_config(args.config))
    apply_overrides(flat, args.override)
    if getattr(args, "image_loss", None) is not None:
        flat["image_mode"] = {"none": "none", "sink": "sink", "mask": "mask_coverage"}[
            args.image_loss
        ]
    if args.seed is not None:
        flat["seed"] = args.seed
    return flat


def _cmd_fit(args) -> int:
    volume = load_volume(args.volume)
    targets = load_targets_csv(args.targets)
    flat = _resolve_fit_flat(args)
    image_volume = volume
    if args.image_volume:
        image_volume = load_volume(args.image_volume)
    mask_volume = load_volume(args.mask, kind="mask") if args.mask else None
    cfg = flat_to_fit_config(flat, image_volume=image_volume, mask_volume=mask_volume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", flat)
    params, report = fit(volume, targets, cfg, out_dir=out)
    print(
        f"fit finished: {report.epochs_run} epochs"
        + (f" (stopped at {report.stop_epoch})" if report.stop_epoch is not None else "")
        + f", {report.wall_time_s:.1f} s, final loss {report.loss_total[-1]:.6g}"
    )
    return 0


def _cmd_render(args) -> int:
    params, frame, field_cfg = load_checkpoint(args.checkpoint)
    volume = load_volume(args.volume)
    cfg = RenderConfig(pixel_spacing_mm=args.pixel_spacing, window=tuple(args.window))
    result = render(params, frame, volume, cfg, field_cfg)
    files = save_unfold_result(result, args.out, cfg)
    _write_json(
        Path(args.out) / "resolved_config.json",
        {
            "pixel_spacing_mm": cfg.pixel_spacing_mm,
            "window": list(cfg.window),
            "emit_coordinate_map": cfg.emit_coordinate_map,
            "emit_distortion_map": cfg.emit_distortion_map,
            "checkpoint": str(args.checkpoint),
            "volume": str(args.volume),
            "files": files,
        },
    )
    print(f"rendered {result.width}x{result.height} px to {args.out}")
    return 0


def _result_from_render_dir(render_dir) -> UnfoldResult:
    render_dir = Path(render_dir)
    resolved = json.loads((render_dir / "resolved_config.json").read_text())
    coords = load_raw_map(render_dir / "coords.json")
    intensity = load_raw_map(render_dir / "intensity.json")
    return UnfoldResult(
        width=coords.shape[1],
        height=coords.shape[0],
        pixel_spacing_mm=float(resolved["pixel_spacing_mm"]),
        intensity=intensity,
        coords=coords,
    )


def _cmd_metrics(args) -> int:
    targets = load_targets_csv(args.targets)
    if args.render_dir:
        result = _result_from_render_dir(args.render_dir)
    elif args.checkpoint and args.volume:
        params, frame, field_cfg = load_checkpoint(args.checkpoint)
        volume = load_volume(args.volume)
        cfg = RenderConfig(pixel_spacing_mm=args.pixel_spacing)
        result = render(params, frame, volume, cfg, field_cfg)
    else:
        raise GeometryError("metrics needs --render-dir or --checkpoint with --volume")
    mask = load_volume(args.mask, kind="mask") if args.mask else None
    rec = compute_metrics(result, targets.points, radius_mm=args.radius, mask=mask)
    rec.save(args.out)
    _write_json(
        Path(args.out).with_name(Path(args.out).stem + "_config.json"),
        {
            "targets": str(args.targets),
            "render_dir": args.render_dir,
            "checkpoint": args.checkpoint,
            "volume": args.volume,
            "mask": args.mask,
            "radius_mm": args.radius,
            "pixel_spacing_mm": args.pixel_spacing,
        },
    )
    print(json.dumps(rec.to_dict(), indent=2))
    return 0


ABLATION_PRESETS = {
    "regularizer": {
        "multiscale": {},
        "small_only": {"delta_min": 0.5, "delta_max": 0.5},
        "large_only": {"delta_min": 50.0, "delta_max": 50.0},
        "jacobian_J1": {"w_d": 0.0, "regularizer": "J1", "reg_weight": 1.0},
        "jacobian_J2": {"w_d": 0.0, "regularizer": "J2", "reg_weight": 1.0},
    },
    "importance_map": {
        "none": {"use_ws_weighting": False},
        "weak": {"alpha": 30.0, "beta": 0.1},
        "strict": {"alpha": 10.0, "beta": 0.1},
    },
    "sampler": {
        "uniform": {"scheme": "uniform"},
        "importance": {"scheme": "importance"},
    },
}


def _cmd_ablate(args) -> int:
    volume = load_volume(args.volume)
    targets = load_targets_csv(args.targets)
    base = _resolve_fit_flat(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    comparison = {}
    for name, patch in ABLATION_PRESETS[args.preset].items():
        flat = dict(base)
        flat.update(patch)
        cfg = flat_to_fit_config(flat, image_volume=volume)
        run_dir = out / name
        _write_json(run_dir / "resolved_config.json", flat)
        params, report = fit(volume, targets, cfg, out_dir=run_dir)
        frame, field_cfg = _frame_and_cfg(run_dir)
        result = render(params, frame, volume, RenderConfig(), field_cfg)
        rec = compute_metrics(result, targets.points)
        comparison[name] = {
            "metrics": rec.to_dict(),
            "stop_epoch": report.stop_epoch,
            "epochs_run": report.epochs_run,
            "wall_time_s": report.wall_time_s,
            "final_loss": report.loss_total[-1],
        }
        print(f"[{args.preset}:{name}] done in {report.wall_time_s:.1f} s")
    _write_json(out / "comparison.json", comparison)
    print(f"comparison written to {out / 'comparison.json'}")
    return 0


def _frame_and_cfg(run_dir: Path):
    _, frame, field_cfg = load_checkpoint(run_dir / "checkpoint.json")
    return frame, field_cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(limits=args.threads)
        except ImportError:
            print("threadpoolctl unavailable; --threads ignored", file=sys.stderr)
    handlers = {
        "phantom": _cmd_phantom,
        "fit": _cmd_fit,
        "render": _cmd_render,
        "metrics": _cmd_metrics,
        "ablate": _cmd_ablate,
    }
    try:
        return handlers[args.command](args)
    except FitDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
