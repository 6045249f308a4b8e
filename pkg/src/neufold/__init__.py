"""neufold: fit a neural deformation field that unfolds sparse 3D point
targets inside a volumetric image into a distortion-minimized 2D view."""

from .field import FieldConfig, FieldParams, init_params, load_checkpoint, save_checkpoint
from .fitting import FitConfig, FitReport, fit, stopping_check
from .losses import ImageLossSpec, LossWeights, PairBatch
from .phantoms import PhantomSpec, drop_segment, generate
from .plane import PlaneFrame, TargetSet, fit_plane_frame, lift, plane_scale
from .render import (
    MetricsRecord,
    RenderConfig,
    UnfoldResult,
    compute_metrics,
    render,
)
from .sampling import SamplerConfig
from .volume import Volume, edt, importance_volume, load_volume, save_volume

__version__ = "0.1.0"

__all__ = [
    "FieldConfig",
    "FieldParams",
    "FitConfig",
    "FitReport",
    "ImageLossSpec",
    "LossWeights",
    "MetricsRecord",
    "PairBatch",
    "PhantomSpec",
    "PlaneFrame",
    "RenderConfig",
    "SamplerConfig",
    "TargetSet",
    "UnfoldResult",
    "Volume",
    "compute_metrics",
    "drop_segment",
    "edt",
    "fit",
    "fit_plane_frame",
    "generate",
    "importance_volume",
    "init_params",
    "lift",
    "load_checkpoint",
    "load_volume",
    "plane_scale",
    "render",
    "save_checkpoint",
    "save_volume",
    "stopping_check",
]
