"""Multi-view mini-batch training for 3D Gaussian splatting on the CPU."""

from .batchvar import MiniBatchSpec, sample_batch
from .densify import AdcConfig, adc_step, opacity_reset
from .gradients import GradAccumulator, ParamGrads, backward, densify_metrics
from .losses import SsimWindow, dssim, dssim3d, l1, l2
from .projection import project, project_cloud
from .rasterizer import RenderPlan, bin_and_sort, blend_pixel, make_plan, occupancy_report, render
from .scene import Camera, Gaussian3D, GaussianCloud, SceneDataset, load_scene, look_at, save_scene
from .trainer import TrainConfig, Trainer, train

__all__ = [
    "AdcConfig", "Camera", "Gaussian3D", "GaussianCloud", "GradAccumulator", "MiniBatchSpec", "ParamGrads",
    "RenderPlan", "SceneDataset", "SsimWindow", "TrainConfig", "Trainer", "adc_step", "backward",
    "bin_and_sort", "blend_pixel", "densify_metrics", "dssim", "dssim3d", "l1", "l2", "load_scene", "look_at",
    "make_plan", "occupancy_report", "opacity_reset", "project", "project_cloud", "render", "sample_batch",
    "save_scene", "train",
]
