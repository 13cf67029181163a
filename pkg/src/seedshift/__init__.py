"""Seed-space image-to-image translation on pluggable diffusion backends."""

from .backends import (
    AnalyticGaussianBackend,
    DenoiserBackend,
    IdentityCodec,
    LatentCodec,
    ToyBackend,
    analytic_gaussian_backend,
    load_backend,
    save_backend,
    train_toy_backend,
)
from .config import HistogramConfig, TranslationConfig, load_config, parse_config_text
from .diffusion import (
    Condition,
    DiffusionSchedule,
    Latent,
    LatentTrajectory,
    cfg_noise,
    ddim_step_invert,
    ddim_step_sample,
    invert,
    predict_clean,
    sample,
    uniform_ddim_grid,
)
from .errors import OptimizationError, PipelineError, TrainingError
from .losses import (
    DomainSpec,
    build_domain_spec,
    compute_eta,
    load_domain_spec,
    save_domain_spec,
    sobel,
    soft_histogram,
    st_appearance_loss,
    st_structure_loss,
    to_appearance_loss,
    to_structure_loss,
)
from .metrics import MetricsReport, evaluate, grad_struct_dist, kid, random_feature_embed, ssim
from .pipeline import RunManifest, translate
from .seed_translation import SeedTranslationResult, seed_translate
from .toydata import ToyScene, generate_toy_dataset, load_png, render_scene, save_png
from .trajectory_optimization import (
    NullEmbeddingSchedule,
    TrajectoryOptimizationResult,
    ddim_step_guided,
    trajectory_optimize,
)

__all__ = [name for name in dir() if not name.startswith("_")]
