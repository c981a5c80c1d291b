"""Joint optimization of cameras, scales, depths and body transforms."""
from .config import (
    STAGE1, STAGE2, AdamConfig, ContactConfig, LossConfig, OptimConfig, PipelineConfig, StageConfig,
    config_snapshot,
)
from .losses import (
    evaluate, loss_2d, loss_3d, loss_contact_scale, loss_contact_static, loss_prior, robust_kernel, total_loss,
)
from .optimizer import (
    AdamState, OptimResult, adam_step, active_masks, gradient, numerical_gradient, run_stage, run_two_stage,
    term_gradients,
)
from .problem import (
    ContactTerms, ParameterSet, Problem, build_problem, current_depth, empty_contact_terms, refresh_contacts,
)

__all__ = [
    "STAGE1", "STAGE2", "AdamConfig", "AdamState", "ContactConfig", "ContactTerms", "LossConfig", "OptimConfig",
    "OptimResult", "ParameterSet", "PipelineConfig", "Problem", "StageConfig", "active_masks", "adam_step",
    "build_problem", "config_snapshot", "current_depth", "empty_contact_terms", "evaluate", "gradient",
    "loss_2d", "loss_3d", "loss_contact_scale", "loss_contact_static", "loss_prior", "numerical_gradient",
    "refresh_contacts", "robust_kernel", "run_stage", "run_two_stage", "term_gradients", "total_loss",
]
