"""Loss and schedule configuration with the published defaults."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from ..errors import ValidationError


@dataclass(frozen=True)
class LossConfig:
    w_3d: float = 1.0
    w_2d: float = 1.0
    w_c1: float = 1.0
    w_c2: float = 20.0
    w_p: float = 10.0
    delta_c1: float = 0.0
    delta_c2: float = 0.1
    robust: str = "huber"
    huber_3d: float = 0.1  # meters
    huber_2d: float = 5.0  # pixels
    # None keeps the plain Frobenius prior; a float scales the rotation block
    prior_rotation_weight: float | None = None

    def __post_init__(self):
        for name in ("w_3d", "w_2d", "w_c1", "w_c2", "w_p", "delta_c1", "delta_c2"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.robust not in ("huber", "l2", "l1"):
            raise ValidationError(f"unknown robust kernel {self.robust!r}")

    def with_weights(self, **weights):
        return replace(self, **weights)


@dataclass(frozen=True)
class StageConfig:
    iterations: int
    learning_rate: float
    weights: dict = field(default_factory=dict)
    optimize_depth: bool = False
    optimize_intrinsics: bool = False
    optimize_poses: bool = True
    optimize_scales: bool = True
    optimize_body: bool = True
    schedule: str = "cosine"
    lr_min_ratio: float = 0.01

    def __post_init__(self):
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown schedule {self.schedule!r}")

    def learning_rate_at(self, k):
        if self.schedule == "constant" or self.iterations <= 1:
            return self.learning_rate
        import math

        lo = self.learning_rate * self.lr_min_ratio
        return lo + 0.5 * (self.learning_rate - lo) * (1.0 + math.cos(math.pi * k / (self.iterations - 1)))


# coarse stage: 3D term only; refinement: 2D term only, everything active
STAGE1 = StageConfig(500, 0.07, {"w_3d": 1.0, "w_2d": 0.0}, optimize_depth=False, optimize_intrinsics=False)
STAGE2 = StageConfig(200, 0.014, {"w_3d": 0.0, "w_2d": 1.0}, optimize_depth=True, optimize_intrinsics=True)


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ContactConfig:
    max_px: float = 12.0
    visibility_radius: int = 0
    label_threshold: float = 0.5
    track_projection: bool = True


@dataclass(frozen=True)
class OptimConfig:
    loss: LossConfig = LossConfig()
    stage1: StageConfig = STAGE1
    stage2: StageConfig = STAGE2
    adam: AdamConfig = AdamConfig()
    contact: ContactConfig = ContactConfig()
    depth_downsample: int = 4
    coupled_scale: bool = True
    pin_first_camera: bool = True
    keep_best: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    optim: OptimConfig = OptimConfig()
    segment_length: int = 100
    keyframe_interval_s: float = 0.2
    graph_window: int = 2
    seed: int = 0
    workers: int = 1


def config_snapshot(cfg: PipelineConfig | None = None):
    return asdict(cfg or PipelineConfig())
