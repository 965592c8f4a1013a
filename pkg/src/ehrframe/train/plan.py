from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .optim import TrainConfigError

STAGES = ("pretrain", "finetune")
ALPHA_MODES = ("inverse-frequency", "fixed", "none")
SAMPLERS = ("weighted", "uniform")
SCHEDULES = ("warmup-linear", "constant")


@dataclass(frozen=True)
class TrainPlan:
    """Everything that shapes one pretraining or fine-tuning run.

    The effective learning rate is ``base_lr * lr_multiplier`` and the
    effective decay ``weight_decay * wd_multiplier``. ``warmup_steps=None``
    means 10% of the total step count.
    """

    stage: str = "finetune"
    batch_size: int = 17
    epochs: int = 20
    base_lr: float = 1e-3
    lr_multiplier: float = 1.0
    weight_decay: float = 0.3
    wd_multiplier: float = 1.0
    schedule: str = "warmup-linear"
    warmup_steps: int | None = None
    dropout: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha_mode: str = "inverse-frequency"
    focal_alpha: float = 0.5
    child_tuning: bool = False
    keep_fraction: float = 0.3
    fisher_batches: int = 8
    sampler: str = "weighted"
    mask_fraction: float = 0.15
    patience: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise TrainConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainConfigError("batch_size and epochs must be >= 1")
        if self.lr <= 0:
            raise TrainConfigError(f"base_lr must be > 0, got {self.lr}")
        if self.decay < 0:
            raise TrainConfigError("weight_decay must be >= 0")
        if self.schedule not in SCHEDULES:
            raise TrainConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise TrainConfigError("warmup_steps must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise TrainConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.focal_gamma < 0:
            raise TrainConfigError("focal_gamma must be >= 0")
        if self.focal_alpha_mode not in ALPHA_MODES:
            raise TrainConfigError(f"focal_alpha_mode must be one of {ALPHA_MODES}")
        if not 0.0 < self.focal_alpha < 1.0:
            raise TrainConfigError("focal_alpha must lie in (0, 1)")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise TrainConfigError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")
        if self.fisher_batches < 1:
            raise TrainConfigError("fisher_batches must be >= 1")
        if self.sampler not in SAMPLERS:
            raise TrainConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if not 0.0 < self.mask_fraction <= 1.0:
            raise TrainConfigError("mask_fraction must lie in (0, 1]")
        if self.patience is not None and self.patience < 1:
            raise TrainConfigError("patience must be >= 1 when set")

    @property
    def lr(self) -> float:
        return self.base_lr * self.lr_multiplier

    @property
    def decay(self) -> float:
        return self.weight_decay * self.wd_multiplier

    def resolve_warmup(self, total_steps: int) -> int:
        if self.warmup_steps is not None:
            return self.warmup_steps
        return min(max(1, round(0.1 * total_steps)), total_steps - 1)

    def replace(self, **changes) -> "TrainPlan":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainConfigError(f"unknown plan keys {sorted(unknown)}; valid: {sorted(known)}")
        return cls(**d)


def pretrain_defaults(**changes) -> TrainPlan:
    """Pretraining: batch 32, dropout 0.1, lr 1e-4, decay 0.2, constant rate."""
    base = TrainPlan(stage="pretrain", batch_size=32, epochs=5, base_lr=1e-4, weight_decay=0.2,
                     schedule="constant", dropout=0.1, sampler="uniform")
    return base.replace(**changes)


def finetune_defaults(**changes) -> TrainPlan:
    return TrainPlan(stage="finetune").replace(**changes)
