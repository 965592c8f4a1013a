"""Objectives, optimizer, child tuning and the pretrain / fine-tune loops."""

from .child import ChildMask, fisher_mask, fisher_scores, top_fraction_mask
from .losses import focal_loss, focal_loss_from_logits, masked_pretrain_loss
from .loops import (
    FinetuneResult,
    PretrainResult,
    append_csv,
    evaluate_auc,
    finetune,
    load_pretrain_checkpoint,
    pretrain,
    resolve_alpha,
    sample_mask_rows,
    save_pretrain_checkpoint,
)
from .optim import AdamState, TrainConfigError, adamw_step, warmup_schedule
from .plan import TrainPlan, finetune_defaults, pretrain_defaults

__all__ = [name for name in dir() if not name.startswith("_")]
