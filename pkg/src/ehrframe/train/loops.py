"""Masked pretraining and focal-loss fine-tuning loops."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ..cohort import DegenerateCohortError, TensorSet, shuffled_batches, weighted_batches
from ..eval.metrics import auc_roc
from ..model import ForwardAux, TimeframeModel, classify_logits, reconstruct_logits
from ..numcore import NumericError, Tape, Tensor, stream
from .child import ChildMask, fisher_mask
from .losses import focal_loss_from_logits, masked_pretrain_loss
from .optim import AdamState, TrainConfigError, adamw_step, warmup_schedule
from .plan import TrainPlan

log = logging.getLogger(__name__)


def append_csv(path: str | Path | None, row: dict) -> None:
    """Append one row, writing the header when the file is new."""
    if path is None:
        return
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        if fresh:
            writer.writeheader()
        writer.writerow(row)


def sample_mask_rows(pad_mask: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Pick ``round(fraction * p)`` (at least one) real rows per stay, uniformly without replacement."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    n_real = pad_mask.sum(axis=1)
    n_mask = np.where(n_real > 0, np.maximum(1, np.round(fraction * n_real)), 0).astype(int)
    keys = rng.random(pad_mask.shape)
    keys[~pad_mask] = np.inf
    ranks = np.argsort(np.argsort(keys, axis=1, kind="stable"), axis=1, kind="stable")
    return ranks < n_mask[:, None]


def _learning_rate(plan: TrainPlan, step: int, total: int) -> float:
    if plan.schedule == "constant":
        return plan.lr
    return warmup_schedule(step, plan.resolve_warmup(total), total, plan.lr)


def _optimizer_step(model: TimeframeModel, loss_fn: Callable[[], Tensor], state: AdamState,
                    lr: float, decay: float, mask: ChildMask | None = None,
                    on_grads: Callable[[dict], None] | None = None) -> float:
    model.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
        if not np.isfinite(loss.data).all():
            raise NumericError(f"training loss became non-finite at step {state.step}")
        tape.backward(loss, model.parameters())
    grads = {n: t.grad for n, t in model.named_parameters()}
    if mask is not None:
        grads = mask.apply(grads)
    if on_grads is not None:
        on_grads(grads)
    new = adamw_step({n: t.data for n, t in model.named_parameters()}, grads, state, lr, decay)
    for n, t in model.named_parameters():
        t.data = new[n]
    tape.clear()
    model.zero_grad()
    return float(loss.data)


def _with_kl(loss: Tensor, aux: ForwardAux, weight: float) -> Tensor:
    if aux.kl is not None and weight:
        return loss + aux.kl * weight
    return loss


# -- pretraining -----------------------------------------------------------------

@dataclass
class PretrainResult:
    model: TimeframeModel
    losses: list[float]
    state: AdamState


def pretrain(model: TimeframeModel, data: TensorSet, plan: TrainPlan, *,
             resume: PretrainResult | None = None, stop_after: int | None = None,
             curve_path: str | Path | None = None, checkpoint: str | Path | None = None) -> PretrainResult:
    """Masked-timeframe reconstruction pretraining.

    Each step masks ``plan.mask_fraction`` of every stay's real rows, swaps
    them for the learned mask vector and reconstructs them. Batch order, mask
    choice and dropout are drawn from per-epoch / per-step streams, so a run
    resumed from a :class:`PretrainResult` (or a checkpoint loaded with
    :func:`load_pretrain_checkpoint`) continues bit-exactly. ``stop_after``
    ends the run after that many total steps.
    """
    if plan.stage != "pretrain":
        raise TrainConfigError(f"pretrain needs a plan with stage='pretrain', got {plan.stage!r}")
    n = len(data)
    if n == 0:
        raise ValueError("pretraining data is empty")
    if resume is not None:
        model, losses, state = resume.model, list(resume.losses), resume.state
    else:
        losses, state = [], AdamState()
    cfg = replace(model.config, dropout=plan.dropout)
    k = cfg.k
    per_epoch = math.ceil(n / plan.batch_size)
    total = plan.epochs * per_epoch
    end = total if stop_after is None else min(total, stop_after)
    order, order_epoch = None, -1
    for step in range(state.step, end):
        epoch, b = divmod(step, per_epoch)
        if epoch != order_epoch:
            order, order_epoch = stream(plan.seed, "pretrain-order", epoch).permutation(n), epoch
        idx = np.sort(order[b * plan.batch_size:(b + 1) * plan.batch_size])
        rng = stream(plan.seed, "pretrain-step", step)
        values, pad = data.values[idx], data.pad_mask[idx]
        mask_rows = sample_mask_rows(pad, plan.mask_fraction, rng)

        def loss_fn():
            aux = ForwardAux()
            recon = reconstruct_logits(values, pad, mask_rows, model.params, cfg, True, rng, aux)
            return _with_kl(masked_pretrain_loss(recon, values, mask_rows, k), aux, cfg.gct_kl_weight)

        lr = _learning_rate(plan, step, total)
        loss = _optimizer_step(model, loss_fn, state, lr, plan.decay)
        losses.append(loss)
        append_csv(curve_path, {"step": step, "epoch": epoch, "lr": lr, "loss": loss})
    result = PretrainResult(model, losses, state)
    if checkpoint is not None:
        save_pretrain_checkpoint(result, plan, checkpoint)
    return result


def save_pretrain_checkpoint(result: PretrainResult, plan: TrainPlan, stem: str | Path) -> Path:
    meta = {"stage": "pretrain", "step": result.state.step, "plan": plan.to_dict(), "losses": result.losses}
    return result.model.save(stem, extra=result.state.to_arrays(), meta=meta)


def load_pretrain_checkpoint(stem: str | Path) -> PretrainResult:
    model, extra, meta = TimeframeModel.load(stem)
    state = AdamState.from_arrays(extra, int(meta.get("step", 0)))
    return PretrainResult(model, [float(x) for x in meta.get("losses", [])], state)


# -- fine-tuning ------------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: TimeframeModel
    best_epoch: int
    val_auc: float | None
    history: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    alpha_pos: float | None = None
    child_mask: ChildMask | None = None


def resolve_alpha(plan: TrainPlan, labels: np.ndarray) -> float | None:
    if plan.focal_alpha_mode == "none":
        return None
    if plan.focal_alpha_mode == "fixed":
        return plan.focal_alpha
    n1 = int(np.sum(labels))
    return (len(labels) - n1) / len(labels)


def _safe_auc(model: TimeframeModel, data: TensorSet | None) -> float | None:
    if data is None or len(data) == 0 or len(np.unique(data.labels)) < 2:
        return None
    return auc_roc(model.predict_proba(data.values, data.pad_mask), data.labels)


def finetune(model: TimeframeModel, train: TensorSet, val: TensorSet | None, plan: TrainPlan, *,
             curve_path: str | Path | None = None, metrics_path: str | Path | None = None,
             checkpoint: str | Path | None = None,
             on_grads: Callable[[dict], None] | None = None) -> FinetuneResult:
    """Supervised fine-tuning of a copy of ``model``.

    Keeps the parameters of the epoch with the best validation AUC (the
    last epoch when no usable validation split exists). With
    ``sampler='uniform'``, ``focal_gamma=0``, ``focal_alpha_mode='none'``
    and child tuning off this is plain cross-entropy training.
    """
    if plan.stage != "finetune":
        raise TrainConfigError(f"finetune needs a plan with stage='finetune', got {plan.stage!r}")
    labels = np.asarray(train.labels)
    if len(np.unique(labels)) < 2:
        raise DegenerateCohortError("fine-tuning needs both classes in the training split")
    model = model.copy()
    cfg = replace(model.config, dropout=plan.dropout)
    alpha = resolve_alpha(plan, labels)
    n = len(train)

    def batch_loss(idx, training, rng):
        aux = ForwardAux()
        z = classify_logits(train.values[idx], train.pad_mask[idx], model.params, cfg, training, rng, aux)
        loss = focal_loss_from_logits(z, labels[idx], plan.focal_gamma, alpha)
        return _with_kl(loss, aux, cfg.gct_kl_weight)

    mask = None
    if plan.child_tuning:
        mask = fisher_mask(model, train, plan, lambda m, idx: batch_loss(idx, False, None))
        log.info("child tuning keeps %d of %d entries", mask.n_kept, mask.n_total)

    per_epoch = math.ceil(n / plan.batch_size)
    total = plan.epochs * per_epoch
    state = AdamState()
    best_auc, best_epoch, best_state = None, plan.epochs - 1, None
    history, losses = [], []
    stale = 0
    for epoch in range(plan.epochs):
        batch_rng = stream(plan.seed, "finetune-batches", epoch)
        if plan.sampler == "weighted":
            batches = weighted_batches(labels, plan.batch_size, per_epoch, batch_rng)
        else:
            batches = shuffled_batches(n, plan.batch_size, batch_rng)
        epoch_losses = []
        for idx in batches:
            step = state.step
            rng = stream(plan.seed, "finetune-step", step)
            lr = _learning_rate(plan, step, total)
            loss = _optimizer_step(model, lambda: batch_loss(idx, True, rng), state, lr, plan.decay,
                                   mask, on_grads)
            losses.append(loss)
            epoch_losses.append(loss)
            append_csv(curve_path, {"step": step, "epoch": epoch, "lr": lr, "loss": loss})
        val_auc = _safe_auc(model, val)
        row = {"epoch": epoch, "train_loss": float(np.mean(epoch_losses)),
               "val_auc": "" if val_auc is None else val_auc}
        history.append(row)
        append_csv(metrics_path, row)
        if val_auc is not None and (best_auc is None or val_auc > best_auc):
            best_auc, best_epoch, best_state = val_auc, epoch, model.state()
            stale = 0
        elif val_auc is not None:
            stale += 1
            if plan.patience is not None and stale >= plan.patience:
                break
    if best_state is not None:
        model.load_state(best_state)
    else:
        best_epoch = len(history) - 1
    result = FinetuneResult(model, best_epoch, best_auc, history, losses, alpha, mask)
    if checkpoint is not None:
        model.save(checkpoint, meta={"stage": "finetune", "best_epoch": best_epoch, "val_auc": best_auc,
                                     "plan": plan.to_dict()})
    return result


def evaluate_auc(model: TimeframeModel, data: TensorSet) -> float:
    return auc_roc(model.predict_proba(data.values, data.pad_mask), data.labels)
