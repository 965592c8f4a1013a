"""Fisher-information child tuning: train only the most task-relevant entries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import Tape, stream
from .optim import TrainConfigError


@dataclass
class ChildMask:
    masks: dict[str, np.ndarray]

    def apply(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Zero every gradient entry outside the mask."""
        return {n: np.where(self.masks[n], g, np.float32(0.0)) if n in self.masks else g
                for n, g in grads.items()}

    @property
    def n_kept(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    @property
    def n_total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    def fraction(self) -> float:
        return self.n_kept / self.n_total


def top_fraction_mask(scores: dict[str, np.ndarray], keep_fraction: float) -> ChildMask:
    """Keep the globally highest ``keep_fraction`` of entries.

    Entries are laid out by sorted parameter name, then flat index, and a
    stable sort on the negated score breaks ties in that order.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise TrainConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    names = sorted(scores)
    flat = np.concatenate([scores[n].reshape(-1).astype(np.float64) for n in names])
    n_keep = max(1, int(round(keep_fraction * flat.size)))
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:n_keep]] = True
    masks, offset = {}, 0
    for n in names:
        size = scores[n].size
        masks[n] = keep[offset:offset + size].reshape(scores[n].shape)
        offset += size
    return ChildMask(masks)


def fisher_scores(model, data, plan, loss_fn) -> dict[str, np.ndarray]:
    """Mean squared task-loss gradient per parameter entry over ``plan.fisher_batches``.

    ``loss_fn(model, idx)`` must return the scalar task loss on the batch
    ``idx`` of ``data``. Batches come from a stream separate from training.
    """
    if plan.fisher_batches < 1:
        raise TrainConfigError("fisher_batches must be >= 1")
    rng = stream(plan.seed, "fisher")
    n = len(data)
    order = rng.permutation(n)
    acc = {name: np.zeros(t.shape, dtype=np.float64) for name, t in model.named_parameters()}
    for b in range(plan.fisher_batches):
        start = (b * plan.batch_size) % n
        idx = np.take(order, np.arange(start, start + plan.batch_size), mode="wrap")
        model.zero_grad()
        with Tape() as tape:
            loss = loss_fn(model, idx)
            tape.backward(loss, model.parameters())
        for name, t in model.named_parameters():
            acc[name] += t.grad.astype(np.float64) ** 2
        tape.clear()
    model.zero_grad()
    return {name: a / plan.fisher_batches for name, a in acc.items()}


def fisher_mask(model, data, plan, loss_fn) -> ChildMask:
    return top_fraction_mask(fisher_scores(model, data, plan, loss_fn), plan.keep_fraction)
