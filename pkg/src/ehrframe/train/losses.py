"""Training objectives."""

from __future__ import annotations

import numpy as np

from ..numcore import Tensor, ops

P_CLAMP = 1e-7


def focal_loss(p, y, gamma: float = 2.0, alpha_pos: float | None = 0.5) -> Tensor:
    """Mean binary focal loss on probabilities.

    ``p_t`` is ``p`` for positives and ``1 - p`` for negatives; each sample
    contributes ``-alpha_t * (1 - p_t)**gamma * log(p_t)``. ``alpha_pos=None``
    disables class weighting (alpha_t = 1), which with ``gamma=0`` is plain
    cross-entropy. Probabilities are clamped to ``[1e-7, 1 - 1e-7]``.
    """
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float32))
    y = np.asarray(y, dtype=np.float32).reshape(p.shape)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    p = ops.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    p_t = p * y + (1.0 - p) * (1.0 - y)
    loss = -ops.log(p_t)
    if gamma != 0.0:
        loss = loss * ops.power(1.0 - p_t, gamma)
    if alpha_pos is not None:
        alpha_t = (alpha_pos * y + (1.0 - alpha_pos) * (1.0 - y)).astype(np.float32)
        loss = loss * alpha_t
    return loss.mean()


def focal_loss_from_logits(logits: Tensor, y, gamma: float, alpha_pos: float | None) -> Tensor:
    return focal_loss(ops.sigmoid(logits), y, gamma, alpha_pos)


def masked_pretrain_loss(recon: Tensor, target: np.ndarray, mask_rows: np.ndarray, k: int) -> Tensor:
    """Mean over masked rows of (MSE over numerical columns + BCE over code logits).

    ``recon`` and ``target`` are ``(B, P, l)``; ``mask_rows`` is ``(B, P)``.
    Unmasked rows never enter the loss.
    """
    mask_rows = np.asarray(mask_rows, dtype=bool)
    n_masked = int(mask_rows.sum())
    if n_masked == 0:
        raise ValueError("masked_pretrain_loss needs at least one masked row")
    b_idx, p_idx = np.nonzero(mask_rows)
    rows = recon[b_idx, p_idx]                         # (n_masked, l)
    tgt = np.asarray(target, dtype=np.float32)[b_idx, p_idx]
    l = rows.shape[-1]
    m = l - k
    total = None
    if k:
        diff = rows[:, :k] - tgt[:, :k]
        total = ops.square(diff).mean()
    if m:
        bce = ops.bce_with_logits(rows[:, k:], tgt[:, k:]).mean()
        total = bce if total is None else total + bce
    return total
