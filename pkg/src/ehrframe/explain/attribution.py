"""Expected-gradients attribution of the classifier logit."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..cohort import ConfigurationError, TensorSet, TimeframeTensor
from ..model import TimeframeModel, classify_logits
from ..numcore import Tape, Tensor, stream

LogitFn = Callable[[Tensor, np.ndarray], Tensor]


@dataclass
class Attribution:
    stay_id: str
    values: np.ndarray          # (P, l) attribution per cell
    inputs: np.ndarray          # (P, l) the explained (normalised) input
    pad_mask: np.ndarray        # (P,)
    columns: list[str]
    logit: float                # f(x)
    baseline_logit: float       # mean f over the (aligned) baselines

    def total(self) -> float:
        return float(self.values.sum(dtype=np.float64))


def _logit_fn(model) -> LogitFn:
    if isinstance(model, TimeframeModel):
        return lambda values, pad: classify_logits(values, pad, model.params, model.config)
    if callable(model):
        return model
    raise TypeError("model must be a TimeframeModel or a callable (values, pad_mask) -> logits")


def align_baseline(x: TimeframeTensor, b: TimeframeTensor) -> np.ndarray:
    """Baseline values laid over ``x``'s frame slots.

    Rows real in ``x`` but padded in ``b`` take ``x``'s own values, so they
    contribute no difference; rows padded in ``x`` are zero.
    """
    out = np.where(b.pad_mask[:, None], b.values, x.values)
    out[~x.pad_mask] = 0.0
    return out.astype(np.float32)


def _gradients(fn: LogitFn, points: np.ndarray, pad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inp = Tensor(points, requires_grad=True)
    with Tape() as tape:
        z = fn(inp, np.broadcast_to(pad, points.shape[:2]))
        tape.backward(z.sum(), [inp])
    grad = inp.grad
    tape.clear()
    return grad, z.data


def _logits(fn: LogitFn, values: np.ndarray, pad: np.ndarray, chunk: int) -> np.ndarray:
    out = []
    for i in range(0, len(values), chunk):
        part = values[i:i + chunk]
        out.append(fn(Tensor(part), np.broadcast_to(pad, part.shape[:2])).data)
    return np.concatenate(out)


def _alphas(reps: int, n_base: int, rng: np.random.Generator) -> np.ndarray:
    """``reps`` draws of ``a`` per baseline, flattened baseline-major.

    Draws come in antithetic pairs ``(s + u) / n`` and ``(s + 1 - u) / n``
    inside strata ``s`` of width ``1 / n``, ``n = ceil(reps / 2)``. Every
    draw is still marginally U(0, 1); the pairing cancels the linear part of
    the gradient's variation within a stratum.
    """
    n_strata = math.ceil(reps / 2)
    slot = np.arange(reps)
    u = rng.random((n_base, n_strata))[:, slot // 2]
    u = np.where(slot % 2 == 0, u, 1.0 - u)
    return ((slot // 2 + u) / n_strata).reshape(-1).astype(np.float32)


def expected_gradients(model, x: TimeframeTensor, baselines: Sequence[TimeframeTensor], n_samples: int,
                       rng: np.random.Generator, chunk: int = 64, columns: Sequence[str] = ()) -> Attribution:
    """Expected-gradients attribution of the pre-sigmoid logit for one stay.

    Averages ``(x - b) * grad f(b + a (x - b))`` over baselines ``b`` and
    ``a ~ U(0, 1)``. ``n_samples`` is rounded up to a multiple of the number
    of baselines so each baseline is used equally often, which makes the
    result exact for linear ``f``; see :func:`_alphas` for how the draws of
    ``a`` are spread to cut Monte Carlo variance. ``model`` is a
    :class:`TimeframeModel` or a callable ``(values, pad_mask) -> logits``.
    """
    if not baselines:
        raise ConfigurationError("expected gradients needs at least one baseline")
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    fn = _logit_fn(model)
    xv = np.asarray(x.values, dtype=np.float32)
    pad = np.asarray(x.pad_mask, dtype=bool)
    base = np.stack([align_baseline(x, b) for b in baselines])
    reps = math.ceil(n_samples / len(base))
    order = np.repeat(np.arange(len(base)), reps)
    alphas = _alphas(reps, len(base), rng)
    acc = np.zeros(xv.shape, dtype=np.float64)
    for i in range(0, order.size, chunk):
        b = base[order[i:i + chunk]]
        a = alphas[i:i + chunk, None, None]
        diff = xv[None] - b
        grad, _ = _gradients(fn, b + a * diff, pad)
        acc += (diff * grad).sum(axis=0, dtype=np.float64)
    values = (acc / order.size).astype(np.float32)
    values[~pad] = 0.0
    fx = float(_logits(fn, xv[None], pad, chunk)[0])
    fb = float(np.mean(_logits(fn, base, pad, chunk), dtype=np.float64))
    return Attribution(x.stay_id, values, xv, pad, list(columns), fx, fb)


def explain_stays(model: TimeframeModel, data: TensorSet, background: TensorSet, n_stays: int = 100,
                  n_baselines: int = 50, n_samples: int = 256, seed: int = 0) -> list[Attribution]:
    """Attribute ``n_stays`` randomly chosen stays against training-set baselines."""
    if len(background) == 0:
        raise ConfigurationError("background set is empty")
    chosen = np.sort(stream(seed, "explain-stays").choice(len(data), size=min(n_stays, len(data)),
                                                          replace=False))
    picks = np.sort(stream(seed, "explain-baselines").choice(len(background),
                                                             size=min(n_baselines, len(background)),
                                                             replace=False))
    baselines = [background.tensor(int(i)) for i in picks]
    return [expected_gradients(model, data.tensor(int(i)), baselines, n_samples,
                               stream(seed, "explain-samples", int(i)), columns=data.columns)
            for i in chosen]


def save_attributions(attributions: Sequence[Attribution], path: str | Path) -> None:
    """Long-format CSV over real frames; ``timeframe`` is the row slot, P-1 abutting the index time."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stay_id", "timeframe", "feature_id", "value"])
        for att in attributions:
            cols = att.columns or [str(c) for c in range(att.values.shape[1])]
            for j in np.flatnonzero(att.pad_mask):
                for c, fid in enumerate(cols):
                    writer.writerow([att.stay_id, int(j), fid, repr(float(att.values[j, c]))])
