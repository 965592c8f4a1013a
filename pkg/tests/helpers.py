"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np

from ehrframe.cohort import TensorSet, TimeframeTensor
from ehrframe.model import ModelConfig, TimeframeModel
from ehrframe.numcore import Tape

# criterion number -> (passed, detail); printed by conftest at session end
CRITERIA: dict[int, tuple[bool, str]] = {}

F32_EPS = float(np.finfo(np.float32).eps)


def record(number: int, passed: bool, detail: str) -> bool:
    CRITERIA[number] = (bool(passed), detail)
    return bool(passed)


def micro_config(**changes) -> ModelConfig:
    base = dict(k=3, m=3, d_model=8, n_layers=1, n_heads=2, d_ff=16, p_max=4, dropout=0.0,
                embedder="gct", gct_layers=1, gct_dim=4, gct_heads=2, gct_ff=8, gct_kl_weight=0.1, seed=0)
    base.update(changes)
    return ModelConfig(**base)


def random_tensor(rng, p_max: int, k: int, m: int, n_real: int, stay_id: str = "s", label: int = 0,
                  year: int = 2010, code_rate: float = 0.4) -> TimeframeTensor:
    pad = np.zeros(p_max, dtype=bool)
    pad[p_max - n_real:] = True
    values = np.zeros((p_max, k + m), dtype=np.float32)
    values[pad, :k] = rng.normal(size=(n_real, k))
    values[pad, k:] = rng.random((n_real, m)) < code_rate
    return TimeframeTensor(values, pad, stay_id, label, year)


def random_set(rng, n: int, p_max: int, k: int, m: int, min_real: int = 1, labels=None) -> TensorSet:
    labels = rng.integers(0, 2, size=n) if labels is None else np.asarray(labels)
    tensors = [random_tensor(rng, p_max, k, m, int(rng.integers(min_real, p_max + 1)), f"s{i}", int(labels[i]))
               for i in range(n)]
    cols = [f"f{j}" for j in range(k)] + [f"c{j}" for j in range(m)]
    return TensorSet.from_tensors(tensors, cols)


def jitter(model: TimeframeModel, rng, scale: float = 0.5) -> TimeframeModel:
    """Move every parameter to a generic point (init leaves some vectors near zero)."""
    for t in model.params.values():
        t.data = (t.data + rng.normal(0.0, scale, size=t.shape)).astype(np.float32)
    return model


def analytic_grads(loss_fn, params: dict) -> tuple[float, dict[str, np.ndarray]]:
    for t in params.values():
        t.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss, [params[n] for n in sorted(params)])
    grads = {n: params[n].grad.copy() for n in sorted(params)}
    tape.clear()
    for t in params.values():
        t.grad = None
    return float(loss.data), grads


def gradcheck(loss_fn, params: dict, h: float = 3e-3, rtol: float = 1e-2) -> dict:
    """Entry-wise central differences against the tape gradient of a float32 scalar loss.

    An entry passes when ``|a - n| <= rtol * max(|a|, |n|) + floor`` where
    ``floor = 4 * eps_f32 * |loss| / h`` is the round-off of the difference
    quotient itself.
    """
    loss0, grads = analytic_grads(loss_fn, params)
    floor = 4.0 * F32_EPS * max(abs(loss0), 1.0) / h
    failures, checked, worst = [], 0, 0.0
    for name in sorted(params):
        flat = params[name].data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + np.float32(h)
            up = float(loss_fn().data)
            flat[i] = old - np.float32(h)
            down = float(loss_fn().data)
            flat[i] = old
            num = (up - down) / (2.0 * h)
            ana = float(grads[name].reshape(-1)[i])
            err = abs(ana - num)
            bound = rtol * max(abs(ana), abs(num)) + floor
            worst = max(worst, err / bound)
            checked += 1
            if err > bound:
                failures.append((name, i, ana, num))
    return {"checked": checked, "failures": failures, "worst_ratio": worst, "floor": floor, "loss": loss0}


def fd_grad64(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a float64 numpy reference function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(x)
        flat[i] = old - h
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def pairwise_auc(scores, labels) -> float:
    """O(n^2) Mann-Whitney count: (2 * wins + ties) / (2 * n1 * n0), in integers."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (2 * wins + ties) / (2.0 * pos.size * neg.size)
