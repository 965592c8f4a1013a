"""AdamW and the warmup / linear-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainConfigError(ValueError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], step: int) -> "AdamState":
        m = {n[len("adam.m."):]: a.copy() for n, a in arrays.items() if n.startswith("adam.m.")}
        v = {n[len("adam.v."):]: a.copy() for n, a in arrays.items() if n.startswith("adam.v.")}
        return cls(step=step, m=m, v=v)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
               lr_t: float, weight_decay: float, betas: tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One decoupled-weight-decay Adam update; returns the new parameter arrays.

    Decay shrinks each parameter by ``lr_t * weight_decay`` independently of
    the moment estimates, so a zero gradient yields ``p * (1 - lr * wd)``.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr = np.float32(lr_t)
    shrink = np.float32(1.0 - lr_t * weight_decay)
    out = {}
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = np.float32(b1) * m + np.float32(1.0 - b1) * g
        v = np.float32(b2) * v + np.float32(1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(eps))
        out[name] = (p * shrink - lr * update).astype(np.float32)
    return out


def warmup_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear ramp to ``base_lr`` over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if warmup_steps >= total_steps:
        raise TrainConfigError(f"warmup_steps={warmup_steps} must be < total_steps={total_steps}")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)
