"""The timeframe transformer: embedders, encoder stack and output heads.

All forward functions are batched: ``values`` is ``(B, P, l)`` and
``pad_mask`` is ``(B, P)``. ``values`` may be a plain array or a
:class:`Tensor` that requires grad (attribution differentiates the input).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numcore import Tensor, load_arrays, ops, save_arrays, stream
from ..numcore.ops import NEG_INF_BIAS
from .config import ModelConfig

_KL_EPS = 1e-12


def positional_encoding(p_max: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal table: sin on even dims, cos on odd dims."""
    if d_model % 2:
        raise ValueError(f"d_model must be even, got {d_model}")
    pos = np.arange(p_max, dtype=np.float64)[:, None]
    rate = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((p_max, d_model))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe.astype(np.float32)


# -- parameters ---------------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear_params(p, rng, name, d_in, d_out):
    p[f"{name}.weight"] = _uniform(rng, d_in, (d_in, d_out))
    p[f"{name}.bias"] = np.zeros(d_out)


def _block_params(p, rng, name, d, d_ff):
    _linear_params(p, rng, f"{name}.attn.qkv", d, 3 * d)
    _linear_params(p, rng, f"{name}.attn.out", d, d)
    p[f"{name}.ln1.gain"], p[f"{name}.ln1.bias"] = np.ones(d), np.zeros(d)
    _linear_params(p, rng, f"{name}.ff1", d, d_ff)
    _linear_params(p, rng, f"{name}.ff2", d_ff, d)
    p[f"{name}.ln2.gain"], p[f"{name}.ln2.bias"] = np.ones(d), np.zeros(d)


def init_params(config: ModelConfig, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    rng = rng or stream(config.seed, "init")
    d, l, dg = config.d_model, config.l, config.gct_dim
    p: dict[str, np.ndarray] = {}
    if config.embedder == "linear":
        _linear_params(p, rng, "embed.linear", l, d)
    else:
        # a unit-scale identity embedding next to a small value direction keeps
        # the per-node layer norm near-linear in z, so magnitudes survive
        p["gct.feature_emb"] = rng.normal(0.0, 1.0, size=(l, dg))
        p["gct.value_scale"] = rng.uniform(-1.0, 1.0, size=(max(config.k, 1), dg))[:config.k] / math.sqrt(dg)
        p["gct.virtual"] = rng.normal(0.0, 0.02, size=(1, dg))
        for t in range(config.gct_layers):
            _block_params(p, rng, f"gct.layer{t}", dg, config.gct_ff)
        _linear_params(p, rng, "gct.proj", dg, d)
    p["cls"] = rng.normal(0.0, 0.02, size=(1, d))
    p["mask_token"] = rng.normal(0.0, 0.02, size=(1, d))
    for i in range(config.n_layers):
        _block_params(p, rng, f"encoder.layer{i}", d, config.d_ff)
    _linear_params(p, rng, "head.fc1", d, d)
    _linear_params(p, rng, "head.fc2", d, 1)
    _linear_params(p, rng, "recon", d, l)
    return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in p.items()}


# -- building blocks ------------------------------------------------------------

def _attention(x: Tensor, name: str, params, n_heads: int, key_bias: np.ndarray | Tensor):
    """Multi-head self-attention over axis 1 of ``x`` (shape ``(B, N, d)``)."""
    b, n, d = x.shape
    dh = d // n_heads
    qkv = ops.linear(x, params[f"{name}.qkv.weight"], params[f"{name}.qkv.bias"])
    qkv = qkv.reshape(b, n, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)   # (3, B, h, N, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ops.matmul(q, ops.swap_last(k)) * (1.0 / math.sqrt(dh))
    if isinstance(key_bias, Tensor):
        scores = scores + key_bias.reshape(b, 1, 1, n)
    else:
        scores = scores + key_bias.reshape(b, 1, 1, n).astype(np.float32)
    probs = ops.softmax(scores, axis=-1)
    ctx = ops.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    return ops.linear(ctx, params[f"{name}.out.weight"], params[f"{name}.out.bias"]), probs


def _block(x, name, params, n_heads, key_bias, dropout, training, rng):
    a, probs = _attention(x, f"{name}.attn", params, n_heads, key_bias)
    x = ops.layer_norm(x + ops.dropout(a, dropout, training, rng),
                       params[f"{name}.ln1.gain"], params[f"{name}.ln1.bias"])
    f = ops.linear(ops.relu(ops.linear(x, params[f"{name}.ff1.weight"], params[f"{name}.ff1.bias"])),
                   params[f"{name}.ff2.weight"], params[f"{name}.ff2.bias"])
    x = ops.layer_norm(x + ops.dropout(f, dropout, training, rng),
                       params[f"{name}.ln2.gain"], params[f"{name}.ln2.bias"])
    return x, probs


def _as_input(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=np.float32))


@dataclass
class ForwardAux:
    gct_attention: list = field(default_factory=list)     # per GCT layer, (F, h, N, N)
    encoder_attention: list = field(default_factory=list)  # per encoder layer, (B, h, P+1, P+1)
    gct_node_mask: np.ndarray | None = None                # (F, N) live nodes
    kl: Tensor | None = None


# -- embedders --------------------------------------------------------------------

def gct_embed_rows(rows, params, config: ModelConfig, training: bool = False,
                   rng: np.random.Generator | None = None, aux: ForwardAux | None = None) -> Tensor:
    """Graph-attention embedding of individual timeframes.

    ``rows`` is ``(F, l)``. Each frame becomes a node set: a virtual node, one
    node per numerical feature (feature embedding + value * per-feature scale)
    and one node per categorical code, where a code's indicator gates its
    node as an attention-logit bias ``log(w)``, so inactive codes (w == 0)
    are never attended to. The virtual node's final state is projected to
    ``d_model``.
    """
    rows = _as_input(rows)
    f, l = rows.shape
    k, m = config.k, config.m
    dg = config.gct_dim
    emb = params["gct.feature_emb"]
    parts = [ops.broadcast_to(params["gct.virtual"].reshape(1, 1, dg), (f, 1, dg))]
    if k:
        z = rows[:, :k].reshape(f, k, 1)
        parts.append(z * params["gct.value_scale"] + emb[:k])
    if m:
        parts.append(ops.broadcast_to(emb[k:].reshape(1, m, dg), (f, m, dg)))
    h = ops.concat(parts, axis=1)

    gate_parts = [Tensor(np.ones((f, 1 + k), dtype=np.float32))]
    if m:
        gate_parts.append(rows[:, k:])
    gate = ops.concat(gate_parts, axis=1)
    key_bias = ops.gate_log(gate)
    live = gate.data > 0

    probs_prev, kl_terms = None, []
    for t in range(config.gct_layers):
        h, probs = _block(h, f"gct.layer{t}", params, config.gct_heads, key_bias, 0.0, False, None)
        if aux is not None:
            aux.gct_attention.append(probs.data)
        if probs_prev is not None:
            kl_terms.append(_layer_kl(probs, probs_prev, live))
        probs_prev = probs
    if aux is not None:
        aux.gct_node_mask = live
        if kl_terms:
            total = kl_terms[0]
            for term in kl_terms[1:]:
                total = total + term
            aux.kl = total
    return ops.linear(h[:, 0, :], params["gct.proj.weight"], params["gct.proj.bias"])


def _layer_kl(cur: Tensor, prev: Tensor, live: np.ndarray) -> Tensor:
    """Mean over frames, heads and live query rows of KL(cur || prev)."""
    log_ratio = ops.log(cur + _KL_EPS) - ops.log(prev + _KL_EPS)
    per_row = (cur * log_ratio).sum(axis=-1)                       # (F, h, N)
    weights = live[:, None, :].astype(np.float32)
    weights = weights / (live.sum(axis=1)[:, None, None] * cur.shape[1] * live.shape[0])
    return (per_row * weights).sum()


def gct_embed_timeframe(row, params, config: ModelConfig):
    """Single-frame GCT embedding; returns ``(d_model vector, aux)``."""
    aux = ForwardAux()
    row = _as_input(row)
    out = gct_embed_rows(row.reshape(1, row.shape[-1]), params, config, aux=aux)
    return out.reshape(config.d_model), aux


def embed_timeframes(values, pad_mask: np.ndarray, params, config: ModelConfig, training: bool = False,
                     rng: np.random.Generator | None = None, mask_rows: np.ndarray | None = None,
                     aux: ForwardAux | None = None) -> Tensor:
    """``(B, P, l)`` timeframes -> ``(B, P+1, d_model)`` with the CLS vector at position 0.

    Padded rows embed to zero. ``mask_rows`` (B, P) replaces the chosen rows'
    embeddings with the learned mask vector before positional encoding.
    """
    values = _as_input(values)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    b, p, l = values.shape
    if l != config.l:
        raise ValueError(f"input has {l} columns, model expects {config.l}")
    d = config.d_model
    live = pad_mask.astype(np.float32)[..., None]
    if config.embedder == "linear":
        e = ops.linear(values, params["embed.linear.weight"], params["embed.linear.bias"]) * live
    else:
        flat = values.reshape(b * p, l)
        idx = np.flatnonzero(pad_mask.reshape(-1))
        rows = flat[idx]
        emb = gct_embed_rows(rows, params, config, training, rng, aux)
        e = ops.scatter_rows(emb, idx, b * p).reshape(b, p, d)
    if mask_rows is not None:
        mr = np.asarray(mask_rows, dtype=np.float32)[..., None]
        e = e * (1.0 - mr) + params["mask_token"].reshape(1, 1, d) * mr
    pe = positional_encoding(p, d)[None] * live
    e = e + pe
    cls = ops.broadcast_to(params["cls"].reshape(1, 1, d), (b, 1, d))
    x = ops.concat([cls, e], axis=1)
    return ops.dropout(x, config.dropout, training, rng)


def attention_key_bias(pad_mask: np.ndarray) -> np.ndarray:
    """Additive key bias for the encoder: 0 for CLS and real rows, -1e9 for padding."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    keys = np.concatenate([np.ones((pad_mask.shape[0], 1), dtype=bool), pad_mask], axis=1)
    return np.where(keys, 0.0, NEG_INF_BIAS).astype(np.float32)


def encoder_forward(x: Tensor, pad_mask: np.ndarray, params, config: ModelConfig, training: bool = False,
                    rng: np.random.Generator | None = None, aux: ForwardAux | None = None) -> Tensor:
    """K post-norm encoder layers; padded positions are never attended to."""
    bias = attention_key_bias(pad_mask)
    for i in range(config.n_layers):
        x, probs = _block(x, f"encoder.layer{i}", params, config.n_heads, bias, config.dropout, training, rng)
        if aux is not None:
            aux.encoder_attention.append(probs.data)
    return x


def classify_logits(values, pad_mask, params, config: ModelConfig, training: bool = False,
                    rng: np.random.Generator | None = None, aux: ForwardAux | None = None) -> Tensor:
    """Pre-sigmoid logits, shape ``(B,)``."""
    x = embed_timeframes(values, pad_mask, params, config, training, rng, aux=aux)
    h = encoder_forward(x, pad_mask, params, config, training, rng, aux)
    cls = h[:, 0, :]
    hidden = ops.relu(ops.linear(cls, params["head.fc1.weight"], params["head.fc1.bias"]))
    hidden = ops.dropout(hidden, config.dropout, training, rng)
    out = ops.linear(hidden, params["head.fc2.weight"], params["head.fc2.bias"])
    return out.reshape(out.shape[0])


def classify_forward(t, params, config: ModelConfig, training: bool = False,
                     rng: np.random.Generator | None = None) -> float:
    """Probability for one :class:`TimeframeTensor`."""
    z = classify_logits(t.values[None], t.pad_mask[None], params, config, training, rng)
    return float(ops.sigmoid(z).data[0])


def reconstruct_logits(values, pad_mask, mask_rows, params, config: ModelConfig, training: bool = False,
                       rng: np.random.Generator | None = None, aux: ForwardAux | None = None) -> Tensor:
    """Per-row projection back to input width, ``(B, P, l)``.

    Numerical columns are regression outputs, categorical columns logits.
    """
    mask_rows = np.asarray(mask_rows, dtype=bool)
    if not mask_rows.any():
        raise ValueError("reconstruction needs at least one masked row")
    if (mask_rows & ~np.asarray(pad_mask, dtype=bool)).any():
        raise ValueError("masked rows must be real (unpadded) timeframes")
    x = embed_timeframes(values, pad_mask, params, config, training, rng, mask_rows=mask_rows, aux=aux)
    h = encoder_forward(x, pad_mask, params, config, training, rng, aux)
    return ops.linear(h[:, 1:, :], params["recon.weight"], params["recon.bias"])


def reconstruct_forward(t, mask_positions, params, config: ModelConfig) -> np.ndarray:
    """Reconstruction for one stay with the given row indices masked."""
    mask = np.zeros((1, t.pad_mask.shape[0]), dtype=bool)
    positions = list(mask_positions)
    if not positions:
        raise ValueError("mask_positions must be non-empty")
    mask[0, positions] = True
    return reconstruct_logits(t.values[None], t.pad_mask[None], mask, params, config).data[0]


# -- model bundle ---------------------------------------------------------------------

class TimeframeModel:
    """A config plus its named parameter store."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None):
        self.config = config
        self.params = params if params is not None else init_params(config)

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in sorted(self.params)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, self.params[n]) for n in sorted(self.params)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters {sorted(missing)}")
        for n, t in self.params.items():
            if state[n].shape != t.shape:
                raise ValueError(f"shape mismatch for {n}: {state[n].shape} vs {t.shape}")
            t.data = np.array(state[n], dtype=np.float32)

    def copy(self) -> "TimeframeModel":
        clone = TimeframeModel(self.config, {n: Tensor(t.data.copy(), requires_grad=True, name=n)
                                             for n, t in self.params.items()})
        return clone

    def logits(self, values, pad_mask, training=False, rng=None, aux=None) -> Tensor:
        return classify_logits(values, pad_mask, self.params, self.config, training, rng, aux)

    def predict_proba(self, values, pad_mask, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(values), batch_size):
            z = classify_logits(values[i:i + batch_size], pad_mask[i:i + batch_size], self.params, self.config)
            out.append(ops.sigmoid(z).data)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)

    def save(self, stem: str | Path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> Path:
        arrays = self.state()
        if extra:
            arrays.update(extra)
        return save_arrays(stem, arrays, {"model_config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, stem: str | Path) -> tuple["TimeframeModel", dict[str, np.ndarray], dict]:
        arrays, meta = load_arrays(stem)
        config = ModelConfig.from_dict(meta["model_config"])
        model = cls(config, {})
        model.params = {n: Tensor(arrays.pop(n), requires_grad=True, name=n) for n in init_param_names(config)}
        return model, arrays, meta


def init_param_names(config: ModelConfig) -> list[str]:
    return sorted(init_params(config, np.random.default_rng(0)))
