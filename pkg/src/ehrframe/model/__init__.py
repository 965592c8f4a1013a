"""Timeframe transformer with linear or graph-attention frame embedders."""

from .config import EMBEDDERS, ModelConfig, ModelConfigError
from .network import (
    ForwardAux,
    TimeframeModel,
    attention_key_bias,
    classify_forward,
    classify_logits,
    embed_timeframes,
    encoder_forward,
    gct_embed_rows,
    gct_embed_timeframe,
    init_params,
    positional_encoding,
    reconstruct_forward,
    reconstruct_logits,
)

__all__ = [name for name in dir() if not name.startswith("_")]
