"""Expected-gradients attributions and feature-importance summaries."""

from .attribution import (
    Attribution,
    align_baseline,
    expected_gradients,
    explain_stays,
    save_attributions,
)
from .summary import load_summary, save_summary, summarize

__all__ = [name for name in dir() if not name.startswith("_")]
