"""Training-split z-scoring of numerical columns."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binning import TensorSet, TimeframeTensor
from .records import CohortError, FeatureSchema

log = logging.getLogger(__name__)


@dataclass
class NormalizationStats:
    features: list[str]                 # numerical features kept, in column order
    mean: np.ndarray
    std: np.ndarray
    dropped: list[str] = field(default_factory=list)
    source_columns: list[str] = field(default_factory=list)
    quality: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"features": self.features, "mean": self.mean.tolist(), "std": self.std.tolist(),
                           "dropped": self.dropped, "source_columns": self.source_columns,
                           "quality": self.quality}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NormalizationStats":
        d = json.loads(text)
        return cls(d["features"], np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   d["dropped"], d["source_columns"], d.get("quality", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationStats":
        return cls.from_json(Path(path).read_text())


def fit_normalization(train: TensorSet | list[TimeframeTensor], schema: FeatureSchema) -> tuple[NormalizationStats, FeatureSchema]:
    """Per-feature mean and population std over every unpadded training row.

    Features with zero (or undefined) training variance are dropped with a
    warning; the reduced schema is returned alongside the stats.
    """
    if isinstance(train, list):
        if not train:
            raise CohortError("normalisation needs a non-empty training split")
        train = TensorSet.from_tensors(train, schema.columns)
    if len(train) == 0:
        raise CohortError("normalisation needs a non-empty training split")
    k = schema.k
    rows = train.values[train.pad_mask][:, :k].astype(np.float64)
    observed = ~np.isnan(rows)
    counts = observed.sum(axis=0)
    filled = np.where(observed, rows, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = filled.sum(axis=0) / counts
        var = (np.where(observed, rows - mean, 0.0) ** 2).sum(axis=0) / counts
    std = np.sqrt(var)
    keep = (counts > 0) & (std > 0)
    dropped = [f for f, ok in zip(schema.numerical_features, keep) if not ok]
    for fid in dropped:
        log.warning("dropping numerical feature %s: zero variance on the training split", fid)
    absent_stays = np.isnan(train.values[:, :, :k]).any(axis=1).sum(axis=0)
    quality = {"stays": len(train),
               "absent_feature_stays": {f: int(n) for f, n in zip(schema.numerical_features, absent_stays)}}
    stats = NormalizationStats([f for f, ok in zip(schema.numerical_features, keep) if ok],
                               mean[keep], std[keep], dropped, schema.columns, quality)
    return stats, schema.without_numerical(dropped)


def _kept_columns(stats: NormalizationStats, k_src: int, l_src: int) -> np.ndarray:
    src_num = stats.source_columns[:k_src]
    num_cols = [src_num.index(f) for f in stats.features]
    return np.asarray(num_cols + list(range(k_src, l_src)), dtype=np.int64)


def _normalise_values(values: np.ndarray, pad_mask: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    l_src = len(stats.source_columns)
    if values.shape[-1] != l_src:
        raise CohortError(f"tensor has {values.shape[-1]} columns, stats expect {l_src}")
    k_src = len(stats.features) + len(stats.dropped)
    cols = _kept_columns(stats, k_src, l_src)
    out = values[..., cols].astype(np.float64)
    k = len(stats.features)
    z = (out[..., :k] - stats.mean) / stats.std
    out[..., :k] = np.nan_to_num(z, nan=0.0)
    out[~pad_mask] = 0.0
    return out.astype(np.float32)


def apply_normalization(t, stats: NormalizationStats):
    """Z-score numerical columns (absent features become 0); BOW columns pass through."""
    if isinstance(t, TensorSet):
        cols = stats.features + stats.source_columns[len(stats.features) + len(stats.dropped):]
        return TensorSet(_normalise_values(t.values, t.pad_mask, stats), t.pad_mask.copy(), t.labels.copy(),
                         list(t.stay_ids), t.years.copy(), cols)
    return TimeframeTensor(_normalise_values(t.values, t.pad_mask, stats), t.pad_mask.copy(), t.stay_id,
                           t.label, t.admission_year)
