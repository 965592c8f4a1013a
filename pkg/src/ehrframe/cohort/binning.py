"""Cleaning, timeframe binning, and the stacked tensor containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .records import NUMERICAL, CohortError, CohortRecord, FeatureSchema


class EmptyStayError(CohortError):
    pass


class LeakageError(AssertionError):
    pass


@dataclass
class TimeframeTensor:
    """One stay as a ``p_max x l`` matrix; row ``j`` covers a fixed ``h``-hour slot.

    Rows are chronological and the last row ends at the index time. Slots that
    fall before ICU admission are padding (``pad_mask`` False, all zeros).
    Numerical cells hold frame medians (NaN when the feature was never
    observed during the stay, until normalisation imputes it).
    """

    values: np.ndarray
    pad_mask: np.ndarray
    stay_id: str
    label: int
    admission_year: int = 0
    absent: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def p(self) -> int:
        return int(self.pad_mask.sum())


def clean(record: CohortRecord, schema: FeatureSchema) -> CohortRecord:
    """Drop numerical values outside the feature's valid range (inclusive bounds)."""
    kept = []
    changed = False
    for ev in record.events:
        if ev.kind == NUMERICAL:
            lo, hi = schema.valid_ranges[ev.feature_id]
            if not lo <= ev.value <= hi:
                changed = True
                continue
        kept.append(ev)
    return record.with_events(kept) if changed else record


def fill_gaps(column: np.ndarray) -> np.ndarray:
    """Fill NaNs along one feature column.

    Interior gaps interpolate linearly between the nearest observed bins;
    leading and trailing gaps copy the nearest observed value. A column with
    no observations is returned unchanged (all NaN).
    """
    col = np.asarray(column, dtype=np.float64)
    seen = np.flatnonzero(~np.isnan(col))
    if seen.size == 0 or seen.size == col.size:
        return col.copy()
    grid = np.arange(col.size)
    return np.interp(grid, seen, col[seen])


def _frame_medians(frames: np.ndarray, feats: np.ndarray, vals: np.ndarray, n_frames: int,
                   k: int) -> np.ndarray:
    out = np.full((n_frames, k), np.nan)
    if vals.size == 0:
        return out
    order = np.lexsort((vals, feats, frames))
    frames, feats, vals = frames[order], feats[order], vals[order]
    key = frames * k + feats
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    counts = np.diff(np.r_[starts, key.size])
    lo = vals[starts + (counts - 1) // 2]
    hi = vals[starts + counts // 2]
    out[frames[starts], feats[starts]] = (lo + hi) / 2.0
    return out


def bin_timeframes(record: CohortRecord, schema: FeatureSchema, h_hours: float = 4.0,
                   p_max: int = 30) -> TimeframeTensor:
    """Bin a cleaned stay into ``p_max`` frames of ``h_hours`` ending at the index time.

    Numerical cells are per-frame medians (even counts average the middle two),
    gap-filled along the frame axis; categorical cells are occurrence
    indicators. Only events in ``[index_time - p_max*h, index_time)`` count, so
    older history is truncated and nothing at or after the index leaks in.
    """
    if h_hours <= 0:
        raise ValueError("h_hours must be positive")
    index = float(record.index_time)
    start = index - p_max * h_hours
    slot_end = start + h_hours * np.arange(1, p_max + 1)
    real = slot_end > 0.0
    if not real.any():
        raise EmptyStayError(f"stay {record.stay_id} has no timeframe after admission")
    first_real = int(np.argmax(real))

    k, m = schema.k, schema.m
    num_f, num_i, num_v, cat_f, cat_i = [], [], [], [], []
    latest = -np.inf
    for ev in record.events:
        t = ev.timestamp
        if t >= index or t < start or t < 0:
            continue
        latest = max(latest, t)
        frame = min(int((t - start) // h_hours), p_max - 1)
        if ev.kind == NUMERICAL:
            num_f.append(frame)
            num_i.append(schema.numerical_index(ev.feature_id))
            num_v.append(ev.value)
        else:
            cat_f.append(frame)
            cat_i.append(schema.categorical_index(schema.map_code(ev.feature_id)))
    if latest >= index:
        raise LeakageError(f"stay {record.stay_id}: event at {latest} h reached past the index time")
    if not num_f and not cat_f:
        raise EmptyStayError(f"stay {record.stay_id} has no events in its feature window")
    if any(i is None for i in num_i) or any(i is None for i in cat_i):
        raise CohortError(f"stay {record.stay_id} has features outside the schema")

    values = np.zeros((p_max, k + m), dtype=np.float64)
    medians = _frame_medians(np.asarray(num_f, dtype=np.int64), np.asarray(num_i, dtype=np.int64),
                             np.asarray(num_v, dtype=np.float64), p_max, k)
    live = medians[first_real:]
    absent = np.isnan(live).all(axis=0) if k else np.zeros(0, dtype=bool)
    for j in range(k):
        live[:, j] = fill_gaps(live[:, j])
    values[first_real:, :k] = live
    if cat_f:
        values[np.asarray(cat_f), k + np.asarray(cat_i)] = 1.0
    values[~real] = 0.0
    return TimeframeTensor(values.astype(np.float32), real.copy(), record.stay_id, int(record.label),
                           int(record.admission_year), absent)


def contributing_events(record: CohortRecord, h_hours: float = 4.0, p_max: int = 30):
    """The events :func:`bin_timeframes` reads, for leakage auditing."""
    start = record.index_time - p_max * h_hours
    return [e for e in record.events if start <= e.timestamp < record.index_time and e.timestamp >= 0]


@dataclass
class TensorSet:
    """Stacked timeframe tensors, the unit the model and trainers consume."""

    values: np.ndarray          # (n, p_max, l) float32
    pad_mask: np.ndarray        # (n, p_max) bool
    labels: np.ndarray          # (n,) int
    stay_ids: list[str]
    years: np.ndarray           # (n,) int
    columns: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_tensors(cls, tensors: Sequence[TimeframeTensor], columns: Sequence[str] = ()) -> "TensorSet":
        if not tensors:
            raise CohortError("cannot stack an empty list of tensors")
        return cls(np.stack([t.values for t in tensors]).astype(np.float32),
                   np.stack([t.pad_mask for t in tensors]).astype(bool),
                   np.array([t.label for t in tensors], dtype=np.int64),
                   [t.stay_id for t in tensors],
                   np.array([t.admission_year for t in tensors], dtype=np.int64),
                   list(columns))

    def tensor(self, i: int) -> TimeframeTensor:
        return TimeframeTensor(self.values[i], self.pad_mask[i], self.stay_ids[i], int(self.labels[i]),
                               int(self.years[i]))

    def tensors(self) -> list[TimeframeTensor]:
        return [self.tensor(i) for i in range(len(self))]

    def subset(self, idx) -> "TensorSet":
        idx = np.asarray(idx, dtype=np.int64)
        return TensorSet(self.values[idx], self.pad_mask[idx], self.labels[idx],
                         [self.stay_ids[i] for i in idx], self.years[idx], list(self.columns))

    def save(self, path: str | Path) -> None:
        np.savez(path, values=self.values, pad_mask=self.pad_mask, labels=self.labels,
                 stay_ids=np.array(self.stay_ids), years=self.years, columns=np.array(self.columns))

    @classmethod
    def load(cls, path: str | Path) -> "TensorSet":
        with np.load(path, allow_pickle=False) as z:
            return cls(z["values"], z["pad_mask"], z["labels"], [str(s) for s in z["stay_ids"]],
                       z["years"], [str(c) for c in z["columns"]])


def tensorize(records: Sequence[CohortRecord], schema: FeatureSchema, h_hours: float = 4.0,
              p_max: int = 30, skip_empty: bool = True) -> tuple[list[TimeframeTensor], list[str]]:
    """Clean and bin every record; returns the tensors and ids of skipped empty stays."""
    out, skipped = [], []
    for rec in records:
        try:
            out.append(bin_timeframes(clean(rec, schema), schema, h_hours, p_max))
        except EmptyStayError:
            if not skip_empty:
                raise
            skipped.append(rec.stay_id)
    return out, skipped
