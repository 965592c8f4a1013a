from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from .attribution import Attribution


def _sign_correlation(attr: np.ndarray, z: np.ndarray) -> float:
    """Pearson correlation of attribution with feature value; 0 when either is constant.

    Sums use ``math.fsum`` so the result does not depend on cell order.
    """
    n = attr.size
    if n < 2:
        return 0.0
    sa, sz = math.fsum(attr), math.fsum(z)
    saa, szz, saz = math.fsum(attr * attr), math.fsum(z * z), math.fsum(attr * z)
    cov = saz - sa * sz / n
    va = saa - sa * sa / n
    vz = szz - sz * sz / n
    if va <= 1e-300 or vz <= 1e-300:
        return 0.0
    return max(-1.0, min(1.0, cov / math.sqrt(va * vz)))


def summarize(attributions: Sequence[Attribution], columns: Sequence[str] | None = None,
              top_n: int | None = None) -> list[dict]:
    """Rank features by mean |attribution| over every real (stay, timeframe) cell.

    Each row carries ``feature_id``, ``mean_abs_attr``, ``sign_correlation``
    (attribution vs input value, for direction-of-effect reading) and
    ``rank`` (1 = most important; ties keep column order).
    """
    if not attributions:
        raise ValueError("summarize needs at least one attribution")
    columns = list(columns or attributions[0].columns)
    attr = np.concatenate([a.values[a.pad_mask] for a in attributions]).astype(np.float64)
    inputs = np.concatenate([a.inputs[a.pad_mask] for a in attributions]).astype(np.float64)
    if attr.shape[1] != len(columns):
        raise ValueError(f"{attr.shape[1]} attribution columns but {len(columns)} names")
    n_cells = attr.shape[0]
    rows = []
    for c, fid in enumerate(columns):
        mean_abs = math.fsum(np.abs(attr[:, c])) / n_cells if n_cells else 0.0
        rows.append({"feature_id": fid, "mean_abs_attr": mean_abs,
                     "sign_correlation": _sign_correlation(attr[:, c], inputs[:, c])})
    order = sorted(range(len(rows)), key=lambda i: -rows[i]["mean_abs_attr"])
    ranked = []
    for r, i in enumerate(order, start=1):
        ranked.append({**rows[i], "rank": r})
    return ranked[:top_n] if top_n is not None else ranked


def save_summary(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["feature_id", "mean_abs_attr", "sign_correlation", "rank"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def load_summary(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"feature_id": r["feature_id"], "mean_abs_attr": float(r["mean_abs_attr"]),
                 "sign_correlation": float(r["sign_correlation"]), "rank": int(r["rank"])}
                for r in csv.DictReader(fh)]
