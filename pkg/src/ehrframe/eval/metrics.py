from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


def auc_roc(scores, labels) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic.

    Ties between a positive and a negative earn half credit (midranks).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    pos = y == 1
    n1 = int(pos.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise MetricError("AUC is undefined unless both classes are present")
    if not np.isfinite(s).all():
        raise MetricError("scores must be finite")
    ranks = rankdata(s, method="average")
    # midranks are multiples of 1/2, so doubling keeps the sum exact in integers
    twice_u = int(np.rint(2.0 * ranks[pos].sum())) - n1 * (n1 + 1)
    return twice_u / (2.0 * n1 * n0)
