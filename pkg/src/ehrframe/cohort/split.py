"""Stay-level splits and class-balancing sampler weights."""

from __future__ import annotations

import math
from typing import Iterable, Sequence, TypeVar

import numpy as np

from .records import ConfigurationError, DegenerateCohortError

T = TypeVar("T")

TRAIN_YEARS = tuple(range(2008, 2017))
TEST_YEARS = (2017, 2018, 2019)


def _partition_val(items: list, val_fraction: float, rng: np.random.Generator):
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigurationError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    order = rng.permutation(len(items))
    n_val = int(round(val_fraction * len(items)))
    val = [items[i] for i in sorted(order[:n_val])]
    train = [items[i] for i in sorted(order[n_val:])]
    return train, val


def _check_nonempty(train, val, test, val_fraction) -> None:
    for name, part in (("train", train), ("val", val), ("test", test)):
        if not part and (name != "val" or val_fraction > 0):
            raise ConfigurationError(f"{name} split is empty")


def split_by_year(records: Sequence[T], train_years: Iterable[int], test_years: Iterable[int],
                  val_fraction: float, rng: np.random.Generator) -> tuple[list[T], list[T], list[T]]:
    """Test = stays admitted in ``test_years``; the rest of ``train_years`` splits train/val by stay."""
    train_years, test_years = set(train_years), set(test_years)
    if train_years & test_years:
        raise ConfigurationError(f"train and test years overlap: {sorted(train_years & test_years)}")
    test = [r for r in records if r.admission_year in test_years]
    pool = [r for r in records if r.admission_year in train_years]
    train, val = _partition_val(pool, val_fraction, rng)
    _check_nonempty(train, val, test, val_fraction)
    return train, val, test


def split_random(records: Sequence[T], test_fraction: float, val_fraction: float,
                 rng: np.random.Generator) -> tuple[list[T], list[T], list[T]]:
    """Random stay-level test split, then train/val from the remainder."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    items = list(records)
    order = rng.permutation(len(items))
    n_test = int(round(test_fraction * len(items)))
    test = [items[i] for i in sorted(order[:n_test])]
    pool = [items[i] for i in sorted(order[n_test:])]
    train, val = _partition_val(pool, val_fraction, rng)
    _check_nonempty(train, val, test, val_fraction)
    return train, val, test


def sampler_weights(labels: Sequence[int]) -> np.ndarray:
    """Per-sample weights proportional to 1/n_class, normalised to sum to one."""
    y = np.asarray(labels, dtype=np.int64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateCohortError("sampler weights need both classes present")
    w = np.where(y == 1, 1.0 / n_pos, 1.0 / n_neg)
    return w / w.sum()


def weighted_batches(labels: Sequence[int], batch_size: int, n_batches: int,
                     rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches drawn with replacement under :func:`sampler_weights`."""
    w = sampler_weights(labels)
    draws = rng.choice(len(w), size=batch_size * n_batches, replace=True, p=w)
    return [draws[i * batch_size:(i + 1) * batch_size] for i in range(n_batches)]


def shuffled_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
