"""Repeated-split experiment harness with component ablations."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..cohort import (
    TEST_YEARS,
    TRAIN_YEARS,
    ConfigurationError,
    FeatureSchema,
    TensorSet,
    TimeframeTensor,
    apply_normalization,
    fit_normalization,
    split_by_year,
    split_random,
)
from ..model import ModelConfig, TimeframeModel
from ..numcore import stream
from ..train import loops as train_loops
from ..train.plan import TrainPlan, finetune_defaults, pretrain_defaults
from .metrics import auc_roc

log = logging.getLogger(__name__)

SPLIT_MODES = ("by_year", "random")


@dataclass(frozen=True)
class Components:
    """Which refinements a variant switches on."""

    gct: bool = True
    transfer: bool = True
    focal: bool = True
    sampler: bool = True
    child: bool = False
    logreg: bool = False


_TOGGLES = {
    "no_gct": {"gct": False},
    "no_tl": {"transfer": False},
    "no_focal": {"focal": False},
    "no_sampler": {"sampler": False},
    "no_child": {"child": False},
    "child": {"child": True},
}
_BASES = {
    "full": Components(),
    "plain": Components(gct=False, transfer=False, focal=False, sampler=False, child=False),
    "logreg": Components(gct=False, transfer=False, focal=False, sampler=False, child=False, logreg=True),
}
VARIANTS = tuple(_BASES) + tuple(_TOGGLES)


def parse_variant(name: str) -> Components:
    """``full``, ``plain``, ``logreg`` or toggles such as ``no_gct`` joined with ``+``.

    Toggles apply on top of ``full`` unless the first token is a base.
    """
    tokens = [t.strip() for t in name.split("+") if t.strip()]
    if not tokens:
        raise ConfigurationError("empty variant name")
    comp = _BASES.get(tokens[0])
    if comp is not None:
        tokens = tokens[1:]
    else:
        comp = _BASES["full"]
    for tok in tokens:
        if tok not in _TOGGLES:
            raise ConfigurationError(f"unknown variant component {tok!r}; valid: {sorted(VARIANTS)}")
        comp = replace(comp, **_TOGGLES[tok])
    return comp


@dataclass
class ExperimentConfig:
    model: ModelConfig
    pretrain: TrainPlan = field(default_factory=pretrain_defaults)
    finetune: TrainPlan = field(default_factory=finetune_defaults)
    variants: tuple[str, ...] = ("full",)
    n_runs: int = 10
    base_seed: int = 0
    split_mode: str = "by_year"
    train_years: tuple[int, ...] = TRAIN_YEARS
    test_years: tuple[int, ...] = TEST_YEARS
    val_fraction: float = 0.2
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.split_mode not in SPLIT_MODES:
            raise ConfigurationError(f"split_mode must be one of {SPLIT_MODES}, got {self.split_mode!r}")
        if self.n_runs < 1:
            raise ConfigurationError("n_runs must be >= 1")
        for v in self.variants:
            parse_variant(v)


def split_tensors(tensors: Sequence[TimeframeTensor], cfg: ExperimentConfig, seed: int):
    rng = stream(seed, "split")
    if cfg.split_mode == "by_year":
        return split_by_year(tensors, cfg.train_years, cfg.test_years, cfg.val_fraction, rng)
    return split_random(tensors, cfg.test_fraction, cfg.val_fraction, rng)


def _logreg_auc(train: TensorSet, test: TensorSet, seed: int) -> float:
    from sklearn.linear_model import LogisticRegression

    def flat(ts: TensorSet) -> np.ndarray:
        return np.concatenate([ts.values.reshape(len(ts), -1), ts.pad_mask.astype(np.float32)], axis=1)

    clf = LogisticRegression(max_iter=2000, class_weight="balanced", random_state=seed)
    clf.fit(flat(train), train.labels)
    return auc_roc(clf.decision_function(flat(test)), test.labels)


def _model_config(cfg: ExperimentConfig, schema: FeatureSchema, comp: Components, seed: int) -> ModelConfig:
    return replace(cfg.model, k=schema.k, m=schema.m, seed=seed,
                   embedder="gct" if comp.gct else "linear")


def _finetune_plan(cfg: ExperimentConfig, comp: Components, seed: int) -> TrainPlan:
    plan = cfg.finetune.replace(seed=seed, child_tuning=comp.child)
    if not comp.focal:
        plan = plan.replace(focal_gamma=0.0, focal_alpha_mode="none")
    if not comp.sampler:
        plan = plan.replace(sampler="uniform")
    return plan


def run_single(tensors: Sequence[TimeframeTensor], schema: FeatureSchema, cfg: ExperimentConfig,
               run: int) -> list[dict]:
    """One split, every variant; returns one metrics row per variant."""
    seed = cfg.base_seed + run
    train_t, val_t, test_t = split_tensors(tensors, cfg, seed)
    stats, reduced = fit_normalization(train_t, schema)
    train, val, test = (apply_normalization(TensorSet.from_tensors(part, schema.columns), stats)
                        for part in (train_t, val_t, test_t))
    pretrained: dict[str, TimeframeModel] = {}
    rows = []
    for name in cfg.variants:
        comp = parse_variant(name)
        started = time.perf_counter()
        row = {"variant": name, "run": run, "seed": seed, "split_mode": cfg.split_mode,
               "n_train": len(train), "n_val": len(val), "n_test": len(test)}
        if comp.logreg:
            row.update(auc=_logreg_auc(train, test, seed), epoch_selected=-1, val_auc="")
        else:
            mcfg = _model_config(cfg, reduced, comp, seed)
            model = TimeframeModel(mcfg)
            if comp.transfer:
                if mcfg.embedder not in pretrained:
                    plan = cfg.pretrain.replace(seed=seed)
                    pretrained[mcfg.embedder] = train_loops.pretrain(model, train, plan).model
                model = pretrained[mcfg.embedder]
            result = train_loops.finetune(model, train, val, _finetune_plan(cfg, comp, seed))
            row.update(auc=train_loops.evaluate_auc(result.model, test), epoch_selected=result.best_epoch,
                       val_auc="" if result.val_auc is None else result.val_auc)
        log.info("run %d variant %s auc %.4f (%.1fs)", run, name, row["auc"], time.perf_counter() - started)
        rows.append(row)
    return rows


def run_experiments(tensors: Sequence[TimeframeTensor], schema: FeatureSchema, cfg: ExperimentConfig,
                    n_runs: int | None = None) -> list[dict]:
    """Run ``n_runs`` seeded splits (seed = base_seed + i) over every configured variant.

    ``tensors`` are binned but not normalised; normalisation is refit on each
    run's training split. Pretraining uses the training split only.
    """
    n_runs = cfg.n_runs if n_runs is None else n_runs
    rows = []
    for run in range(n_runs):
        rows.extend(run_single(tensors, schema, cfg, run))
    return rows
