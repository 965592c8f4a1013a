"""Cohort ingestion, cleaning, binning, normalisation, splitting and synthesis."""

from .binning import (
    EmptyStayError,
    LeakageError,
    TensorSet,
    TimeframeTensor,
    bin_timeframes,
    clean,
    contributing_events,
    fill_gaps,
    tensorize,
)
from .normalize import NormalizationStats, apply_normalization, fit_normalization
from .records import (
    CATEGORICAL,
    NUMERICAL,
    CohortError,
    CohortParseError,
    CohortRecord,
    ConfigurationError,
    DegenerateCohortError,
    Event,
    FeatureSchema,
    SchemaError,
    load_cohort,
    load_schema,
    save_cohort,
    save_schema,
)
from .split import (
    TEST_YEARS,
    TRAIN_YEARS,
    sampler_weights,
    shuffled_batches,
    split_by_year,
    split_random,
    weighted_batches,
)
from .synth import SynthCohort, SynthConfig, load_ground_truth, save_ground_truth, synth_generate

__all__ = [name for name in dir() if not name.startswith("_")]
