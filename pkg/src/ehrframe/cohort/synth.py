"""Synthetic ICU cohorts with planted, known label signal.

Each stay carries per-feature physiology (a stay-level offset, a circadian
wave and measurement noise) on top of two kinds of planted signal:

* temporal drift: a linear ramp over the ``signal_hours`` before the index
  time on ``drift_features``, whose slope is the stay's latent ``d``;
* interaction: level shifts ``a`` and ``b`` on the two
  ``interaction_features``, redrawn for each of ``interaction_frames``
  frames counted back from the index (or held for the whole stay when
  ``interaction_scope`` is ``"stay"``). Risk depends on the products
  ``a_j * b_j``, so neither feature is informative on its own and the
  pairing only shows up within a single frame.

The label logit is ``c + strength * (w_drift * d + w_inter * sum_j a_j b_j / sqrt(J))`` with
``c`` solved so the expected prevalence matches the configuration. The ramp
and shifts persist after the index time, so any post-index leakage would be
rewarded by the labels.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .records import CATEGORICAL, NUMERICAL, CohortRecord, ConfigurationError, Event, FeatureSchema

# name, mean, sd, valid range
PHYSIOLOGY = [
    ("heart_rate", 85.0, 15.0, (0.0, 300.0)),
    ("resp_rate", 18.0, 4.0, (0.0, 80.0)),
    ("temperature", 37.0, 0.6, (25.0, 45.0)),
    ("mchc", 33.0, 1.5, (20.0, 45.0)),
    ("wbc", 9.0, 2.5, (0.0, 200.0)),
    ("lactate", 2.5, 0.5, (0.0, 30.0)),
]


@dataclass
class SynthConfig:
    n_stays: int = 3000
    n_numerical: int = 6
    n_codes: int = 6
    prevalence: float = 0.044
    signal_strength: float = 1.0
    drift_features: tuple[int, ...] = (0, 2)
    interaction_features: tuple[int, int] = (3, 4)
    drift_weight: float = 2.0
    interaction_weight: float = 3.0
    drift_amplitude: float = 1.5
    interaction_amplitude: float = 1.5
    interaction_scope: str = "frame"   # "frame": fresh shifts every frame; "stay": one shift per stay
    interaction_frames: int = 12
    frame_hours: float = 4.0
    signal_hours: float = 24.0
    first_year: int = 2008
    last_year: int = 2019
    min_index_hours: float = 48.0
    max_index_hours: float = 168.0
    t2_hours: float = 48.0
    measure_rate: float = 0.5          # numerical measurements per hour per feature
    code_rate: float = 0.05            # code events per hour per code
    noise_sd: float = 0.3
    offset_sd: float = 0.5
    absent_prob: float = 0.02          # feature never measured during the stay
    corrupt_prob: float = 0.003        # value replaced by an out-of-range reading
    raw_code_variants: int = 2

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ConfigurationError(f"prevalence must lie in (0, 1), got {self.prevalence}")
        if self.n_stays < 1 or self.n_numerical < 1 or self.n_codes < 0:
            raise ConfigurationError("n_stays and n_numerical must be positive, n_codes non-negative")
        used = set(self.drift_features) | set(self.interaction_features)
        if used and max(used) >= self.n_numerical:
            raise ConfigurationError("signal feature index exceeds n_numerical")
        if len(self.interaction_features) not in (0, 2):
            raise ConfigurationError("interaction_features needs exactly two indices (or none)")
        if self.interaction_scope not in ("frame", "stay"):
            raise ConfigurationError(f"interaction_scope must be 'frame' or 'stay', got {self.interaction_scope!r}")
        if self.interaction_frames < 1 or self.frame_hours <= 0:
            raise ConfigurationError("interaction_frames and frame_hours must be positive")
        if self.min_index_hours > self.max_index_hours:
            raise ConfigurationError("min_index_hours exceeds max_index_hours")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, val in d.items():
            if key not in known:
                raise ConfigurationError(f"unknown synth key {key!r}; valid: {sorted(known)}")
            kwargs[key] = val
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthCohort:
    records: list[CohortRecord]
    schema: FeatureSchema
    bayes_scores: dict[str, float]
    signal_features: list[str]
    logits: dict[str, float] = field(default_factory=dict)

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records])


def _physiology(n: int):
    rows = list(PHYSIOLOGY[:n])
    for j in range(len(rows), n):
        rows.append((f"lab_{j:02d}", 10.0, 2.0, (-1000.0, 1000.0)))
    return rows


def make_schema(cfg: SynthConfig) -> FeatureSchema:
    phys = _physiology(cfg.n_numerical)
    codes = tuple(f"code_{c:02d}" for c in range(cfg.n_codes))
    group_map = None
    if cfg.raw_code_variants > 1:
        group_map = {f"{code}.{v}": code for code in codes for v in range(cfg.raw_code_variants)}
    return FeatureSchema(tuple(p[0] for p in phys), {p[0]: p[3] for p in phys}, codes, group_map)


def _solve_intercept(signal: np.ndarray, prevalence: float) -> float:
    def gap(c):
        return float(np.mean(1.0 / (1.0 + np.exp(-(c + signal))))) - prevalence
    return brentq(gap, -60.0, 60.0, xtol=1e-12)


def _blocks(times: np.ndarray, index: float, cfg: SynthConfig, n_blocks: int) -> np.ndarray:
    """Interaction block of each timestamp: frames counted back from the index time.

    Older measurements cycle through the blocks and post-index ones repeat
    them, so every timestamp carries some block's shifts.
    """
    if n_blocks == 1:
        return np.zeros(times.shape, dtype=int)
    before = np.floor((index - times) / cfg.frame_hours)
    after = np.floor((times - index) / cfg.frame_hours)
    return np.where(times < index, before, after).astype(int) % n_blocks


def synth_generate(cfg: SynthConfig, rng: np.random.Generator) -> SynthCohort:
    schema = make_schema(cfg)
    phys = _physiology(cfg.n_numerical)
    n, k = cfg.n_stays, cfg.n_numerical

    years = rng.integers(cfg.first_year, cfg.last_year + 1, size=n)
    index_times = np.round(rng.uniform(cfg.min_index_hours, cfg.max_index_hours, size=n), 2)
    drift = rng.standard_normal(n)
    n_blocks = cfg.interaction_frames if cfg.interaction_scope == "frame" else 1
    inter = rng.standard_normal((n, n_blocks, 2))
    signal = cfg.signal_strength * cfg.drift_weight * drift * bool(cfg.drift_features)
    if cfg.interaction_features:
        product = (inter[:, :, 0] * inter[:, :, 1]).sum(axis=1) / np.sqrt(n_blocks)
        signal = signal + cfg.signal_strength * cfg.interaction_weight * product
    intercept = _solve_intercept(signal, cfg.prevalence)
    logits = intercept + signal
    probs = 1.0 / (1.0 + np.exp(-logits))
    labels = (rng.random(n) < probs).astype(int)

    drift_sign = {f: (1.0 if i % 2 == 0 else -1.0) for i, f in enumerate(cfg.drift_features)}
    inter_slot = {f: i for i, f in enumerate(cfg.interaction_features)}

    records = []
    for s in range(n):
        index = float(index_times[s])
        end = index + cfg.t2_hours
        onset = index - cfg.signal_hours
        events: list[Event] = []
        offsets = rng.normal(0.0, cfg.offset_sd, size=k)
        phases = rng.uniform(0, 2 * np.pi, size=k)
        absent = rng.random(k) < cfg.absent_prob
        for f in range(k):
            count = rng.poisson(cfg.measure_rate * end)
            times = np.sort(rng.uniform(0.0, end, size=count))
            if absent[f] or count == 0:
                continue
            u = offsets[f] + 0.3 * np.sin(2 * np.pi * times / 24.0 + phases[f])
            u = u + rng.normal(0.0, cfg.noise_sd, size=count)
            if f in drift_sign:
                ramp = np.clip((times - onset) / cfg.signal_hours, 0.0, None)
                u = u + drift_sign[f] * cfg.drift_amplitude * drift[s] * ramp
            if f in inter_slot:
                u = u + cfg.interaction_amplitude * inter[s, _blocks(times, index, cfg, n_blocks), inter_slot[f]]
            name, mu, sd, (lo, hi) = phys[f]
            vals = mu + sd * u
            corrupt = rng.random(count) < cfg.corrupt_prob
            vals = np.where(corrupt, hi + 10.0 * sd + abs(hi), vals)
            times = np.round(times, 3)
            events.extend(Event(name, NUMERICAL, float(v), float(t)) for v, t in zip(vals, times))
        for c, code in enumerate(schema.categorical_codes):
            rate = cfg.code_rate * rng.gamma(2.0, 0.5)
            count = rng.poisson(rate * end)
            times = np.round(rng.uniform(0.0, end, size=count), 3)
            variants = rng.integers(0, max(cfg.raw_code_variants, 1), size=count)
            for t, v in zip(times, variants):
                raw = f"{code}.{v}" if cfg.raw_code_variants > 1 else code
                events.append(Event(raw, CATEGORICAL, None, float(t)))
        events.sort(key=lambda e: (e.timestamp, e.feature_id))
        records.append(CohortRecord(f"S{s:06d}", int(years[s]), tuple(events), index, int(labels[s]),
                                    t2_hours=cfg.t2_hours))

    names = [phys[f][0] for f in sorted(set(cfg.drift_features) | set(cfg.interaction_features))]
    ids = [r.stay_id for r in records]
    return SynthCohort(records, schema, dict(zip(ids, probs.tolist())), names, dict(zip(ids, logits.tolist())))


def save_ground_truth(cohort: SynthCohort, path: str | Path) -> None:
    lines = [f"# signal_features: {','.join(cohort.signal_features)}", "stay_id\tbayes_score\tlabel"]
    lines += [f"{r.stay_id}\t{cohort.bayes_scores[r.stay_id]!r}\t{r.label}" for r in cohort.records]
    Path(path).write_text("\n".join(lines) + "\n")


def load_ground_truth(path: str | Path) -> tuple[dict[str, tuple[float, int]], list[str]]:
    truth, signal = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# signal_features:"):
            signal = [s for s in line.split(":", 1)[1].strip().split(",") if s]
        elif line and not line.startswith("#") and not line.startswith("stay_id"):
            sid, score, label = line.split("\t")
            truth[sid] = (float(score), int(label))
    return truth, signal
