"""Cohort records, feature schema, and their text formats.

Cohort line format (one ICU stay per line, tab separated, ``#`` comments)::

    stay_id <TAB> admission_year <TAB> index_time <TAB> label <TAB> events

``events`` is a ``;``-separated list of ``feature_id,kind,value,timestamp``
tuples. ``kind`` is ``n`` (numerical, finite value) or ``c`` (categorical,
empty value). Timestamps are hours since ICU admission. An empty events
field is allowed.

Schema file (whitespace separated, ``#`` comments)::

    numerical <feature_id> <min> <max>
    categorical <code_id>
    code_group_map <path>        # optional, relative to the schema file

The group map is a two-column tab-separated table ``raw_code <TAB> group``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

NUMERICAL = "numerical"
CATEGORICAL = "categorical"
_KIND_CODES = {"n": NUMERICAL, "c": CATEGORICAL}
_KIND_TAGS = {NUMERICAL: "n", CATEGORICAL: "c"}


class CohortError(ValueError):
    """Base class for cohort-level failures."""


class CohortParseError(CohortError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


class SchemaError(CohortError):
    pass


class ConfigurationError(CohortError):
    pass


class DegenerateCohortError(CohortError):
    """Raised when an operation needs both classes but sees only one."""


@dataclass(frozen=True, slots=True)
class Event:
    feature_id: str
    kind: str
    value: float | None
    timestamp: float

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == NUMERICAL:
            if self.value is None or not math.isfinite(self.value):
                raise ValueError(f"numerical event {self.feature_id} needs a finite value")
        elif self.value is not None:
            raise ValueError(f"categorical event {self.feature_id} must not carry a value")
        if not (self.timestamp >= 0 and math.isfinite(self.timestamp)):
            raise ValueError(f"event timestamp must be finite and >= 0, got {self.timestamp}")


@dataclass(frozen=True)
class CohortRecord:
    stay_id: str
    admission_year: int
    events: tuple[Event, ...]
    index_time: float
    label: int
    t1_hours: float = 120.0
    t2_hours: float = 48.0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.index_time < 0:
            raise ValueError("index_time must be >= 0")

    def with_events(self, events: Iterable[Event]) -> "CohortRecord":
        return replace(self, events=tuple(events))


@dataclass(frozen=True)
class FeatureSchema:
    numerical_features: tuple[str, ...]
    valid_ranges: dict[str, tuple[float, float]]
    categorical_codes: tuple[str, ...]
    code_group_map: dict[str, str] | None = None
    _num_index: dict[str, int] = field(init=False, repr=False, compare=False)
    _cat_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = list(self.numerical_features) + list(self.categorical_codes)
        if len(set(ids)) != len(ids):
            raise SchemaError("feature ids must be unique across numerical and categorical")
        for fid in self.numerical_features:
            if fid not in self.valid_ranges:
                raise SchemaError(f"numerical feature {fid} has no valid range")
            lo, hi = self.valid_ranges[fid]
            if not lo < hi:
                raise SchemaError(f"valid range for {fid} needs min < max, got ({lo}, {hi})")
        object.__setattr__(self, "_num_index", {f: i for i, f in enumerate(self.numerical_features)})
        object.__setattr__(self, "_cat_index", {c: i for i, c in enumerate(self.categorical_codes)})

    @property
    def k(self) -> int:
        return len(self.numerical_features)

    @property
    def m(self) -> int:
        return len(self.categorical_codes)

    @property
    def l(self) -> int:  # noqa: E743
        return self.k + self.m

    @property
    def columns(self) -> list[str]:
        return list(self.numerical_features) + list(self.categorical_codes)

    def numerical_index(self, fid: str) -> int | None:
        return self._num_index.get(fid)

    def categorical_index(self, code: str) -> int | None:
        return self._cat_index.get(code)

    def map_code(self, raw: str) -> str:
        if self.code_group_map:
            return self.code_group_map.get(raw, raw)
        return raw

    def without_numerical(self, dropped: Iterable[str]) -> "FeatureSchema":
        dropped = set(dropped)
        keep = tuple(f for f in self.numerical_features if f not in dropped)
        return FeatureSchema(keep, {f: self.valid_ranges[f] for f in keep},
                             self.categorical_codes, self.code_group_map)


# -- schema file ------------------------------------------------------------

def load_group_map(path: str | Path) -> dict[str, str]:
    table = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise CohortParseError(path, lineno, "group map lines need 'raw<TAB>group'")
        table[parts[0].strip()] = parts[1].strip()
    return table


def load_schema(path: str | Path) -> FeatureSchema:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"schema file not found: {path}")
    numerical, ranges, codes, group_map = [], {}, [], None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == NUMERICAL and len(parts) == 4:
                numerical.append(parts[1])
                ranges[parts[1]] = (float(parts[2]), float(parts[3]))
            elif parts[0] == CATEGORICAL and len(parts) == 2:
                codes.append(parts[1])
            elif parts[0] == "code_group_map" and len(parts) == 2:
                group_map = load_group_map(path.parent / parts[1])
            else:
                raise CohortParseError(path, lineno, f"unrecognised schema line {line!r}")
        except ValueError as exc:
            if isinstance(exc, CohortParseError):
                raise
            raise CohortParseError(path, lineno, str(exc)) from exc
    return FeatureSchema(tuple(numerical), ranges, tuple(codes), group_map)


def save_schema(schema: FeatureSchema, path: str | Path, group_map_file: str | None = None) -> None:
    path = Path(path)
    lines = ["# kind id [min max]"]
    for fid in schema.numerical_features:
        lo, hi = schema.valid_ranges[fid]
        lines.append(f"{NUMERICAL} {fid} {lo!r} {hi!r}")
    lines += [f"{CATEGORICAL} {c}" for c in schema.categorical_codes]
    if schema.code_group_map:
        group_map_file = group_map_file or path.stem + ".groups.tsv"
        (path.parent / group_map_file).write_text(
            "".join(f"{raw}\t{grp}\n" for raw, grp in schema.code_group_map.items()))
        lines.append(f"code_group_map {group_map_file}")
    path.write_text("\n".join(lines) + "\n")


# -- cohort file ------------------------------------------------------------

def format_event(ev: Event) -> str:
    value = "" if ev.value is None else repr(float(ev.value))
    return f"{ev.feature_id},{_KIND_TAGS[ev.kind]},{value},{float(ev.timestamp)!r}"


def format_record(rec: CohortRecord) -> str:
    events = ";".join(format_event(e) for e in rec.events)
    return f"{rec.stay_id}\t{rec.admission_year}\t{float(rec.index_time)!r}\t{rec.label}\t{events}"


def save_cohort(records: Iterable[CohortRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("# stay_id\tadmission_year\tindex_time\tlabel\tfeature,kind,value,timestamp;...\n")
        for rec in records:
            fh.write(format_record(rec) + "\n")


def _parse_event(token: str, schema: FeatureSchema | None) -> Event:
    parts = token.split(",")
    if len(parts) != 4:
        raise ValueError(f"event {token!r} needs 4 comma-separated fields")
    fid, tag, value, ts = parts
    kind = _KIND_CODES.get(tag)
    if kind is None:
        raise ValueError(f"event kind must be 'n' or 'c', got {tag!r}")
    if kind == CATEGORICAL:
        if value:
            raise ValueError(f"categorical event {fid} must have an empty value field")
        if schema is not None:
            fid = schema.map_code(fid)
            if schema.categorical_index(fid) is None:
                raise SchemaError(f"unknown categorical code {fid!r}")
        return Event(fid, kind, None, float(ts))
    if schema is not None and schema.numerical_index(fid) is None:
        raise SchemaError(f"unknown numerical feature {fid!r}")
    return Event(fid, kind, float(value), float(ts))


def parse_record(line: str, schema: FeatureSchema | None = None, *, t1_hours: float = 120.0,
                 t2_hours: float = 48.0) -> CohortRecord:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 5:
        raise ValueError(f"expected 5 tab-separated fields, got {len(fields)}")
    stay_id, year, index_time, label, events = fields
    evs = tuple(_parse_event(tok, schema) for tok in events.split(";") if tok)
    return CohortRecord(stay_id, int(year), evs, float(index_time), int(label), t1_hours, t2_hours)


def load_cohort(path: str | Path, schema: FeatureSchema | None = None, *, t1_hours: float = 120.0,
                t2_hours: float = 48.0) -> list[CohortRecord]:
    """Parse a cohort file; raw codes are mapped through the schema's group map."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cohort file not found: {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                records.append(parse_record(line, schema, t1_hours=t1_hours, t2_hours=t2_hours))
            except SchemaError as exc:
                raise SchemaError(f"{path}:{lineno}: {exc}") from exc
            except ValueError as exc:
                raise CohortParseError(path, lineno, str(exc)) from exc
    return records


def labels_of(items: Sequence) -> list[int]:
    return [int(x.label) for x in items]
