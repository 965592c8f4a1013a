"""Sectioned ``key = value`` run configuration.

Every key has a typed default; a config file and ``--set section.key=value``
overrides are layered on top, and the fully resolved result is what a run
directory echoes back.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any, Callable

from ..cohort import SynthConfig
from ..model import ModelConfig
from ..train import TrainPlan, finetune_defaults, pretrain_defaults


class ConfigError(ValueError):
    """Bad config file, unknown key or unparseable value (a usage error)."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    def inner(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else parse(text)
    return inner


def _years(text: str) -> tuple[int, ...]:
    """``2008-2016`` or ``2017,2018,2019`` (ranges and lists may mix)."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(p) for p in part.split("-", 1))
            out.extend(range(lo, hi + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _names(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in _names(text))


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


_PARSERS = {"int": int, "float": float, "str": str, "bool": _bool,
            "int | None": _optional(int), "float | None": _optional(float)}


def _dataclass_keys(cls, defaults: dict, skip: tuple[str, ...] = ()) -> dict[str, tuple[Callable, Any]]:
    keys = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        type_name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        if type_name.startswith("tuple"):
            parse = _ints if "int" in type_name else _names
        else:
            parse = _PARSERS[type_name]
        default = defaults.get(f.name, f.default if f.default is not MISSING else None)
        keys[f.name] = (parse, default)
    return keys


# desk-scale defaults: small widths, fewer epochs and lighter fine-tune dropout than the flagship sizes
DESK_MODEL = {"d_model": 32, "d_ff": 64, "n_heads": 4, "n_layers": 2, "gct_dim": 16, "gct_ff": 32,
              "gct_heads": 2, "gct_layers": 2}
DESK_PRETRAIN = {"epochs": 3}
DESK_FINETUNE = {"epochs": 10, "dropout": 0.1}

SECTIONS: dict[str, dict[str, tuple[Callable, Any]]] = {
    "data": {
        "cohort": (str, ""),
        "schema": (str, ""),
        "h_hours": (float, 4.0),
        "p_max": (int, 30),
        "t1_hours": (float, 120.0),
        "t2_hours": (float, 48.0),
        "split_mode": (str, "by_year"),
        "train_years": (_years, tuple(range(2008, 2017))),
        "test_years": (_years, (2017, 2018, 2019)),
        "val_fraction": (float, 0.2),
        "test_fraction": (float, 0.25),
        "seed": (int, 0),
    },
    "synth": _dataclass_keys(SynthConfig, {}),
    "model": _dataclass_keys(ModelConfig, DESK_MODEL, skip=("k", "m", "p_max", "seed")),
    "pretrain": _dataclass_keys(TrainPlan, {**pretrain_defaults().to_dict(), **DESK_PRETRAIN},
                                skip=("stage", "seed")),
    "finetune": _dataclass_keys(TrainPlan, {**finetune_defaults().to_dict(), **DESK_FINETUNE},
                                skip=("stage", "seed")),
    "eval": {
        "variants": (_names, ("full",)),
        "n_runs": (int, 10),
        "base_seed": (int, 0),
    },
    "explain": {
        "n_stays": (int, 100),
        "n_baselines": (int, 50),
        "n_samples": (int, 256),
        "top_n": (_optional(int), None),
        "seed": (int, 0),
    },
}


class RunConfig:
    """Resolved, typed values for every section and key."""

    def __init__(self, values: dict[str, dict[str, Any]]):
        self.values = values

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def set(self, section: str, key: str, text: str) -> None:
        spec = SECTIONS.get(section)
        if spec is None:
            raise ConfigError(f"unknown section [{section}]; valid sections: {', '.join(SECTIONS)}")
        if key not in spec:
            raise ConfigError(f"unknown key {key!r} in [{section}]; valid keys: {', '.join(sorted(spec))}")
        parse = spec[key][0]
        try:
            self.values[section][key] = parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {text!r} ({exc})") from exc

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, vals in self.values.items():
            parser[section] = {k: _format(v) for k, v in vals.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def default_config() -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in spec.items()} for s, spec in SECTIONS.items()})


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the config file (if any), then ``section.key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            for key, text in parser[section].items():
                cfg.set(section, key, text)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, text = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cfg.set(section, key.strip(), text.strip())
    return cfg


def model_config(cfg: RunConfig, k: int, m: int, seed: int) -> ModelConfig:
    return ModelConfig(k=k, m=m, p_max=cfg["data"]["p_max"], seed=seed, **cfg["model"])


def train_plan(cfg: RunConfig, stage: str, seed: int) -> TrainPlan:
    return TrainPlan(stage=stage, seed=seed, **cfg[stage])


def synth_config(cfg: RunConfig) -> SynthConfig:
    return SynthConfig(**cfg["synth"])
