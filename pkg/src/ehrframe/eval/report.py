from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .stats import StatsError, welch_t_test

METRIC_FIELDS = ("variant", "run", "seed", "split_mode", "n_train", "n_val", "n_test", "auc",
                 "epoch_selected", "val_auc")
_INT_FIELDS = ("run", "seed", "n_train", "n_val", "n_test", "epoch_selected")
_FLOAT_FIELDS = ("auc", "val_auc")


def save_metrics(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def load_metrics(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            for k in _INT_FIELDS:
                row[k] = int(row[k])
            for k in _FLOAT_FIELDS:
                row[k] = float(row[k]) if row[k] != "" else ""
            rows.append(row)
    return rows


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.3g} ± {std:.2g}"


@dataclass
class Report:
    summary: list[dict]     # variant, n_runs, mean_auc, std_auc, delta_vs_full
    pairwise: list[dict]    # a, b, t, dof, p

    def text(self) -> str:
        lines = ["variant\truns\tAUC\tdelta_vs_full"]
        for s in self.summary:
            delta = "" if s["delta_vs_full"] == "" else f"{s['delta_vs_full']:+.4f}"
            lines.append(f"{s['variant']}\t{s['n_runs']}\t{format_mean_std(s['mean_auc'], s['std_auc'])}\t{delta}")
        if self.pairwise:
            lines += ["", "pairwise Welch t-tests", "a\tb\tt\tdof\tp"]
            for c in self.pairwise:
                lines.append(f"{c['a']}\t{c['b']}\t{c['t']:.4g}\t{c['dof']:.4g}\t{c['p']:.4g}")
        return "\n".join(lines) + "\n"

    def save_csv(self, path: str | Path) -> None:
        """Summary rows followed by pairwise rows, distinguished by ``section``."""
        fields = ["section", "variant", "n_runs", "mean_auc", "std_auc", "delta_vs_full", "a", "b", "t", "dof", "p"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, restval="")
            writer.writeheader()
            for s in self.summary:
                writer.writerow({"section": "summary", **{k: repr(v) if isinstance(v, float) else v
                                                          for k, v in s.items()}})
            for c in self.pairwise:
                writer.writerow({"section": "pairwise", **{k: repr(v) if isinstance(v, float) else v
                                                           for k, v in c.items()}})

    @classmethod
    def load_csv(cls, path: str | Path) -> "Report":
        summary, pairwise = [], []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["section"] == "summary":
                    summary.append({"variant": row["variant"], "n_runs": int(row["n_runs"]),
                                    "mean_auc": float(row["mean_auc"]), "std_auc": float(row["std_auc"]),
                                    "delta_vs_full": float(row["delta_vs_full"]) if row["delta_vs_full"] else ""})
                else:
                    pairwise.append({"a": row["a"], "b": row["b"], "t": float(row["t"]),
                                     "dof": float(row["dof"]), "p": float(row["p"])})
        return cls(summary, pairwise)


def report(rows: list[dict]) -> Report:
    """Per-variant mean and sample std of test AUC, deltas vs ``full`` and pairwise Welch tests."""
    if not rows:
        raise ValueError("report needs at least one metrics row")
    by_variant: dict[str, list[float]] = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(float(row["auc"]))
    full = np.mean(by_variant["full"]) if "full" in by_variant else None
    summary = []
    for name, aucs in by_variant.items():
        a = np.asarray(aucs)
        summary.append({"variant": name, "n_runs": a.size, "mean_auc": float(a.mean()),
                        "std_auc": float(a.std(ddof=1)) if a.size > 1 else 0.0,
                        "delta_vs_full": "" if full is None else float(a.mean() - full)})
    pairwise = []
    for x, y in combinations(by_variant, 2):
        try:
            res = welch_t_test(by_variant[x], by_variant[y])
            t, dof, p = res.t, res.dof, res.p
        except StatsError:
            t = dof = p = math.nan
        pairwise.append({"a": x, "b": y, "t": t, "dof": dof, "p": p})
    return Report(summary, pairwise)
