"""Spearman rank correlation, MAE, and per-category evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class UndefinedCorrelation(ValueError):
    pass


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; tied values share the average of their ranks."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(y, y_hat) -> float:
    """Rank correlation with average ranks for ties.

    Equals the classic 1 - 6*sum(d^2)/(n(n^2-1)) form when there are no
    ties. All-tied input has no defined correlation and raises."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError("length mismatch")
    n = len(y)
    if n < 2:
        raise ValueError("need at least 2 samples")
    ry, rh = _average_ranks(y), _average_ranks(y_hat)
    ry -= ry.mean()
    rh -= rh.mean()
    denom = np.sqrt((ry * ry).sum() * (rh * rh).sum())
    if denom == 0.0:
        raise UndefinedCorrelation("undefined correlation: zero rank variance")
    return float((ry * rh).sum() / denom)


def mae(y, y_hat) -> float:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError("length mismatch")
    if len(y) < 1:
        raise ValueError("need at least 1 sample")
    return float(np.mean(np.abs(y - y_hat)))


@dataclass
class ClassMetrics:
    name: str
    n: int
    src: float | None  # None when undefined (fewer than 2 samples or all tied)
    mae: float


@dataclass
class EvalReport:
    src: float
    mae: float
    n: int
    per_class: list[ClassMetrics] = field(default_factory=list)
    sweep: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "overall": {"src": self.src, "mae": self.mae, "n": self.n},
            "per_class": [
                {"name": c.name, "n": c.n, "src": c.src, "mae": c.mae}
                for c in self.per_class
            ],
            "sweep": self.sweep,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"{'class':<16} {'n':>6} {'SRC':>9} {'MAE':>9}",
            f"{'overall':<16} {self.n:>6} {self.src:>9.4f} {self.mae:>9.4f}",
        ]
        for c in self.per_class:
            src = f"{c.src:.4f}" if c.src is not None else "undef"
            lines.append(f"{c.name:<16} {c.n:>6} {src:>9} {c.mae:>9.4f}")
        return "\n".join(lines) + "\n"


def per_class_report(y, y_hat, class_names: list[str]) -> EvalReport:
    """Overall metrics plus a breakdown per category label."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if not len(y) == len(y_hat) == len(class_names):
        raise ValueError("length mismatch")
    report = EvalReport(src=spearman(y, y_hat), mae=mae(y, y_hat), n=len(y))
    for name in sorted(set(class_names)):
        idx = [i for i, c in enumerate(class_names) if c == name]
        cy, ch = y[idx], y_hat[idx]
        try:
            src = spearman(cy, ch) if len(idx) >= 2 else None
        except UndefinedCorrelation:
            src = None
        report.per_class.append(ClassMetrics(name, len(idx), src, mae(cy, ch)))
    return report
