"""Metrics and the selection-aware paired bootstrap comparison."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

N_CLASSES = 4


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("inputs must be 1-d and of equal length")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def mae(preds, targets) -> float:
    p, t = _check_pair(np.asarray(preds, dtype=np.float64), np.asarray(targets, dtype=np.float64))
    return float(np.mean(np.abs(p - t)))


def confusion(pred, true, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with true classes on rows, predictions on columns."""
    p, t = _check_pair(np.asarray(pred, dtype=np.int64), np.asarray(true, dtype=np.int64))
    if p.min() < 0 or t.min() < 0 or p.max() >= n_classes or t.max() >= n_classes:
        raise ValueError(f"class ids must lie in 0..{n_classes - 1}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def ma4(pred, true, n_classes: int = N_CLASSES) -> float:
    """Support-weighted mean of per-class recall (equal to accuracy)."""
    cm = confusion(pred, true, n_classes)
    support = cm.sum(axis=1)
    n = support.sum()
    total = 0.0
    for c in range(n_classes):
        if support[c]:
            total += (support[c] / n) * (cm[c, c] / support[c])
    return float(total)


def classwise_f1(pred, true, n_classes: int = N_CLASSES) -> np.ndarray:
    cm = confusion(pred, true, n_classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    prec = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    rec = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = prec + rec
    return np.divide(2 * prec * rec, denom, out=np.zeros_like(tp), where=denom > 0)


def per_example_metric(pred, true, classification: bool, value_range=None) -> np.ndarray:
    """1/0 correctness (classification) or absolute error (regression).

    Regression predictions are clipped to ``value_range`` first.
    """
    if classification:
        return (np.asarray(pred) == np.asarray(true)).astype(np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if value_range is not None:
        p = np.clip(p, *value_range)
    return np.abs(p - np.asarray(true, dtype=np.float64))


@dataclass
class BootstrapReport:
    differences: np.ndarray
    low: float
    high: float
    significant: bool
    baseline_selected: np.ndarray
    challenger_selected: np.ndarray
    maximize: bool
    n_trimmed: int
    baseline_point: float = float("nan")
    challenger_point: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def n_replicates(self) -> int:
        return int(self.differences.size)

    @property
    def mean_difference(self) -> float:
        return float(self.differences.mean())

    def star(self) -> str:
        return "*" if self.significant else ""

    def to_json(self) -> dict:
        return {
            "n_replicates": self.n_replicates,
            "interval": [self.low, self.high],
            "significant": self.significant,
            "maximize": self.maximize,
            "n_trimmed_per_tail": self.n_trimmed,
            "mean_difference": self.mean_difference,
            "baseline_point": self.baseline_point,
            "challenger_point": self.challenger_point,
            "differences": [float(d) for d in self.differences],
            "baseline_selected": [int(i) for i in self.baseline_selected],
            "challenger_selected": [int(i) for i in self.challenger_selected],
            **self.meta,
        }

    def summary(self, baseline_name: str = "baseline", challenger_name: str = "challenger") -> str:
        return (f"{challenger_name} vs {baseline_name}: mean diff {self.mean_difference:+.4f}, "
                f"95% CI [{self.low:+.4f}, {self.high:+.4f}] over {self.n_replicates} replicates"
                f"{' *' if self.significant else ''}")


def _select(scores: np.ndarray, maximize: bool) -> np.ndarray:
    # argmax/argmin return the first (lowest trial id) among ties
    return np.argmax(scores, axis=1) if maximize else np.argmin(scores, axis=1)


def bootstrap_compare(baseline, challenger, B: int = 1000, seed: int = 0) -> BootstrapReport:
    """Paired selection-aware bootstrap of test performance.

    Each replicate resamples dev examples with replacement (same indices for
    both tables), re-selects each table's best trial on the resampled dev
    metric, and records the challenger-minus-baseline difference of the
    selected trials' full test metrics.  The central 95% of the sorted
    differences is the interval; the result is significant when it excludes 0.

    ``baseline``/``challenger`` expose ``dev_matrix()`` and ``test_matrix()``
    (trials x examples), ``maximize``, ``dev_keys`` and ``test_keys``.
    """
    if B < 40:
        raise ValueError("B must be >= 40 so each 2.5% tail holds at least one replicate")
    if list(baseline.dev_keys) != list(challenger.dev_keys) or list(baseline.test_keys) != list(challenger.test_keys):
        raise ValueError("tables were evaluated on different dev/test partitions")
    if baseline.maximize != challenger.maximize:
        raise ValueError("tables disagree on metric direction")
    maximize = baseline.maximize
    dev_b, dev_c = baseline.dev_matrix(), challenger.dev_matrix()
    test_b = baseline.test_matrix().mean(axis=1)
    test_c = challenger.test_matrix().mean(axis=1)
    n_dev = dev_b.shape[1]
    if n_dev == 0 or dev_c.shape[1] != n_dev:
        raise ValueError("dev metrics missing or mismatched")
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n_dev, np.full(n_dev, 1.0 / n_dev), size=B).astype(np.float64)
    sel_b = _select(counts @ dev_b.T / n_dev, maximize)
    sel_c = _select(counts @ dev_c.T / n_dev, maximize)
    diffs = test_c[sel_c] - test_b[sel_b]
    trim = math.ceil(0.025 * B)
    central = np.sort(diffs)[trim:B - trim]
    low, high = float(central[0]), float(central[-1])
    significant = not (low <= 0.0 <= high)
    point_b = test_b[_select(dev_b.mean(axis=1)[None], maximize)[0]]
    point_c = test_c[_select(dev_c.mean(axis=1)[None], maximize)[0]]
    return BootstrapReport(diffs, low, high, significant, sel_b, sel_c, maximize, trim,
                           float(point_b), float(point_c))


def save_report(report: BootstrapReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def starred_table(title: str, metric_name: str, rows: list[tuple[str, float, BootstrapReport | None]]) -> str:
    """Plain-text comparison table; '*' marks a significant difference with the baseline."""
    width = max([len(r[0]) for r in rows] + [len("Model")])
    lines = [title, f"{'Model'.ljust(width)}  {metric_name}"]
    for name, value, report in rows:
        star = report.star() if report is not None else ""
        lines.append(f"{name.ljust(width)}  {value:.3f}{star}")
    lines.append("*: statistically significant difference with the baseline (95% bootstrap CI excludes 0)")
    return "\n".join(lines) + "\n"
