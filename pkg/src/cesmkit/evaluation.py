"""Accuracy/F1 computation and aggregation over repeated runs.

Malignant is the positive class: it is the minority class, so F1 is the
headline metric while accuracy alone can be flattered by majority-class
guessing.  Reports show mean and sample (n-1) standard deviation in
percent over the runs found in a predictions CSV; the report path can also
render a run-by-run figure next to the text table.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import ToolkitError


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ToolkitError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class RunResult:
    run_id: int
    accuracy: float
    f1: float

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 1.0 and 0.0 <= self.f1 <= 1.0):
            raise ToolkitError(f"metrics out of [0, 1]: acc={self.accuracy}, f1={self.f1}")


@dataclass(frozen=True)
class EvalReport:
    """Mean/std of accuracy and F1 in percent over n_runs repetitions."""

    mean_acc: float
    std_acc: float
    mean_f1: float
    std_f1: float
    n_runs: int


def confusion(preds, labels) -> ConfusionMatrix:
    """Count binary outcomes; 1 = malignant = positive."""
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.size == 0:
        raise ToolkitError("empty prediction vector")
    if p.shape != y.shape:
        raise ToolkitError(f"length mismatch: {p.shape} predictions vs {y.shape} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(y, (0, 1)).all()):
        raise ToolkitError("predictions and labels must be 0 or 1")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
    )


def metrics(cm: ConfusionMatrix) -> tuple[float, float]:
    """(accuracy, F1); zero-denominator precision/recall/F1 all map to 0."""
    if cm.total == 0:
        raise ToolkitError("cannot compute metrics over zero samples")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1


def aggregate(runs: list[RunResult]) -> EvalReport:
    """Mean and sample standard deviation in percent (std 0 when n = 1)."""
    if not runs:
        raise ToolkitError("need at least one run to aggregate")
    acc = np.asarray([r.accuracy for r in runs]) * 100.0
    f1 = np.asarray([r.f1 for r in runs]) * 100.0
    n = len(runs)
    return EvalReport(
        mean_acc=float(acc.mean()),
        std_acc=float(acc.std(ddof=1)) if n > 1 else 0.0,
        mean_f1=float(f1.mean()),
        std_f1=float(f1.std(ddof=1)) if n > 1 else 0.0,
        n_runs=n,
    )


def _cell(mean: float, std: float) -> str:
    return f"{mean:.2f} ({std:.2f})"


def render_table(rows: list[tuple[str, EvalReport, EvalReport]]) -> str:
    """Fixed-width table of validation/test mean (std) per model."""
    if not rows:
        raise ToolkitError("need at least one table row")
    header = ["model", "valid acc (std)", "valid F1 (std)", "test acc (std)", "test F1 (std)"]
    body = []
    for name, valid, test in rows:
        if not name:
            raise ToolkitError("table row has an empty model name")
        body.append(
            [
                name,
                _cell(valid.mean_acc, valid.std_acc),
                _cell(valid.mean_f1, valid.std_f1),
                _cell(test.mean_acc, test.std_acc),
                _cell(test.mean_f1, test.std_f1),
            ]
        )
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    for r in body:
        lines.append(" | ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


# --- predictions CSV -----------------------------------------------------

PREDICTIONS_HEADER = ["run_id", "sample_id", "true_label", "pred_label"]


def read_predictions(path: str | os.PathLike) -> dict[int, tuple[list[int], list[int]]]:
    """Parse runs from a predictions CSV into run_id -> (preds, labels).

    When a ``prob`` column is present, predictions are re-derived by
    thresholding the probability at 0.5.
    """
    runs: dict[int, tuple[list[int], list[int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = set(PREDICTIONS_HEADER) - set(fields)
        if missing:
            raise ToolkitError(f"predictions {os.fspath(path)!r} missing columns: {sorted(missing)}")
        has_prob = "prob" in fields
        for row in reader:
            try:
                run_id = int(row["run_id"])
                true = int(row["true_label"])
                if has_prob and row.get("prob"):
                    pred = 1 if float(row["prob"]) >= 0.5 else 0
                else:
                    pred = int(row["pred_label"])
            except ValueError as exc:
                raise ToolkitError(f"bad prediction row {row!r}: {exc}") from None
            if true not in (0, 1) or pred not in (0, 1):
                raise ToolkitError(f"labels must be 0/1, got row {row!r}")
            preds, labels = runs.setdefault(run_id, ([], []))
            preds.append(pred)
            labels.append(true)
    if not runs:
        raise ToolkitError(f"no prediction rows in {os.fspath(path)!r}")
    return runs


def evaluate_runs(runs: dict[int, tuple[list[int], list[int]]]) -> tuple[EvalReport, list[RunResult]]:
    results = []
    for run_id in sorted(runs):
        preds, labels = runs[run_id]
        acc, f1 = metrics(confusion(preds, labels))
        results.append(RunResult(run_id=run_id, accuracy=acc, f1=f1))
    return aggregate(results), results


def render_report(report: EvalReport, results: list[RunResult], per_run: bool = False) -> str:
    """Plain-text evaluation report (sample standard deviation, percent)."""
    lines = [
        f"runs: {report.n_runs}",
        "statistics: mean (sample std, n-1), percent",
        f"accuracy: {_cell(report.mean_acc, report.std_acc)}",
        f"f1:       {_cell(report.mean_f1, report.std_f1)}",
    ]
    if per_run:
        lines.append("")
        lines.append("run_id  accuracy  f1")
        for r in results:
            lines.append(f"{r.run_id:>6}  {100 * r.accuracy:8.2f}  {100 * r.f1:6.2f}")
    return "\n".join(lines) + "\n"


def render_metrics_figure(results: list[RunResult], report: EvalReport, path: str | os.PathLike) -> None:
    """Save a two-panel run-by-run metrics figure next to the text report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_ids = [r.run_id for r in results]
    acc = [100 * r.accuracy for r in results]
    f1 = [100 * r.f1 for r in results]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(run_ids, acc, "o-", label="accuracy")
    ax1.plot(run_ids, f1, "s-", label="F1")
    ax1.set_xlabel("run")
    ax1.set_ylabel("percent")
    ax1.set_title("per-run metrics")
    ax1.legend()

    means = [report.mean_acc, report.mean_f1]
    stds = [report.std_acc, report.std_f1]
    ax2.bar(["accuracy", "F1"], means, yerr=stds, capsize=4, color=["#4477aa", "#cc6677"])
    ax2.set_ylabel("percent")
    ax2.set_title(f"mean over {report.n_runs} runs (sample std)")

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
