"""ROC-AUC and report generation.

AUC is the Mann-Whitney statistic: the probability that a random
positive outscores a random negative, ties counted one half. Computed
via average ranks in O(n log n); the O(n^2) pair-counting definition
lives in the test suite as the oracle.
"""

import csv
from dataclasses import dataclass

import numpy as np

__all__ = [
    "UndefinedAucError",
    "EvalReport",
    "roc_auc",
    "summarize",
    "render_markdown",
    "save_report",
    "emit_plot_data",
]


class UndefinedAucError(ValueError):
    """AUC needs at least one positive and one negative."""


def roc_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties 0.5."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores contain non-finite values")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"need both classes, got {n_pos} positive / {n_neg} negative"
        )
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # tie groups share the average of their 1-based rank range
    starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_s)) + 1])
    ends = np.concatenate([starts[1:], [len(s)]])
    ranks = np.empty(len(s))
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    rank_sum = float(ranks[y].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class EvalReport:
    """Per-category mean AUCs for one representation size."""

    dimension: int
    categories: list  # (category_id, mean_auc, lambdas-per-fold tuple)

    @property
    def mean_auc(self) -> float:
        return float(np.mean([auc for _, auc, _ in self.categories]))


def summarize(results, dimension: int) -> EvalReport:
    """Collapse per-fold results to per-category means plus an overall mean.

    The overall figure is the unweighted mean of category means; results
    items carry .category_id and .folds as produced by the classifier.
    """
    if not results:
        raise ValueError("no category results to summarize")
    categories = [
        (r.category_id, r.mean_auc, tuple(lam for _, lam in r.folds)) for r in results
    ]
    return EvalReport(dimension=int(dimension), categories=categories)


def render_markdown(report: EvalReport) -> str:
    lines = [
        f"# Classification report (D = {report.dimension})",
        "",
        "| category | mean AUC | lambda per fold |",
        "| --- | --- | --- |",
    ]
    for category, auc, lambdas in report.categories:
        lam_text = ", ".join(f"{lam:g}" for lam in lambdas)
        lines.append(f"| {category} | {auc:.4f} | {lam_text} |")
    lines += [
        "",
        f"Mean AUC over {len(report.categories)} categories: "
        f"**{report.mean_auc:.4f}**",
        "",
    ]
    return "\n".join(lines)


def save_report(path, report: EvalReport, markdown: bool = True) -> None:
    """Write the summary as a markdown table or a plain two-column CSV."""
    if markdown:
        with open(path, "w") as f:
            f.write(render_markdown(report))
        return
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["category_id", "mean_auc"])
        for category, auc, _ in report.categories:
            writer.writerow([category, repr(auc)])


def emit_plot_data(reports, path) -> None:
    """CSV `dimension,mean_auc` sorted by dimension, for external plotting."""
    tagged = [(r.dimension, r.mean_auc) for r in reports]
    dims = [d for d, _ in tagged]
    if len(set(dims)) != len(dims):
        dupes = sorted({d for d in dims if dims.count(d) > 1})
        raise ValueError(f"duplicate dimension tags: {dupes}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dimension", "mean_auc"])
        for dim, auc in sorted(tagged):
            writer.writerow([dim, repr(auc)])
