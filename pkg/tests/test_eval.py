import csv

import numpy as np
import pytest

from cdae.classify import CategoryResult
from cdae.evaluation import (
    EvalReport,
    UndefinedAucError,
    emit_plot_data,
    render_markdown,
    roc_auc,
    save_report,
    summarize,
)
from cdae.tensor import make_rng


def pairwise_auc(scores, labels):
    """O(n^2) oracle: correct pairs count 1, tied pairs count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------------------
# roc_auc


def test_auc_worked_example():
    # one tied pair at 0.5 contributes half: (1 + 0.5) / 2 = 0.75
    assert roc_auc([0.5, 0.5, 0.4], [1, 0, 0]) == 0.75


def test_auc_extremes():
    assert roc_auc([0.1, 0.9], [0, 1]) == 1.0
    assert roc_auc([0.9, 0.1], [0, 1]) == 0.0
    assert roc_auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5


def test_auc_matches_pair_counting_oracle():
    rng = make_rng(17)
    for trial in range(200):
        n = int(rng.integers(2, 51))
        # coarse grid forces plenty of ties
        scores = rng.integers(0, 6, size=n) / 5.0
        labels = np.zeros(n, dtype=int)
        labels[: int(rng.integers(1, n))] = 1
        labels = rng.permutation(labels)
        if labels.sum() in (0, n):
            continue
        fast = roc_auc(scores, labels)
        slow = pairwise_auc(scores, labels)
        assert abs(fast - slow) < 1e-12, f"trial {trial}: {fast} vs {slow}"


def test_auc_monotone_transform_invariant():
    rng = make_rng(18)
    scores = rng.integers(0, 10, size=40) / 9.0
    labels = (rng.random(40) < 0.4).astype(int)
    labels[0], labels[1] = 1, 0
    base = roc_auc(scores, labels)
    for transform in (lambda s: 3.0 * s + 7.0, np.exp, lambda s: s**3):
        assert abs(roc_auc(transform(scores), labels) - base) < 1e-12


def test_auc_score_negation_flips():
    rng = make_rng(19)
    scores = rng.random(30)
    labels = (rng.random(30) < 0.5).astype(int)
    labels[0], labels[1] = 1, 0
    assert abs(roc_auc(-scores, labels) - (1.0 - roc_auc(scores, labels))) < 1e-12


def test_auc_errors():
    with pytest.raises(UndefinedAucError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedAucError):
        roc_auc([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError, match="length"):
        roc_auc([0.1, 0.2, 0.3], [1, 0])
    with pytest.raises(ValueError, match="non-finite"):
        roc_auc([0.1, np.nan], [1, 0])


def test_auc_returns_plain_float():
    value = roc_auc([0.2, 0.8, 0.5], [0, 1, 0])
    assert type(value) is float


# ---------------------------------------------------------------------------
# Reports


def report_fixture():
    results = [
        CategoryResult("catB", [(0.9, 0.1), (0.8, 0.1), (1.0, 1.0)]),
        CategoryResult("catA", [(0.5, 10.0), (0.7, 10.0), (0.6, 0.001)]),
    ]
    return summarize(results, dimension=288)


def test_summarize_shapes():
    report = report_fixture()
    assert report.dimension == 288
    assert [c[0] for c in report.categories] == ["catB", "catA"]
    assert abs(report.categories[0][1] - 0.9) < 1e-15
    assert report.categories[1][2] == (10.0, 10.0, 0.001)
    assert abs(report.mean_auc - 0.75) < 1e-15
    with pytest.raises(ValueError, match="no category"):
        summarize([], dimension=288)


def test_render_markdown_layout():
    text = render_markdown(report_fixture())
    lines = text.splitlines()
    assert lines[0] == "# Classification report (D = 288)"
    assert "| category | mean AUC | lambda per fold |" in lines
    assert "| catB | 0.9000 | 0.1, 0.1, 1 |" in lines
    assert "Mean AUC over 2 categories: **0.7500**" in text


def test_save_report_markdown_and_csv(tmp_path):
    report = report_fixture()
    md = tmp_path / "report.md"
    save_report(md, report)
    assert md.read_text() == render_markdown(report)

    path = tmp_path / "report.csv"
    save_report(path, report, markdown=False)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["category_id", "mean_auc"]
    assert rows[1][0] == "catB" and float(rows[1][1]) == report.categories[0][1]
    assert len(rows) == 3


def test_emit_plot_data_sorted(tmp_path):
    reports = [
        EvalReport(dimension=2625, categories=[("c", 0.98, (1.0,))]),
        EvalReport(dimension=288, categories=[("c", 0.91, (1.0,))]),
    ]
    path = tmp_path / "plot.csv"
    emit_plot_data(reports, path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["dimension", "mean_auc"]
    assert [r[0] for r in rows[1:]] == ["288", "2625"]  # ascending dimension
    assert float(rows[1][1]) == 0.91


def test_emit_plot_data_duplicate_dimension_rejected(tmp_path):
    reports = [
        EvalReport(dimension=288, categories=[("c", 0.9, (1.0,))]),
        EvalReport(dimension=288, categories=[("d", 0.8, (1.0,))]),
    ]
    with pytest.raises(ValueError, match="duplicate"):
        emit_plot_data(reports, tmp_path / "plot.csv")
