"""Per-category linear classification with nested cross-validation.

Each gene-ontology category is an independent binary task: genes in the
category against everyone else. The classifier is class-weighted,
L2-regularized logistic regression trained by full-batch gradient
descent with Armijo backtracking. The regularization strength comes from
an inner 5-fold CV on each outer-training split; the outer fold it is
judged on never participates in that choice.
"""

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .evaluation import roc_auc
from .tensor import derive_seed, make_rng

__all__ = [
    "FoldError",
    "ClassifierModel",
    "CategoryResult",
    "LAMBDA_GRID",
    "load_annotations",
    "save_annotations",
    "filter_categories",
    "stratified_kfold",
    "train_weighted_logreg",
    "predict_scores",
    "nested_cv",
    "evaluate_categories",
    "save_aucs_csv",
    "load_aucs_csv",
]

LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0)

GRAD_TOL = 1e-6
MAX_ITERS = 10_000


class FoldError(ValueError):
    """Not enough samples of a class to build stratified folds."""


# ---------------------------------------------------------------------------
# Annotations


def load_annotations(path) -> dict:
    """CSV `category_id,gene_id` pairs -> {category: set of genes}.

    Multi-label by construction: a gene may appear under any number of
    categories. Category order follows first appearance.
    """
    table: dict = {}
    with open(path, newline="") as f:
        for i, row in enumerate(csv.reader(f), start=1):
            if not row or (i == 1 and row == ["category_id", "gene_id"]):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{i}: expected 'category_id,gene_id', got {row!r}")
            category, gene = row[0].strip(), row[1].strip()
            if not category or not gene:
                raise ValueError(f"{path}:{i}: empty category or gene id")
            table.setdefault(category, set()).add(gene)
    return table


def save_annotations(path, table) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        for category, genes in table.items():
            for gene in sorted(genes):
                writer.writerow([category, gene])


def filter_categories(table, gene_ids, min_genes: int = 15, max_genes: int = 500) -> dict:
    """Keep categories whose positives, intersected with the available
    genes, number within [min_genes, max_genes] inclusive."""
    available = set(gene_ids)
    kept = {}
    for category, genes in table.items():
        positives = genes & available
        if min_genes <= len(positives) <= max_genes:
            kept[category] = positives
    return kept


# ---------------------------------------------------------------------------
# Folds


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list:
    """Seeded stratified partition into k folds of test indices.

    Positives and negatives are shuffled separately and dealt round-robin,
    so per-fold class counts differ by at most one from perfect balance.
    """
    y = np.asarray(labels).astype(bool)
    pos = np.flatnonzero(y)
    neg = np.flatnonzero(~y)
    if len(pos) < k or len(neg) < k:
        raise FoldError(
            f"need at least {k} of each class for {k} folds, "
            f"got {len(pos)} positive / {len(neg)} negative"
        )
    rng = make_rng(seed)
    pos = rng.permutation(pos)
    neg = rng.permutation(neg)
    return [np.sort(np.concatenate([pos[i::k], neg[i::k]])) for i in range(k)]


# ---------------------------------------------------------------------------
# Weighted logistic regression


@dataclass
class ClassifierModel:
    weights: np.ndarray  # (D,)
    bias: float
    lam: float


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free at both ends
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _class_weight_vector(y: np.ndarray, class_weights) -> np.ndarray:
    n = len(y)
    n_pos = int(y.sum())
    if class_weights is None:
        if n_pos == 0 or n_pos == n:
            raise ValueError("balanced class weights need both classes present")
        class_weights = (n / (2.0 * (n - n_pos)), n / (2.0 * n_pos))
    w_neg, w_pos = float(class_weights[0]), float(class_weights[1])
    return np.where(y > 0.5, w_pos, w_neg)


def train_weighted_logreg(
    X,
    y,
    lam: float,
    class_weights=None,
    tol: float = GRAD_TOL,
    max_iters: int = MAX_ITERS,
) -> ClassifierModel:
    """Minimize sum_i cw(y_i) * logloss(sigma(w.x_i + b), y_i) + lam * |w|^2.

    The bias is unregularized. class_weights is (negative, positive);
    None means balanced, cw(c) = n / (2 * n_c). Full-batch gradient
    descent with backtracking line search, stopped when the gradient
    infinity-norm drops below tol or after max_iters steps.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X {X.shape} does not match {y.shape[0]} labels")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    cw = _class_weight_vector(y, class_weights)
    cy = cw * y

    def objective(z, w_sq):
        # softplus(z) - y*z summed with weights, plus the ridge term
        loss = cw @ (np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))) - cy @ z
        return loss + lam * w_sq

    w = np.zeros(X.shape[1])
    b = 0.0
    z = np.zeros(X.shape[0])
    w_sq = 0.0
    f0 = objective(z, 0.0)
    step = 1.0
    prev_gw, prev_gb, prev_desc = None, 0.0, 0.0
    for _ in range(max_iters):
        gz = cw * _sigmoid(z) - cy
        gw = X.T @ gz + (2.0 * lam) * w
        gb = float(gz.sum())
        if max(np.max(np.abs(gw)), abs(gb)) < tol:
            break
        gw_sq = float(gw @ gw)
        desc = gw_sq + gb * gb
        if prev_gw is not None:
            # Barzilai-Borwein spectral step as the trial size; with
            # s = -step*g_prev, t = (s.s)/(s.y) = step*|g_prev|^2 /
            # (|g_prev|^2 - g_prev.g). Backtracking still guards it.
            s_y = prev_desc - (float(prev_gw @ gw) + prev_gb * gb)
            step = step * prev_desc / s_y if s_y > 0.0 else step * 2.0
            step = min(max(step, 1e-12), 1e6)
        # one matvec per iteration: trial points reuse z - t*dz
        dz = X @ gw + gb
        w_gw = float(w @ gw)
        while True:
            trial_sq = w_sq - 2.0 * step * w_gw + step * step * gw_sq
            f_t = objective(z - step * dz, trial_sq)
            if f_t <= f0 - 1e-4 * step * desc:
                break
            step *= 0.5
            if step < 1e-20:
                break
        if step < 1e-20:
            break
        w -= step * gw
        b -= step * gb
        z -= step * dz
        w_sq = trial_sq
        f0 = f_t
        prev_gw, prev_gb, prev_desc = gw, gb, desc
    return ClassifierModel(weights=w, bias=b, lam=float(lam))


def predict_scores(model: ClassifierModel, X) -> np.ndarray:
    """sigma(w.x + b) per row, always finite and inside (0, 1)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.weights.shape[0]:
        raise ValueError(
            f"feature width {X.shape[1] if X.ndim == 2 else X.shape} "
            f"does not match model width {model.weights.shape[0]}"
        )
    return _sigmoid(X @ model.weights + model.bias)


# ---------------------------------------------------------------------------
# Nested cross-validation


def _standardize_stats(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0.0] = 1.0  # constant columns carry no signal; leave centered
    return mean, std


def _select_lambda(X, y, grid, k, seed):
    """Inner CV: lambda with the best mean validation AUC, ties -> smaller."""
    folds = stratified_kfold(y, k=k, seed=seed)
    all_idx = np.arange(len(y))
    splits = []
    for test_idx in folds:
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[test_idx] = False
        splits.append((all_idx[train_mask], test_idx))
    best_lam, best_auc = None, -1.0
    for lam in sorted(grid):
        aucs = []
        for train_idx, test_idx in splits:
            model = train_weighted_logreg(X[train_idx], y[train_idx], lam)
            scores = predict_scores(model, X[test_idx])
            aucs.append(roc_auc(scores, y[test_idx]))
        mean_auc = float(np.mean(aucs))
        if mean_auc > best_auc:
            best_lam, best_auc = lam, mean_auc
    return best_lam


def nested_cv(X, y, lambda_grid=LAMBDA_GRID, k: int = 5, seed: int = 0) -> list:
    """Two-layer k-fold CV; returns (auc, chosen_lambda) per outer fold.

    Per outer fold: columns are standardized with outer-training
    statistics only, an inner k-fold CV on the outer-training split picks
    lambda, the model is refit on the whole outer-training split, and the
    AUC comes from the held-out fold. Nothing about the held-out rows can
    influence the lambda choice.
    """
    if not len(lambda_grid):
        raise ValueError("lambda grid is empty")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    results = []
    for fold, test_idx in enumerate(stratified_kfold(y, k=k, seed=seed)):
        train_mask = np.ones(len(y), dtype=bool)
        train_mask[test_idx] = False
        X_train, y_train = X[train_mask], y[train_mask]
        mean, std = _standardize_stats(X_train)
        X_train = (X_train - mean) / std
        lam = _select_lambda(
            X_train, y_train, lambda_grid, k, derive_seed(seed, "inner", fold)
        )
        model = train_weighted_logreg(X_train, y_train, lam)
        scores = predict_scores(model, (X[test_idx] - mean) / std)
        results.append((roc_auc(scores, y[test_idx]), lam))
    return results


@dataclass
class CategoryResult:
    """Outer-fold outcomes for one category."""

    category_id: str
    folds: list  # (auc, lambda) per outer fold

    @property
    def mean_auc(self) -> float:
        return float(np.mean([auc for auc, _ in self.folds]))


def evaluate_categories(
    matrix,
    table,
    lambda_grid=LAMBDA_GRID,
    k: int = 5,
    seed: int = 0,
    threads: int = 1,
) -> list:
    """Run nested CV for every category against a feature matrix.

    Categories too small to fold are skipped with a warning. Per-category
    seeds are derived from the category id, so results do not depend on
    category order or on the thread count.
    """
    categories = list(table.items())

    def run(item):
        category, positives = item
        y = np.array([1.0 if g in positives else 0.0 for g in matrix.gene_ids])
        try:
            folds = nested_cv(
                matrix.values, y, lambda_grid, k=k,
                seed=derive_seed(seed, "category", category),
            )
        except FoldError as e:
            return category, e
        return category, folds

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run, categories))
    else:
        outcomes = [run(item) for item in categories]

    results = []
    for category, outcome in outcomes:
        if isinstance(outcome, FoldError):
            warnings.warn(f"skipping category {category}: {outcome}", stacklevel=2)
        else:
            results.append(CategoryResult(category_id=category, folds=outcome))
    return results


def save_aucs_csv(path, results) -> None:
    """CSV `category_id,fold,auc,lambda`, one row per outer fold."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["category_id", "fold", "auc", "lambda"])
        for result in results:
            for fold, (auc, lam) in enumerate(result.folds):
                writer.writerow([result.category_id, fold, repr(auc), repr(lam)])


def load_aucs_csv(path) -> list:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["category_id", "fold", "auc", "lambda"]:
            raise ValueError(f"{path}: not an AUC table (header {header!r})")
        order, folds = [], {}
        for row in reader:
            if not row:
                continue
            category = row[0]
            if category not in folds:
                order.append(category)
                folds[category] = []
            folds[category].append((float(row[2]), float(row[3])))
    return [CategoryResult(category_id=c, folds=folds[c]) for c in order]
