"""Release gates, one test per criterion.

Run with `pytest -v tests/test_acceptance.py` to get a pass/fail line
per criterion. Criteria 6 and 7 share two full desk-scale pipeline runs
(about eleven minutes combined on one core); everything else finishes in
seconds. `pytest --ignore=tests/test_acceptance.py` skips the suite.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from cdae.classify import load_aucs_csv, nested_cv, stratified_kfold
from cdae.cli import main
from cdae.evaluation import roc_auc
from cdae.layers import maxpool_forward, unpool_backward, unpool_forward
from cdae.network import Model, encode, load_preset
from cdae.tensor import make_rng
from cdae.training import (
    LINEAR_GATE,
    NONLINEAR_GATE,
    TrainConfig,
    corrupt,
    lr_at,
    run_gradcheck,
)

# Criterion-6 gates, frozen after the first reference run of this code
# (epoch-30/epoch-1 MSE ratio 0.2454, mean AUC 0.9787). The reference
# left both spec-level defaults intact, so they stay at 0.4 and 0.85.
MSE_RATIO_GATE = 0.4
MEAN_AUC_GATE = 0.85
WALL_CLOCK_GATE = 15 * 60.0


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """Two identical desk-scale pipeline runs, differing only in --threads."""
    out_a = tmp_path_factory.mktemp("pipeline_a")
    out_b = tmp_path_factory.mktemp("pipeline_b")
    start = time.monotonic()
    code_a = main(["pipeline", "--seed", "0", "--threads", "1", "--out", str(out_a)])
    elapsed = time.monotonic() - start
    assert code_a == 0
    code_b = main(["pipeline", "--seed", "0", "--threads", "2", "--out", str(out_b)])
    assert code_b == 0
    return SimpleNamespace(out_a=out_a, out_b=out_b, elapsed=elapsed)


def test_criterion_1_preset_feature_dimensions():
    start = time.monotonic()
    expects = {"full-a": (75, 35, 2625), "full-b": (60, 30, 1800)}
    for name, (bh, bw, dim) in expects.items():
        spec = load_preset(name)
        assert spec.feature_dim == dim
        assert spec.bottleneck_shape() == (1, bh, bw)
        model = Model.init(spec, seed=0)
        x = make_rng(1).random((1, 1, spec.input_h, spec.input_w))
        feats = encode(model, x)
        assert feats.shape == (1, dim)
    assert time.monotonic() - start < 10.0


def test_criterion_2_gradient_integrity():
    start = time.monotonic()
    mixed = {
        "conv-pool-unpool-deconv",
        "conv-pool-unpool-deconv-relu",
        "conv-pool-unpool-deconv-tanh",
    }
    kinds = {"conv-linear", "deconv-linear", "pool-unpool", "relu", "tanh"}
    for seed in range(5):
        rows = run_gradcheck(seed)
        names = {name for name, _, _ in rows}
        assert kinds <= names and mixed <= names
        for name, worst, gate in rows:
            assert gate == (LINEAR_GATE if name.endswith("-linear") else NONLINEAR_GATE)
            assert worst < gate, f"seed {seed} {name}: {worst:.3e} >= {gate:g}"
    assert time.monotonic() - start < 60.0


def test_criterion_3_schedule_and_corruption_exactness():
    config = TrainConfig(epochs=51)  # lr0 0.05, decay 0.9
    for e in range(51):
        assert abs(lr_at(e, config) - 0.05 * 0.9**e) <= 1e-12
    image = make_rng(7).uniform(0.25, 1.0, (300, 140))  # no zeros of its own
    corrupted, mask = corrupt(image, 0.2, make_rng(8))
    assert int((corrupted == 0.0).sum()) == 8400
    assert int(mask.sum()) == 8400
    assert corrupted[~mask].tobytes() == image[~mask].tobytes()


def test_criterion_4_auc_oracle_equivalence():
    def pairwise(scores, labels):
        pos, neg = scores[labels], scores[~labels]
        total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        return total / (len(pos) * len(neg))

    rng = make_rng(17)
    checked = 0
    while checked < 200:
        n = int(rng.integers(2, 51))
        scores = rng.integers(0, 6, size=n) / 5.0
        scores[n // 2] = scores[0]  # at least one tie in every instance
        labels = np.zeros(n, dtype=bool)
        labels[: int(rng.integers(1, n))] = True
        labels = rng.permutation(labels)
        if labels.all() or not labels.any():
            continue
        fast = roc_auc(scores, labels)
        assert abs(fast - pairwise(scores, labels)) <= 1e-12
        for transform in (lambda s: 3.0 * s + 7.0, np.exp, lambda s: s**3):
            assert abs(roc_auc(transform(scores), labels) - fast) <= 1e-12
        checked += 1


def test_criterion_5_pool_unpool_algebra():
    rng = make_rng(23)
    for _ in range(1000):
        n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        h, w = 2 * int(rng.integers(1, 5)), 2 * int(rng.integers(1, 5))
        x = rng.standard_normal((n, c, h, w))
        pooled, _ = maxpool_forward(x)
        assert np.all(unpool_forward(pooled) >= x)

        z = rng.standard_normal((n, c, h // 2, w // 2))
        back, _ = maxpool_forward(unpool_forward(z))
        assert np.array_equal(back, z)

        g = rng.standard_normal((n, c, h, w))
        lhs = float(np.vdot(unpool_forward(z), g))
        rhs = float(np.vdot(z, unpool_backward(g)))
        assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_criterion_6_desk_scale_end_to_end(pipeline_runs):
    spec = load_preset("desk")
    assert spec.layers[0].filters == 16
    assert sum(1 for d in spec.layers if d.kind == "maxpool") == 2

    log = (pipeline_runs.out_a / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,lr,mean_mse"
    assert len(log) == 31
    first_mse = float(log[1].split(",")[2])
    final_mse = float(log[30].split(",")[2])
    assert final_mse <= MSE_RATIO_GATE * first_mse, (
        f"MSE ratio {final_mse / first_mse:.4f} above {MSE_RATIO_GATE}"
    )

    results = load_aucs_csv(pipeline_runs.out_a / "aucs.csv")
    assert len(results) == 8
    mean_auc = float(np.mean([r.mean_auc for r in results]))
    assert mean_auc >= MEAN_AUC_GATE, f"mean AUC {mean_auc:.4f} below {MEAN_AUC_GATE}"

    assert pipeline_runs.elapsed < WALL_CLOCK_GATE


def test_criterion_7_byte_identical_reruns(pipeline_runs):
    for name in ("model.cdae", "features.csv", "aucs.csv"):
        a = (pipeline_runs.out_a / name).read_bytes()
        b = (pipeline_runs.out_b / name).read_bytes()
        assert a == b, f"{name} differs between --threads 1 and --threads 2"


def test_criterion_8_cross_validation_hygiene():
    # leakage: corrupting a held-out row must not move that fold's lambda
    rng = make_rng(31)
    X = rng.standard_normal((45, 5))
    y = (np.arange(45) % 3 == 0).astype(float)
    X[y == 1.0, 0] += 1.5
    base = [lam for _, lam in nested_cv(X, y, k=5, seed=3)]
    folds = stratified_kfold(y, k=5, seed=3)
    for trial in range(20):
        fold = int(rng.integers(0, 5))
        row = int(rng.choice(folds[fold]))
        X_mut = X.copy()
        X_mut[row] = rng.standard_normal(5) * 50.0
        mutated = nested_cv(X_mut, y, k=5, seed=3)
        assert mutated[fold][1] == base[fold], f"trial {trial}: fold {fold} lambda moved"

    # random-label control: no structure means chance-level AUC
    control = []
    for ds in range(3):
        rng = make_rng(2000 + ds)
        Xc = rng.standard_normal((200, 16))
        yc = np.zeros(200)
        yc[rng.permutation(200)[:60]] = 1.0
        control += [auc for auc, _ in nested_cv(Xc, yc, k=5, seed=ds)]
    assert abs(float(np.mean(control)) - 0.5) <= 0.15
