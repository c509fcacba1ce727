import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdcl.core import EmbeddingBatch, Labeled, seeded_rng
from bdcl.datagen import SynthConfig, synth_dataset, synth_priors
from bdcl.metrics import (
    DegenerateClasses, EmptyMatrix, confusion_matrix, evaluate, macro_f1, pca2d,
    per_class_accuracy, report_from_predictions, separability, silhouette, weighted_f1,
)
from bdcl.model import init_params
from bdcl.priors import MissingPrior

sk_metrics = pytest.importorskip("sklearn.metrics")


# ---------------------------------------------------------------- classification metrics

def test_perfect_predictor():
    y = [0, 1, 2, 2, 1, 0]
    r = report_from_predictions(y, y, 3)
    assert r.per_class_accuracy == [1.0, 1.0, 1.0] and r.overall_accuracy == 1.0
    assert r.confusion == [[2, 0, 0], [0, 2, 0], [0, 0, 2]]
    assert r.weighted_f1 == 1.0


def test_constant_predictor():
    r = report_from_predictions([0, 0, 1, 1], [0, 0, 0, 0], 2)
    assert r.overall_accuracy == 0.5 and r.per_class_accuracy == [1.0, 0.0]


def test_weighted_f1_hand_example():
    cm = np.array([[5, 5], [0, 10]])
    assert weighted_f1(cm) == pytest.approx(0.5 * (2 / 3) + 0.5 * 0.8, rel=1e-15)
    truth = [0] * 10 + [1] * 10
    pred = [0] * 5 + [1] * 5 + [1] * 10
    assert weighted_f1(cm) == pytest.approx(sk_metrics.f1_score(truth, pred, average="weighted"),
                                            rel=1e-14)


def test_absent_class_is_excluded():
    cm = np.array([[3, 1, 0], [0, 0, 0], [1, 0, 2]])
    f = weighted_f1(cm)
    assert np.isfinite(f)
    truth = [0, 0, 0, 0, 2, 2, 2]
    pred = [0, 0, 0, 1, 0, 2, 2]
    assert f == pytest.approx(sk_metrics.f1_score(truth, pred, labels=[0, 2], average="weighted"),
                              rel=1e-14)


def test_empty_matrix():
    with pytest.raises(EmptyMatrix):
        weighted_f1(np.zeros((2, 2)))
    with pytest.raises(EmptyMatrix):
        macro_f1(np.zeros((0, 0)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1,
                                  max_size=60))
def test_metrics_match_sklearn(c, pairs):
    truth = [t % c for t, _ in pairs]
    pred = [p % c for _, p in pairs]
    cm = confusion_matrix(truth, pred, c)
    np.testing.assert_array_equal(cm, sk_metrics.confusion_matrix(truth, pred, labels=range(c)))
    present = sorted(set(truth))
    assert weighted_f1(cm) == pytest.approx(
        sk_metrics.f1_score(truth, pred, labels=present, average="weighted", zero_division=0),
        abs=1e-12)
    assert macro_f1(cm) == pytest.approx(
        sk_metrics.f1_score(truth, pred, labels=present, average="macro", zero_division=0),
        abs=1e-12)
    acc = per_class_accuracy(cm)
    r = report_from_predictions(truth, pred, c)
    assert r.overall_accuracy == np.trace(cm) / len(truth)
    support = cm.sum(axis=1) / len(truth)
    assert abs(acc @ support - r.overall_accuracy) <= 1e-12
    assert sum(map(sum, r.confusion)) == len(truth)


def test_per_class_accuracy_counting_oracle():
    rng = seeded_rng(3)
    truth = rng.integers(0, 4, size=200)
    pred = np.where(rng.random(200) < 0.7, truth, rng.integers(0, 4, size=200))
    acc = per_class_accuracy(confusion_matrix(truth, pred, 4))
    for c in range(4):
        hits = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        assert acc[c] == hits / sum(1 for t in truth if t == c)


# ---------------------------------------------------------------- separability

def test_silhouette_matches_sklearn():
    rng = seeded_rng(4)
    x = rng.normal(size=(60, 5))
    y = rng.integers(0, 3, size=60)
    assert silhouette(x, y) == pytest.approx(sk_metrics.silhouette_score(x, y), abs=1e-12)


def test_silhouette_singleton_cluster_matches_sklearn():
    x = seeded_rng(5).normal(size=(7, 3))
    y = [0, 0, 0, 1, 1, 1, 2]
    assert silhouette(x, y) == pytest.approx(sk_metrics.silhouette_score(x, y), abs=1e-12)


def test_silhouette_separable_limit():
    rng = seeded_rng(6)
    x = np.concatenate([rng.normal(size=(20, 3)) * 0.01, 10 + rng.normal(size=(20, 3)) * 0.01])
    assert silhouette(x, [0] * 20 + [1] * 20) > 0.9


def test_silhouette_permutation_null():
    rng = seeded_rng(7)
    x = np.concatenate([rng.normal(size=(40, 4)), 3 + rng.normal(size=(40, 4))])
    y = np.array([0] * 40 + [1] * 40)
    vals = np.array([silhouette(x, rng.permutation(y)) for _ in range(200)])
    assert abs(vals.mean()) < 3 * vals.std(ddof=1) / np.sqrt(len(vals))
    assert silhouette(x, y) > 0.5


def test_silhouette_rotation_invariant():
    rng = seeded_rng(8)
    x = rng.normal(size=(30, 4))
    y = rng.integers(0, 3, size=30)
    q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
    assert abs(silhouette(x @ q, y) - silhouette(x, y)) <= 1e-9


def test_silhouette_needs_two_classes():
    with pytest.raises(DegenerateClasses):
        silhouette(np.zeros((3, 2)), [1, 1, 1])


def test_pca_of_planar_data_keeps_distances():
    rng = seeded_rng(9)
    plane = rng.normal(size=(25, 2)) * [3.0, 1.0]
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    x = plane @ q[:2] + 5.0
    coords = pca2d(x)
    d_in = np.linalg.norm(x[:, None] - x[None], axis=-1)
    d_out = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    assert np.abs(d_in - d_out).max() < 1e-9


def test_separability_on_batch():
    rng = seeded_rng(10)
    z = rng.normal(size=(3, 6, 4))
    z /= np.linalg.norm(z, axis=-1, keepdims=True)
    b = EmbeddingBatch(z, tuple(Labeled(c) for c in (0, 0, 1, 1, 2, 2)))
    sil, coords = separability(b)
    assert -1 <= sil <= 1 and coords.shape == (18, 2)
    with pytest.raises(DegenerateClasses):
        separability(EmbeddingBatch(z, tuple(Labeled(c) for c in (0, 0, 0, 0, 0, 1))))


# ---------------------------------------------------------------- evaluate

def test_evaluate_paths_and_determinism():
    ds = synth_dataset(SynthConfig((12, 8, 6), dims=(4, 4, 4), unlabeled_fraction=0.25, seed=1))
    p = init_params(seeded_rng(2), ds.dims, 6, 3)
    a = evaluate(p, ds, config_fingerprint="abc", seed=3).to_json()
    assert a == evaluate(p, ds, config_fingerprint="abc", seed=3).to_json()
    assert a["n"] == len(ds) and a["path"] == "stage1" and a["config_fingerprint"] == "abc"
    assert -1 <= a["silhouette"] <= 1
    priors = synth_priors(ds, 1.0)
    assert evaluate(p, ds, use_priors=priors).path == "stage2"
    with pytest.raises(MissingPrior):
        evaluate(p, ds, use_priors=priors[:-1])


def test_report_key_order():
    r = report_from_predictions([0, 1], [0, 1], 2, seed=1)
    assert list(r.to_json()) == ["config_fingerprint", "seed", "path", "n", "overall_accuracy",
                                 "mean_class_accuracy", "weighted_f1", "macro_f1",
                                 "per_class_accuracy", "confusion", "silhouette"]
