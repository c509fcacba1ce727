"""Classification metrics, latent-space separability and evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import BDCLError, EmbeddingBatch, FeatureDataset, Labeled
from .model import ModelParams, forward_stage1, forward_stage2
from .priors import MissingPrior, PriorRecord, featurize_many


class EmptyMatrix(BDCLError):
    pass


class DegenerateClasses(BDCLError):
    pass


def confusion_matrix(truth, pred, num_classes: int) -> np.ndarray:
    """Counts with rows indexed by true class and columns by prediction."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth), np.asarray(pred)), 1)
    return cm


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Recall per class; classes without support get 0."""
    support = cm.sum(axis=1)
    return np.divide(np.diag(cm), support, out=np.zeros(len(cm)), where=support > 0)


def _per_class_f1(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return f1, support


def weighted_f1(cm) -> float:
    """Support-weighted mean of per-class F1; zero-support classes drop out."""
    cm = np.asarray(cm)
    if cm.size == 0 or cm.sum() == 0:
        raise EmptyMatrix("confusion matrix holds no samples")
    f1, support = _per_class_f1(cm)
    return float(np.sum(f1 * support) / support.sum())


def macro_f1(cm) -> float:
    cm = np.asarray(cm)
    if cm.size == 0 or cm.sum() == 0:
        raise EmptyMatrix("confusion matrix holds no samples")
    f1, support = _per_class_f1(cm)
    return float(f1[support > 0].mean())


def silhouette(points: np.ndarray, labels: Sequence[int]) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Samples alone in their cluster contribute 0, as is conventional.
    """
    x = np.asarray(points, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateClasses("silhouette needs at least two classes")
    sq = np.sum(x * x, axis=1)
    dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))
    np.fill_diagonal(dist, 0.0)
    onehot = (y[:, None] == classes[None, :]).astype(np.float64)
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot                                 # (n, k) distance totals per cluster
    own = onehot.astype(bool)
    own_size = sizes[np.argmax(onehot, axis=1)]
    a = np.divide(sums[own], own_size - 1, out=np.zeros(len(y)), where=own_size > 1)
    mean_other = np.where(own, np.inf, sums / sizes[None, :])
    b = mean_other.min(axis=1)
    s = np.divide(b - a, np.maximum(a, b), out=np.zeros(len(y)), where=np.maximum(a, b) > 0)
    s[own_size <= 1] = 0.0
    return float(s.mean())


def pca2d(points: np.ndarray) -> np.ndarray:
    """Coordinates on the two leading principal axes (sign fixed so the
    largest-magnitude loading of each axis is positive)."""
    x = np.asarray(points, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    flip = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    axes = axes * flip[:, None]
    coords = centered @ axes.T
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    return coords


def separability(batch: EmbeddingBatch) -> tuple[float, np.ndarray]:
    """Silhouette and 2-D PCA of all modality embeddings, each point
    carrying its sample's class. Unlabeled samples are left out."""
    y = batch.y
    keep = y >= 0
    classes, counts = np.unique(y[keep], return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise DegenerateClasses("need two classes with at least two samples each")
    points = batch.z[:, keep].reshape(-1, batch.d)
    labels = np.tile(y[keep], 3)
    return silhouette(points, labels), pca2d(points)


@dataclass
class MetricsReport:
    per_class_accuracy: list[float]
    overall_accuracy: float
    mean_class_accuracy: float
    weighted_f1: float
    macro_f1: float
    confusion: list[list[int]]
    silhouette: float | None
    n: int
    config_fingerprint: str = ""
    seed: int = 0
    path: str = "stage1"

    def to_json(self) -> dict:
        return {
            "config_fingerprint": self.config_fingerprint,
            "seed": self.seed,
            "path": self.path,
            "n": self.n,
            "overall_accuracy": self.overall_accuracy,
            "mean_class_accuracy": self.mean_class_accuracy,
            "weighted_f1": self.weighted_f1,
            "macro_f1": self.macro_f1,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion,
            "silhouette": self.silhouette,
        }


def report_from_predictions(truth, pred, num_classes: int, z=None, **meta) -> MetricsReport:
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    cm = confusion_matrix(truth, pred, num_classes)
    acc = per_class_accuracy(cm)
    present = cm.sum(axis=1) > 0
    sil = None
    if z is not None:
        try:
            batch = EmbeddingBatch(z, tuple(Labeled(int(c)) for c in truth))
            sil, _ = separability(batch)
        except DegenerateClasses:
            sil = None
    return MetricsReport(
        per_class_accuracy=acc.tolist(),
        overall_accuracy=float(np.trace(cm) / cm.sum()),
        mean_class_accuracy=float(acc[present].mean()),
        weighted_f1=weighted_f1(cm),
        macro_f1=macro_f1(cm),
        confusion=cm.tolist(),
        silhouette=sil,
        n=int(cm.sum()),
        **meta,
    )


def predict(params: ModelParams, ds: FeatureDataset, priors: Sequence[PriorRecord] | None = None,
            index=None):
    """Probabilities and projected embeddings for the selected samples."""
    idx = np.arange(len(ds)) if index is None else np.asarray(index)
    feats = [x[idx] for x in ds.features]
    if priors is None:
        fwd = forward_stage1(params, feats)
    else:
        by_id = {p.sample_id: p for p in priors}
        missing = [ds.ids[i] for i in idx if ds.ids[i] not in by_id]
        if missing:
            raise MissingPrior(f"{len(missing)} samples have no prior, e.g. {missing[0]}")
        recs = [by_id[ds.ids[i]] for i in idx]
        weights = np.array([r.weights for r in recs], dtype=np.float64)
        fwd = forward_stage2(params, feats, featurize_many(recs), weights)
    return fwd.probs, fwd.z


def evaluate(params: ModelParams, ds: FeatureDataset,
             use_priors: Sequence[PriorRecord] | None = None, **meta) -> MetricsReport:
    """Metrics over every sample with a known class (labeled or hidden)."""
    truth = ds.truth()
    idx = np.flatnonzero(truth >= 0)
    if len(idx) == 0:
        raise EmptyMatrix("no samples with ground truth")
    probs, z = predict(params, ds, use_priors, idx)
    pred = probs.argmax(axis=1)
    path = "stage1" if use_priors is None else "stage2"
    return report_from_predictions(truth[idx], pred, ds.num_classes, z=z, path=path, **meta)
