"""Domain types, seeded randomness and numerically stable primitives."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence, Union

import numpy as np

UNIT_NORM_TOL = 1e-9
ZERO_NORM_EPS = 1e-12


class BDCLError(Exception):
    """Base class for all library errors."""


class ZeroVector(BDCLError):
    pass


class NoLabels(BDCLError):
    pass


class EmptyList(BDCLError):
    pass


class DimMismatch(BDCLError):
    pass


class InvalidBatch(BDCLError):
    pass


class Modality(enum.IntEnum):
    """Input streams, in the canonical order used for every index."""

    VISUAL = 0
    AUDIO = 1
    TEXT = 2


MODALITIES = (Modality.VISUAL, Modality.AUDIO, Modality.TEXT)


@dataclass(frozen=True)
class Labeled:
    cls: int


@dataclass(frozen=True)
class PseudoLabeled:
    cls: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class Unlabeled:
    pass


UNLABELED = Unlabeled()
LabelState = Union[Labeled, PseudoLabeled, Unlabeled]


def label_id(state: LabelState) -> int:
    """Class id used for supervision, or -1 for unlabeled samples."""
    if isinstance(state, (Labeled, PseudoLabeled)):
        return state.cls
    return -1


def label_ids(labels: Sequence[LabelState]) -> np.ndarray:
    return np.array([label_id(s) for s in labels], dtype=np.int64)


class HiddenLabels:
    """Ground truth of unlabeled samples, reserved for evaluation.

    Training code never receives this object; only ``evaluate`` and the
    synthetic prior generator call :meth:`reveal`.
    """

    def __init__(self, truth: Mapping[str, int] | None = None):
        self._truth = MappingProxyType(dict(truth or {}))

    def reveal(self, sample_id: str) -> int | None:
        return self._truth.get(sample_id)

    def items(self):
        return self._truth.items()

    def __len__(self):
        return len(self._truth)

    def __eq__(self, other):
        return isinstance(other, HiddenLabels) and dict(self._truth) == dict(other._truth)


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """Raw per-modality features of N samples with their label states.

    Features are stored as one (N, D_m) float64 matrix per modality, in
    canonical modality order.
    """

    ids: tuple[str, ...]
    features: tuple[np.ndarray, np.ndarray, np.ndarray]
    labels: tuple[LabelState, ...]
    num_classes: int
    hidden: HiddenLabels = field(default_factory=HiddenLabels)

    def __post_init__(self):
        n = len(self.ids)
        if len(self.features) != 3:
            raise DimMismatch("every sample needs visual, audio and text features")
        feats = []
        for m, x in zip(MODALITIES, self.features):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[0] != n:
                raise DimMismatch(f"{m.name.lower()} features have shape {x.shape}, expected ({n}, D)")
            if not np.all(np.isfinite(x)):
                raise InvalidBatch(f"non-finite {m.name.lower()} features")
            x.setflags(write=False)
            feats.append(x)
        object.__setattr__(self, "features", tuple(feats))
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) != n:
            raise InvalidBatch("one label state per sample required")
        if len(set(self.ids)) != n:
            raise InvalidBatch("sample ids must be unique")
        for s in self.labels:
            c = label_id(s)
            if c >= self.num_classes:
                raise InvalidBatch(f"class id {c} >= num_classes {self.num_classes}")

    def __len__(self):
        return len(self.ids)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(x.shape[1] for x in self.features)

    @property
    def y(self) -> np.ndarray:
        return label_ids(self.labels)

    def subset(self, index: Sequence[int]) -> "FeatureDataset":
        index = list(index)
        ids = [self.ids[i] for i in index]
        hidden = {k: v for k, v in self.hidden.items() if k in set(ids)}
        return FeatureDataset(
            ids=tuple(ids),
            features=tuple(x[index] for x in self.features),
            labels=tuple(self.labels[i] for i in index),
            num_classes=self.num_classes,
            hidden=HiddenLabels(hidden),
        )

    def with_labels(self, labels: Sequence[LabelState]) -> "FeatureDataset":
        return FeatureDataset(self.ids, self.features, tuple(labels), self.num_classes, self.hidden)

    def labeled_index(self) -> list[int]:
        return [i for i, s in enumerate(self.labels) if isinstance(s, Labeled)]

    def unlabeled_index(self) -> list[int]:
        return [i for i, s in enumerate(self.labels) if isinstance(s, Unlabeled)]

    def truth(self) -> np.ndarray:
        """Ground-truth class per sample (-1 when unknown). Evaluation only."""
        out = []
        for sid, s in zip(self.ids, self.labels):
            if isinstance(s, Labeled):
                out.append(s.cls)
            else:
                h = self.hidden.reveal(sid)
                out.append(-1 if h is None else h)
        return np.array(out, dtype=np.int64)

    def equals(self, other: "FeatureDataset") -> bool:
        """Bitwise equality of ids, features, labels and hidden truth."""
        return (
            self.ids == other.ids
            and self.num_classes == other.num_classes
            and self.labels == other.labels
            and self.hidden == other.hidden
            and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                    for a, b in zip(self.features, other.features))
        )


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    """Projected latent vectors ``z[m, i]`` (shape (3, N, d)) plus labels."""

    z: np.ndarray
    labels: tuple[LabelState, ...]

    def __post_init__(self):
        z = np.array(self.z, dtype=np.float64)
        if z.ndim != 3 or z.shape[0] != 3:
            raise InvalidBatch(f"z must have shape (3, N, d), got {z.shape}")
        if z.shape[1] != len(self.labels):
            raise InvalidBatch("one label state per sample required")
        if not np.all(np.isfinite(z)):
            raise InvalidBatch("non-finite embedding entries")
        norms = np.linalg.norm(z, axis=-1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise InvalidBatch("embeddings must be unit norm")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return self.z.shape[1]

    @property
    def d(self) -> int:
        return self.z.shape[2]

    @property
    def y(self) -> np.ndarray:
        return label_ids(self.labels)

    @classmethod
    def from_vectors(cls, z, labels) -> "EmbeddingBatch":
        """Normalise raw vectors row-wise, then build the batch."""
        z = np.asarray(z, dtype=np.float64)
        return cls(np.apply_along_axis(l2_normalize, -1, z), tuple(labels))


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not norm > ZERO_NORM_EPS:
        raise ZeroVector(f"cannot normalise vector with norm {norm:.3g}")
    return v / norm


def class_partition(labels: Sequence[LabelState]) -> dict[int, frozenset[int]]:
    """Map each class to the indices of samples carrying it.

    Pseudo-labels count as labels; unlabeled samples belong to no class.
    """
    parts: dict[int, list[int]] = {}
    for i, s in enumerate(labels):
        c = label_id(s)
        if c >= 0:
            parts.setdefault(c, []).append(i)
    if not parts:
        raise NoLabels("no labeled or pseudo-labeled samples")
    return {c: frozenset(idx) for c, idx in sorted(parts.items())}


def stable_log_mean_exp(terms) -> float:
    t = np.asarray(terms, dtype=np.float64).ravel()
    if t.size == 0:
        raise EmptyList("log-mean-exp of an empty list")
    shift = float(t.max())
    return shift + math.log(float(np.exp(t - shift).sum()) / t.size)


def log_mean_exp_rows(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-mean-exp over masked entries; rows must be non-empty."""
    x = np.where(mask, x, -np.inf)
    shift = x.max(axis=-1, keepdims=True)
    s = np.exp(x - shift).sum(axis=-1)
    return shift[..., 0] + np.log(s / mask.sum(axis=-1))


def seeded_rng(seed: int) -> np.random.Generator:
    """Random stream backed by numpy's PCG64 bit generator.

    PCG64 output for a given integer seed is fixed by numpy's stream
    compatibility policy, so streams agree across runs and platforms.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for a sub-task, keyed by integers."""
    return np.random.Generator(np.random.PCG64([seed, *keys]))
