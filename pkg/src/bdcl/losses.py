"""Balanced dual-contrastive objective with exact gradients.

All losses share one formulation. The N samples' embeddings are flattened
to rows ``Y[m * N + i] = z[m, i]`` and every loss is a sum over anchors a

    sum_a coef_a * sum_k pos[a, k] * (log D_a - s_ak),   s_ak = y_a . y_k / tau

where ``D_a = sum_k w[a, k] exp(s_ak)`` is a weighted mean over the anchor's
negative pool. Intra- and inter-modality losses differ only in the pool,
positive and coefficient matrices; balanced and standard (uniform) InfoNCE
differ only in the pool weights ``w``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import (
    BDCLError,
    EmbeddingBatch,
    NoLabels,
    stable_log_mean_exp,
)

Term = Literal["intra", "inter"]
Denominator = Literal["balanced", "uniform"]
AnchorMode = Literal["include", "exclude"]


class NoPositivePairs(BDCLError):
    pass


class EmptyPool(BDCLError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_inter: float = 0.2
    lambda_intra: float = 0.2
    tau: float = 0.1
    # Whether the anchor's own embedding sits in its denominator pool.
    anchor: AnchorMode = "include"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lambda_inter < 0 or self.lambda_intra < 0:
            raise ValueError("loss weights must be non-negative")
        if self.anchor not in ("include", "exclude"):
            raise ValueError(f"unknown anchor mode {self.anchor!r}")


@dataclass(frozen=True)
class LossOutput:
    value: float
    grad: np.ndarray  # shaped like z: (3, N, d)


def balanced_denominator(anchor, pool, pool_classes, num_classes: int, tau: float) -> float:
    """Class-balanced mean of exp(anchor . z_k / tau) over a pool.

    Each class present in the pool gets equal mass; absent classes are
    dropped from the outer mean.
    """
    pool = np.asarray(pool, dtype=np.float64)
    classes = np.asarray(pool_classes, dtype=np.int64)
    if pool.size == 0 or len(classes) == 0:
        raise EmptyPool("denominator pool is empty")
    if np.any(classes < 0) or np.any(classes >= num_classes):
        raise ValueError("pool class ids must lie in [0, C)")
    s = pool @ np.asarray(anchor, dtype=np.float64) / tau
    per_class = [stable_log_mean_exp(s[classes == c]) for c in np.unique(classes)]
    return float(np.exp(stable_log_mean_exp(per_class)))


def uniform_denominator(anchor, pool, tau: float) -> float:
    """Plain mean of exp(anchor . z_k / tau), the usual InfoNCE pool."""
    pool = np.asarray(pool, dtype=np.float64)
    if pool.size == 0:
        raise EmptyPool("denominator pool is empty")
    return float(np.exp(stable_log_mean_exp(pool @ np.asarray(anchor, dtype=np.float64) / tau)))


def _pool_weights(pool: np.ndarray, y_flat: np.ndarray, num_classes: int,
                  denominator: Denominator) -> np.ndarray:
    if denominator == "uniform":
        size = pool.sum(axis=1, keepdims=True)
        return np.divide(pool, size, out=np.zeros(pool.shape), where=size > 0)
    onehot = np.zeros((len(y_flat), num_classes))
    lab = y_flat >= 0
    onehot[lab, y_flat[lab]] = 1.0
    counts = pool.astype(np.float64) @ onehot          # (A, C) members per class in pool
    present = (counts > 0).sum(axis=1, keepdims=True)  # C' per anchor
    member_count = counts[:, np.where(lab, y_flat, 0)]  # |B_c| for each k's class
    denom = present * member_count
    return np.divide(pool, denom, out=np.zeros(pool.shape), where=pool & (denom > 0))


def _structure(y: np.ndarray, term: Term, anchor_mode: AnchorMode):
    """Pool mask, positive weights and per-anchor coefficients.

    Returned matrices are indexed by flattened rows ``m * N + i``.
    """
    n = len(y)
    mod = np.repeat(np.arange(3), n)
    smp = np.tile(np.arange(n), 3)
    yf = y[smp]
    lab = yf >= 0
    both = lab[:, None] & lab[None, :]
    same_mod = mod[:, None] == mod[None, :]
    same_smp = smp[:, None] == smp[None, :]
    self_mask = np.eye(3 * n, dtype=bool)

    if term == "intra":
        pool = both & same_mod
        pos = both & same_mod & ~same_smp & (yf[:, None] == yf[None, :])
        npos = pos.sum(axis=1)
        valid = npos > 0
        if not valid.any():
            raise NoPositivePairs("no anchor has a same-class partner")
        posw = np.divide(pos, npos[:, None], out=np.zeros(pos.shape), where=valid[:, None])
        coef = np.where(valid, 1.0 / valid.sum(), 0.0)
    else:
        n_lab = int((y >= 0).sum())
        pool = both.copy()
        pos = both & same_smp & ~self_mask
        posw = pos.astype(np.float64)
        coef = np.where(lab, 1.0 / (6 * n_lab), 0.0)
    if anchor_mode == "exclude":
        pool &= ~self_mask
    return pool, posw, coef, yf


def contrastive_loss(z: np.ndarray, y: np.ndarray, cfg: LossConfig, term: Term,
                     denominator: Denominator = "balanced",
                     num_classes: int | None = None) -> LossOutput:
    """One contrastive component on raw arrays, with its gradient.

    ``z`` has shape (3, N, d); ``y`` holds class ids with -1 for unlabeled
    samples, which take no part in the loss. No unit-norm check is made so
    that finite-difference probes can perturb ``z`` freely.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if not (y >= 0).any():
        raise NoLabels("contrastive loss needs labeled samples")
    if num_classes is None:
        num_classes = int(y.max()) + 1
    _, n, d = z.shape
    pool, posw, coef, yf = _structure(y, term, cfg.anchor)
    w = _pool_weights(pool, yf, num_classes, denominator)

    rows = z.reshape(3 * n, d)
    s = rows @ rows.T / cfg.tau
    active = coef > 0
    logits = np.where(pool, s + np.log(np.where(pool, w, 1.0)), -np.inf)
    shift = np.where(active, logits.max(axis=1), 0.0)
    e = np.exp(logits - shift[:, None], where=pool, out=np.zeros_like(s))
    total = np.where(active, e.sum(axis=1), 1.0)
    log_d = shift + np.log(total)
    soft = e / total[:, None]

    mult = posw.sum(axis=1)
    per_anchor = mult * log_d - (posw * s).sum(axis=1)
    value = float(np.sum(coef * per_anchor))

    g = coef[:, None] * (mult[:, None] * soft - posw)  # dL/ds
    grad_rows = (g + g.T) @ rows / cfg.tau
    return LossOutput(value, grad_rows.reshape(3, n, d))


def _check_batch(batch: EmbeddingBatch):
    if not isinstance(batch, EmbeddingBatch):
        raise TypeError("expected an EmbeddingBatch")


def intra_loss(batch: EmbeddingBatch, cfg: LossConfig, num_classes: int | None = None) -> LossOutput:
    """Within-modality supervised contrast with the class-balanced denominator."""
    _check_batch(batch)
    if (batch.y >= 0).sum() < 2:
        raise NoPositivePairs("intra-modality loss needs at least two labeled samples")
    return contrastive_loss(batch.z, batch.y, cfg, "intra", "balanced", num_classes)


def inter_loss(batch: EmbeddingBatch, cfg: LossConfig, num_classes: int | None = None) -> LossOutput:
    """Symmetric cross-modality contrast: same-sample pairs are positives."""
    _check_batch(batch)
    return contrastive_loss(batch.z, batch.y, cfg, "inter", "balanced", num_classes)


def _combine(batch, cfg, denominator, num_classes) -> LossOutput:
    z = batch.z
    value = 0.0
    grad = np.zeros_like(z)
    if cfg.lambda_inter == 0 and cfg.lambda_intra == 0:
        return LossOutput(0.0, grad)
    if cfg.lambda_inter:
        out = contrastive_loss(z, batch.y, cfg, "inter", denominator, num_classes)
        value += cfg.lambda_inter * out.value
        grad += cfg.lambda_inter * out.grad
    if cfg.lambda_intra:
        if (batch.y >= 0).sum() < 2:
            raise NoPositivePairs("intra-modality loss needs at least two labeled samples")
        out = contrastive_loss(z, batch.y, cfg, "intra", denominator, num_classes)
        value += cfg.lambda_intra * out.value
        grad += cfg.lambda_intra * out.grad
    return LossOutput(value, grad)


def bdcl_loss(batch: EmbeddingBatch, cfg: LossConfig, num_classes: int | None = None) -> LossOutput:
    """lambda_inter * inter + lambda_intra * intra, balanced denominators."""
    _check_batch(batch)
    return _combine(batch, cfg, "balanced", num_classes)


def standard_infonce(batch: EmbeddingBatch, cfg: LossConfig, num_classes: int | None = None) -> LossOutput:
    """Same dual objective with the conventional unweighted denominator."""
    _check_batch(batch)
    return _combine(batch, cfg, "uniform", num_classes)


def dual_loss(z, y, cfg: LossConfig, denominator: Denominator = "balanced",
              num_classes: int | None = None) -> LossOutput:
    """Array-level dual objective used by the trainer and gradient checks.

    A component whose preconditions fail on this batch (no labels, no
    same-class pairs) contributes nothing instead of raising.
    """
    z = np.asarray(z, dtype=np.float64)
    value = 0.0
    grad = np.zeros_like(z)
    y = np.asarray(y, dtype=np.int64)
    for lam, term in ((cfg.lambda_inter, "inter"), (cfg.lambda_intra, "intra")):
        if not lam:
            continue
        try:
            out = contrastive_loss(z, y, cfg, term, denominator, num_classes)
        except (NoLabels, NoPositivePairs):
            continue
        value += lam * out.value
        grad += lam * out.grad
    return LossOutput(value, grad)
