"""Two-stage training: semi-supervised stage 1 with pseudo-labels, then
prior-guided tuning of the prior path with everything else frozen."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Literal, Sequence

import numpy as np

from .core import (
    BDCLError,
    FeatureDataset,
    Labeled,
    PseudoLabeled,
    Unlabeled,
    derive_rng,
    label_id,
)
from .losses import Denominator, LossConfig, dual_loss
from .model import (
    BLOCK_KEYS,
    GROUPS,
    ModelParams,
    backward,
    cross_entropy,
    forward_stage1,
    forward_stage2,
    freeze_for_stage2,
)
from .priors import MissingPrior, PriorRecord, featurize_many

log = logging.getLogger(__name__)


class InsufficientLabels(BDCLError):
    pass


class ShapeMismatch(BDCLError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    denominator: Denominator = "balanced"
    lr: float = 5e-3
    epochs: int = 30
    stage2_epochs: int = 20
    stage2_lr: float = 5e-3
    batch_size: int = 32
    theta: float = 0.8
    pseudo_start_epoch: int = 5
    lambda_ce: float = 1.0
    stage2_loss: Literal["ce", "ce+bdcl"] = "ce"
    warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")
        if not self.lr > 0 or not self.stage2_lr > 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")
        if self.denominator not in ("balanced", "uniform"):
            raise ValueError(f"unknown denominator {self.denominator!r}")
        if self.stage2_loss not in ("ce", "ce+bdcl"):
            raise ValueError(f"unknown stage-2 loss {self.stage2_loss!r}")


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    ce: float
    contrastive: float
    labeled: int
    pseudo: int
    metrics: dict | None = None

    def to_json(self) -> dict:
        out = {"stage": self.stage, "epoch": self.epoch, "ce": self.ce,
               "contrastive": self.contrastive, "labeled": self.labeled, "pseudo": self.pseudo}
        if self.metrics is not None:
            out["metrics"] = self.metrics
        return out


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.epochs and (rec.stage, rec.epoch) <= (self.epochs[-1].stage, self.epochs[-1].epoch):
            raise ValueError("epoch index must increase")
        self.epochs.append(rec)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def optimize_step(params: ModelParams, grads, state: AdamState, lr: float
                  ) -> tuple[ModelParams, AdamState]:
    """Bias-corrected adaptive-moment update of the trainable groups only.

    Returns new objects; frozen arrays are shared, never copied or touched.
    """
    step = state.step + 1
    new_m, new_v = dict(state.m), dict(state.v)
    new_groups = {}
    for g in GROUPS:
        group = params.groups[g]
        gg = grads.get(g, {})
        for k, a in group.arrays.items():
            if k in gg and np.shape(gg[k]) != a.shape:
                raise ShapeMismatch(f"{g}.{k}: gradient {np.shape(gg[k])} vs parameter {a.shape}")
        if not group.trainable:
            if any(np.any(gg[k] != 0) for k in gg):
                warnings.warn(f"non-zero gradient supplied for frozen group {g!r}; ignored",
                              stacklevel=2)
            new_groups[g] = group
            continue
        arrays = {}
        for k, a in group.arrays.items():
            grad = gg.get(k, np.zeros_like(a))
            key = (g, k)
            m = BETA1 * state.m.get(key, 0.0) + (1 - BETA1) * grad
            v = BETA2 * state.v.get(key, 0.0) + (1 - BETA2) * grad * grad
            new_m[key], new_v[key] = m, v
            m_hat = m / (1 - BETA1 ** step)
            v_hat = v / (1 - BETA2 ** step)
            arrays[k] = a - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_groups[g] = replace(group, arrays=arrays)
    out = ModelParams(new_groups, params.feature_dims, params.prior_dims,
                      params.latent_dim, params.num_classes)
    return out, AdamState(step, new_m, new_v)


# ---------------------------------------------------------------- batching

def stratified_batches(index: Sequence[int], y: Sequence[int], batch_size: int, rng) -> list[np.ndarray]:
    """Shuffle within each class, then spread every class evenly over the epoch.

    Member j of a class with n members gets position key (j + u) / n for a
    per-class random offset u; sorting by key interleaves the classes in
    proportion to their sizes, so each batch sees a stratified sample.
    """
    index = np.asarray(index, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    keys = np.empty(len(index))
    order = np.empty(len(index), dtype=np.int64)
    pos = 0
    for c in np.unique(y):
        members = index[y == c][rng.permutation(int((y == c).sum()))]
        n = len(members)
        u = rng.random()
        keys[pos:pos + n] = (np.arange(n) + u) / n
        order[pos:pos + n] = members
        pos += n
    seq = order[np.argsort(keys, kind="stable")]
    batches = [seq[i:i + batch_size] for i in range(0, len(seq), batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def _features(ds: FeatureDataset, idx) -> list[np.ndarray]:
    return [x[idx] for x in ds.features]


# ---------------------------------------------------------------- stage 1

def stage1_loss(params: ModelParams, ds: FeatureDataset, idx, y, cfg: TrainConfig):
    """Total stage-1 loss on one minibatch and its parameter gradients."""
    fwd = forward_stage1(params, _features(ds, idx))
    ce, dlogits = cross_entropy(fwd.logits, y)
    dlogits = cfg.lambda_ce * dlogits
    contrastive, dz = 0.0, None
    if len(np.unique(y)) < 2:
        log.warning("minibatch holds a single class; contrastive terms skipped")
    elif cfg.loss.lambda_inter or cfg.loss.lambda_intra:
        out = dual_loss(fwd.z, y, cfg.loss, cfg.denominator, params.num_classes)
        contrastive, dz = out.value, out.grad
    grads = backward(dlogits, fwd, params, dz)
    return cfg.lambda_ce * ce + contrastive, ce, contrastive, grads


def pseudo_label(params: ModelParams, ds: FeatureDataset, theta: float
                 ) -> list[tuple[str, int, float]]:
    """(sample id, class, confidence) for unlabeled samples predicted with
    confidence at least ``theta``. Labeled samples are never touched."""
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    idx = [i for i, s in enumerate(ds.labels) if isinstance(s, (Unlabeled, PseudoLabeled))]
    if not idx:
        return []
    fwd = forward_stage1(params, _features(ds, idx))
    cls = fwd.probs.argmax(axis=1)
    conf = fwd.probs[np.arange(len(idx)), cls]
    # Compare in log space: log p_max = -log1p(sum of the other exp-gaps) is
    # strictly negative unless every gap underflows, so a threshold of 1.0
    # never admits a sample through rounding of p_max to 1.0.
    gaps = fwd.logits - fwd.logits[np.arange(len(idx)), cls][:, None]
    others = np.exp(gaps).sum(axis=1) - 1.0
    log_conf = -np.log1p(others)
    keep = log_conf >= math.log(theta)
    return [(ds.ids[i], int(c), float(p)) for i, c, p, k in zip(idx, cls, conf, keep) if k]


def stage1_train(ds: FeatureDataset, params: ModelParams, cfg: TrainConfig,
                 pseudo_labeling: bool = True,
                 on_epoch: Callable[[int, ModelParams], dict | None] | None = None,
                 ) -> tuple[ModelParams, TrainHistory]:
    """Minibatch training on lambda_ce * CE + BDCL over labeled and current
    pseudo-labeled samples; pseudo-labels are recomputed after each epoch
    from ``pseudo_start_epoch`` on and replace the previous assignment."""
    # Pseudo-labels carried in by the dataset supervise exactly like labels.
    labeled = [i for i, s in enumerate(ds.labels) if isinstance(s, (Labeled, PseudoLabeled))]
    base_y = {i: ds.labels[i].cls for i in labeled}
    if len(labeled) < 2 or len(set(base_y.values())) < 2:
        raise InsufficientLabels("stage 1 needs at least two labeled samples from two classes")
    rng = derive_rng(cfg.seed, 1)
    state = AdamState()
    history = TrainHistory()
    pseudo: dict[int, int] = {}
    id_to_index = {sid: i for i, sid in enumerate(ds.ids)}
    unlabeled = [i for i, s in enumerate(ds.labels) if isinstance(s, Unlabeled)]

    for epoch in range(1, cfg.epochs + 1):
        sup = sorted(labeled + list(pseudo))
        y_sup = np.array([base_y[i] if i in base_y else pseudo[i] for i in sup])
        ce_sum = con_sum = 0.0
        batches = stratified_batches(sup, y_sup, cfg.batch_size, rng)
        lookup = dict(zip(sup, y_sup))
        for b in batches:
            yb = np.array([lookup[i] for i in b])
            _, ce, con, grads = stage1_loss(params, ds, b, yb, cfg)
            params, state = optimize_step(params, grads, state, cfg.lr)
            ce_sum += ce * len(b)
            con_sum += con * len(b)
        if pseudo_labeling and unlabeled and epoch >= cfg.pseudo_start_epoch:
            assigned = pseudo_label(params, ds.subset(unlabeled), cfg.theta)
            pseudo = {id_to_index[sid]: c for sid, c, _ in assigned}
        metrics = on_epoch(epoch, params) if on_epoch else None
        history.append(EpochRecord(1, epoch, ce_sum / len(sup), con_sum / len(sup),
                                   len(labeled), len(pseudo), metrics))
    return params, history


# ---------------------------------------------------------------- stage 2

def warm_start_prior_path(params: ModelParams) -> ModelParams:
    """Start the prior path as a copy of the stage-1 fusion.

    The prior fusion block takes the stage-1 block weights, the MLP's output
    layer and the prior projectors start at zero, so before tuning the prior
    path reproduces the stage-1 fused vector under uniform weights.
    """
    out = params.copy()
    pf = out["prior_fusion"]
    for k in BLOCK_KEYS:
        pf[k] = params["fusion"][k].copy()
    pf["m2"] = np.zeros_like(pf["m2"])
    pf["c2"] = np.zeros_like(pf["c2"])
    for k, a in out["prior_projectors"].items():
        out["prior_projectors"][k] = np.zeros_like(a)
    return out


def _resolve_priors(ds: FeatureDataset, priors: Sequence[PriorRecord]):
    index = {sid: i for i, sid in enumerate(ds.ids)}
    missing = [p.sample_id for p in priors if p.sample_id not in index]
    if missing:
        raise MissingPrior(f"prior records for unknown samples: {missing[:5]}")
    return [index[p.sample_id] for p in priors]


def stage2_batch(params: ModelParams, ds: FeatureDataset, idx, pfeat, weights, y, cfg: TrainConfig):
    fwd = forward_stage2(params, _features(ds, idx), pfeat, weights)
    ce, dlogits = cross_entropy(fwd.logits, y)
    contrastive, dtokens = 0.0, None
    if cfg.stage2_loss == "ce+bdcl" and len(np.unique(y)) > 1:
        tokens = fwd.cache["y"]                        # (B, 3, d)
        norm = np.linalg.norm(tokens, axis=-1, keepdims=True)
        zhat = tokens / norm
        out = dual_loss(np.swapaxes(zhat, 0, 1), y, cfg.loss, cfg.denominator, params.num_classes)
        dz = np.swapaxes(out.grad, 0, 1)
        dtokens = (dz - zhat * np.sum(zhat * dz, axis=-1, keepdims=True)) / norm
        contrastive = out.value
    grads = backward(dlogits, fwd, params, dtokens=dtokens)
    return ce, contrastive, grads


def stage2_tune(params: ModelParams, ds: FeatureDataset, priors: Sequence[PriorRecord],
                cfg: TrainConfig,
                on_epoch: Callable[[int, ModelParams], dict | None] | None = None,
                ) -> tuple[ModelParams, TrainHistory]:
    """Tune only the prior projectors and prior fusion on prior-covered,
    labeled samples with cross-entropy (optionally plus BDCL)."""
    rows = _resolve_priors(ds, priors)
    history = TrainHistory()
    params = freeze_for_stage2(params)
    if cfg.stage2_epochs == 0:
        return params, history
    if cfg.warm_start:
        params = freeze_for_stage2(warm_start_prior_path(params))
    keep = [k for k, i in enumerate(rows) if label_id(ds.labels[i]) >= 0]
    if len(keep) < 2:
        raise InsufficientLabels("stage 2 needs at least two labeled, prior-covered samples")
    rows = np.array([rows[k] for k in keep])
    recs = [priors[k] for k in keep]
    pf_all = featurize_many(recs)
    w_all = np.array([r.weights for r in recs], dtype=np.float64)
    y_all = np.array([label_id(ds.labels[i]) for i in rows])
    rng = derive_rng(cfg.seed, 2)
    state = AdamState()
    for epoch in range(1, cfg.stage2_epochs + 1):
        ce_sum = con_sum = 0.0
        for b in stratified_batches(np.arange(len(rows)), y_all, cfg.batch_size, rng):
            ce, con, grads = stage2_batch(params, ds, rows[b], [f[b] for f in pf_all], w_all[b],
                                          y_all[b], cfg)
            params, state = optimize_step(params, grads, state, cfg.stage2_lr)
            ce_sum += ce * len(b)
            con_sum += con * len(b)
        metrics = on_epoch(epoch, params) if on_epoch else None
        history.append(EpochRecord(2, epoch, ce_sum / len(rows), con_sum / len(rows),
                                   len(rows), 0, metrics))
    return params, history
