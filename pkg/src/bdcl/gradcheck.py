"""Finite-difference verification of every analytic gradient.

Each case builds a small seeded instance, evaluates the analytic gradient
once, then compares it against central differences of the scalar loss. The
error for one array is ``max|g - fd| / max(max|g|, max|fd|)``; a case's error
is the worst over its arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EmbeddingBatch, Labeled, derive_rng, l2_normalize
from .losses import LossConfig, contrastive_loss, dual_loss
from .model import GROUPS, backward, cross_entropy, forward_stage1, forward_stage2, init_params

EPS = 1e-5
TOLERANCE = 1e-6
CASES = ("intra", "inter", "bdcl", "stage1", "stage2", "stage2+bdcl")
STAGE1_GROUPS = ("projectors", "fusion", "classifier")
STAGE2_GROUPS = ("projectors", "classifier", "prior_projectors", "prior_fusion")


@dataclass(frozen=True)
class CaseResult:
    case: str
    instance: int
    max_rel_error: float

    def to_json(self) -> dict:
        return {"case": self.case, "instance": self.instance, "max_rel_error": self.max_rel_error}


def central_difference(f, x: np.ndarray, eps: float = EPS, in_place: bool = False) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by (f(x+h) - f(x-h)) / 2h per entry.

    With ``in_place`` the caller's array is perturbed directly (and restored),
    which lets ``f`` close over a structure holding ``x``.
    """
    if not in_place:
        x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = f(x)
        flat[j] = orig - eps
        down = f(x)
        flat[j] = orig
        gflat[j] = (up - down) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    a, b = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - b).max() / scale)


def _sizes(rng):
    n = int(rng.integers(4, 9))
    d = int(rng.integers(2, 9))
    c = int(rng.integers(2, 5))
    return n, d, c


def _labels(rng, n, c):
    # at least two samples of class 0 so the intra term always has a positive pair
    y = rng.integers(0, c, size=n)
    y[:2] = 0
    return rng.permutation(y)


def _loss_case(term: str, seed: int) -> float:
    rng = derive_rng(seed, 101)
    n, d, c = _sizes(rng)
    y = _labels(rng, n, c)
    z = np.stack([[l2_normalize(rng.normal(size=d)) for _ in range(n)] for _ in range(3)])
    batch = EmbeddingBatch(z, tuple(Labeled(int(k)) for k in y))
    cfg = LossConfig(lambda_inter=float(rng.uniform(0.1, 1)), lambda_intra=float(rng.uniform(0.1, 1)))
    if term == "bdcl":
        def f(x):
            return dual_loss(x, batch.y, cfg, "balanced", c).value
    else:
        def f(x):
            return contrastive_loss(x, batch.y, cfg, term, "balanced", c).value
    analytic = (dual_loss(z, batch.y, cfg, "balanced", c) if term == "bdcl"
                else contrastive_loss(z, batch.y, cfg, term, "balanced", c)).grad
    return relative_error(analytic, central_difference(f, z))


def _model_case(path: str, seed: int) -> float:
    rng = derive_rng(seed, 102)
    n, d, c = _sizes(rng)
    dims = tuple(int(k) for k in rng.integers(2, 7, size=3))
    pdims = tuple(int(k) for k in rng.integers(2, 7, size=3))
    params = init_params(rng, dims, d, c, prior_dims=pdims)
    x = [rng.normal(size=(n, k)) for k in dims]
    pf = [rng.normal(size=(n, k)) for k in pdims]
    r = rng.dirichlet(np.ones(3), size=n)
    y = _labels(rng, n, c)
    cfg = LossConfig()

    def evaluate(p):
        if path == "stage1":
            fwd = forward_stage1(p, x)
            ce, dlogits = cross_entropy(fwd.logits, y)
            con = dual_loss(fwd.z, y, cfg, "balanced", c)
            return ce + con.value, fwd, dlogits, con.grad, None
        fwd = forward_stage2(p, x, pf, r)
        ce, dlogits = cross_entropy(fwd.logits, y)
        if path == "stage2":
            return ce, fwd, dlogits, None, None
        tokens = fwd.cache["y"]
        norm = np.linalg.norm(tokens, axis=-1, keepdims=True)
        zhat = tokens / norm
        con = dual_loss(np.swapaxes(zhat, 0, 1), y, cfg, "balanced", c)
        dz = np.swapaxes(con.grad, 0, 1)
        dtokens = (dz - zhat * np.sum(zhat * dz, axis=-1, keepdims=True)) / norm
        return ce + con.value, fwd, dlogits, None, dtokens

    _, fwd, dlogits, dz, dtokens = evaluate(params)
    grads = backward(dlogits, fwd, params, dz=dz, dtokens=dtokens)
    # Groups the path never reads have an exactly zero finite difference, so
    # their analytic gradient must be exactly zero; only used groups are probed.
    used = STAGE1_GROUPS if path == "stage1" else STAGE2_GROUPS
    for g in GROUPS:
        if g not in used and any(np.any(a != 0) for a in grads[g].values()):
            return float("inf")
    probe = params.copy()
    worst = 0.0
    for g in used:
        for k, a in probe[g].items():
            fd = central_difference(lambda _: evaluate(probe)[0], a, in_place=True)
            worst = max(worst, relative_error(grads[g][k], fd))
    return worst


def run_case(case: str, seed: int) -> float:
    if case in ("intra", "inter", "bdcl"):
        return _loss_case(case, seed)
    if case in ("stage1", "stage2", "stage2+bdcl"):
        return _model_case(case, seed)
    raise ValueError(f"unknown gradient case {case!r}")


def run_suite(seed: int = 0, instances: int = 20, cases=CASES) -> dict:
    """Run ``instances`` seeded instances of every case; the report lists
    each result plus the overall worst error and a pass flag."""
    results = [CaseResult(case, i, run_case(case, seed * 1_000_003 + i))
               for case in cases for i in range(instances)]
    worst = max(r.max_rel_error for r in results)
    return {
        "seed": seed,
        "instances": instances,
        "eps": EPS,
        "tolerance": TOLERANCE,
        "max_rel_error": worst,
        "passed": worst < TOLERANCE,
        "cases": [r.to_json() for r in results],
    }
