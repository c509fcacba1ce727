"""Trainable components with explicit forward caches and reverse-mode gradients.

Parameter groups:

``projectors``        per-modality linear maps D_m -> d (W_v, b_v, W_a, ...)
``fusion``            one self-attention block over the three modality tokens
``classifier``        linear d -> C followed by softmax
``prior_projectors``  linear maps from prior features to d (P_v, p_v, ...)
``prior_fusion``      residual MLP d -> d -> d shared across modalities, then
                      a self-attention block of the same form as ``fusion``

An attention block maps tokens X (B, 3, d) to

    H = X + softmax(Q K^T / sqrt(d)) V Wo^T
    Y = H + W2 gelu(W1 H + b1) + b2
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .core import MODALITIES, BDCLError, DimMismatch, ZeroVector, ZERO_NORM_EPS

GROUPS = ("projectors", "fusion", "classifier", "prior_projectors", "prior_fusion")
BLOCK_KEYS = ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")
MOD_KEYS = ("v", "a", "t")


class InvalidWeights(BDCLError):
    pass


class StaleCache(BDCLError):
    pass


@dataclass
class ParamGroup:
    arrays: dict[str, np.ndarray]
    trainable: bool = True


@dataclass
class ModelParams:
    groups: dict[str, ParamGroup]
    feature_dims: tuple[int, int, int]
    prior_dims: tuple[int, int, int]
    latent_dim: int
    num_classes: int

    def __getitem__(self, group: str) -> dict[str, np.ndarray]:
        return self.groups[group].arrays

    def trainable_groups(self) -> list[str]:
        return [g for g in GROUPS if self.groups[g].trainable]

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for g in GROUPS:
            for k in sorted(self.groups[g].arrays):
                a = self.groups[g].arrays[k]
                h.update(f"{g}.{k}{a.shape}".encode())
                h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def group_checksum(self, group: str) -> str:
        h = hashlib.sha256()
        for k in sorted(self.groups[group].arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.groups[group].arrays[k]).tobytes())
        return h.hexdigest()


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_block(rng, d):
    return {
        "wq": _uniform(rng, (d, d), d),
        "wk": _uniform(rng, (d, d), d),
        "wv": _uniform(rng, (d, d), d),
        "wo": np.eye(d) + _uniform(rng, (d, d), d) * 0.1,
        "w1": _uniform(rng, (4 * d, d), d),
        "b1": _uniform(rng, (4 * d,), d),
        "w2": _uniform(rng, (d, 4 * d), 4 * d),
        "b2": _uniform(rng, (d,), 4 * d),
    }


def identity_block(d: int) -> dict[str, np.ndarray]:
    """Attention block whose output equals its input tokens."""
    return {
        "wq": np.zeros((d, d)), "wk": np.zeros((d, d)), "wv": np.zeros((d, d)),
        "wo": np.zeros((d, d)),
        "w1": np.zeros((4 * d, d)), "b1": np.zeros(4 * d),
        "w2": np.zeros((d, 4 * d)), "b2": np.zeros(d),
    }


def init_params(rng, feature_dims, latent_dim: int, num_classes: int,
                prior_dims=(44, 6, 64)) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation from ``rng``."""
    d = latent_dim
    proj = {}
    for key, dim in zip(MOD_KEYS, feature_dims):
        proj[f"w_{key}"] = _uniform(rng, (d, dim), dim)
        proj[f"b_{key}"] = _uniform(rng, (d,), dim)
    fusion = _init_block(rng, d)
    clf = {"w": _uniform(rng, (num_classes, d), d), "b": _uniform(rng, (num_classes,), d)}
    pproj = {}
    for key, dim in zip(MOD_KEYS, prior_dims):
        pproj[f"w_{key}"] = _uniform(rng, (d, dim), dim)
        pproj[f"b_{key}"] = _uniform(rng, (d,), dim)
    pfusion = {
        "m1": _uniform(rng, (d, d), d), "c1": _uniform(rng, (d,), d),
        "m2": _uniform(rng, (d, d), d), "c2": _uniform(rng, (d,), d),
    }
    pfusion.update(_init_block(rng, d))
    groups = {
        "projectors": ParamGroup(proj),
        "fusion": ParamGroup(fusion),
        "classifier": ParamGroup(clf),
        "prior_projectors": ParamGroup(pproj),
        "prior_fusion": ParamGroup(pfusion),
    }
    return ModelParams(groups, tuple(feature_dims), tuple(prior_dims), d, num_classes)


def freeze_for_stage2(params: ModelParams) -> ModelParams:
    """Only the prior projectors and prior fusion stay trainable."""
    out = ModelParams(
        {g: ParamGroup(p.arrays, g in ("prior_projectors", "prior_fusion"))
         for g, p in params.groups.items()},
        params.feature_dims, params.prior_dims, params.latent_dim, params.num_classes,
    )
    return out


# ---------------------------------------------------------------- primitives

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du


def softmax(logits, axis=-1):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _check_weights(r, batch):
    r = np.asarray(r, dtype=np.float64)
    if r.shape == (3,):
        r = np.broadcast_to(r, (batch, 3))
    if r.shape != (batch, 3):
        raise InvalidWeights(f"fusion weights must have shape (3,) or ({batch}, 3)")
    if np.any(r < 0) or np.any(np.abs(r.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidWeights("fusion weights must lie on the probability simplex")
    return r


def _project(x, w, b):
    u = x @ w.T + b
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norm <= ZERO_NORM_EPS):
        raise ZeroVector("projected feature has zero norm")
    return u / norm, (x, norm)


def _project_back(dz, z, cache):
    x, norm = cache
    du = (dz - z * np.sum(z * dz, axis=-1, keepdims=True)) / norm
    return du.T @ x, du.sum(axis=0), None


def block_forward(x, p):
    """Attention block over tokens x (B, T, d)."""
    d = x.shape[-1]
    q = x @ p["wq"].T
    k = x @ p["wk"].T
    v = x @ p["wv"].T
    att = softmax(q @ np.swapaxes(k, 1, 2) / math.sqrt(d))
    o = att @ v
    h = x + o @ p["wo"].T
    g = h @ p["w1"].T + p["b1"]
    act = gelu(g)
    y = h + act @ p["w2"].T + p["b2"]
    return y, (x, q, k, v, att, o, h, g, act)


def block_backward(dy, p, cache):
    x, q, k, v, att, o, h, g, act = cache
    d = x.shape[-1]
    grads = {}
    grads["w2"] = np.einsum("btd,btf->df", dy, act)
    grads["b2"] = dy.sum(axis=(0, 1))
    dg = (dy @ p["w2"]) * gelu_grad(g)
    grads["w1"] = np.einsum("btf,btd->fd", dg, h)
    grads["b1"] = dg.sum(axis=(0, 1))
    dh = dy + dg @ p["w1"]
    grads["wo"] = np.einsum("btd,bte->de", dh, o)
    do = dh @ p["wo"]
    datt = do @ np.swapaxes(v, 1, 2)
    dv = np.swapaxes(att, 1, 2) @ do
    ds = att * (datt - np.sum(datt * att, axis=-1, keepdims=True)) / math.sqrt(d)
    dq = ds @ k
    dk = np.swapaxes(ds, 1, 2) @ q
    grads["wq"] = np.einsum("btd,bte->de", dq, x)
    grads["wk"] = np.einsum("btd,bte->de", dk, x)
    grads["wv"] = np.einsum("btd,bte->de", dv, x)
    dx = dh + dq @ p["wq"] + dk @ p["wk"] + dv @ p["wv"]
    return dx, grads


# ---------------------------------------------------------------- single-sample API

def project(x, modality, params: ModelParams) -> np.ndarray:
    """Unit-norm latent vector of one raw feature vector."""
    m = int(modality)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != params.feature_dims[m]:
        raise DimMismatch(f"expected a {params.feature_dims[m]}-dim vector, got shape {x.shape}")
    key = MOD_KEYS[m]
    z, _ = _project(x[None, :], params["projectors"][f"w_{key}"], params["projectors"][f"b_{key}"])
    return z[0]


def fuse(z_v, z_a, z_t, params: ModelParams, weights=None) -> np.ndarray:
    r = _check_weights(np.full(3, 1 / 3) if weights is None else weights, 1)
    tokens = np.stack([z_v, z_a, z_t])[None].astype(np.float64)
    y, _ = block_forward(tokens, params["fusion"])
    return np.einsum("bm,bmd->bd", r, y)[0]


def classify(fused, params: ModelParams) -> np.ndarray:
    fused = np.asarray(fused, dtype=np.float64)
    return softmax(fused @ params["classifier"]["w"].T + params["classifier"]["b"])


@dataclass(frozen=True)
class PriorEmbedding:
    e: np.ndarray   # (3, d) in canonical modality order
    r: np.ndarray   # (3,)

    def __post_init__(self):
        _check_weights(self.r, 1)


def embed_prior_features(features, params: ModelParams) -> np.ndarray:
    """Linear prior projections e_m = P_m f_m + p_m for batched features."""
    pp = params["prior_projectors"]
    out = []
    for key, f, dim in zip(MOD_KEYS, features, params.prior_dims):
        f = np.asarray(f, dtype=np.float64)
        if f.shape[-1] != dim:
            raise DimMismatch(f"prior feature dim {f.shape[-1]} != {dim}")
        out.append(f @ pp[f"w_{key}"].T + pp[f"b_{key}"])
    return np.stack(out, axis=-2)


def prior_embed(record, params: ModelParams) -> PriorEmbedding:
    from .priors import featurize, validate_or_raise

    validate_or_raise(record)
    e = embed_prior_features(featurize(record), params)
    return PriorEmbedding(e, np.asarray(record.weights, dtype=np.float64))


def _mlp_forward(u, p):
    h1 = u @ p["m1"].T + p["c1"]
    a = gelu(h1)
    return u + a @ p["m2"].T + p["c2"], (u, h1, a)


def _mlp_backward(dout, p, cache):
    u, h1, a = cache
    grads = {"m2": np.einsum("bmd,bmf->df", dout, a), "c2": dout.sum(axis=(0, 1))}
    dh1 = (dout @ p["m2"]) * gelu_grad(h1)
    grads["m1"] = np.einsum("bmd,bmf->df", dh1, u)
    grads["c1"] = dh1.sum(axis=(0, 1))
    return dout + dh1 @ p["m1"], grads


def prior_mlp(u, params: ModelParams) -> np.ndarray:
    """The shared residual MLP of the prior path, for inspection and tests."""
    out, _ = _mlp_forward(np.asarray(u, dtype=np.float64)[None, None], params["prior_fusion"])
    return out[0, 0]


def prior_fuse(e: PriorEmbedding, z_v, z_a, z_t, params: ModelParams) -> np.ndarray:
    z = np.stack([z_v, z_a, z_t])[None].astype(np.float64)
    u = e.e[None] + z
    h, _ = _mlp_forward(u, params["prior_fusion"])
    y, _ = block_forward(h, {k: params["prior_fusion"][k] for k in BLOCK_KEYS})
    return np.einsum("m,md->d", e.r, y[0])


# ---------------------------------------------------------------- batched forward/backward

@dataclass
class Forward:
    """Cached forward pass over a batch; ``backward`` consumes it."""

    path: str
    z: np.ndarray          # (3, B, d)
    fused: np.ndarray      # (B, d)
    logits: np.ndarray     # (B, C)
    probs: np.ndarray
    fingerprint: str
    cache: dict = field(repr=False, default_factory=dict)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def forward_stage1(params: ModelParams, features, weights=None) -> Forward:
    """project -> fuse -> classify on batched features [(B, D_v), (B, D_a), (B, D_t)]."""
    pp = params["projectors"]
    zs, pcache = [], []
    for m, key in zip(MODALITIES, MOD_KEYS):
        x = np.asarray(features[m], dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != params.feature_dims[m]:
            raise DimMismatch(f"{m.name.lower()} features: expected (B, {params.feature_dims[m]})")
        z, c = _project(x, pp[f"w_{key}"], pp[f"b_{key}"])
        zs.append(z)
        pcache.append(c)
    b = zs[0].shape[0]
    r = _check_weights(np.full(3, 1 / 3) if weights is None else weights, b)
    tokens = np.stack(zs, axis=1)
    y, bcache = block_forward(tokens, params["fusion"])
    fused = np.einsum("bm,bmd->bd", r, y)
    logits = fused @ params["classifier"]["w"].T + params["classifier"]["b"]
    return Forward("stage1", np.stack(zs), fused, logits, softmax(logits), params.fingerprint(),
                   {"proj": pcache, "block": bcache, "r": r, "y": y})


def forward_stage2(params: ModelParams, features, prior_features, weights) -> Forward:
    """Prior path: classify(sum_m r_m Block(MLP(e_m + z_m)))."""
    pp = params["projectors"]
    zs, pcache = [], []
    for m, key in zip(MODALITIES, MOD_KEYS):
        x = np.asarray(features[m], dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != params.feature_dims[m]:
            raise DimMismatch(f"{m.name.lower()} features: expected (B, {params.feature_dims[m]})")
        z, c = _project(x, pp[f"w_{key}"], pp[f"b_{key}"])
        zs.append(z)
        pcache.append(c)
    b = zs[0].shape[0]
    r = _check_weights(weights, b)
    e = embed_prior_features(prior_features, params)   # (B, 3, d)
    u = e + np.stack(zs, axis=1)
    pf = params["prior_fusion"]
    h, mcache = _mlp_forward(u, pf)
    y, bcache = block_forward(h, {k: pf[k] for k in BLOCK_KEYS})
    fused = np.einsum("bm,bmd->bd", r, y)
    logits = fused @ params["classifier"]["w"].T + params["classifier"]["b"]
    pfeat = [np.asarray(f, dtype=np.float64) for f in prior_features]
    return Forward("stage2", np.stack(zs), fused, logits, softmax(logits), params.fingerprint(),
                   {"proj": pcache, "block": bcache, "mlp": mcache, "r": r, "y": y, "pfeat": pfeat})


def zero_grads(params: ModelParams) -> dict[str, dict[str, np.ndarray]]:
    return {g: {k: np.zeros_like(a) for k, a in params.groups[g].arrays.items()} for g in GROUPS}


def backward(dlogits, fwd: Forward, params: ModelParams, dz=None,
             dtokens=None) -> dict[str, dict[str, np.ndarray]]:
    """Exact gradients of a scalar loss given dL/dlogits, and optionally
    dL/dz (projected embeddings, (3, B, d)) and dL/dtokens (fusion block
    outputs, (B, 3, d)).

    Frozen groups receive zero gradients.
    """
    if fwd.fingerprint != params.fingerprint():
        raise StaleCache("parameters changed since the forward pass")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != fwd.logits.shape:
        raise StaleCache(f"gradient shape {dlogits.shape} does not match cached outputs {fwd.logits.shape}")
    if dz is not None and np.shape(dz) != fwd.z.shape:
        raise StaleCache(f"embedding gradient shape {np.shape(dz)} != {fwd.z.shape}")
    if dtokens is not None and np.shape(dtokens) != fwd.cache["y"].shape:
        raise StaleCache(f"token gradient shape {np.shape(dtokens)} != {fwd.cache['y'].shape}")

    grads = zero_grads(params)
    c = fwd.cache
    grads["classifier"]["w"] = dlogits.T @ fwd.fused
    grads["classifier"]["b"] = dlogits.sum(axis=0)
    dfused = dlogits @ params["classifier"]["w"]
    dy = c["r"][:, :, None] * dfused[:, None, :]
    if dtokens is not None:
        dy = dy + dtokens

    if fwd.path == "stage1":
        dx, bgrads = block_backward(dy, params["fusion"], c["block"])
        grads["fusion"] = bgrads
        dzs = np.swapaxes(dx, 0, 1)
    else:
        pf = params["prior_fusion"]
        dh, bgrads = block_backward(dy, pf, c["block"])
        du, mgrads = _mlp_backward(dh, pf, c["mlp"])
        grads["prior_fusion"].update(bgrads)
        grads["prior_fusion"].update(mgrads)
        de = du
        for mi, key in enumerate(MOD_KEYS):
            grads["prior_projectors"][f"w_{key}"] = de[:, mi].T @ c["pfeat"][mi]
            grads["prior_projectors"][f"b_{key}"] = de[:, mi].sum(axis=0)
        dzs = np.swapaxes(du, 0, 1)

    if dz is not None:
        dzs = dzs + dz
    for mi, key in enumerate(MOD_KEYS):
        gw, gb, _ = _project_back(dzs[mi], fwd.z[mi], c["proj"][mi])
        grads["projectors"][f"w_{key}"] = gw
        grads["projectors"][f"b_{key}"] = gb

    for g in GROUPS:
        if not params.groups[g].trainable:
            grads[g] = {k: np.zeros_like(a) for k, a in params.groups[g].arrays.items()}
    return grads


def cross_entropy(logits, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    b = len(targets)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    value = float(np.mean(log_z - shifted[np.arange(b), targets]))
    dlogits = softmax(logits)
    dlogits[np.arange(b), targets] -= 1.0
    return value, dlogits / b
