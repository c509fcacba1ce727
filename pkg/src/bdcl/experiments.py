"""Head-to-head experiments shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .config import Config
from .core import seeded_rng
from .datagen import imbalance_profile, synth_dataset, synth_priors
from .metrics import evaluate, pca2d, predict
from .model import init_params
from .trainer import stage1_train, stage2_tune

DENOMINATORS = ("balanced", "uniform")


def holdout_for(cfg: Config, counts=None, scale: int = 1):
    """Independent evaluation draw from the training clusters."""
    counts = tuple(counts or cfg.section("data")["test_counts"] or cfg.section("data")["counts"])
    return synth_dataset(cfg.synth(tuple(n * scale for n in counts)), draw=1, holdout=True)


def _tail(counts) -> int:
    """Index of the rarest class (the lowest index among ties)."""
    return int(np.argmin(counts))


def compare_losses(cfg: Config, with_pca: bool = False) -> dict:
    """Train the balanced and the uniform-denominator objective on identical
    data, initialisation and batch order, for every class-count profile in
    the sweep and every seed; report separability and tail recall.

    The evaluation set is an independent draw with the training class
    proportions, ``test_scale`` times larger.
    """
    comp = cfg.section("compare")
    runs = []
    pca = []
    for counts in comp["sweep"]:
        tail = _tail(counts)
        for s in range(comp["seeds"]):
            seed = cfg.seed + s
            run_cfg = cfg.with_seed(seed)
            train = synth_dataset(run_cfg.synth(counts))
            test = holdout_for(run_cfg, counts, comp["test_scale"])
            row = {"counts": list(counts), "seed": seed, "tail_class": tail}
            for den in DENOMINATORS:
                tcfg = replace(run_cfg.train(), denominator=den)
                params = init_params(seeded_rng(seed), train.dims,
                                     cfg.section("model")["latent_dim"], train.num_classes)
                params, _ = stage1_train(train, params, tcfg)
                rep = evaluate(params, test)
                row[den] = {
                    "silhouette": rep.silhouette,
                    "tail_recall": rep.per_class_accuracy[tail],
                    "overall_accuracy": rep.overall_accuracy,
                    "weighted_f1": rep.weighted_f1,
                    "per_class_accuracy": rep.per_class_accuracy,
                }
                if with_pca and s == 0:
                    _, z = predict(params, test)
                    coords = pca2d(z.reshape(-1, z.shape[-1]))
                    pca.append({"counts": list(counts), "seed": seed, "denominator": den,
                                "labels": np.tile(test.truth(), 3).tolist(),
                                "coords": coords.tolist()})
            b, u = row["balanced"], row["uniform"]
            row["silhouette_win"] = b["silhouette"] > u["silhouette"]
            row["tail_recall_not_worse"] = b["tail_recall"] >= u["tail_recall"]
            runs.append(row)
    summary = []
    for counts in comp["sweep"]:
        rows = [r for r in runs if r["counts"] == list(counts)]
        summary.append({
            "counts": list(counts),
            "seeds": len(rows),
            "silhouette_wins": sum(r["silhouette_win"] for r in rows),
            "tail_recall_not_worse": sum(r["tail_recall_not_worse"] for r in rows),
        })
    report = {"config_fingerprint": cfg.fingerprint(), "seed": cfg.seed,
              "summary": summary, "runs": runs}
    if with_pca:
        report["pca"] = pca
    return report


def prior_benefit(cfg: Config, fidelities=(1.0, 0.0)) -> dict:
    """Stage-1 model versus the same model after stage-2 tuning with stub
    priors of each fidelity, over ``compare.seeds`` seeds."""
    seeds = cfg.section("compare")["seeds"]
    pcfg = cfg.section("priors")
    runs = []
    for s in range(seeds):
        seed = cfg.seed + s
        run_cfg = cfg.with_seed(seed)
        train = synth_dataset(run_cfg.synth())
        test = holdout_for(run_cfg)
        tcfg = run_cfg.train()
        params = init_params(seeded_rng(seed), train.dims, cfg.section("model")["latent_dim"],
                             train.num_classes)
        params, _ = stage1_train(train, params, tcfg)
        base = evaluate(params, test).overall_accuracy
        row = {"seed": seed, "stage1_accuracy": base}
        for fid in fidelities:
            kw = dict(r_policy=pcfg["r_policy"], aggregation=pcfg["aggregation"])
            tr_priors = synth_priors(train, fid, seed=seed, **kw)
            te_priors = synth_priors(test, fid, seed=seed + 1_000_003, **kw)
            tuned, _ = stage2_tune(params, train, tr_priors, tcfg)
            acc = evaluate(tuned, test, use_priors=te_priors).overall_accuracy
            row[f"fidelity_{fid:g}"] = {"stage2_accuracy": acc, "improved": acc > base}
        runs.append(row)
    summary = {f"fidelity_{fid:g}": sum(r[f"fidelity_{fid:g}"]["improved"] for r in runs)
               for fid in fidelities}
    return {"config_fingerprint": cfg.fingerprint(), "seed": cfg.seed, "seeds": seeds,
            "improved_counts": summary, "runs": runs}


def profile_sample(cfg: Config) -> dict:
    """Per-class additions for one augmentation profile and the resulting
    totals and max/min class ratios."""
    p = cfg.section("profile")
    base = np.asarray(p["base_counts"], dtype=np.int64)
    pool = np.asarray(p["pool_counts"] if p["pool_counts"] is not None else base, dtype=np.int64)
    added = imbalance_profile(p["kind"], base, p["extra"], pool, cfg.seed)
    totals = base + added

    def ratio(c):
        return float(c.max() / c.min()) if c.min() > 0 else None

    return {
        "config_fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "kind": p["kind"],
        "extra": p["extra"],
        "base_counts": base.tolist(),
        "pool_counts": pool.tolist(),
        "added": added.tolist(),
        "totals": totals.tolist(),
        "base_total": int(base.sum()),
        "total": int(totals.sum()),
        "ratio_before": ratio(base),
        "ratio_after": ratio(totals),
    }
