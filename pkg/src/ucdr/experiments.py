"""Ablation ladder and kappa sweep built on :func:`trainer.train`."""
from __future__ import annotations

import csv
from dataclasses import dataclass

from .core import RunConfig
from .retrieval import evaluate
from .trainer import train

VARIANTS = (
    "base",
    "base+sn(kappa=0)",
    "base+sn",
    "base+ce_mix",
    "base+ce_mix+mp",
    "snmpnet",
)


def variant_config(name: str, config: RunConfig) -> RunConfig:
    """Loss switches for one row of the ablation ladder.

    The base network is trained on unmixed samples with the semantic cosine
    cross-entropy only; later rows add the neighbourhood term, mixup and the
    mixture-prediction term.
    """
    gamma2 = config.gamma2 if config.gamma2 > 0 else 1.0
    gamma1 = config.gamma1 if config.gamma1 > 0 else 1.0
    table = {
        "base": dict(use_mixup=False, gamma1=0.0, gamma2=0.0),
        "base+sn(kappa=0)": dict(use_mixup=False, gamma1=0.0, gamma2=gamma2, kappa=0.0),
        "base+sn": dict(use_mixup=False, gamma1=0.0, gamma2=gamma2),
        "base+ce_mix": dict(use_mixup=True, gamma1=0.0, gamma2=0.0),
        "base+ce_mix+mp": dict(use_mixup=True, gamma1=gamma1, gamma2=0.0),
        "snmpnet": {},
    }
    try:
        return config.replace(**table[name])
    except KeyError:
        raise ValueError(f"unknown variant {name!r}") from None


@dataclass(frozen=True)
class VariantResult:
    variant: str
    seed: int
    map_at_k: float
    prec_at_k: float
    val_map: float
    epochs: int


def run_variant(name, ds, split, sem, config, k=None):
    cfg = variant_config(name, config)
    model, logs, state = train(ds, split, sem, cfg)
    report = evaluate(model, ds, split, k=k)
    return VariantResult(name, cfg.seed, report.map_at_k, report.prec_at_k, state.best_val_map, len(logs)), model


def ablate(ds, split, sem, config, seeds=(0,), k=None, variants=VARIANTS):
    """Train and evaluate every variant for every seed."""
    results = []
    for name in variants:
        for seed in seeds:
            result, _ = run_variant(name, ds, split, sem, config.replace(seed=seed), k=k)
            results.append(result)
    return results


def summarize(results):
    """Mean mAP@k / Prec@k per variant, in ladder order."""
    rows = []
    for name in dict.fromkeys(r.variant for r in results):
        group = [r for r in results if r.variant == name]
        rows.append((
            name,
            sum(r.map_at_k for r in group) / len(group),
            sum(r.prec_at_k for r in group) / len(group),
            len(group),
        ))
    return rows


def write_ablation(results, path, k):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", f"map_at_{k}", f"prec_at_{k}", "num_seeds"])
        for name, m, p, n in summarize(results):
            w.writerow([name, repr(m), repr(p), n])


def kappa_sweep(ds, split, sem, config, kappas, k=None):
    """Train the base+sn variant per kappa; returns ``(kappa, val mAP, test mAP)`` sorted by kappa."""
    rows = []
    for kappa in sorted(set(float(x) for x in kappas)):
        cfg = variant_config("base+sn", config.replace(kappa=kappa))
        model, logs, state = train(ds, split, sem, cfg)
        test = evaluate(model, ds, split, k=k)
        rows.append((kappa, state.best_val_map, test.map_at_k))
    return rows


def write_kappa_sweep(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kappa", "val_map", "test_map"])
        for kappa, val, test in rows:
            w.writerow([repr(kappa), repr(val), repr(test)])
