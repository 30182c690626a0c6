"""Inference over a labelled split and the metrics report."""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np

from .matching import extract_matching, matching_accuracy, triple_cycle_score
from .network import UniverseModel
from .training import ForwardOptions, InstanceForward, PreparedInstance

MAX_EXHAUSTIVE = 20
SAMPLED_TRIPLES = 1000


def predict(model: UniverseModel, inst: PreparedInstance, options: ForwardOptions) -> np.ndarray:
    """Hard instance-to-universe matching (m x d) for one instance."""
    fwd = InstanceForward(model, inst, options)
    return extract_matching(fwd.soft_matching.data)


def reconstruction_errors(model, inst, options) -> tuple[float, float]:
    """(static, deformed) reconstruction residuals of one labelled instance."""
    fwd = InstanceForward(model, inst, options)
    return fwd.rec().item(), fwd.deform().item()


def sample_triples(n: int, seed: int = 0) -> list[tuple[int, int, int]]:
    if n < 3:
        return []
    if n <= MAX_EXHAUSTIVE:
        return list(combinations(range(n), 3))
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(SAMPLED_TRIPLES):
        out.append(tuple(sorted(rng.choice(n, size=3, replace=False).tolist())))
    return out


def _share_points(*mats) -> bool:
    # the cycle score is undefined for triples without a commonly matched universe point
    return bool(np.any(np.all([X.sum(axis=0) > 0 for X in mats], axis=0)))


def evaluate(
    model: UniverseModel,
    instances: Sequence[PreparedInstance],
    options: ForwardOptions | None = None,
    category_names: Sequence[str] | None = None,
    seed: int = 0,
) -> dict:
    """Accuracy, cycle-consistency and reconstruction metrics.

    Cycle scores are computed per category over all triples (up to 20
    instances) or 1000 seeded random triples. Triples whose matchings share
    no universe point are skipped.
    """
    options = options or ForwardOptions()
    names = list(category_names) if category_names else None
    per_cat: dict[int, dict] = {}
    preds: dict[int, list[np.ndarray]] = {}
    for inst in instances:
        if inst.category not in model.universe:
            raise KeyError(f"category id {inst.category} unknown to the model")
        X = predict(model, inst, options)
        preds.setdefault(inst.category, []).append(X)
        entry = per_cat.setdefault(inst.category, {"acc": [], "static": [], "deformed": []})
        if inst.labels is not None:
            entry["acc"].append(matching_accuracy(X, inst.gt_matching))
            if inst.m >= 4:
                static, deformed = reconstruction_errors(model, inst, options)
                entry["static"].append(static)
                entry["deformed"].append(deformed)
    report: dict = {"categories": {}}
    all_acc, all_static, all_def, all_cycle = [], [], [], []
    for cat in sorted(per_cat):
        entry = per_cat[cat]
        triples = [
            t for t in sample_triples(len(preds[cat]), seed) if _share_points(*(preds[cat][i] for i in t))
        ]
        cycles = [triple_cycle_score(*(preds[cat][i] for i in t)) for t in triples]
        name = names[cat] if names else str(cat)
        report["categories"][name] = {
            "instances": len(preds[cat]),
            "accuracy": float(np.mean(entry["acc"])) if entry["acc"] else None,
            "cycle_consistency": float(np.mean(cycles)) if cycles else None,
            "triples": len(triples),
            "static_reconstruction_error": float(np.mean(entry["static"]))
            if entry["static"]
            else None,
            "deformed_reconstruction_error": float(np.mean(entry["deformed"]))
            if entry["deformed"]
            else None,
        }
        all_acc += entry["acc"]
        all_static += entry["static"]
        all_def += entry["deformed"]
        all_cycle += cycles
    cats = report["categories"].values()
    accs = [c["accuracy"] for c in cats if c["accuracy"] is not None]
    report["average_accuracy"] = float(np.mean(accs)) if accs else None
    report["cycle_consistency"] = float(np.mean(all_cycle)) if all_cycle else None
    report["min_cycle_consistency"] = float(np.min(all_cycle)) if all_cycle else None
    report["static_reconstruction_error"] = float(np.mean(all_static)) if all_static else None
    report["deformed_reconstruction_error"] = float(np.mean(all_def)) if all_def else None
    report["instances"] = len(instances)
    return report
