"""Desk-scale experiments: sampler comparisons and the select/update ablation grid."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import DiagWindow
from .evaluation import classify, evaluate_link_prediction, fit_thresholds, generate_negatives
from .kgdata import build_filter_index, compute_relation_stats
from .params import is_translational
from .sampling import SELECT_RULES, UPDATE_RULES, SamplerConfig
from .synthetic import latent_translation_kg
from .training import LOGISTIC_NZL_FLOOR, TrainConfig, train

DESK_KG = dict(num_entities=100, num_relations=6, fanout=(1, 3), valid_frac=0.15, test_frac=0.15)
DESK_TRAIN = dict(dim=20, lr=0.01, gamma=2.0, lam=0.01, batch_size=100, epochs=100, eval_every=10)
DESK_CACHE = dict(n1=10, n2=10)
# select/update ablation: cache small relative to the entity set
ABLATION_CACHE = dict(n1=3, n2=3)


def desk_store(seed, **overrides):
    return latent_translation_kg(seed=seed, **{**DESK_KG, **overrides})


def desk_config(model, seed, strategy="nscaching", **overrides) -> TrainConfig:
    sampler_keys = set(SamplerConfig.__dataclass_fields__)
    sampler_kw = {k: v for k, v in overrides.items() if k in sampler_keys}
    train_kw = {k: v for k, v in overrides.items() if k not in sampler_keys}
    sampler = SamplerConfig(strategy=strategy, **{**DESK_CACHE, **sampler_kw})
    return TrainConfig(model=model, seed=seed, sampler=sampler, **{**DESK_TRAIN, **train_kw})


@dataclass
class VariantResult:
    name: str
    test_mrr: float
    final_mrr: float
    reports: list = field(repr=False)
    windows: list = field(repr=False)
    changed_elements: int
    batch_order_digest: str = ""
    classification_accuracy: float = None

    def row(self):
        rr = float(np.mean([w["repeat_ratio"] for w in self.windows])) if self.windows else float("nan")
        nzl = float(np.mean([w["nonzero_loss_ratio"] for w in self.windows])) if self.windows else float("nan")
        out = {"variant": self.name, "test_mrr": self.test_mrr, "final_mrr": self.final_mrr,
               "nzl": nzl, "rr": rr, "ce": self.changed_elements}
        if self.classification_accuracy is not None:
            out["classification_accuracy"] = self.classification_accuracy
        return out


class _OrderDigest:
    """Hashes the positive batches in the order the trainer visits them."""

    def __init__(self, inner):
        self.inner = inner
        self.hash = hashlib.sha256()

    def __call__(self, epoch, batch, negatives, losses):
        self.hash.update(np.ascontiguousarray(batch).tobytes())
        self.inner(epoch, batch, negatives, losses)


def classification_negatives(store, filter_index, stats, seed):
    rng = np.random.default_rng([seed, 7])
    return (generate_negatives(store.valid, filter_index, stats, store.num_entities, rng),
            generate_negatives(store.test, filter_index, stats, store.num_entities, rng))


def run_variant(store, config: TrainConfig, name=None, filter_index=None, stats=None,
                with_classification=False, window_epochs=20) -> VariantResult:
    filter_index = filter_index or build_filter_index(store)
    stats = stats or compute_relation_stats(store.train, store.num_relations)
    floor = 0.0 if is_translational(config.model) else LOGISTIC_NZL_FLOOR
    window = DiagWindow(window_epochs, floor)
    observer = _OrderDigest(window)
    result = train(store, config, filter_index=filter_index, stats=stats, observer=observer)
    window.close(config.epochs)
    out = VariantResult(
        name=name or config.sampler.strategy,
        test_mrr=evaluate_link_prediction(result.best_params, store.test, filter_index).mrr,
        final_mrr=evaluate_link_prediction(result.params, store.test, filter_index).mrr,
        reports=result.reports,
        windows=window.records,
        changed_elements=sum(r.changed_elements for r in result.reports),
        batch_order_digest=observer.hash.hexdigest(),
    )
    if with_classification:
        valid_neg, test_neg = classification_negatives(store, filter_index, stats, config.seed)
        th = fit_thresholds(result.best_params, store.valid, valid_neg)
        out.classification_accuracy = classify(result.best_params, th, store.test, test_neg).test_accuracy
    return out


def ablation_variants():
    """Bernoulli baseline followed by every (select_rule, update_rule) pair."""
    yield "bernoulli", dict(strategy="bernoulli")
    for sel in SELECT_RULES:
        for upd in UPDATE_RULES:
            yield f"nscaching/{sel}-select/{upd}-update", dict(strategy="nscaching", select_rule=sel, update_rule=upd)


def run_ablation(store, config: TrainConfig, filter_index=None, stats=None):
    """Seven runs sharing ``config`` (and so the batch-order stream), varying only the sampler."""
    filter_index = filter_index or build_filter_index(store)
    stats = stats or compute_relation_stats(store.train, store.num_relations)
    results = []
    for name, sampler_kw in ablation_variants():
        cfg = replace(config, sampler=replace(config.sampler, **sampler_kw))
        results.append(run_variant(store, cfg, name, filter_index, stats))
    return results
