"""Filtered link-prediction ranking and triplet classification."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .kgdata import FilterIndex
from .scoring import HEAD, TAIL, score_candidates, score_ids

TIE_CONVENTION = "optimistic: candidates scoring equal to the truth do not raise its rank"


def _rank_row(scores, true_entity, known, raw):
    true_score = scores[true_entity]
    if not raw and len(known):
        scores = scores.copy()
        scores[np.asarray(known, dtype=np.int64)] = -np.inf
    return 1 + int(np.count_nonzero(scores > true_score))


def _known(filter_index, triple, slot):
    h, r, t = (int(x) for x in triple)
    return filter_index.true_heads(r, t) if slot == HEAD else filter_index.true_tails(h, r)


def filtered_rank(params, query, slot, filter_index: FilterIndex, raw=False) -> int:
    """Rank of the true entity in ``slot`` among all entities.

    Competing entities that complete a known-true triple are discarded
    (unless ``raw``); rank is 1 + the number of remaining candidates that
    score strictly higher than the truth.
    """
    query = tuple(int(x) for x in query)
    scores = score_candidates(params, query, slot, np.arange(params.num_entities))
    true_entity = query[0] if slot == HEAD else query[2]
    return _rank_row(scores, true_entity, _known(filter_index, query, slot), raw)


def rank_queries(params, triples, slot, filter_index, raw=False, chunk=256):
    """Filtered ranks for every triple of ``triples`` in the given slot."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    all_entities = np.arange(params.num_entities)
    ranks = np.empty(len(triples), dtype=np.int64)
    true_col = 0 if slot == HEAD else 2
    # bound the (chunk, |E|, d) intermediate
    chunk = max(1, min(chunk, 2 ** 22 // max(1, params.num_entities * params.dim)))
    for start in range(0, len(triples), chunk):
        block = triples[start:start + chunk]
        cand = np.broadcast_to(all_entities, (len(block), params.num_entities))
        scores = score_candidates(params, block, slot, cand)
        for i, tr in enumerate(block):
            ranks[start + i] = _rank_row(scores[i], tr[true_col], _known(filter_index, tr, slot), raw)
    return ranks


@dataclass
class LinkPredMetrics:
    mrr: float
    mr: float
    hit10: float
    count: int
    head: dict = field(default_factory=dict)
    tail: dict = field(default_factory=dict)
    ties: str = TIE_CONVENTION
    mode: str = "filtered"

    def to_dict(self):
        return asdict(self)


def metrics_from_ranks(ranks) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise ValueError("no ranks to aggregate")
    return {
        "mrr": float(np.mean(1.0 / ranks)),
        "mr": float(np.mean(ranks)),
        "hit10": float(np.mean(ranks <= 10)),
        "count": int(ranks.size),
    }


def evaluate_link_prediction(params, split, filter_index, raw=False, threads=1) -> LinkPredMetrics:
    """Head and tail prediction for every triple of ``split`` (2 queries per triple)."""
    split = np.asarray(split, dtype=np.int64).reshape(-1, 3)
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    jobs = [(slot, part) for slot in (HEAD, TAIL) for part in np.array_split(split, max(1, threads))]
    jobs = [(slot, part) for slot, part in jobs if len(part)]

    def run(job):
        return job[0], rank_queries(params, job[1], job[0], filter_index, raw=raw)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    per_slot = {HEAD: [], TAIL: []}
    for slot, ranks in results:
        per_slot[slot].append(ranks)
    head = np.concatenate(per_slot[HEAD])
    tail = np.concatenate(per_slot[TAIL])
    overall = metrics_from_ranks(np.concatenate([head, tail]))
    return LinkPredMetrics(head=metrics_from_ranks(head), tail=metrics_from_ranks(tail),
                           mode="raw" if raw else "filtered", **overall)


# -- triplet classification ---------------------------------------------------------

def _best_threshold(pos_scores, neg_scores):
    """Threshold maximizing accuracy of ``score >= threshold``; returns (threshold, accuracy)."""
    scores = np.concatenate([pos_scores, neg_scores])
    labels = np.concatenate([np.ones(len(pos_scores), bool), np.zeros(len(neg_scores), bool)])
    distinct = np.unique(scores)
    candidates = np.concatenate([
        distinct[:1],
        (distinct[1:] + distinct[:-1]) / 2.0,
        [np.nextafter(distinct[-1], np.inf)],
    ])
    # accuracy of every candidate via sorted cumulative counts
    order = np.argsort(scores, kind="stable")
    s_sorted, l_sorted = scores[order], labels[order]
    below = np.searchsorted(s_sorted, candidates, side="left")
    neg_below = np.concatenate([[0], np.cumsum(~l_sorted)])[below]
    pos_at_or_above = len(pos_scores) - np.concatenate([[0], np.cumsum(l_sorted)])[below]
    acc = (neg_below + pos_at_or_above) / len(scores)
    best = int(np.argmax(acc))
    return float(candidates[best]), float(acc[best])


@dataclass
class Thresholds:
    per_relation: dict
    fallback: float
    valid_accuracy: float

    def lookup(self, relations):
        return np.array([self.per_relation.get(int(r), self.fallback) for r in relations])


def fit_thresholds(params, valid_pos, valid_neg) -> Thresholds:
    """Per-relation thresholds chosen among sorted score midpoints to maximize
    validation accuracy; relations missing from validation use the global best."""
    valid_pos = np.asarray(valid_pos, dtype=np.int64).reshape(-1, 3)
    valid_neg = np.asarray(valid_neg, dtype=np.int64).reshape(-1, 3)
    if len(valid_pos) + len(valid_neg) == 0:
        raise ValueError("no validation triples to fit thresholds on")
    sp = score_ids(params, valid_pos[:, 0], valid_pos[:, 1], valid_pos[:, 2]).astype(np.float64)
    sn = score_ids(params, valid_neg[:, 0], valid_neg[:, 1], valid_neg[:, 2]).astype(np.float64)
    return fit_thresholds_from_scores(valid_pos[:, 1], sp, valid_neg[:, 1], sn)


def fit_thresholds_from_scores(pos_rel, pos_scores, neg_rel, neg_scores) -> Thresholds:
    pos_rel, neg_rel = np.asarray(pos_rel), np.asarray(neg_rel)
    pos_scores, neg_scores = np.asarray(pos_scores, float), np.asarray(neg_scores, float)
    fallback, _ = _best_threshold(pos_scores, neg_scores)
    per_relation = {}
    for r in np.union1d(pos_rel, neg_rel).tolist():
        per_relation[int(r)], _ = _best_threshold(pos_scores[pos_rel == r], neg_scores[neg_rel == r])
    th = Thresholds(per_relation, fallback, 0.0)
    th.valid_accuracy = _accuracy(th, pos_rel, pos_scores, neg_rel, neg_scores)
    return th


def _accuracy(thresholds, pos_rel, pos_scores, neg_rel, neg_scores):
    correct = np.sum(pos_scores >= thresholds.lookup(pos_rel)) + np.sum(neg_scores < thresholds.lookup(neg_rel))
    return float(correct / (len(pos_scores) + len(neg_scores)))


@dataclass
class ClassificationReport:
    thresholds: dict
    valid_accuracy: float
    test_accuracy: float

    def to_dict(self):
        return {"thresholds": {str(k): v for k, v in self.thresholds.items()},
                "valid_accuracy": self.valid_accuracy, "test_accuracy": self.test_accuracy}


def classify(params, thresholds: Thresholds, test_pos, test_neg) -> ClassificationReport:
    """Predict positive iff score >= the relation's threshold; report accuracy."""
    test_pos = np.asarray(test_pos, dtype=np.int64).reshape(-1, 3)
    test_neg = np.asarray(test_neg, dtype=np.int64).reshape(-1, 3)
    sp = score_ids(params, test_pos[:, 0], test_pos[:, 1], test_pos[:, 2]).astype(np.float64)
    sn = score_ids(params, test_neg[:, 0], test_neg[:, 1], test_neg[:, 2]).astype(np.float64)
    acc = _accuracy(thresholds, test_pos[:, 1], sp, test_neg[:, 1], sn)
    return ClassificationReport(dict(thresholds.per_relation), thresholds.valid_accuracy, acc)


def generate_negatives(triples, filter_index, stats, num_entities, rng, max_tries=100):
    """One Bernoulli-corrupted negative per triple, rejecting known-true triples."""
    out = []
    for h, r, t in np.asarray(triples, dtype=np.int64).reshape(-1, 3).tolist():
        for _ in range(max_tries):
            e = int(rng.integers(num_entities))
            cand = (e, r, t) if rng.random() < stats.p_replace_head[r] else (h, r, e)
            if cand not in filter_index.all_true:
                break
        else:
            raise RuntimeError(f"could not corrupt {(h, r, t)} into an unknown triple")
        out.append(cand)
    return np.asarray(out, dtype=np.int64).reshape(-1, 3)
