"""Scoring functions and their analytic gradients.

Every function takes index arrays that broadcast against each other, so the
same kernels score a single triple, a batch, or a batch against a matrix of
candidate entities. Larger scores mean more plausible triples; the
translational models return the negated L1 distance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ModelParams, is_translational

HEAD, TAIL = "head", "tail"


def _check_ids(params, h, r, t):
    for ids, bound, what in ((h, params.num_entities, "entity"),
                             (r, params.num_relations, "relation"),
                             (t, params.num_entities, "entity")):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= bound):
            raise IndexError(f"{what} id out of range [0, {bound})")


def _translated(params, h, r, t):
    """Residual h' + r - t' of a translational model, shape (..., d)."""
    P = params.tables
    eh, er, et = P["entity"][h], P["relation"][r], P["entity"][t]
    if params.kind == "TransE":
        return eh + er - et
    if params.kind == "TransH":
        w = P["relation_norm"][r]
        delta = eh - et
        return delta - np.sum(w * delta, axis=-1, keepdims=True) * w + er
    # TransD
    wr = P["relation_proj"][r]
    ph = np.sum(P["entity_proj"][h] * eh, axis=-1, keepdims=True)
    pt = np.sum(P["entity_proj"][t] * et, axis=-1, keepdims=True)
    return eh + er - et + (ph - pt) * wr


def score_ids(params: ModelParams, h, r, t) -> np.ndarray:
    """Scores for broadcastable index arrays ``h``, ``r``, ``t``."""
    h, r, t = np.asarray(h), np.asarray(r), np.asarray(t)
    _check_ids(params, h, r, t)
    if is_translational(params.kind):
        return -np.abs(_translated(params, h, r, t)).sum(axis=-1)
    P = params.tables
    if params.kind == "DistMult":
        return np.sum(P["entity"][h] * P["relation"][r] * P["entity"][t], axis=-1)
    hr, hi = P["entity"][h], P["entity_im"][h]
    rr, ri = P["relation"][r], P["relation_im"][r]
    tr, ti = P["entity"][t], P["entity_im"][t]
    # Re(<h, r, conj(t)>)
    return np.sum(tr * (hr * rr - hi * ri) + ti * (hi * rr + hr * ri), axis=-1)


def score(params: ModelParams, triple) -> float:
    h, r, t = (int(x) for x in triple)
    return float(score_ids(params, h, r, t))


def score_candidates(params: ModelParams, triple, slot, candidates) -> np.ndarray:
    """Score ``triple`` with its ``slot`` ("head" or "tail") replaced by each candidate.

    ``triple`` may be a single (h, r, t) or an (n, 3) batch; ``candidates``
    is then a 1-D list or an (n, C) matrix, and the result has the same shape.
    """
    triple = np.asarray(triple)
    cand = np.asarray(candidates, dtype=np.int64)
    if triple.ndim == 1:
        h, r, t = triple[0], triple[1], triple[2]
    else:
        h, r, t = triple[:, 0:1], triple[:, 1:2], triple[:, 2:3]
    if slot == HEAD:
        return score_ids(params, cand, r, t)
    if slot == TAIL:
        return score_ids(params, h, r, cand)
    raise ValueError(f"slot must be 'head' or 'tail', not {slot!r}")


@dataclass
class SparseGrad:
    """Row-wise gradient contributions: ``table -> [(rows, vectors), ...]``."""

    parts: dict = field(default_factory=dict)

    def add(self, table, rows, vectors):
        rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
        vectors = np.asarray(vectors).reshape(len(rows), -1)
        self.parts.setdefault(table, []).append((rows, vectors))

    def extend(self, other: SparseGrad):
        for table, items in other.parts.items():
            self.parts.setdefault(table, []).extend(items)

    def coalesce(self) -> dict:
        """Sum duplicate rows: ``table -> (unique_rows, summed_vectors)``."""
        out = {}
        for table, items in self.parts.items():
            rows = np.concatenate([r for r, _ in items])
            vecs = np.concatenate([v for _, v in items])
            uniq, inv = np.unique(rows, return_inverse=True)
            summed = np.zeros((len(uniq), vecs.shape[1]), dtype=np.result_type(vecs, np.float64))
            np.add.at(summed, inv, vecs)
            out[table] = (uniq, summed)
        return out

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(v * v) for _, v in self.coalesce().values())))

    def num_rows(self):
        return sum(len(r) for items in self.parts.values() for r, _ in items)


def grad_ids(params: ModelParams, h, r, t, upstream) -> SparseGrad:
    """Gradient of ``sum(upstream * f(h, r, t))`` over a batch of 1-D index arrays."""
    h = np.atleast_1d(np.asarray(h, dtype=np.int64))
    r = np.atleast_1d(np.asarray(r, dtype=np.int64))
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    _check_ids(params, h, r, t)
    up = np.broadcast_to(np.asarray(upstream, dtype=params.dtype), h.shape)[:, None]
    P = params.tables
    g = SparseGrad()
    if is_translational(params.kind):
        s = -np.sign(_translated(params, h, r, t)) * up
        eh, et = P["entity"][h], P["entity"][t]
        g.add("relation", r, s)
        if params.kind == "TransE":
            g.add("entity", h, s)
            g.add("entity", t, -s)
        elif params.kind == "TransH":
            w = P["relation_norm"][r]
            ws = np.sum(w * s, axis=1, keepdims=True)
            delta = eh - et
            gh = s - ws * w
            g.add("entity", h, gh)
            g.add("entity", t, -gh)
            g.add("relation_norm", r, -ws * delta - np.sum(w * delta, axis=1, keepdims=True) * s)
        else:
            wr, wh, wt = P["relation_proj"][r], P["entity_proj"][h], P["entity_proj"][t]
            rs = np.sum(wr * s, axis=1, keepdims=True)
            ph = np.sum(wh * eh, axis=1, keepdims=True)
            pt = np.sum(wt * et, axis=1, keepdims=True)
            g.add("entity", h, s + rs * wh)
            g.add("entity", t, -(s + rs * wt))
            g.add("entity_proj", h, rs * eh)
            g.add("entity_proj", t, -rs * et)
            g.add("relation_proj", r, (ph - pt) * s)
        return g
    if params.kind == "DistMult":
        eh, er, et = P["entity"][h], P["relation"][r], P["entity"][t]
        g.add("entity", h, up * er * et)
        g.add("relation", r, up * eh * et)
        g.add("entity", t, up * eh * er)
        return g
    hr, hi = P["entity"][h], P["entity_im"][h]
    rr, ri = P["relation"][r], P["relation_im"][r]
    tr, ti = P["entity"][t], P["entity_im"][t]
    g.add("entity", h, up * (rr * tr + ri * ti))
    g.add("entity_im", h, up * (rr * ti - ri * tr))
    g.add("relation", r, up * (hr * tr + hi * ti))
    g.add("relation_im", r, up * (hr * ti - hi * tr))
    g.add("entity", t, up * (hr * rr - hi * ri))
    g.add("entity_im", t, up * (hi * rr + hr * ri))
    return g


def grad(params: ModelParams, triple, upstream=1.0) -> SparseGrad:
    h, r, t = (int(x) for x in triple)
    return grad_ids(params, [h], [r], [t], [upstream])
