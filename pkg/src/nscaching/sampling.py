"""Negative samplers: uniform, Bernoulli and cache-based (NSCaching).

The cache keeps, for every ``(relation, tail)`` a set of candidate heads and
for every ``(head, relation)`` a set of candidate tails. Entries are created
lazily with random entities and refreshed from ``entry + N2 random entities``
by sampling N1 of them without replacement with probability proportional to
``exp(score)`` (or by keeping the top N1).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .scoring import HEAD, TAIL, score_ids

log = logging.getLogger(__name__)

STRATEGIES = ("uniform", "bernoulli", "nscaching")
SELECT_RULES = ("uniform", "importance", "top")
UPDATE_RULES = ("importance", "top")
SIDE_CHOICES = ("bernoulli", "uniform")


class ConfigError(ValueError):
    pass


@dataclass
class SamplerConfig:
    strategy: str = "bernoulli"
    n1: int = 50
    n2: int = 50
    n_lazy: int = 0
    select_rule: str = "uniform"
    update_rule: str = "importance"
    side_choice: str = "bernoulli"

    def __post_init__(self):
        for name, allowed in (("strategy", STRATEGIES), ("select_rule", SELECT_RULES),
                              ("update_rule", UPDATE_RULES), ("side_choice", SIDE_CHOICES)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.strategy == "nscaching" and (self.n1 < 1 or self.n2 < 1):
            raise ConfigError("n1 and n2 must be >= 1 for nscaching")
        if self.n_lazy < 0:
            raise ConfigError("n_lazy must be >= 0")

    def to_dict(self):
        return asdict(self)


# -- fixed-distribution samplers ----------------------------------------------

def uniform_corrupt(triple, num_entities, rng, replace_head=None):
    """Replace head or tail (fair coin unless ``replace_head`` is given) by a uniform entity."""
    if num_entities < 2:
        raise ConfigError("need at least two entities to corrupt a triple")
    h, r, t = (int(x) for x in triple)
    if replace_head is None:
        replace_head = rng.random() < 0.5
    e = int(rng.integers(num_entities))
    return (e, r, t) if replace_head else (h, r, e)


def bernoulli_corrupt(triple, stats, num_entities, rng):
    replace_head = rng.random() < stats.p_replace_head[int(triple[1])]
    return uniform_corrupt(triple, num_entities, rng, replace_head=replace_head)


def corrupt_batch(triples, num_entities, rng, p_head):
    """Vectorized corruption of an (n, 3) batch; ``p_head`` is a scalar or per-triple array.

    Returns ``(negatives, head_mask)``.
    """
    triples = np.asarray(triples, dtype=np.int64)
    n = len(triples)
    head_mask = rng.random(n) < np.broadcast_to(p_head, (n,))
    ents = rng.integers(num_entities, size=n)
    neg = triples.copy()
    neg[head_mask, 0] = ents[head_mask]
    neg[~head_mask, 2] = ents[~head_mask]
    return neg, head_mask


# -- sampling without replacement -----------------------------------------------

def _softmax_weights(scores):
    finite = np.isfinite(scores)
    top = np.max(np.where(finite, scores, -np.inf), axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    return np.exp(np.where(finite, scores - top, -np.inf))


def sample_without_replacement(scores, k, rng):
    """Draw ``k`` column indices per row, each draw proportional to ``exp(score)``
    among the columns not drawn yet. ``-inf`` marks unavailable columns.

    ``scores`` is (C,) or (B, C); returns (k,) or (B, k) in draw order.
    """
    scores = np.array(scores, dtype=np.float64)
    single = scores.ndim == 1
    scores = np.atleast_2d(scores)
    n_rows = scores.shape[0]
    if k > np.isfinite(scores).sum(axis=1).min(initial=k):
        raise ConfigError("fewer available candidates than draws")
    weights = _softmax_weights(scores)
    rows = np.arange(n_rows)
    out = np.empty((n_rows, k), dtype=np.int64)
    for i in range(k):
        total = weights.sum(axis=1)
        # survivors can all underflow after the largest weights are removed
        stale = total <= np.finfo(np.float64).tiny * scores.shape[1]
        if stale.any():
            weights[stale] = _softmax_weights(scores[stale])
            total = weights.sum(axis=1)
        cum = np.cumsum(weights, axis=1)
        u = rng.random(n_rows) * total
        idx = (cum <= u[:, None]).sum(axis=1)
        # guard against u landing on the rounding tail of the last column
        idx = np.minimum(idx, scores.shape[1] - 1)
        bad = weights[rows, idx] == 0
        if bad.any():
            idx[bad] = np.argmax(np.where(weights[bad] > 0, cum[bad], -1.0), axis=1)
        out[:, i] = idx
        weights[rows, idx] = 0.0
        scores[rows, idx] = -np.inf
    return out[0] if single else out


def top_k(scores, k):
    """Indices of the ``k`` largest scores per row, ties broken by column order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def _select_rows(scores, k, rule, rng):
    if rule == "importance":
        return sample_without_replacement(scores, k, rng)
    return top_k(scores, k)


def _mask_duplicates(cand):
    """-inf mask (0 elsewhere) hiding repeated ids in each row; first occurrence stays."""
    order = np.argsort(cand, axis=-1, kind="stable")
    srt = np.take_along_axis(cand, order, axis=-1)
    dup = np.zeros(cand.shape, dtype=bool)
    dup_sorted = np.zeros(cand.shape, dtype=bool)
    dup_sorted[..., 1:] = srt[..., 1:] == srt[..., :-1]
    np.put_along_axis(dup, order, dup_sorted, axis=-1)
    return np.where(dup, -np.inf, 0.0)


# -- the cache ------------------------------------------------------------------

@dataclass
class CacheEntry:
    entities: np.ndarray
    last_update_epoch: int


class NegCache:
    """Head cache keyed by (rel, tail) and tail cache keyed by (head, rel).

    Entries live in one growable id matrix per side so a batch of entries
    can be gathered and written with fancy indexing.
    """

    def __init__(self, n1, num_entities):
        if n1 > num_entities:
            raise ConfigError(f"cache size n1={n1} exceeds the number of entities {num_entities}")
        self.n1 = n1
        self.num_entities = num_entities
        self._slot = {HEAD: {}, TAIL: {}}
        self._ids = {side: np.empty((16, n1), dtype=np.int64) for side in (HEAD, TAIL)}
        self._last = {side: np.empty(16, dtype=np.int64) for side in (HEAD, TAIL)}

    def __len__(self):
        return len(self._slot[HEAD]) + len(self._slot[TAIL])

    def keys(self, side):
        return list(self._slot[side])

    def __contains__(self, side_key):
        side, key = side_key
        return tuple(key) in self._slot[side]

    def _new_slot(self, side, key, entities, last):
        slot = len(self._slot[side])
        if slot == len(self._last[side]):
            self._ids[side] = np.concatenate([self._ids[side], np.empty_like(self._ids[side])])
            self._last[side] = np.concatenate([self._last[side], np.empty_like(self._last[side])])
        self._slot[side][key] = slot
        self._ids[side][slot] = entities
        self._last[side][slot] = last
        return slot

    def get(self, side, key) -> CacheEntry:
        try:
            slot = self._slot[side][tuple(int(k) for k in key)]
        except KeyError:
            raise KeyError(f"no {side} cache entry for key {tuple(key)}") from None
        return CacheEntry(self._ids[side][slot].copy(), int(self._last[side][slot]))

    def set(self, side, key, entry: CacheEntry):
        key = tuple(int(k) for k in key)
        entities = np.asarray(entry.entities, dtype=np.int64)
        if entities.shape != (self.n1,) or len(np.unique(entities)) != self.n1:
            raise ValueError("cache entry must hold exactly n1 distinct ids")
        slot = self._slot[side].get(key)
        if slot is None:
            self._new_slot(side, key, entities, entry.last_update_epoch)
        else:
            self._ids[side][slot] = entities
            self._last[side][slot] = entry.last_update_epoch

    def slots(self, side, keys, rng, current_epoch=0, n_lazy=0):
        """Slot index per key row of ``keys`` (n, 2), creating missing entries in row order."""
        table = self._slot[side]
        out = np.empty(len(keys), dtype=np.int64)
        for i, key in enumerate(map(tuple, np.asarray(keys).tolist())):
            slot = table.get(key)
            if slot is None:
                slot = self._new_slot(side, key, self._random_entry(rng), current_epoch - n_lazy - 1)
            out[i] = slot
        return out

    def _random_entry(self, rng):
        return rng.choice(self.num_entities, size=self.n1, replace=False)

    def ids(self, side, slots):
        return self._ids[side][slots]

    def snapshot(self):
        """Copy of all entries as ``{(side, key): ids}``."""
        return {(side, key): self._ids[side][slot].copy()
                for side in (HEAD, TAIL) for key, slot in self._slot[side].items()}

    def state(self):
        """Per side: keys (K, 2), last-update epochs (K,), ids (K, n1), in slot order."""
        out = {}
        for side in (HEAD, TAIL):
            k = len(self._slot[side])
            keys = np.array(list(self._slot[side]), dtype=np.int64).reshape(k, 2)
            out[side] = (keys, self._last[side][:k].copy(), self._ids[side][:k].copy())
        return out

    @classmethod
    def from_state(cls, n1, num_entities, state):
        cache = cls(n1, num_entities)
        for side in (HEAD, TAIL):
            keys, last, ids = state[side]
            for key, lst, row in zip(keys.tolist(), last.tolist(), ids):
                cache._new_slot(side, tuple(key), row, lst)
        return cache

    def equals(self, other):
        if self.n1 != other.n1:
            return False
        a, b = self.state(), other.state()
        return all(np.array_equal(x, y) for side in (HEAD, TAIL) for x, y in zip(a[side], b[side]))


def cache_get_or_init(cache: NegCache, side, key, rng, current_epoch=0, n_lazy=0) -> CacheEntry:
    """Existing entry for ``key``, or a fresh one of n1 distinct random entities.

    A fresh entry is dated ``current_epoch - n_lazy - 1`` so the first update
    opportunity refreshes it. No randomness is consumed for an existing key.
    """
    key = tuple(int(k) for k in key)
    if (side, key) not in cache:
        cache.slots(side, [key], rng, current_epoch, n_lazy)
    return cache.get(side, key)


def cache_update(entry: CacheEntry, scorer, config: SamplerConfig, current_epoch, rng, num_entities) -> CacheEntry:
    """Refresh one entry; ``scorer(candidate_ids) -> scores`` scores the open slot.

    Returns ``entry`` unchanged when it was refreshed within the last
    ``n_lazy`` epochs.
    """
    if current_epoch - entry.last_update_epoch <= config.n_lazy:
        return entry
    n1 = len(entry.entities)
    if n1 > num_entities:
        raise ConfigError(f"cache size {n1} exceeds the number of entities {num_entities}")
    fresh = rng.integers(num_entities, size=config.n2)
    cand = np.concatenate([np.asarray(entry.entities, dtype=np.int64), fresh])
    _, first = np.unique(cand, return_index=True)
    cand = cand[np.sort(first)]
    scores = np.asarray(scorer(cand), dtype=np.float64)
    picked = _select_rows(scores, n1, config.update_rule, rng)
    return CacheEntry(cand[picked], current_epoch)


def _cache_keys(triples, side):
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    return triples[:, 1:3] if side == HEAD else triples[:, 0:2]


def _score_open(params, triples, side, cand):
    if side == HEAD:
        return score_ids(params, cand, triples[:, 1:2], triples[:, 2:3])
    return score_ids(params, triples[:, 0:1], triples[:, 1:2], cand)


def _pick_from_cache(params, triples, side, ids, rule, rng):
    n = len(ids)
    if rule == "uniform":
        col = rng.integers(ids.shape[1], size=n)
    else:
        scores = _score_open(params, triples, side, ids)
        col = _select_rows(scores, 1, rule, rng)[:, 0]
    return ids[np.arange(n), col]


def nscache_sample(cache: NegCache, config: SamplerConfig, triple, stats, rng, params=None, current_epoch=0):
    """Negative for one positive triple drawn from its two cache entries.

    Returns ``(negative, touched)`` where ``touched`` lists the
    ``(side, key)`` pairs read. ``params`` is needed for the importance and
    top selection rules.
    """
    triple = np.asarray(triple, dtype=np.int64).reshape(1, 3)
    h, r, t = triple[0].tolist()
    head_entry = cache_get_or_init(cache, HEAD, (r, t), rng, current_epoch, config.n_lazy)
    tail_entry = cache_get_or_init(cache, TAIL, (h, r), rng, current_epoch, config.n_lazy)
    if config.select_rule != "uniform" and params is None:
        raise ConfigError(f"select_rule={config.select_rule} needs model parameters")
    h_bar = _pick_from_cache(params, triple, HEAD, head_entry.entities[None], config.select_rule, rng)[0]
    t_bar = _pick_from_cache(params, triple, TAIL, tail_entry.entities[None], config.select_rule, rng)[0]
    p_head = stats.p_replace_head[r] if config.side_choice == "bernoulli" else 0.5
    neg = (int(h_bar), r, t) if rng.random() < p_head else (h, r, int(t_bar))
    return neg, [(HEAD, (r, t)), (TAIL, (h, r))]


# -- batched samplers used by the training loop -----------------------------------

class Sampler:
    """Base interface: ``sample`` draws one negative per positive, ``refresh``
    updates internal state afterwards and returns the number of changed cache ids.
    """

    def sample(self, params, batch, rng, epoch):
        raise NotImplementedError

    def refresh(self, params, batch, rng, epoch):
        return 0


class UniformSampler(Sampler):
    def __init__(self, num_entities):
        self.num_entities = num_entities

    def sample(self, params, batch, rng, epoch):
        return corrupt_batch(batch, self.num_entities, rng, 0.5)[0]


class BernoulliSampler(Sampler):
    def __init__(self, num_entities, stats):
        self.num_entities = num_entities
        self.stats = stats

    def sample(self, params, batch, rng, epoch):
        return corrupt_batch(batch, self.num_entities, rng, self.stats.p_replace_head[batch[:, 1]])[0]


class CacheSampler(Sampler):
    """Batched NSCaching: sample from the current entries, then refresh every
    entry the batch touched (each at most once per ``n_lazy + 1`` epochs).
    Candidate scoring uses the parameters as they were when the batch started.
    """

    def __init__(self, config: SamplerConfig, num_entities, stats, cache: NegCache = None):
        self.config = config
        self.num_entities = num_entities
        self.stats = stats
        self.cache = cache if cache is not None else NegCache(config.n1, num_entities)
        if self.cache.n1 != config.n1:
            raise ConfigError("cache entry size does not match n1")

    def sample(self, params, batch, rng, epoch):
        cfg = self.config
        picks = {}
        for side in (HEAD, TAIL):
            slots = self.cache.slots(side, _cache_keys(batch, side), rng, epoch, cfg.n_lazy)
            picks[side] = _pick_from_cache(params, batch, side, self.cache.ids(side, slots), cfg.select_rule, rng)
        p_head = self.stats.p_replace_head[batch[:, 1]] if cfg.side_choice == "bernoulli" else 0.5
        head_mask = rng.random(len(batch)) < p_head
        neg = batch.copy()
        neg[head_mask, 0] = picks[HEAD][head_mask]
        neg[~head_mask, 2] = picks[TAIL][~head_mask]
        return neg

    def refresh(self, params, batch, rng, epoch):
        changed = 0
        for side in (HEAD, TAIL):
            changed += self._refresh_side(params, batch, side, rng, epoch)
        return changed

    def _refresh_side(self, params, batch, side, rng, epoch):
        cfg = self.config
        cache = self.cache
        slots = cache.slots(side, _cache_keys(batch, side), rng, epoch, cfg.n_lazy)
        slots, first = np.unique(slots, return_index=True)
        due = epoch - cache._last[side][slots] > cfg.n_lazy
        slots, rows = slots[due], batch[first[due]]
        if len(slots) == 0:
            return 0
        old = cache._ids[side][slots]
        fresh = rng.integers(self.num_entities, size=(len(slots), cfg.n2))
        cand = np.concatenate([old, fresh], axis=1)
        scores = _score_open(params, rows, side, cand) + _mask_duplicates(cand)
        picked = _select_rows(scores, cfg.n1, cfg.update_rule, rng)
        new = np.take_along_axis(cand, picked, axis=1)
        cache._ids[side][slots] = new
        cache._last[side][slots] = epoch
        return int((~(new[:, :, None] == old[:, None, :]).any(axis=2)).sum())


def make_sampler(config: SamplerConfig, num_entities, stats, cache=None) -> Sampler:
    if config.strategy == "uniform":
        return UniformSampler(num_entities)
    if config.strategy == "bernoulli":
        return BernoulliSampler(num_entities, stats)
    return CacheSampler(config, num_entities, stats, cache)


# -- cache persistence -----------------------------------------------------------

_CACHE_MAGIC = "NSCACHING-CACHE 1"


def save_cache(cache: NegCache, path, meta=None):
    """Text header then little-endian int64 arrays: per side keys, epochs, ids."""
    state = cache.state()
    header = [_CACHE_MAGIC, f"n1: {cache.n1}", f"num_entities: {cache.num_entities}",
              f"head_keys: {len(state[HEAD][0])}", f"tail_keys: {len(state[TAIL][0])}"]
    header += [f"{k}: {v}" for k, v in (meta or {}).items()]
    with open(path, "wb") as f:
        f.write(("\n".join(header + ["END"]) + "\n").encode("utf-8"))
        for side in (HEAD, TAIL):
            for arr in state[side]:
                f.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())


def load_cache(path) -> NegCache:
    with open(path, "rb") as f:
        if f.readline().decode("utf-8", "replace").rstrip("\n") != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a cache file")
        header = {}
        for line in iter(f.readline, b""):
            line = line.decode("utf-8").rstrip("\n")
            if line == "END":
                break
            k, _, v = line.partition(": ")
            header[k] = v
        n1, n_ent = int(header["n1"]), int(header["num_entities"])
        state = {}
        for side in (HEAD, TAIL):
            k = int(header[f"{side}_keys"])
            arrays = []
            for shape in ((k, 2), (k,), (k, n1)):
                count = int(np.prod(shape))
                buf = f.read(8 * count)
                if len(buf) != 8 * count:
                    raise ValueError(f"{path}: truncated {side} cache payload")
                arrays.append(np.frombuffer(buf, dtype="<i8").reshape(shape).astype(np.int64))
            state[side] = tuple(arrays)
    return NegCache.from_state(n1, n_ent, state)
