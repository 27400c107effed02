"""Seeded synthetic knowledge graphs for desk-scale experiments."""

from __future__ import annotations

import os

import numpy as np

from .kgdata import TripleStore, Vocab, save_triples


def latent_translation_kg(num_entities=100, num_relations=8, latent_dim=4, fanout=(1, 2),
                          valid_frac=0.1, test_frac=0.1, seed=0) -> TripleStore:
    """KG whose facts follow a hidden translation geometry.

    Entities get random latent points and relations random offsets; each
    (head, relation) links to the ``k`` entities nearest ``x_head + offset``,
    with ``k`` drawn per relation from ``fanout``. Triples are then split
    at random so every test entity also occurs in training.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(num_entities, latent_dim))
    offsets = rng.normal(size=(num_relations, latent_dim))
    k_rel = rng.integers(fanout[0], fanout[1] + 1, size=num_relations)
    triples = []
    for r in range(num_relations):
        target = x + offsets[r]
        dist = np.linalg.norm(target[:, None, :] - x[None, :, :], axis=-1)
        np.fill_diagonal(dist, np.inf)
        nearest = np.argsort(dist, axis=1)[:, :k_rel[r]]
        for h in range(num_entities):
            for t in nearest[h]:
                triples.append((h, r, int(t)))
    triples = np.asarray(triples, dtype=np.int64)
    triples = triples[rng.permutation(len(triples))]
    n_valid = int(round(valid_frac * len(triples)))
    n_test = int(round(test_frac * len(triples)))
    held = triples[:n_valid + n_test]
    train = triples[n_valid + n_test:]
    # keep every held-out entity/relation seen in training
    seen_e = set(train[:, 0].tolist()) | set(train[:, 2].tolist())
    seen_r = set(train[:, 1].tolist())
    ok = np.array([h in seen_e and t in seen_e and r in seen_r for h, r, t in held.tolist()], dtype=bool)
    train = np.concatenate([train, held[~ok]])
    held = held[ok]
    valid, test = held[:n_valid], held[n_valid:]
    ents = Vocab(f"e{i}" for i in range(num_entities))
    rels = Vocab(f"r{i}" for i in range(num_relations))
    return TripleStore(train, valid, test, num_entities, num_relations, entities=ents, relations=rels)


def write_store(store: TripleStore, directory):
    """Write ``train.txt``/``valid.txt``/``test.txt`` with entity and relation names."""
    os.makedirs(directory, exist_ok=True)
    for name in ("train", "valid", "test"):
        save_triples(getattr(store, name), os.path.join(directory, f"{name}.txt"),
                     store.entities, store.relations)
