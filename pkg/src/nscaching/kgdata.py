"""Triple files, entity/relation dictionaries, filter index and Bernoulli statistics."""

from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np


class TripleFormatError(ValueError):
    """Raised for a malformed line in a triple or dictionary file."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class Vocab:
    """Bidirectional name <-> dense id mapping, ids assigned in first-seen order."""

    def __init__(self, names=()):
        self._ids = {}
        self._names = []
        for name in names:
            self.add(name)

    def add(self, name):
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id(self, name):
        return self._ids[name]

    def name(self, idx):
        return self._names[idx]

    @property
    def names(self):
        return list(self._names)

    def __contains__(self, name):
        return name in self._ids

    def __len__(self):
        return len(self._names)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._names == other._names


def load_split(path, entity_dict: Vocab, relation_dict: Vocab, frozen=False) -> np.ndarray:
    """Read a ``head<TAB>relation<TAB>tail`` file into an int64 array of shape (n, 3).

    Unknown names are appended to the dictionaries unless ``frozen`` is set,
    in which case they raise :class:`TripleFormatError`.
    """
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = [x.strip() for x in line.rstrip("\n").split("\t")]
            if len(fields) != 3:
                raise TripleFormatError(path, lineno, f"expected 3 tab-separated fields, got {len(fields)}")
            h, r, t = fields
            if frozen:
                for name, vocab in ((h, entity_dict), (r, relation_dict), (t, entity_dict)):
                    if name not in vocab:
                        raise TripleFormatError(path, lineno, f"unknown name {name!r}")
                triples.append((entity_dict.id(h), relation_dict.id(r), entity_dict.id(t)))
            else:
                triples.append((entity_dict.add(h), relation_dict.add(r), entity_dict.add(t)))
    return np.asarray(triples, dtype=np.int64).reshape(-1, 3)


def load_dictionary(path) -> Vocab:
    """Read a ``name<TAB>id`` file; ids must be dense from 0.

    A leading count line (OpenKE ``entity2id.txt`` style) is skipped.
    """
    pairs = []
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = [x.strip() for x in line.split("\t")]
        if lineno == 1 and len(fields) == 1 and fields[0].isdigit():
            continue
        if len(fields) != 2:
            raise TripleFormatError(path, lineno, "expected name<TAB>id")
        try:
            pairs.append((int(fields[1]), fields[0]))
        except ValueError:
            raise TripleFormatError(path, lineno, f"id {fields[1]!r} is not an integer") from None
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise TripleFormatError(path, 0, "ids are not dense from 0")
    return Vocab(name for _, name in pairs)


def save_dictionary(vocab: Vocab, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for i, name in enumerate(vocab.names):
            f.write(f"{name}\t{i}\n")


def _dedup(triples):
    if len(triples) == 0:
        return triples
    _, first = np.unique(triples, axis=0, return_index=True)
    return triples[np.sort(first)]


@dataclass
class TripleStore:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    num_entities: int
    num_relations: int
    entities: Vocab = field(default=None, repr=False)
    relations: Vocab = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1, 3)
            if len(arr):
                if arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= self.num_entities:
                    raise ValueError(f"{name}: entity id out of range")
                if arr[:, 1].min() < 0 or arr[:, 1].max() >= self.num_relations:
                    raise ValueError(f"{name}: relation id out of range")
            arr.setflags(write=False)
            setattr(self, name, arr)

    @classmethod
    def from_directory(cls, directory, train="train.txt", valid="valid.txt", test="test.txt",
                       entity_dict=None, relation_dict=None, entities=None, relations=None):
        """Load the three splits of a benchmark directory.

        Ids come from ``entities``/``relations`` vocabularies when given, else
        from ``entity_dict``/``relation_dict`` files inside ``directory`` when
        both exist, else from first appearance over train, valid, test.
        """
        paths = [os.path.join(directory, name) for name in (train, valid, test)]
        for p in paths:
            if not os.path.isfile(p):
                raise FileNotFoundError(f"missing split file: {p}")
        frozen = False
        ents, rels = Vocab(), Vocab()
        if entities is not None and relations is not None:
            ents, rels, frozen = entities, relations, True
        elif entity_dict and relation_dict:
            e_path = os.path.join(directory, entity_dict)
            r_path = os.path.join(directory, relation_dict)
            if os.path.isfile(e_path) and os.path.isfile(r_path):
                ents, rels = load_dictionary(e_path), load_dictionary(r_path)
                frozen = True
        splits = [_dedup(load_split(p, ents, rels, frozen=frozen)) for p in paths]
        return cls(*splits, num_entities=len(ents), num_relations=len(rels), entities=ents, relations=rels)


@dataclass(frozen=True)
class FilterIndex:
    all_true: frozenset
    tails_by_hr: dict
    heads_by_rt: dict

    def __contains__(self, triple):
        return tuple(int(x) for x in triple) in self.all_true

    def true_tails(self, h, r):
        return self.tails_by_hr.get((int(h), int(r)), ())

    def true_heads(self, r, t):
        return self.heads_by_rt.get((int(r), int(t)), ())


def build_filter_index(store: TripleStore) -> FilterIndex:
    all_true = set()
    for split in (store.train, store.valid, store.test):
        all_true.update(map(tuple, split.tolist()))
    tails, heads = defaultdict(set), defaultdict(set)
    for h, r, t in all_true:
        tails[(h, r)].add(t)
        heads[(r, t)].add(h)
    return FilterIndex(
        all_true=frozenset(all_true),
        tails_by_hr={k: sorted(v) for k, v in tails.items()},
        heads_by_rt={k: sorted(v) for k, v in heads.items()},
    )


@dataclass(frozen=True)
class RelationStats:
    tph: np.ndarray
    hpt: np.ndarray
    p_replace_head: np.ndarray


def compute_relation_stats(train, num_relations) -> RelationStats:
    """Per-relation tails-per-head / heads-per-tail and the head-replacement probability.

    Relations absent from ``train`` get tph = hpt = 1 and probability 0.5.
    """
    tph = np.ones(num_relations)
    hpt = np.ones(num_relations)
    train = np.unique(np.asarray(train, dtype=np.int64).reshape(-1, 3), axis=0)
    for r in np.unique(train[:, 1]):
        sub = train[train[:, 1] == r]
        n_pairs = len(sub)
        tph[r] = n_pairs / len(np.unique(sub[:, 0]))
        hpt[r] = n_pairs / len(np.unique(sub[:, 2]))
    return RelationStats(tph=tph, hpt=hpt, p_replace_head=tph / (tph + hpt))


def save_relation_stats(stats: RelationStats, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("relation\ttph\thpt\tp_replace_head\n")
        for r, (a, b, p) in enumerate(zip(stats.tph, stats.hpt, stats.p_replace_head)):
            f.write(f"{r}\t{float(a)!r}\t{float(b)!r}\t{float(p)!r}\n")


def load_relation_stats(path) -> RelationStats:
    rows = np.loadtxt(path, delimiter="\t", skiprows=1, ndmin=2)
    return RelationStats(tph=rows[:, 1], hpt=rows[:, 2], p_replace_head=rows[:, 3])


def save_triples(triples, path, entities: Vocab = None, relations: Vocab = None):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for h, r, t in np.asarray(triples).tolist():
            if entities is not None:
                f.write(f"{entities.name(h)}\t{relations.name(r)}\t{entities.name(t)}\n")
            else:
                f.write(f"{h}\t{r}\t{t}\n")
