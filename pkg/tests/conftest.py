import numpy as np
import pytest

from nscaching.experiments import desk_config, desk_store, run_variant
from nscaching.kgdata import TripleStore, build_filter_index, compute_relation_stats
from nscaching.params import MODEL_KINDS, init_params

# acceptance verdict lines, criterion number -> text
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


def toy_store(num_entities=5, num_relations=2, n_train=12, seed=0):
    """Tiny random store with disjoint splits."""
    rng = np.random.default_rng(seed)
    seen = set()
    while len(seen) < n_train + 4:
        seen.add((int(rng.integers(num_entities)), int(rng.integers(num_relations)), int(rng.integers(num_entities))))
    triples = np.array(sorted(seen), dtype=np.int64)
    rng.shuffle(triples)
    return TripleStore(triples[:n_train], triples[n_train:n_train + 2], triples[n_train + 2:],
                       num_entities, num_relations)


@pytest.fixture
def store():
    return toy_store()


@pytest.fixture(params=MODEL_KINDS)
def kind(request):
    return request.param


def params64(kind, num_entities=5, num_relations=2, dim=8, seed=0):
    return init_params(kind, num_entities, num_relations, dim, seed=seed, dtype=np.float64)


_RUNS = {}


def desk_run(model, seed, strategy, **overrides):
    """Desk-scale run, cached for the whole session so several test modules can share it."""
    key = (model, seed, strategy, tuple(sorted(overrides.items())))
    if key not in _RUNS:
        store = desk_store(seed)
        fi = build_filter_index(store)
        stats = compute_relation_stats(store.train, store.num_relations)
        cfg = desk_config(model, seed, strategy=strategy, **overrides)
        _RUNS[key] = run_variant(store, cfg, filter_index=fi, stats=stats, with_classification=True)
    return _RUNS[key]
