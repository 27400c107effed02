"""Training diagnostics: score CCDF, repeat ratio, non-zero-loss ratio,
changed cache elements and cache dumps.

Definitions emitted alongside every record:

* repeat ratio = 1 - distinct sampled negatives / sampled negatives, per window
* non-zero-loss ratio = fraction of per-triple losses above ``floor``
  (0 for the margin loss, 1e-6 for the logistic loss, which is never 0)
* changed elements = sum over cache keys of |after \\ before|
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .scoring import HEAD, TAIL, score_candidates

DEFINITIONS = {
    "repeat_ratio": "1 - distinct/total sampled negative triples within a tumbling window",
    "nonzero_loss_ratio": "fraction of per-triple losses > floor (margin: 0, logistic: 1e-6)",
    "changed_elements": "sum over keys of |entry_after minus entry_before|",
    "ccdf": "F(x) = fraction of candidates e with f(h,r,e) - f(h,r,t) >= x",
}


def ccdf_negative_scores(params, positive, grid, slot=TAIL):
    """``[(x, F(x))]`` where F(x) is the fraction of replacement entities e whose
    score gap ``f(corrupted) - f(positive)`` is at least x."""
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted ascending")
    h, r, t = (int(x) for x in positive)
    scores = score_candidates(params, (h, r, t), slot, np.arange(params.num_entities)).astype(np.float64)
    gaps = np.sort(scores - scores[h if slot == HEAD else t])
    frac = 1.0 - np.searchsorted(gaps, grid, side="left") / len(gaps)
    return list(zip(grid.tolist(), frac.tolist()))


def repeat_ratio(samples) -> float:
    """``samples`` is an iterable of hashable negatives or a Counter of them."""
    tally = samples if isinstance(samples, Counter) else Counter(samples)
    total = sum(tally.values())
    if total == 0:
        raise ValueError("empty window")
    return 1.0 - len(tally) / total


def nonzero_loss_ratio(losses, floor=0.0) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("empty window")
    return float(np.mean(losses > floor))


def changed_elements(snapshot_before, snapshot_after) -> int:
    """Count ids present in an entry after but not before, summed over entries."""
    if snapshot_before.keys() != snapshot_after.keys():
        missing = set(snapshot_before) ^ set(snapshot_after)
        raise KeyError(f"snapshots cover different keys, e.g. {next(iter(missing))}")
    return sum(len(set(np.asarray(snapshot_after[k]).tolist()) - set(np.asarray(snapshot_before[k]).tolist()))
               for k in snapshot_after)


def dump_cache(cache, side, key, entity_names):
    """Entity names currently cached for ``key``, in stored order."""
    entry = cache.get(side, key)
    return [entity_names[int(e)] for e in entry.entities]


class DiagWindow:
    """Tumbling-window tallies fed by the training loop's per-batch observer.

    Pass the instance as ``observer`` to :func:`nscaching.training.train`.
    Closed windows are appended to ``records``.
    """

    def __init__(self, window_epochs=20, floor=0.0):
        self.window_epochs = window_epochs
        self.floor = floor
        self.records = []
        self._start = None
        self._negatives = Counter()
        self._losses = []

    def __call__(self, epoch, batch, negatives, losses):
        if self._start is None:
            self._start = epoch
        elif epoch >= self._start + self.window_epochs:
            self.close(self._start + self.window_epochs - 1)
            self._start = epoch
        self._negatives.update(map(tuple, np.asarray(negatives).tolist()))
        self._losses.append(np.asarray(losses, dtype=np.float64))

    def close(self, last_epoch=None):
        if self._start is None or not self._losses:
            return None
        losses = np.concatenate(self._losses)
        record = {
            "window_start": self._start,
            "window_end": last_epoch if last_epoch is not None else self._start + self.window_epochs - 1,
            "samples": int(losses.size),
            "repeat_ratio": repeat_ratio(self._negatives),
            "nonzero_loss_ratio": nonzero_loss_ratio(losses, self.floor),
        }
        self.records.append(record)
        self._start = None
        self._negatives = Counter()
        self._losses = []
        return record
