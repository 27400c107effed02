"""Losses, sparse Adam and the training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .evaluation import evaluate_link_prediction
from .kgdata import TripleStore, build_filter_index, compute_relation_stats
from .params import ModelParams, init_params, is_translational, load_checkpoint, save_checkpoint
from .sampling import CacheSampler, SamplerConfig, make_sampler
from .scoring import grad_ids, score_ids

log = logging.getLogger(__name__)

LOGISTIC_NZL_FLOOR = 1e-6


class TrainingError(RuntimeError):
    pass


# -- losses ------------------------------------------------------------------------

def margin_loss_and_grad(pos_score, neg_score, gamma):
    """Hinge ``max(0, gamma - pos + neg)`` and its derivatives w.r.t. pos and neg."""
    pos_score = np.asarray(pos_score, dtype=np.float64)
    neg_score = np.asarray(neg_score, dtype=np.float64)
    raw = gamma - pos_score + neg_score
    active = (raw > 0).astype(np.float64)
    return np.maximum(raw, 0.0), -active, active


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-softplus(-x))


def logistic_loss_and_grad(pos_score, neg_score):
    """``log(1+exp(-pos)) + log(1+exp(neg))`` and its derivatives."""
    return softplus(-pos_score) + softplus(neg_score), -sigmoid(-pos_score), sigmoid(neg_score)


# -- optimizer ---------------------------------------------------------------------

class Adam:
    """Adam with sparse (lazy) row updates.

    Only rows present in a gradient have their moments decayed and their
    values moved; the bias correction uses the global step count.
    """

    def __init__(self, params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.tables.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.tables.items()}

    def step(self, params: ModelParams, grads, lr):
        """Apply ``grads`` (a SparseGrad or an already coalesced dict)."""
        if hasattr(grads, "coalesce"):
            grads = grads.coalesce()
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for table, (rows, g) in grads.items():
            m = self.beta1 * self.m[table][rows] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[table][rows] + (1.0 - self.beta2) * g * g
            self.m[table][rows] = m
            self.v[table][rows] = v
            w = params.tables[table]
            w[rows] = w[rows] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, adam_state: Adam, sparse_grads, lr):
    adam_state.step(params, sparse_grads, lr)


# -- configuration ------------------------------------------------------------------

@dataclass
class TrainConfig:
    model: str = "TransE"
    dim: int = 50
    lr: float = 1e-3
    gamma: float = 2.0
    lam: float = 0.01
    batch_size: int = 100
    epochs: int = 100
    eval_every: int = 10
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    pretrain_checkpoint: str = None
    valid_cap: int = 2000
    dtype: str = "float32"

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    nonzero_loss_ratio: float
    mean_grad_norm: float
    changed_elements: int = 0
    valid_mrr: float = None
    wall_time: float = field(default=0.0, compare=False)

    FIELDS = ("epoch", "mean_loss", "nonzero_loss_ratio", "mean_grad_norm",
              "changed_elements", "valid_mrr", "wall_time")

    def to_json(self):
        return json.dumps({k: getattr(self, k) for k in self.FIELDS})


@dataclass
class TrainResult:
    params: ModelParams
    reports: list
    best_params: ModelParams
    best_epoch: int
    best_valid_mrr: float
    sampler: object = None

    @property
    def cache(self):
        return getattr(self.sampler, "cache", None)


def _streams(seed):
    init, order, sampler, valid = np.random.SeedSequence(seed).spawn(4)
    return (int(init.generate_state(1)[0]), np.random.default_rng(order),
            np.random.default_rng(sampler), np.random.default_rng(valid))


def _batch_step(params, config, batch, neg):
    """Loss terms, nonzero count and gradient for one batch of positives/negatives."""
    pos_s = score_ids(params, batch[:, 0], batch[:, 1], batch[:, 2])
    neg_s = score_ids(params, neg[:, 0], neg[:, 1], neg[:, 2])
    if is_translational(params.kind):
        loss, g_pos, g_neg = margin_loss_and_grad(pos_s, neg_s, config.gamma)
        nonzero = int(np.count_nonzero(loss > 0))
    else:
        loss, g_pos, g_neg = logistic_loss_and_grad(pos_s, neg_s)
        nonzero = int(np.count_nonzero(loss > LOGISTIC_NZL_FLOOR))
    g = grad_ids(params, batch[:, 0], batch[:, 1], batch[:, 2], g_pos)
    g.extend(grad_ids(params, neg[:, 0], neg[:, 1], neg[:, 2], g_neg))
    grads = g.coalesce()
    total = float(loss.sum())
    if not is_translational(params.kind) and config.lam:
        for table, (rows, gv) in grads.items():
            w = params.tables[table][rows].astype(np.float64)
            total += config.lam * float(np.sum(w * w))
            gv += 2.0 * config.lam * w
    return loss, total, nonzero, grads


def _grad_norm(grads):
    return float(np.sqrt(sum(np.sum(g * g) for _, g in grads.values())))


def train(store: TripleStore, config: TrainConfig, filter_index=None, stats=None, observer=None,
          cache=None) -> TrainResult:
    """Train for ``config.epochs`` epochs, one negative per positive per step.

    ``observer(epoch, batch, negatives, losses)`` is called after every
    batch (diagnostics hook). Validation MRR on a capped subsample of
    ``store.valid`` is computed every ``eval_every`` epochs and the best
    parameters are kept.
    """
    filter_index = filter_index or build_filter_index(store)
    stats = stats or compute_relation_stats(store.train, store.num_relations)
    init_seed, order_rng, sampler_rng, valid_rng = _streams(config.seed)
    dtype = np.dtype(config.dtype)
    if config.pretrain_checkpoint:
        params, _ = load_checkpoint(config.pretrain_checkpoint, expect_kind=config.model, expect_dim=config.dim)
        if (params.num_entities, params.num_relations) != (store.num_entities, store.num_relations):
            raise TrainingError("pretrained checkpoint was built for a different entity/relation set")
        params = params.astype(dtype)
    else:
        params = init_params(config.model, store.num_entities, store.num_relations, config.dim,
                             seed=init_seed, dtype=dtype)
    sampler = make_sampler(config.sampler, store.num_entities, stats, cache)
    adam = Adam(params)

    valid = store.valid
    if len(valid) > config.valid_cap:
        valid = valid[np.sort(valid_rng.choice(len(valid), config.valid_cap, replace=False))]

    best_params, best_epoch, best_mrr = params.copy(), 0, -np.inf
    reports = []
    train_triples = store.train
    n = len(train_triples)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = order_rng.permutation(n)
        loss_sum = 0.0
        nonzero = 0
        norms = []
        changed = 0
        for lo in range(0, n, config.batch_size):
            batch = train_triples[order[lo:lo + config.batch_size]]
            neg = sampler.sample(params, batch, sampler_rng, epoch)
            losses, total, nz, grads = _batch_step(params, config, batch, neg)
            if not np.isfinite(total):
                raise TrainingError(
                    f"non-finite loss {total} at epoch {epoch}; lower the learning rate or check the config")
            changed += sampler.refresh(params, batch, sampler_rng, epoch)
            loss_sum += float(losses.sum())
            nonzero += nz
            norms.append(_grad_norm(grads))
            adam.step(params, grads, config.lr)
            params.normalize_constraints()
            if observer is not None:
                observer(epoch, batch, neg, losses)
        if not params.all_finite():
            raise TrainingError(f"parameters became non-finite at epoch {epoch}")
        report = EpochReport(
            epoch=epoch,
            mean_loss=loss_sum / max(n, 1),
            nonzero_loss_ratio=nonzero / max(n, 1),
            mean_grad_norm=float(np.mean(norms)) if norms else 0.0,
            changed_elements=changed,
        )
        if config.eval_every and epoch % config.eval_every == 0 and len(valid):
            report.valid_mrr = evaluate_link_prediction(params, valid, filter_index).mrr
            if report.valid_mrr > best_mrr:
                best_params, best_epoch, best_mrr = params.copy(), epoch, report.valid_mrr
        report.wall_time = time.perf_counter() - start
        log.debug("epoch %d loss %.4f nzl %.3f", epoch, report.mean_loss, report.nonzero_loss_ratio)
        reports.append(report)
    if best_epoch == 0:
        best_params = params.copy()
        best_epoch = config.epochs
    return TrainResult(params, reports, best_params, best_epoch,
                       None if best_mrr == -np.inf else float(best_mrr), sampler)


def train_to_directory(store, config: TrainConfig, out_dir, **kwargs) -> TrainResult:
    """Run :func:`train` and write reports, checkpoints and (for NSCaching) the cache."""
    from .sampling import save_cache

    os.makedirs(out_dir, exist_ok=True)
    result = train(store, config, **kwargs)
    meta = {"config_hash": config.config_hash(), "epoch": config.epochs}
    save_checkpoint(result.params, meta, os.path.join(out_dir, "final.ckpt"))
    save_checkpoint(result.best_params, {**meta, "epoch": result.best_epoch}, os.path.join(out_dir, "best.ckpt"))
    with open(os.path.join(out_dir, "epochs.jsonl"), "w", encoding="utf-8", newline="\n") as f:
        for rep in result.reports:
            f.write(rep.to_json() + "\n")
    if isinstance(result.sampler, CacheSampler):
        save_cache(result.sampler.cache, os.path.join(out_dir, "cache.bin"), {"config_hash": config.config_hash()})
    return result


def pretrain_then_continue(store, base_config: TrainConfig, continue_config: TrainConfig, work_dir, **kwargs):
    """Train under Bernoulli sampling, checkpoint, then warm-start ``continue_config``.

    The continuation starts with fresh Adam moments and an empty cache.
    Returns ``(base_result, continued_result)``.
    """
    if base_config.sampler.strategy != "bernoulli":
        raise ValueError("pretraining uses the bernoulli sampler")
    if (continue_config.model, continue_config.dim) != (base_config.model, base_config.dim):
        raise TrainingError("continuation must use the pretrained model kind and dim")
    os.makedirs(work_dir, exist_ok=True)
    base = train(store, base_config, **kwargs)
    path = os.path.join(work_dir, "pretrained.ckpt")
    save_checkpoint(base.params, {"config_hash": base_config.config_hash(), "epoch": base_config.epochs}, path)
    continued = train(store, replace(continue_config, pretrain_checkpoint=path), **kwargs)
    return base, continued
