"""Command-line entry point.

Subcommands ``preprocess``, ``train``, ``eval``, ``classify``, ``diag`` and
``ablate`` all read a ``key = value`` config (see :mod:`nscaching.config`)
and write line-delimited JSON records into the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import diagnostics
from .config import RunConfig
from .evaluation import classify, evaluate_link_prediction, fit_thresholds, generate_negatives
from .experiments import run_ablation
from .kgdata import (TripleStore, build_filter_index, compute_relation_stats, load_dictionary,
                     load_relation_stats, load_split, save_dictionary, save_relation_stats, save_triples)
from .params import load_checkpoint
from .sampling import HEAD, TAIL, ConfigError, load_cache
from .training import train_to_directory

log = logging.getLogger("nscaching")

ARTIFACTS = ("entities.dict", "relations.dict", "relation_stats.tsv", "known_triples.tsv")


def _write_records(path, records, mode="w"):
    with open(path, mode, encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def _raw_store(cfg):
    return TripleStore.from_directory(cfg["dataset_dir"], cfg["train_file"], cfg["valid_file"], cfg["test_file"],
                                      entity_dict=cfg["entity_dict"], relation_dict=cfg["relation_dict"])


def _store(cfg):
    """Load splits with the dictionaries written by ``preprocess``."""
    out = cfg["out_dir"]
    missing = [a for a in ARTIFACTS if not os.path.isfile(os.path.join(out, a))]
    if missing:
        raise FileNotFoundError(f"{out}: missing {', '.join(missing)}; run `nscaching preprocess` first")
    ents = load_dictionary(os.path.join(out, "entities.dict"))
    rels = load_dictionary(os.path.join(out, "relations.dict"))
    store = TripleStore.from_directory(cfg["dataset_dir"], cfg["train_file"], cfg["valid_file"], cfg["test_file"],
                                       entities=ents, relations=rels)
    stats = load_relation_stats(os.path.join(out, "relation_stats.tsv"))
    return store, stats


def cmd_preprocess(cfg, args):
    store = _raw_store(cfg)
    out = cfg["out_dir"]
    os.makedirs(out, exist_ok=True)
    save_dictionary(store.entities, os.path.join(out, "entities.dict"))
    save_dictionary(store.relations, os.path.join(out, "relations.dict"))
    save_relation_stats(compute_relation_stats(store.train, store.num_relations), os.path.join(out, "relation_stats.tsv"))
    known = np.array(sorted(build_filter_index(store).all_true), dtype=np.int64).reshape(-1, 3)
    save_triples(known, os.path.join(out, "known_triples.tsv"))
    cfg.write_resolved(out)
    log.info("preprocessed %d/%d/%d triples, %d entities, %d relations", len(store.train), len(store.valid),
             len(store.test), store.num_entities, store.num_relations)
    return 0


def cmd_train(cfg, args):
    store, stats = _store(cfg)
    out = cfg["out_dir"]
    cfg.write_resolved(out)
    tc = cfg.train_config()
    if tc.pretrain_checkpoint:
        log.info("warm-starting from %s", tc.pretrain_checkpoint)
    result = train_to_directory(store, tc, out, stats=stats)
    last = result.reports[-1].to_json() if result.reports else "{}"
    log.info("trained %d epochs; best epoch %s; last report %s", tc.epochs, result.best_epoch, last)
    return 0


def _checkpoint(cfg, args, store):
    path = args.checkpoint or os.path.join(cfg["out_dir"], "best.ckpt")
    params, _ = load_checkpoint(path, expect_kind=cfg["model"], expect_dim=cfg["dim"])
    if (params.num_entities, params.num_relations) != (store.num_entities, store.num_relations):
        raise ConfigError(f"{path}: checkpoint entity/relation counts do not match the dataset")
    return params


def cmd_eval(cfg, args):
    store, _ = _store(cfg)
    params = _checkpoint(cfg, args, store)
    metrics = evaluate_link_prediction(params, getattr(store, cfg["eval_split"]), build_filter_index(store),
                                       raw=cfg["eval_raw"], threads=args.threads)
    record = {"record": "link_prediction", "split": cfg["eval_split"], **metrics.to_dict()}
    _write_records(os.path.join(cfg["out_dir"], "metrics.jsonl"), [record], mode="a")
    print(json.dumps(record))
    return 0


def _negatives(cfg, store, key, split, filter_index, stats, rng):
    name = cfg[key]
    if name:
        return load_split(os.path.join(cfg["dataset_dir"], name), store.entities, store.relations, frozen=True)
    log.warning("no %s configured; generating Bernoulli-corrupted negatives filtered against known triples", key)
    return generate_negatives(split, filter_index, stats, store.num_entities, rng)


def cmd_classify(cfg, args):
    store, stats = _store(cfg)
    params = _checkpoint(cfg, args, store)
    fi = build_filter_index(store)
    rng = np.random.default_rng([cfg["seed"], 7])
    valid_neg = _negatives(cfg, store, "valid_neg_file", store.valid, fi, stats, rng)
    test_neg = _negatives(cfg, store, "test_neg_file", store.test, fi, stats, rng)
    report = classify(params, fit_thresholds(params, store.valid, valid_neg), store.test, test_neg)
    record = {"record": "classification", **report.to_dict()}
    _write_records(os.path.join(cfg["out_dir"], "classification.jsonl"), [record])
    print(json.dumps({k: v for k, v in record.items() if k != "thresholds"}))
    return 0


def _parse_grid(text):
    if ":" in text:
        start, stop, count = text.split(":")
        return np.linspace(float(start), float(stop), int(count))
    return np.array(sorted(float(x) for x in text.split(",")))


def _parse_triple(cfg, store):
    fields = cfg["diag_triple"].split("\t") if "\t" in cfg["diag_triple"] else cfg["diag_triple"].split()
    if len(fields) != 3:
        raise ConfigError("diag_triple must name head, relation and tail")
    h, r, t = fields
    try:
        return store.entities.id(h), store.relations.id(r), store.entities.id(t)
    except KeyError as exc:
        raise ConfigError(f"diag_triple: unknown name {exc}") from None


def cmd_diag(cfg, args):
    store, _ = _store(cfg)
    params = _checkpoint(cfg, args, store)
    triple = _parse_triple(cfg, store)
    records = [{"record": "definitions", **diagnostics.DEFINITIONS}]
    for x, frac in diagnostics.ccdf_negative_scores(params, triple, _parse_grid(cfg["diag_grid"]), cfg["diag_slot"]):
        records.append({"record": "ccdf", "triple": cfg["diag_triple"], "slot": cfg["diag_slot"], "x": x, "ccdf": frac})
    cache_path = os.path.join(cfg["out_dir"], "cache.bin")
    if os.path.isfile(cache_path):
        cache = load_cache(cache_path)
        h, r, t = triple
        names = store.entities.names
        for side, key in ((HEAD, (r, t)), (TAIL, (h, r))):
            if (side, key) in cache:
                records.append({"record": "cache", "side": side, "key": list(key),
                                "entities": diagnostics.dump_cache(cache, side, key, names)})
    _write_records(os.path.join(cfg["out_dir"], "diag.jsonl"), records)
    for rec in records:
        print(json.dumps(rec))
    return 0


def cmd_ablate(cfg, args):
    store, stats = _store(cfg)
    results = run_ablation(store, cfg.train_config(), build_filter_index(store), stats)
    rows = [{"record": "ablation", **r.row(), "batch_order": r.batch_order_digest[:16]} for r in results]
    _write_records(os.path.join(cfg["out_dir"], "ablation.jsonl"), rows)
    print(f"{'variant':46s} {'test_mrr':>8s} {'nzl':>6s} {'rr':>6s} {'ce':>9s}")
    for row in rows:
        print(f"{row['variant']:46s} {row['test_mrr']:8.4f} {row['nzl']:6.3f} {row['rr']:6.3f} {row['ce']:9d}")
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "diag": cmd_diag,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="nscaching", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker cap for evaluation")
        p.add_argument("--out", help="override the config out_dir")
        p.add_argument("--checkpoint", help="checkpoint for eval/classify/diag (default: out_dir/best.ckpt)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.out:
            cfg["out_dir"] = args.out
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
