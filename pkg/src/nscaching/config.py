"""``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key must appear in
:data:`SCHEMA`; values are converted to the schema type. The resolved
configuration (defaults filled in) is written back in schema order so a
run directory is self-describing.
"""

from __future__ import annotations

import os

from .params import check_kind
from .sampling import ConfigError, SamplerConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text):
    return text or None


# key: (type, default, description)
SCHEMA = {
    "dataset_dir": (str, "", "directory holding the split files"),
    "train_file": (str, "train.txt", "training split, head<TAB>relation<TAB>tail"),
    "valid_file": (str, "valid.txt", "validation split"),
    "test_file": (str, "test.txt", "test split"),
    "entity_dict": (_opt_str, None, "optional name<TAB>id entity dictionary inside dataset_dir"),
    "relation_dict": (_opt_str, None, "optional name<TAB>id relation dictionary inside dataset_dir"),
    "valid_neg_file": (_opt_str, None, "classification negatives for validation"),
    "test_neg_file": (_opt_str, None, "classification negatives for test"),
    "out_dir": (str, "runs/default", "output directory"),
    "seed": (int, 0, "run seed"),
    "model": (check_kind, "TransE", "TransE, TransH, TransD, DistMult or ComplEx"),
    "dim": (int, 50, "embedding dimension"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "gamma": (float, 2.0, "margin (translational models)"),
    "lambda": (float, 0.01, "L2 penalty on touched rows (semantic models)"),
    "batch_size": (int, 100, "positives per mini-batch"),
    "epochs": (int, 100, "training epochs"),
    "eval_every": (int, 10, "validation MRR interval in epochs; 0 disables"),
    "valid_cap": (int, 2000, "validation triples used for model selection"),
    "dtype": (str, "float32", "parameter storage precision"),
    "pretrain_checkpoint": (_opt_str, None, "warm-start checkpoint"),
    "sampler": (str, "bernoulli", "uniform, bernoulli or nscaching"),
    "n1": (int, 50, "cache entry size"),
    "n2": (int, 50, "random candidates per cache refresh"),
    "n_lazy": (int, 0, "epochs between refreshes of one entry, minus one"),
    "select_rule": (str, "uniform", "uniform, importance or top"),
    "update_rule": (str, "importance", "importance or top"),
    "side_choice": (str, "bernoulli", "head/tail corruption choice: bernoulli or uniform"),
    "eval_raw": (_bool, False, "unfiltered ranking"),
    "eval_split": (str, "test", "split ranked by the eval command"),
    "window_epochs": (int, 20, "diagnostic window length"),
    "diag_triple": (str, "", "positive triple (names, tab- or space-separated) for CCDF and cache dumps"),
    "diag_grid": (str, "-10:10:41", "CCDF grid as start:stop:count or comma list"),
    "diag_slot": (str, "tail", "replaced slot for the CCDF"),
}


class RunConfig(dict):
    """Validated configuration values keyed by schema name."""

    @classmethod
    def defaults(cls):
        return cls({k: default for k, (_, default, _) in SCHEMA.items()})

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls.defaults()
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ConfigError(f"{source}:{lineno}: expected key = value")
            if key == "schema_version":
                if int(value) != SCHEMA_VERSION:
                    raise ConfigError(f"{source}:{lineno}: unsupported schema_version {value}")
                continue
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            if key in seen:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
            seen.add(key)
            cfg.set(key, value, f"{source}:{lineno}")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.parse(f.read(), source=path)

    def set(self, key, value, where="override"):
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        conv = SCHEMA[key][0]
        try:
            self[key] = conv(value) if isinstance(value, str) else value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from None

    def validate(self):
        self.sampler_config()
        if self["dim"] <= 0 or self["batch_size"] <= 0 or self["epochs"] < 0:
            raise ConfigError("dim and batch_size must be positive and epochs non-negative")
        if self["diag_slot"] not in ("head", "tail"):
            raise ConfigError("diag_slot must be head or tail")
        if self["eval_split"] not in ("train", "valid", "test"):
            raise ConfigError("eval_split must be train, valid or test")
        return self

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(strategy=self["sampler"], n1=self["n1"], n2=self["n2"], n_lazy=self["n_lazy"],
                             select_rule=self["select_rule"], update_rule=self["update_rule"],
                             side_choice=self["side_choice"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(model=self["model"], dim=self["dim"], lr=self["lr"], gamma=self["gamma"],
                           lam=self["lambda"], batch_size=self["batch_size"], epochs=self["epochs"],
                           eval_every=self["eval_every"], seed=self["seed"], sampler=self.sampler_config(),
                           pretrain_checkpoint=self["pretrain_checkpoint"], valid_cap=self["valid_cap"],
                           dtype=self["dtype"])

    def dump(self):
        lines = [f"schema_version = {SCHEMA_VERSION}"]
        for key in SCHEMA:
            value = self[key]
            lines.append(f"{key} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def write_resolved(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "config.resolved"), "w", encoding="utf-8", newline="\n") as f:
            f.write(self.dump())
