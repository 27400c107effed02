"""Embedding tables, Xavier initialization and the checkpoint file format.

Checkpoint layout::

    NSCACHING-CHECKPOINT 1
    kind: TransD
    num_entities: 40943
    num_relations: 18
    dim: 50
    dtype: float32
    epoch: 120
    config_hash: 3f2a...
    tables: entity,relation,entity_proj,relation_proj
    END
    <payload>

The payload is each table in the ``tables`` order, flattened row-major as
little-endian reals of the stated ``dtype``. Extra header keys are kept as
string metadata.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TRANSLATIONAL = ("TransE", "TransH", "TransD")
SEMANTIC = ("DistMult", "ComplEx")
MODEL_KINDS = TRANSLATIONAL + SEMANTIC

# (table name, sized by entities?) in checkpoint order.
_TABLES = {
    "TransE": (("entity", True), ("relation", False)),
    "TransH": (("entity", True), ("relation", False), ("relation_norm", False)),
    "TransD": (("entity", True), ("relation", False), ("entity_proj", True), ("relation_proj", False)),
    "DistMult": (("entity", True), ("relation", False)),
    "ComplEx": (("entity", True), ("relation", False), ("entity_im", True), ("relation_im", False)),
}

_MAGIC = "NSCACHING-CHECKPOINT 1"
_REQUIRED = ("kind", "num_entities", "num_relations", "dim", "dtype", "tables")


class CheckpointError(ValueError):
    pass


def check_kind(kind):
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {', '.join(MODEL_KINDS)}")
    return kind


def is_translational(kind):
    return check_kind(kind) in TRANSLATIONAL


def table_layout(kind):
    return _TABLES[check_kind(kind)]


@dataclass
class ModelParams:
    kind: str
    num_entities: int
    num_relations: int
    dim: int
    tables: dict = field(repr=False)

    def __getitem__(self, name):
        return self.tables[name]

    def __contains__(self, name):
        return name in self.tables

    @property
    def dtype(self):
        return self.tables["entity"].dtype

    def table_names(self):
        return [name for name, _ in table_layout(self.kind)]

    def copy(self):
        return ModelParams(self.kind, self.num_entities, self.num_relations, self.dim,
                           {k: v.copy() for k, v in self.tables.items()})

    def astype(self, dtype):
        return ModelParams(self.kind, self.num_entities, self.num_relations, self.dim,
                           {k: v.astype(dtype) for k, v in self.tables.items()})

    def equals(self, other):
        return (
            self.kind == other.kind
            and self.dim == other.dim
            and self.tables.keys() == other.tables.keys()
            and all(np.array_equal(v, other.tables[k]) and v.dtype == other.tables[k].dtype
                    for k, v in self.tables.items())
        )

    def all_finite(self):
        return all(np.isfinite(v).all() for v in self.tables.values())

    def normalize_constraints(self):
        """Project TransH hyperplane normals back to unit length."""
        if "relation_norm" in self.tables:
            w = self.tables["relation_norm"]
            w /= np.maximum(np.linalg.norm(w, axis=1, keepdims=True), 1e-12)


def xavier_bound(rows, dim):
    return math.sqrt(6.0 / (rows + dim))


def init_params(kind, num_entities, num_relations, dim, seed=0, dtype=np.float32) -> ModelParams:
    """Fill every table i.i.d. uniform on the Xavier interval, fan_in = rows, fan_out = dim."""
    check_kind(kind)
    if num_entities <= 0 or num_relations <= 0:
        raise ValueError("need at least one entity and one relation")
    if dim <= 0:
        raise ValueError("dim must be positive")
    rng = np.random.default_rng(seed)
    tables = {}
    for name, by_entity in table_layout(kind):
        rows = num_entities if by_entity else num_relations
        bound = xavier_bound(rows, dim)
        tables[name] = rng.uniform(-bound, bound, size=(rows, dim)).astype(dtype)
    params = ModelParams(kind, num_entities, num_relations, dim, tables)
    params.normalize_constraints()
    return params


def _header_lines(params, meta):
    header = {
        "kind": params.kind,
        "num_entities": params.num_entities,
        "num_relations": params.num_relations,
        "dim": params.dim,
        "dtype": np.dtype(params.dtype).name,
        "tables": ",".join(params.table_names()),
    }
    for k, v in (meta or {}).items():
        if k in header:
            continue
        if "\n" in str(v) or ":" in str(k):
            raise CheckpointError(f"metadata {k!r} cannot be written to a text header")
        header[k] = v
    return [_MAGIC] + [f"{k}: {v}" for k, v in header.items()] + ["END"]


def save_checkpoint(params: ModelParams, meta, path):
    dtype = np.dtype(params.dtype).newbyteorder("<")
    with open(path, "wb") as f:
        f.write(("\n".join(_header_lines(params, meta)) + "\n").encode("utf-8"))
        for name in params.table_names():
            f.write(np.ascontiguousarray(params[name], dtype=dtype).tobytes())


def _read_header(f, path):
    first = f.readline().decode("utf-8", "replace").rstrip("\n")
    if first != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic line)")
    header = {}
    while True:
        line = f.readline()
        if not line:
            raise CheckpointError(f"{path}: header not terminated")
        line = line.decode("utf-8").rstrip("\n")
        if line == "END":
            break
        key, sep, value = line.partition(": ")
        if not sep:
            raise CheckpointError(f"{path}: corrupt header line {line!r}")
        header[key] = value
    missing = [k for k in _REQUIRED if k not in header]
    if missing:
        raise CheckpointError(f"{path}: header lacks {', '.join(missing)}")
    return header


def load_checkpoint(path, expect_kind=None, expect_dim=None):
    """Return ``(params, meta)``; ``meta`` holds the header as strings.

    ``expect_kind``/``expect_dim`` reject checkpoints built for a different run.
    """
    with open(path, "rb") as f:
        header = _read_header(f, path)
        kind = header["kind"]
        try:
            check_kind(kind)
            n_ent, n_rel, dim = (int(header[k]) for k in ("num_entities", "num_relations", "dim"))
            dtype = np.dtype(header["dtype"]).newbyteorder("<")
        except (ValueError, TypeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from None
        if expect_kind is not None and kind != expect_kind:
            raise CheckpointError(f"{path}: model kind {kind} does not match configured {expect_kind}")
        if expect_dim is not None and dim != int(expect_dim):
            raise CheckpointError(f"{path}: dim {dim} does not match configured {expect_dim}")
        names = header["tables"].split(",")
        if names != [n for n, _ in table_layout(kind)]:
            raise CheckpointError(f"{path}: table list {names} does not match model kind {kind}")
        tables = {}
        for name, by_entity in table_layout(kind):
            rows = n_ent if by_entity else n_rel
            nbytes = rows * dim * dtype.itemsize
            buf = f.read(nbytes)
            if len(buf) != nbytes:
                raise CheckpointError(f"{path}: payload truncated in table {name!r}")
            tables[name] = np.frombuffer(buf, dtype=dtype).reshape(rows, dim).astype(dtype.newbyteorder("="))
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after payload")
    meta = {k: v for k, v in header.items() if k not in _REQUIRED}
    return ModelParams(kind, n_ent, n_rel, dim, tables), meta
