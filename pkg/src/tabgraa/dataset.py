"""Mixed-type tables: CSV I/O, splitting, vocabulary and row serialization."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

NUMERIC = "numeric"
CATEGORICAL = "categorical"

BOS, EOS, SEP = "<bos>", "<eos>", "<sep>"
CONNECTOR = "is"
DIGIT_TOKENS = tuple("0123456789") + (".", "-")
SIG_DIGITS = 6
DEFAULT_CONTEXT_LIMIT = 96

_NUMBER_RE = re.compile(r"^-?\d+(\.\d+)?$")


class DataError(ValueError):
    """Malformed or inconsistent tabular input."""


class RowRejected(ValueError):
    """A generated token sequence does not decode to a valid row.

    ``reason`` is one of ``REJECT_REASONS``.
    """

    def __init__(self, reason, detail=""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


REJECT_REASONS = ("missing column", "duplicate column", "malformed number",
                  "unknown category", "bad template")


@dataclass(frozen=True)
class Column:
    name: str
    kind: str
    categories: Optional[tuple] = None

    def __post_init__(self):
        if not self.name:
            raise DataError("column names must be non-empty")
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise DataError(f"unknown column kind {self.kind!r}")
        if self.kind == CATEGORICAL:
            if not self.categories:
                raise DataError(f"categorical column {self.name!r} needs categories")
            if len(set(self.categories)) != len(self.categories):
                raise DataError(f"duplicate categories in {self.name!r}")
        elif self.categories is not None:
            raise DataError(f"numeric column {self.name!r} cannot list categories")


@dataclass(frozen=True)
class Schema:
    columns: tuple

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError("column names must be unique")
        for n in names:
            if n in (BOS, EOS, SEP):
                raise DataError(f"column name {n!r} collides with a special token")

    @property
    def names(self):
        return [c.name for c in self.columns]

    def index(self, name):
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)

    def __getitem__(self, name):
        return self.columns[self.index(name)]

    def to_dict(self):
        return [{"name": c.name, "kind": c.kind,
                 "categories": list(c.categories) if c.categories else None}
                for c in self.columns]

    @classmethod
    def from_dict(cls, cols):
        return cls(tuple(Column(c["name"], c["kind"],
                                tuple(c["categories"]) if c.get("categories") else None)
                         for c in cols))


@dataclass(frozen=True)
class Table:
    schema: Schema
    rows: tuple
    row_ids: tuple

    def __post_init__(self):
        if len(self.rows) != len(self.row_ids):
            raise DataError("rows and row_ids differ in length")
        if len(set(self.row_ids)) != len(self.row_ids):
            raise DataError("row_ids must be unique")
        for r in self.rows:
            validate_row(r, self.schema)

    @classmethod
    def from_rows(cls, schema, rows, row_ids=None):
        rows = tuple(tuple(r) for r in rows)
        if row_ids is None:
            row_ids = range(len(rows))
        return cls(schema, rows, tuple(int(i) for i in row_ids))

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        j = self.schema.index(name)
        return [r[j] for r in self.rows]

    def numeric_array(self, name):
        return np.array(self.column(name), dtype=np.float64)

    def subset(self, positions):
        return Table(self.schema, tuple(self.rows[i] for i in positions),
                     tuple(self.row_ids[i] for i in positions))

    def with_row_ids(self, row_ids):
        return Table(self.schema, self.rows, tuple(int(i) for i in row_ids))

    def to_csv(self, path):
        Path(path).write_text(to_csv_text(self), encoding="utf-8")


def validate_row(row, schema):
    if len(row) != len(schema.columns):
        raise DataError(f"row has {len(row)} values, schema has {len(schema.columns)} columns")
    for v, c in zip(row, schema.columns):
        if c.kind == NUMERIC:
            if isinstance(v, str) or not math.isfinite(v):
                raise DataError(f"non-finite or non-numeric value {v!r} in {c.name!r}")
        elif v not in c.categories:
            raise DataError(f"value {v!r} not in categories of {c.name!r}")


# --------------------------------------------------------------------------- csv

def format_number(v):
    """Render with at most 6 significant digits, positional notation."""
    v = float(v)
    if v == 0:
        return "0"
    s = np.format_float_positional(v, precision=SIG_DIGITS, unique=False,
                                   fractional=False, trim="-")
    return "0" if s in ("-0", "") else s


def _render(v, col):
    return format_number(v) if col.kind == NUMERIC else v


def to_csv_text(table):
    lines = [",".join(table.schema.names)]
    for r in table.rows:
        lines.append(",".join(_render(v, c) for v, c in zip(r, table.schema.columns)))
    return "\n".join(lines) + "\n"


def _is_number(s):
    try:
        return math.isfinite(float(s))
    except ValueError:
        return False


def load_csv(path, schema_hint: Optional[Schema] = None) -> Table:
    """Read a header-first, unquoted, comma-separated UTF-8 file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    lines = [ln.rstrip("\r") for ln in path.read_text(encoding="utf-8").split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2:
        raise DataError("empty table")
    header = lines[0].split(",")
    if '"' in lines[0]:
        raise DataError("quoted fields are not supported (line 1)")
    raw = []
    for k, ln in enumerate(lines[1:], start=2):
        if '"' in ln:
            raise DataError(f"quoted fields are not supported (line {k})")
        parts = ln.split(",")
        if len(parts) != len(header):
            raise DataError(f"ragged row at line {k}")
        raw.append(parts)

    if schema_hint is not None:
        if schema_hint.names != header:
            raise DataError(f"header {header} does not match schema {schema_hint.names}")
        schema = schema_hint
    else:
        cols = []
        for j, name in enumerate(header):
            vals = [r[j] for r in raw]
            if all(_is_number(v) for v in vals):
                cols.append(Column(name, NUMERIC))
            else:
                cols.append(Column(name, CATEGORICAL, tuple(dict.fromkeys(vals))))
        schema = Schema(tuple(cols))

    rows = []
    for k, r in enumerate(raw, start=2):
        row = []
        for v, c in zip(r, schema.columns):
            if c.kind == NUMERIC:
                if not _is_number(v):
                    raise DataError(f"non-numeric value {v!r} for {c.name!r} at line {k}")
                row.append(float(v))
            else:
                if v not in c.categories:
                    raise DataError(f"value {v!r} outside categories of {c.name!r} at line {k}")
                row.append(v)
        rows.append(tuple(row))
    return Table.from_rows(schema, rows)


# ------------------------------------------------------------------------- split

def split(table, ratios=(0.8, 0.1, 0.1), seed=0):
    """Shuffle and partition into (train, val, test).

    Val and test sizes are ``floor(n * ratio)``; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError("ratios must be three positive fractions")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError("ratios must sum to 1")
    n = len(table)
    n_val = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) == 0:
        raise DataError(f"split of {n} rows by {ratios} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    return (table.subset(perm[:n_train]),
            table.subset(perm[n_train:n_train + n_val]),
            table.subset(perm[n_train + n_val:]))


# -------------------------------------------------------------------- vocabulary

@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    numeric_mode: str = "digit"
    bin_edges: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self._index[token]

    def __contains__(self, token):
        return token in self._index

    @property
    def bos(self):
        return self._index[BOS]

    @property
    def eos(self):
        return self._index[EOS]

    @property
    def sep(self):
        return self._index[SEP]

    def decode(self, ids):
        return [self.tokens[i] for i in ids]

    def to_dict(self):
        return {"tokens": list(self.tokens), "numeric_mode": self.numeric_mode,
                "bin_edges": {k: list(v) for k, v in self.bin_edges.items()}}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["tokens"]), d["numeric_mode"],
                   {k: tuple(v) for k, v in d["bin_edges"].items()})


def bin_token(column, k):
    return f"<{column}:bin{k}>"


def parse_numeric_mode(mode):
    """``"digit"`` -> ("digit", 0); ``"bin(4)"`` / ``"bin:4"`` -> ("bin", 4)."""
    if mode == "digit":
        return "digit", 0
    m = re.fullmatch(r"bin[(:](\d+)\)?", mode)
    if not m or int(m.group(1)) < 1:
        raise DataError(f"unknown numeric mode {mode!r}")
    return "bin", int(m.group(1))


def build_vocab(table, numeric_mode="digit"):
    if len(table) == 0:
        raise DataError("cannot build a vocabulary from an empty table")
    kind, k = parse_numeric_mode(numeric_mode)
    toks = [BOS, EOS, SEP, CONNECTOR]
    toks += table.schema.names
    for c in table.schema.columns:
        if c.kind == CATEGORICAL:
            toks += list(c.categories)
    edges = {}
    if kind == "digit":
        toks += list(DIGIT_TOKENS)
    else:
        for c in table.schema.columns:
            if c.kind == NUMERIC:
                vals = table.numeric_array(c.name)
                edges[c.name] = tuple(float(e) for e in np.quantile(vals, np.linspace(0, 1, k + 1)))
                toks += [bin_token(c.name, b) for b in range(k)]
    return Vocabulary(tuple(dict.fromkeys(toks)), numeric_mode, edges)


def _bin_of(v, edges):
    k = len(edges) - 1
    b = int(np.searchsorted(edges, v, side="right")) - 1
    return min(max(b, 0), k - 1)


def bin_midpoint(edges, b):
    return (edges[b] + edges[b + 1]) / 2.0


# ------------------------------------------------------------------ serialization

def serialize_row(row, schema, vocab, permute_seed=None, context_limit=DEFAULT_CONTEXT_LIMIT):
    """Encode one row as ``BOS name is value SEP ... EOS`` token ids.

    ``permute_seed`` shuffles column order (deterministically per seed).
    """
    validate_row(row, schema)
    order = list(range(len(schema.columns)))
    if permute_seed is not None:
        order = [int(i) for i in np.random.default_rng(permute_seed).permutation(len(order))]
    ids = [vocab.bos]
    for n, j in enumerate(order):
        c = schema.columns[j]
        if n:
            ids.append(vocab.sep)
        ids += [vocab.id(c.name), vocab.id(CONNECTOR)]
        v = row[j]
        if c.kind == CATEGORICAL:
            ids.append(vocab.id(v))
        elif vocab.numeric_mode == "digit":
            ids += [vocab.id(ch) for ch in format_number(v)]
        else:
            ids.append(vocab.id(bin_token(c.name, _bin_of(v, vocab.bin_edges[c.name]))))
    ids.append(vocab.eos)
    if len(ids) > context_limit:
        raise DataError(f"serialized row has {len(ids)} tokens, context limit is {context_limit}")
    return tuple(ids)


def serialize_table(table, vocab, permute_seed=None, context_limit=DEFAULT_CONTEXT_LIMIT):
    return [serialize_row(r, table.schema, vocab, permute_seed, context_limit) for r in table.rows]


def parse_generated(seq: Sequence[int], schema, vocab):
    """Decode token ids back into a row; raises :class:`RowRejected`."""
    seq = list(seq)
    if len(seq) < 3 or seq[0] != vocab.bos or seq[-1] != vocab.eos:
        raise RowRejected("bad template", "sequence must start with BOS and end with EOS")
    body = seq[1:-1]
    if vocab.bos in body or vocab.eos in body:
        raise RowRejected("bad template", "stray BOS/EOS")
    segments, cur = [], []
    for t in body:
        if t == vocab.sep:
            segments.append(cur)
            cur = []
        else:
            cur.append(t)
    segments.append(cur)

    values = {}
    for seg in segments:
        toks = vocab.decode(seg)
        if len(toks) < 3 or toks[1] != CONNECTOR:
            raise RowRejected("bad template", f"segment {toks}")
        name = toks[0]
        try:
            col = schema[name]
        except KeyError:
            raise RowRejected("bad template", f"unknown column {name!r}") from None
        if name in values:
            raise RowRejected("duplicate column", name)
        vt = toks[2:]
        if col.kind == CATEGORICAL:
            if len(vt) != 1 or vt[0] not in col.categories:
                raise RowRejected("unknown category", f"{name}={' '.join(vt)}")
            values[name] = vt[0]
        elif vocab.numeric_mode == "digit":
            s = "".join(vt)
            if not all(t in DIGIT_TOKENS for t in vt) or not _NUMBER_RE.match(s):
                raise RowRejected("malformed number", f"{name}={' '.join(vt)}")
            x = float(s)
            if not math.isfinite(x):
                raise RowRejected("malformed number", f"{name}={s}")
            values[name] = x + 0.0
        else:
            edges = vocab.bin_edges[name]
            names = [bin_token(name, b) for b in range(len(edges) - 1)]
            if len(vt) != 1 or vt[0] not in names:
                raise RowRejected("malformed number", f"{name}={' '.join(vt)}")
            values[name] = bin_midpoint(edges, names.index(vt[0]))
    for c in schema.columns:
        if c.name not in values:
            raise RowRejected("missing column", c.name)
    return tuple(values[c.name] for c in schema.columns)


# ----------------------------------------------------------------------- toy data

@dataclass(frozen=True)
class ToySpec:
    n_rows: int = 1000
    n_numeric: int = 2
    n_categorical: int = 1
    cluster_count: int = 3
    n_levels: int = 3
    decimals: int = 0


def make_toy(spec: ToySpec, seed=0) -> Table:
    """Seeded mixture-of-clusters table with a binary ``label`` column.

    Numeric columns are Gaussian per cluster (rounded to ``decimals``);
    categorical columns follow per-cluster level probabilities; the label
    depends on the cluster and on the first numeric column.
    """
    if min(spec.n_rows, spec.n_numeric, spec.n_categorical, spec.cluster_count) < 1:
        raise DataError("toy spec counts must be positive")
    rng = np.random.default_rng(seed)
    k = spec.cluster_count
    weights = rng.dirichlet(np.full(k, 4.0))
    means = rng.uniform(10, 90, size=(k, spec.n_numeric))
    scales = rng.uniform(3, 8, size=(k, spec.n_numeric))
    level_p = rng.dirichlet(np.full(spec.n_levels, 0.8), size=(k, spec.n_categorical))
    label_bias = rng.normal(0, 1.5, size=k)

    z = rng.choice(k, size=spec.n_rows, p=weights)
    num = means[z] + scales[z] * rng.standard_normal((spec.n_rows, spec.n_numeric))
    num = np.round(num, spec.decimals) + 0.0
    levels = [f"v{i}" for i in range(spec.n_levels)]
    cats = np.empty((spec.n_rows, spec.n_categorical), dtype=object)
    for j in range(spec.n_categorical):
        u = rng.random(spec.n_rows)
        cum = np.cumsum(level_p[z, j], axis=1)
        cats[:, j] = [levels[min(int(np.searchsorted(c, x, side="right")), spec.n_levels - 1)]
                      for c, x in zip(cum, u)]
    logit = label_bias[z] + (num[:, 0] - means[z, 0]) / scales[z, 0]
    label = np.where(rng.random(spec.n_rows) < 1 / (1 + np.exp(-logit)), "yes", "no")

    cols = [Column(f"x{j}", NUMERIC) for j in range(spec.n_numeric)]
    cols += [Column(f"c{j}", CATEGORICAL, tuple(levels)) for j in range(spec.n_categorical)]
    cols.append(Column("label", CATEGORICAL, ("no", "yes")))
    rows = [tuple(float(v) for v in num[i]) + tuple(cats[i]) + (str(label[i]),)
            for i in range(spec.n_rows)]
    return Table.from_rows(Schema(tuple(cols)), rows)
