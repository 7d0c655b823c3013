"""Shared numeric encoding of mixed-type rows (min-max numerics, one-hot categoricals)."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .dataset import CATEGORICAL, DataError


class Encoder:
    """Encoder fitted on a reference table's numeric ranges.

    Category levels come from the schema, so every table sharing the schema
    maps to the same feature space.
    """

    def __init__(self, reference, exclude=()):
        self.schema = reference.schema
        self.exclude = tuple(exclude)
        self.columns = [c for c in reference.schema.columns if c.name not in self.exclude]
        self.lo, self.span = {}, {}
        for c in self.columns:
            if c.kind != CATEGORICAL:
                v = reference.numeric_array(c.name)
                lo, hi = float(v.min()), float(v.max())
                self.lo[c.name] = lo
                self.span[c.name] = hi - lo if hi > lo else 1.0

    @property
    def n_features(self):
        return sum(len(c.categories) if c.kind == CATEGORICAL else 1 for c in self.columns)

    def transform_rows(self, rows):
        idx = [self.schema.index(c.name) for c in self.columns]
        out = np.zeros((len(rows), self.n_features))
        off = 0
        for c, j in zip(self.columns, idx):
            if c.kind == CATEGORICAL:
                pos = {lv: k for k, lv in enumerate(c.categories)}
                for i, r in enumerate(rows):
                    out[i, off + pos[r[j]]] = 1.0
                off += len(c.categories)
            else:
                col = np.array([r[j] for r in rows], dtype=np.float64)
                out[:, off] = (col - self.lo[c.name]) / self.span[c.name]
                off += 1
        return out

    def transform(self, table):
        if table.schema != self.schema:
            raise DataError("schema mismatch")
        return self.transform_rows(table.rows)


def nearest_distances(queries, reference, k=1):
    """Euclidean distance from each query to its ``k``-th nearest reference point."""
    tree = cKDTree(reference)
    d, _ = tree.query(queries, k=[k])
    return d[:, 0]
