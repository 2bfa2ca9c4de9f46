"""Cramér's V association between categorical stroke features."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .ingest import CATEGORICAL_FEATURES, DEFAULT_SCHEMA, Rally

# CLI-facing names follow the CSV column names.
FEATURE_ALIASES = {DEFAULT_SCHEMA[f]: f for f in CATEGORICAL_FEATURES}
FEATURE_ALIASES.update({f: f for f in CATEGORICAL_FEATURES})
DEFAULT_FEATURES = tuple(DEFAULT_SCHEMA[f] for f in CATEGORICAL_FEATURES)


class ContingencyError(ValueError):
    pass


@dataclass(frozen=True)
class ContingencyTable:
    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] < 2 or c.shape[1] < 2:
            raise ContingencyError(f"contingency table must be at least 2x2, got shape {c.shape}")
        if np.any(c < 0):
            raise ContingencyError("contingency counts must be non-negative")

    @property
    def n(self) -> float:
        return float(np.asarray(self.counts).sum())

    @property
    def shape(self) -> tuple[int, int]:
        return np.asarray(self.counts).shape

    @classmethod
    def from_observations(cls, a: Sequence, b: Sequence) -> "ContingencyTable":
        """Cross-tabulate paired observations; only observed levels get a row/column."""
        if len(a) != len(b):
            raise ContingencyError(f"observation lengths differ: {len(a)} vs {len(b)}")
        rows, ri = np.unique(np.asarray(a, dtype=object).astype(str), return_inverse=True)
        cols, ci = np.unique(np.asarray(b, dtype=object).astype(str), return_inverse=True)
        counts = np.zeros((len(rows), len(cols)), dtype=np.int64)
        np.add.at(counts, (ri, ci), 1)
        return cls(counts)


def chi_square(table: ContingencyTable) -> float:
    """Pearson's chi-square against the independence expectation (no continuity correction)."""
    obs = np.asarray(table.counts, dtype=np.float64)
    n = obs.sum()
    if n <= 0:
        raise ContingencyError("contingency table is empty")
    expected = np.outer(obs.sum(axis=1), obs.sum(axis=0)) / n
    if np.any(expected == 0):
        raise ContingencyError("a row or column has zero total; drop unobserved levels before building the table")
    return float(((obs - expected) ** 2 / expected).sum())


def cramers_v(table: ContingencyTable) -> float:
    r, c = table.shape
    v = np.sqrt((chi_square(table) / table.n) / min(r - 1, c - 1))
    return float(min(v, 1.0))


@dataclass(frozen=True)
class AssociationMatrix:
    features: tuple[str, ...]
    values: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", *self.features])
        for name, row in zip(self.features, self.values):
            w.writerow([name, *(format(float(v), ".12g") for v in row)])
        return buf.getvalue()

    def render(self) -> str:
        width = max(8, *(len(f) for f in self.features)) + 2
        lines = ["".ljust(width) + "".join(f.rjust(width) for f in self.features)]
        for name, row in zip(self.features, self.values):
            lines.append(name.ljust(width) + "".join(f"{v:.3f}".rjust(width) for v in row))
        return "\n".join(lines)


def resolve_feature(name: str) -> str:
    if name not in FEATURE_ALIASES:
        raise KeyError(f"unknown feature '{name}'; valid names: {', '.join(DEFAULT_FEATURES)}")
    return FEATURE_ALIASES[name]


def association_matrix(rallies: Sequence[Rally], features: Sequence[str] = DEFAULT_FEATURES) -> AssociationMatrix:
    """Pairwise Cramér's V over stroke-level observations.

    Features with fewer than two observed levels are dropped with a warning.
    """
    columns = {}
    for name in features:
        attr = resolve_feature(name)
        values = [getattr(s, attr) for r in rallies for s in r.strokes]
        if len(set(values)) < 2:
            warnings.warn(f"feature '{name}' has a single observed level and is excluded", stacklevel=2)
            continue
        columns[name] = values
    names = tuple(columns)
    k = len(names)
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            v = cramers_v(ContingencyTable.from_observations(columns[names[i]], columns[names[j]]))
            out[i, j] = out[j, i] = v
    return AssociationMatrix(names, out)
