"""Dataset ingestion, preprocessing, splitting, and bag construction.

Instance labels are carried by the dataset for simulation and evaluation but
are only reachable through :meth:`TabularDataset.read_labels`, which counts
accesses; training code paths never call it, and tests assert that.

Feature storage convention: one float64 matrix where numeric cells hold raw
(later standardized) values and categorical cells hold dense level indices.
Missing cells are flagged in a parallel boolean matrix; after preprocessing a
missing categorical cell holds the column's reserved index (== cardinality)
and a missing numeric cell holds 0 (the encoder adds a learned
missing-indicator vector for those).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

MISSING_TOKENS = {"", "?"}


@dataclass
class ColumnSchema:
    name: str
    kind: str  # "categorical" | "numeric"
    cardinality: int = 0  # categorical: observed level count
    mean: float = 0.0  # numeric: fit on the training split
    std: float = 1.0
    levels: dict = field(default_factory=dict)  # categorical: level -> index

    def __post_init__(self):
        if self.kind not in ("categorical", "numeric"):
            raise ValueError(f"column {self.name}: unknown kind {self.kind!r}")


@dataclass
class LabelProportion:
    """Length-C vector of class frequencies, summing to 1."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if np.any(self.entries < -1e-12) or np.any(self.entries > 1 + 1e-12):
            raise ValueError("proportion entries outside [0, 1]")
        if abs(self.entries.sum() - 1.0) > 1e-9:
            raise ValueError(f"proportion entries sum to {self.entries.sum()}, not 1")


@dataclass
class Bag:
    """Index set of instances plus its class-proportion vector."""

    member_indices: np.ndarray
    proportion: LabelProportion

    def __post_init__(self):
        self.member_indices = np.asarray(self.member_indices, dtype=np.int64)
        if len(set(self.member_indices.tolist())) != len(self.member_indices):
            raise ValueError("bag members must be distinct")

    @property
    def size(self):
        return len(self.member_indices)


class TabularDataset:
    """Feature matrix with schema, per-cell missing flags, and held-out labels."""

    def __init__(self, schema, rows, missing, labels, n_classes, label_levels=None):
        self.schema = list(schema)
        self.rows = np.asarray(rows, dtype=np.float64)
        self.missing = np.asarray(missing, dtype=bool)
        self._labels = np.asarray(labels, dtype=np.int64)
        self.n_classes = int(n_classes)
        self.label_levels = label_levels or {}
        self.label_reads = 0
        if self.rows.ndim != 2 or self.rows.shape[1] != len(self.schema):
            raise ValueError(
                f"row matrix {self.rows.shape} does not match schema of {len(self.schema)} columns"
            )
        if self.missing.shape != self.rows.shape:
            raise ValueError("missing-flag matrix shape mismatch")
        if len(self._labels) != len(self.rows):
            raise ValueError("label count does not match row count")

    @property
    def n_rows(self):
        return self.rows.shape[0]

    def read_labels(self, indices=None):
        """Instance labels, for evaluation and bag simulation only.

        Every call is counted in ``label_reads`` so tests can assert that
        training never touches labels.
        """
        self.label_reads += 1
        if indices is None:
            return self._labels.copy()
        return self._labels[np.asarray(indices, dtype=np.int64)]


def ingest_csv(path, declaration, label_column, fitted_schema=None):
    """Load a CSV with a header row into a :class:`TabularDataset`.

    ``declaration`` maps feature column names to "categorical" or "numeric",
    in the desired schema order. Missing cells are the empty string or "?".
    Categorical levels get dense indices in order of first appearance; when
    ``fitted_schema`` is given (ingesting a companion file against an already
    fit schema), unknown levels map to the reserved index ``cardinality``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: no rows") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not in header")
        for name in declaration:
            if name not in header:
                raise ValueError(f"{path}: declared column {name!r} not in header")

        col_pos = {name: header.index(name) for name in declaration}
        label_pos = header.index(label_column)

        if fitted_schema is not None:
            schema = [replace(c, levels=dict(c.levels)) for c in fitted_schema]
        else:
            schema = [ColumnSchema(name=n, kind=k) for n, k in declaration.items()]
        frozen = fitted_schema is not None

        rows, missing, raw_labels = [], [], []
        for line_no, record in enumerate(reader, start=2):
            if len(record) != len(header):
                raise ValueError(
                    f"{path}:{line_no}: expected {len(header)} cells, got {len(record)}"
                )
            row = np.zeros(len(schema))
            miss = np.zeros(len(schema), dtype=bool)
            for k, col in enumerate(schema):
                cell = record[col_pos[col.name]].strip()
                if cell in MISSING_TOKENS:
                    miss[k] = True  # placeholder 0
                elif col.kind == "numeric":
                    try:
                        row[k] = float(cell)
                    except ValueError:
                        raise ValueError(
                            f"{path}:{line_no}: column {col.name!r}: "
                            f"cannot parse {cell!r} as a number"
                        ) from None
                else:
                    if cell not in col.levels:
                        if frozen:
                            row[k] = col.cardinality  # reserved "unseen" index
                            continue
                        col.levels[cell] = len(col.levels)
                        col.cardinality = len(col.levels)
                    row[k] = col.levels[cell]
            rows.append(row)
            missing.append(miss)
            raw_labels.append(record[label_pos].strip())

    if not rows:
        raise ValueError(f"{path}: no rows")

    label_levels = {}
    labels = []
    for value in raw_labels:
        if value not in label_levels:
            label_levels[value] = len(label_levels)
        labels.append(label_levels[value])

    return TabularDataset(
        schema=schema,
        rows=np.array(rows),
        missing=np.array(missing),
        labels=labels,
        n_classes=len(label_levels),
        label_levels=label_levels,
    )


def preprocess(dataset, fit_indices):
    """Standardize numeric columns and finalize categorical indices.

    Means and standard deviations (population) are fit on the non-missing
    cells of ``fit_indices`` only; constant columns are shifted but scaled by
    1. Missing numeric cells become 0; missing categorical cells take the
    reserved index ``cardinality``. Returns a new dataset; the input is left
    untouched.
    """
    fit_indices = np.asarray(fit_indices, dtype=np.int64)
    if fit_indices.size == 0:
        raise ValueError("preprocess: fit split is empty")

    rows = dataset.rows.copy()
    schema = []
    for k, col in enumerate(dataset.schema):
        if col.kind == "numeric":
            fit_mask = ~dataset.missing[fit_indices, k]
            fit_values = rows[fit_indices[fit_mask], k]
            if fit_values.size == 0:
                raise ValueError(f"numeric column {col.name!r} is all-missing in the fit split")
            mean = float(fit_values.mean())
            std = float(fit_values.std())
            scale = std if std > 0 else 1.0
            rows[:, k] = (rows[:, k] - mean) / scale
            rows[dataset.missing[:, k], k] = 0.0
            schema.append(replace(col, mean=mean, std=std))
        else:
            rows[dataset.missing[:, k], k] = col.cardinality
            schema.append(replace(col, levels=dict(col.levels)))

    out = TabularDataset(
        schema=schema,
        rows=rows,
        missing=dataset.missing.copy(),
        labels=dataset._labels,
        n_classes=dataset.n_classes,
        label_levels=dict(dataset.label_levels),
    )
    return out


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    test: np.ndarray
    val: np.ndarray


def split(dataset, fractions=(0.8, 0.1, 0.1), seed=0):
    """Disjoint, exhaustive train/test/validation index sets.

    Deterministic given the seed. Fractions must sum to 1; datasets smaller
    than 10 rows are rejected.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions {fractions} do not sum to 1")
    n = dataset.n_rows
    if n < 10:
        raise ValueError(f"dataset too small to split ({n} rows, need >= 10)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(n * fractions[0])
    n_test = int(n * fractions[1])
    return SplitIndices(
        train=np.sort(order[:n_train]),
        test=np.sort(order[n_train : n_train + n_test]),
        val=np.sort(order[n_train + n_test :]),
    )


def _proportion_from_labels(labels, n_classes):
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    return LabelProportion(counts / counts.sum())


def make_bags(dataset, split_indices, bag_size, strategy="random", seed=0):
    """Partition a split into fixed-size bags with simulated proportions.

    ``random`` shuffles then chunks; ``ordered`` sorts the indices
    lexicographically by the preprocessed feature vector (schema column
    order, ties by row index) then chunks. Trailing rows that do not fill a
    bag are dropped. Proportions come from the true labels, simulating the
    black-box provider.
    """
    indices = np.asarray(split_indices, dtype=np.int64)
    if bag_size < 2:
        raise ValueError(f"bag size must be >= 2, got {bag_size}")
    if bag_size > indices.size:
        raise ValueError(f"bag size {bag_size} exceeds split size {indices.size}")
    if strategy == "random":
        rng = np.random.default_rng(seed)
        order = indices[rng.permutation(indices.size)]
    elif strategy == "ordered":
        features = dataset.rows[indices]
        keys = tuple(features[:, k] for k in reversed(range(features.shape[1])))
        order = indices[np.lexsort((indices,) + keys)]
    else:
        raise ValueError(f"unknown bagging strategy {strategy!r}")

    n_bags = indices.size // bag_size
    labels = dataset.read_labels(order[: n_bags * bag_size])
    bags = []
    for b in range(n_bags):
        members = order[b * bag_size : (b + 1) * bag_size]
        bag_labels = labels[b * bag_size : (b + 1) * bag_size]
        bags.append(
            Bag(
                member_indices=members,
                proportion=_proportion_from_labels(bag_labels, dataset.n_classes),
            )
        )
    return bags


def pair_bags(bags, seed=0):
    """Seeded random perfect matching of bags for one epoch.

    With an odd count one bag sits out. No bag appears twice.
    """
    if len(bags) < 2:
        raise ValueError(f"need at least 2 bags to pair, got {len(bags)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(bags))
    return [(bags[order[2 * i]], bags[order[2 * i + 1]]) for i in range(len(bags) // 2)]


def write_bags(path, bags, config_fingerprint=None):
    """Line-delimited JSON audit file: one record per bag.

    An optional leading metadata record carries the config fingerprint.
    """
    with open(path, "w", encoding="utf-8") as fh:
        if config_fingerprint is not None:
            fh.write(json.dumps({"config_fingerprint": config_fingerprint}) + "\n")
        for bag_id, bag in enumerate(bags):
            fh.write(
                json.dumps(
                    {
                        "bag_id": bag_id,
                        "members": bag.member_indices.tolist(),
                        "proportion": bag.proportion.entries.tolist(),
                    }
                )
                + "\n"
            )


def read_bags(path):
    """Read a bag audit file back into :class:`Bag` objects."""
    bags = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if "bag_id" not in rec:
                continue  # metadata record
            bags.append(
                Bag(
                    member_indices=np.array(rec["members"]),
                    proportion=LabelProportion(np.array(rec["proportion"])),
                )
            )
    return bags
