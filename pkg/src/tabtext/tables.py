"""Typed tabular datasets: loading, validation, stratified splitting.

Cells are kept as verbatim text (missing = empty string); the column kind
only steers tokenization later in the pipeline. Labels are binary and come
from an explicit positive-label mapping.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, LabelError, RowError, SchemaError, SizeError
from .seeding import named_rng

KINDS = ("numeric", "categorical", "textual")

# Split targets: 65/15/20 at k=5. The test share is 1/k (test sets must
# partition the data); train:val keeps the 65:15 ratio of the remainder.
_VAL_SHARE_OF_REST = 0.15 / 0.80


@dataclass(frozen=True)
class ColumnSchema:
    """One column: its identifier, kind, and human-readable header."""

    name: str
    kind: str
    header_text: str

    def __post_init__(self):
        if not self.name:
            raise SchemaError("column name must be nonempty")
        if self.kind not in KINDS:
            raise SchemaError(f"unknown column kind {self.kind!r} for {self.name!r}")
        if not self.header_text:
            raise SchemaError(f"column {self.name!r} has empty header_text")


@dataclass(frozen=True)
class TableDataset:
    """Rows of verbatim text cells with binary labels and a typed schema."""

    name: str
    domain_tag: str
    schema: tuple[ColumnSchema, ...]
    rows: tuple[tuple[str, ...], ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        names = [c.name for c in self.schema]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names in schema")
        width = len(self.schema)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise RowError(
                    f"row {i} has {len(row)} cells, expected {width}", line=i
                )
        if len(self.labels) != len(self.rows):
            raise LabelError(
                f"{len(self.labels)} labels for {len(self.rows)} rows"
            )
        if any(label not in (0, 1) for label in self.labels):
            raise LabelError("labels must be 0 or 1")

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def n_columns(self) -> int:
        return len(self.schema)


@dataclass(frozen=True)
class FoldPlan:
    """Per-fold (train, val, test) index triples; test sets partition [0, n)."""

    folds: tuple[tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]], ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)


@dataclass(frozen=True)
class LabeledSubset:
    """Stratified split of training indices into labeled and unlabeled."""

    labeled_indices: tuple[int, ...]
    unlabeled_indices: tuple[int, ...]
    n_labeled: int

    def __post_init__(self):
        if len(self.labeled_indices) != self.n_labeled:
            raise ContractError("labeled_indices size must equal n_labeled")


@dataclass(frozen=True)
class SchemaSpec:
    """Parsed schema file: feature columns plus the label mapping."""

    columns: tuple[ColumnSchema, ...]
    label_column: str
    positive_label: str
    negative_label: str | None = None
    domain_tag: str = ""


def load_schema(path: str | Path) -> SchemaSpec:
    """Read a JSON schema file (columns, label_column, positive_label, ...)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema file {path} is not valid JSON: {exc}") from exc
    try:
        columns = tuple(
            ColumnSchema(c["name"], c["kind"], c["header_text"]) for c in raw["columns"]
        )
        return SchemaSpec(
            columns=columns,
            label_column=raw["label_column"],
            positive_label=str(raw["positive_label"]),
            negative_label=(
                None if raw.get("negative_label") is None else str(raw["negative_label"])
            ),
            domain_tag=raw.get("domain_tag", ""),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"schema file {path} is missing field: {exc}") from exc


def _map_label(cell: str, positive: str, negative: str | None, line: int) -> int:
    if cell == positive:
        return 1
    if negative is not None:
        if cell == negative:
            return 0
        raise LabelError(
            f"line {line}: label {cell!r} is neither {positive!r} nor {negative!r}"
        )
    if cell == "":
        raise LabelError(f"line {line}: empty label cell")
    return 0


def load_csv(
    path: str | Path,
    schema: Sequence[ColumnSchema],
    label_column: str,
    positive_label: str,
    *,
    negative_label: str | None = None,
    name: str | None = None,
    domain_tag: str = "",
) -> TableDataset:
    """Load an RFC 4180 CSV whose header is the schema names plus the label.

    The non-label header cells must equal the schema names in order. Labels
    map to 1 iff the cell equals ``positive_label``; missing cells elsewhere
    are preserved as empty text.
    """
    path = Path(path)
    schema = tuple(schema)
    feature_names = [c.name for c in schema]
    if label_column in feature_names:
        raise SchemaError(f"label column {label_column!r} also appears in the schema")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        if label_column not in header:
            raise SchemaError(f"{path}: label column {label_column!r} not in header")
        label_pos = header.index(label_column)
        features_in_file = header[:label_pos] + header[label_pos + 1 :]
        if features_in_file != feature_names:
            raise SchemaError(
                f"{path}: header {features_in_file!r} does not match schema "
                f"columns {feature_names!r}"
            )

        rows: list[tuple[str, ...]] = []
        labels: list[int] = []
        for record in reader:
            line = reader.line_num
            if not record:
                continue
            if len(record) != len(header):
                raise RowError(
                    f"line {line}: {len(record)} cells, expected {len(header)}",
                    line=line,
                )
            labels.append(
                _map_label(record[label_pos], positive_label, negative_label, line)
            )
            rows.append(tuple(record[:label_pos] + record[label_pos + 1 :]))

    return TableDataset(
        name=name if name is not None else path.stem,
        domain_tag=domain_tag,
        schema=schema,
        rows=tuple(rows),
        labels=tuple(labels),
    )


def load_dataset(csv_path: str | Path, schema_path: str | Path) -> TableDataset:
    """Convenience: load a schema file, then the CSV it describes."""
    spec = load_schema(schema_path)
    return load_dataset_with_spec(csv_path, spec)


def load_dataset_with_spec(csv_path: str | Path, spec: SchemaSpec) -> TableDataset:
    return load_csv(
        csv_path,
        spec.columns,
        spec.label_column,
        spec.positive_label,
        negative_label=spec.negative_label,
        domain_tag=spec.domain_tag,
    )


def _apportion(counts: Sequence[int], total: int) -> list[int]:
    """Largest-remainder allocation of ``total`` slots proportional to counts."""
    whole = sum(counts)
    if whole == 0:
        return [0] * len(counts)
    quotas = [total * c / whole for c in counts]
    alloc = [int(q) for q in quotas]
    leftovers = total - sum(alloc)
    order = sorted(range(len(counts)), key=lambda i: (alloc[i] - quotas[i], i))
    for i in order[:leftovers]:
        alloc[i] += 1
    return alloc


def make_folds(dataset: TableDataset, k: int, seed: int) -> FoldPlan:
    """Stratified k-fold plan with 65/15/20-style train/val/test splits.

    Deterministic in (n, labels, k, seed). Test sets partition the indices;
    within each fold the remainder splits into train/val at 65:15.
    """
    n = dataset.n
    if k < 2:
        raise SizeError(f"need k >= 2 folds, got {k}")
    if n < k:
        raise SizeError(f"dataset of {n} rows cannot be split into {k} folds")

    labels = np.asarray(dataset.labels)
    rng = named_rng(seed, "folds")
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    dealt = np.concatenate([pos, neg])
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[dealt] = np.arange(n) % k

    folds = []
    for f in range(k):
        test_mask = fold_of == f
        rest_pos = pos[~test_mask[pos]]
        rest_neg = neg[~test_mask[neg]]
        n_rest = len(rest_pos) + len(rest_neg)
        val_size = round(_VAL_SHARE_OF_REST * n_rest)
        val_pos_n, val_neg_n = _apportion([len(rest_pos), len(rest_neg)], val_size)
        val = np.concatenate([rest_pos[:val_pos_n], rest_neg[:val_neg_n]])
        train = np.concatenate([rest_pos[val_pos_n:], rest_neg[val_neg_n:]])
        test = np.flatnonzero(test_mask)
        folds.append(
            (
                tuple(int(i) for i in np.sort(train)),
                tuple(int(i) for i in np.sort(val)),
                tuple(int(i) for i in np.sort(test)),
            )
        )
    return FoldPlan(folds=tuple(folds), seed=seed)


def subsample_labeled(
    train_indices: Sequence[int],
    labels: Sequence[int],
    n_labeled: int,
    seed: int,
) -> LabeledSubset:
    """Stratified draw of exactly ``n_labeled`` indices from the training set.

    ``labels`` is indexed by dataset position (same indexing as the plan).
    """
    train = np.asarray(train_indices, dtype=np.int64)
    if n_labeled > len(train):
        raise SizeError(
            f"cannot label {n_labeled} of {len(train)} training examples"
        )
    lab = np.asarray(labels)
    rng = named_rng(seed, "subsample")
    pos = rng.permutation(train[lab[train] == 1])
    neg = rng.permutation(train[lab[train] == 0])
    take_pos, take_neg = _apportion([len(pos), len(neg)], n_labeled)
    labeled = np.concatenate([pos[:take_pos], neg[:take_neg]])
    unlabeled = np.concatenate([pos[take_pos:], neg[take_neg:]])
    return LabeledSubset(
        labeled_indices=tuple(int(i) for i in np.sort(labeled)),
        unlabeled_indices=tuple(int(i) for i in np.sort(unlabeled)),
        n_labeled=n_labeled,
    )
