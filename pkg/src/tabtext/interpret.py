"""Instance-level interpretability from a trained encoder.

[CLS]-query attention scores per token and per field, and Euclidean
distance matrices between [CLS] embeddings under enumerated feature
values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, SchemaError
from .model import Parameters, forward
from .tables import ColumnSchema
from .textualize import Sentence, TextualizeOptions, textualize_row
from .tokenizer import Vocabulary, encode


@dataclass(frozen=True)
class Aggregation:
    """How to reduce the (layer, head) attention grid to one [CLS] row.

    ``layer`` indexes a single layer (negative from the end) unless
    ``mean_layers`` is set; ``head=None`` averages heads.
    """

    layer: int = -1
    head: int | None = None
    mean_layers: bool = False

    def describe(self) -> str:
        layers = "layers=mean" if self.mean_layers else f"layer={self.layer}"
        heads = "heads=mean" if self.head is None else f"head={self.head}"
        return f"{layers},{heads}"


@dataclass(frozen=True)
class AttentionReport:
    """[CLS] attention mass over tokens and fields of one sentence.

    ``per_token_scores`` covers real non-[CLS] positions; the [CLS]
    self-weight and separator mass are reported separately so the full
    row still sums to one.
    """

    tokens: tuple[str, ...]
    per_token_scores: tuple[float, ...]
    per_field_scores: dict[str, float]
    cls_self_score: float
    separator_score: float
    aggregation: str

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "per_token_scores": list(self.per_token_scores),
            "per_field_scores": self.per_field_scores,
            "cls_self_score": self.cls_self_score,
            "separator_score": self.separator_score,
            "aggregation": self.aggregation,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", "utf-8")


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Pairwise Euclidean distances between [CLS] embeddings."""

    values: tuple[str, ...]
    distances: np.ndarray

    def write_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", *self.values])
            for name, row in zip(self.values, self.distances):
                writer.writerow([name, *(f"{d:.6f}" for d in row)])


def cls_attention(
    params: Parameters,
    vocab: Vocabulary,
    sentence: Sentence,
    aggregation: Aggregation = Aggregation(),
    *,
    max_len: int | None = None,
) -> AttentionReport:
    """Attention received by each token/field from the [CLS] query.

    Default aggregation: final layer, mean over heads. Per-field scores
    sum the token scores inside each field's span; fields sharing a header
    merge.
    """
    if max_len is None:
        max_len = params.config.max_len
    seq = encode(sentence, vocab, max_len)
    out = forward(params, seq, mode="embed")
    weights = out.attention.weights  # (L, A, T, T)
    if aggregation.mean_layers:
        grid = weights.mean(axis=0)
    else:
        grid = weights[aggregation.layer]
    row = grid.mean(axis=0) if aggregation.head is None else grid[aggregation.head]
    cls_row = row[0].astype(np.float64)

    n_real = seq.n_real
    token_scores = cls_row[1:n_real]
    tokens = tuple(vocab.token(int(t)) for t in seq.ids[1:n_real])

    per_field: dict[str, float] = {}
    covered = np.zeros(n_real, dtype=bool)
    covered[0] = True
    for phrase, (start, end) in zip(sentence.phrases, seq.token_spans):
        mass = float(cls_row[start:end].sum())
        per_field[phrase.header] = per_field.get(phrase.header, 0.0) + mass
        covered[start:end] = True
    separator_score = float(cls_row[1:n_real][~covered[1:n_real]].sum())

    return AttentionReport(
        tokens=tokens,
        per_token_scores=tuple(float(s) for s in token_scores),
        per_field_scores=per_field,
        cls_self_score=float(cls_row[0]),
        separator_score=separator_score,
        aggregation=aggregation.describe(),
    )


def value_similarity(
    params: Parameters,
    vocab: Vocabulary,
    schema: Sequence[ColumnSchema],
    base_row: Sequence[str],
    column: str,
    candidates: Sequence[str],
    opts: TextualizeOptions = TextualizeOptions(),
    *,
    max_len: int | None = None,
) -> SimilarityMatrix:
    """Euclidean distances between [CLS] embeddings as ``column`` takes
    each candidate value in an otherwise fixed row."""
    names = [c.name for c in schema]
    if column not in names:
        raise SchemaError(f"column {column!r} not in schema")
    if len(candidates) < 2:
        raise ContractError("need at least two candidate values")
    col_idx = names.index(column)
    if max_len is None:
        max_len = params.config.max_len

    embeddings = []
    for value in candidates:
        row = list(base_row)
        row[col_idx] = value
        sentence = textualize_row(row, schema, opts)
        seq = encode(sentence, vocab, max_len)
        embeddings.append(forward(params, seq, mode="embed").cls_embedding)
    emb = np.stack(embeddings).astype(np.float64)

    m = len(candidates)
    distances = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        for j in range(i + 1, m):
            d = float(np.linalg.norm(emb[i] - emb[j]))
            distances[i, j] = d
            distances[j, i] = d
    return SimilarityMatrix(values=tuple(candidates), distances=distances)
