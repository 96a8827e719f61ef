"""Render table rows as header:value sentences and mix corpora.

Each row becomes one sentence of ``header:value`` phrases joined by the
literal ``[SEP]`` (or a single space in the no-separator ablation). Fields
are simplified by trailing-token truncation so the encoded sentence fits
the token budget.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError, FormatError, RowError, SchemaError
from .seeding import named_rng
from .tables import ColumnSchema, TableDataset
from .tokenizer import split_raw

SEP_TEXT = "[SEP]"


@dataclass(frozen=True)
class TextualizeOptions:
    use_sep: bool = True
    max_tokens: int = 512
    missing_value_text: str = "unknown"

    def __post_init__(self):
        if self.max_tokens < 8:
            raise ContractError(f"max_tokens must be >= 8, got {self.max_tokens}")


@dataclass(frozen=True)
class Phrase:
    """One field rendered as ``header:value`` with no inserted whitespace."""

    header: str
    value: str
    rendered: str


@dataclass(frozen=True)
class Sentence:
    """A textualized row: ordered phrases and their joined rendering."""

    phrases: tuple[Phrase, ...]
    rendered: str
    source_row: int
    source_dataset: str


@dataclass(frozen=True)
class Corpus:
    """Sentences with optional aligned labels and per-dataset counts."""

    sentences: tuple[Sentence, ...]
    labels: tuple[int, ...] | None
    provenance: dict[str, int]

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.sentences):
            raise ContractError(
                f"{len(self.labels)} labels for {len(self.sentences)} sentences"
            )
        if sum(self.provenance.values()) != len(self.sentences):
            raise ContractError("provenance counts must sum to the corpus size")

    def __len__(self) -> int:
        return len(self.sentences)

    def subset(self, indices: Sequence[int]) -> "Corpus":
        """New corpus of the given sentence positions (labels follow)."""
        sentences = tuple(self.sentences[i] for i in indices)
        labels = None if self.labels is None else tuple(self.labels[i] for i in indices)
        provenance = dict(Counter(s.source_dataset for s in sentences))
        return Corpus(sentences=sentences, labels=labels, provenance=provenance)

    def without_labels(self) -> "Corpus":
        return Corpus(sentences=self.sentences, labels=None, provenance=self.provenance)


def build_phrase(header: str, value: str, opts: TextualizeOptions) -> Phrase:
    """Render one field; empty values fall back to the missing-value text."""
    if not header:
        raise SchemaError("phrase header must be nonempty")
    if value == "":
        value = opts.missing_value_text
    return Phrase(header=header, value=value, rendered=f"{header}:{value}")


def field_token_budget(n_columns: int, max_tokens: int) -> int:
    """Per-field token allowance under the sentence budget.

    Reserves [CLS], one slack slot, and the D-1 separators; never below 2
    (one header token plus the colon).
    """
    if n_columns < 1:
        raise ContractError("need at least one column")
    return max(2, (max_tokens - 2 - (n_columns - 1)) // n_columns)


def simplify_field(header: str, value: str, token_budget: int) -> tuple[str, str]:
    """Truncate header/value at token boundaries to fit ``token_budget``.

    The header keeps at least one token and at most budget-1 (the colon
    costs one); the value gets whatever remains. Only trailing tokens are
    removed, and untouched fields come back verbatim.
    """
    if token_budget < 2:
        raise ContractError(f"token_budget must be >= 2, got {token_budget}")
    header_lex = split_raw(header)
    value_lex = split_raw(value)
    if len(header_lex) + 1 + len(value_lex) <= token_budget:
        return header, value

    keep_header = min(len(header_lex), token_budget - 1)
    if keep_header and keep_header < len(header_lex):
        header = header[: header_lex[keep_header - 1].end].rstrip()
    keep_value = max(0, token_budget - max(keep_header, 1) - 1)
    if keep_value == 0:
        value = ""
    elif keep_value < len(value_lex):
        value = value[: value_lex[keep_value - 1].end].rstrip()
    return header, value


def textualize_row(
    row: Sequence[str],
    schema: Sequence[ColumnSchema],
    opts: TextualizeOptions,
    *,
    source_row: int = -1,
    source_dataset: str = "",
) -> Sentence:
    """Render one row as a sentence, fields in column appearance order."""
    if len(row) != len(schema):
        raise RowError(f"row has {len(row)} cells, expected {len(schema)}")
    budget = field_token_budget(len(schema), opts.max_tokens)
    phrases = []
    for column, cell in zip(schema, row):
        raw = build_phrase(column.header_text, cell, opts)
        header, value = simplify_field(raw.header, raw.value, budget)
        if (header, value) == (raw.header, raw.value):
            phrases.append(raw)
        else:
            phrases.append(Phrase(header, value, f"{header}:{value}"))
    joiner = SEP_TEXT if opts.use_sep else " "
    return Sentence(
        phrases=tuple(phrases),
        rendered=joiner.join(p.rendered for p in phrases),
        source_row=source_row,
        source_dataset=source_dataset,
    )


def textualize_dataset(dataset: TableDataset, opts: TextualizeOptions) -> Corpus:
    """One sentence per row; labels carried over."""
    sentences = tuple(
        textualize_row(
            row, dataset.schema, opts, source_row=i, source_dataset=dataset.name
        )
        for i, row in enumerate(dataset.rows)
    )
    provenance = {dataset.name: len(sentences)} if sentences else {}
    return Corpus(sentences=sentences, labels=tuple(dataset.labels), provenance=provenance)


def mix_corpora(corpora: Sequence[Corpus], seed: int) -> Corpus:
    """Seeded shuffle of the sentence union; labels drop (mixing feeds the
    unsupervised stage only), provenance counts add."""
    if not corpora:
        raise ContractError("need at least one corpus to mix")
    sentences = [s for corpus in corpora for s in corpus.sentences]
    provenance: Counter[str] = Counter()
    for corpus in corpora:
        provenance.update(corpus.provenance)
    rng = named_rng(seed, "mix")
    order = rng.permutation(len(sentences))
    return Corpus(
        sentences=tuple(sentences[i] for i in order),
        labels=None,
        provenance=dict(provenance),
    )


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """One rendered sentence per line, plus a sidecar ``<path>.json`` with
    labels and provenance."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for sentence in corpus.sentences:
            fh.write(sentence.rendered + "\n")
    sidecar = {
        "labels": None if corpus.labels is None else list(corpus.labels),
        "provenance": corpus.provenance,
    }
    Path(str(path) + ".json").write_text(
        json.dumps(sidecar) + "\n", encoding="utf-8"
    )


def _parse_line(line: str, lineno: int, source: str) -> Sentence:
    segments = line.split(SEP_TEXT) if SEP_TEXT in line else [line]
    phrases = []
    for segment in segments:
        head, colon, tail = segment.partition(":")
        if not colon or not head:
            raise FormatError(
                f"line {lineno}: segment {segment!r} is not header:value"
            )
        phrases.append(Phrase(head, tail, segment))
    return Sentence(
        phrases=tuple(phrases),
        rendered=line,
        source_row=lineno - 1,
        source_dataset=source,
    )


def load_corpus(path: str | Path) -> Corpus:
    """Read a corpus file written by :func:`save_corpus`.

    Field boundaries of no-separator corpora cannot be recovered exactly;
    such lines load as a single phrase, which is all the unsupervised
    stage needs.
    """
    path = Path(path)
    labels = None
    provenance: dict[str, int] | None = None
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        try:
            raw = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"corpus sidecar {sidecar} is malformed: {exc}") from exc
        labels = None if raw.get("labels") is None else tuple(raw["labels"])
        provenance = raw.get("provenance")

    source = path.stem
    if provenance is not None and len(provenance) == 1:
        source = next(iter(provenance))

    sentences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            sentences.append(_parse_line(line, lineno, source))
    if provenance is None:
        provenance = {source: len(sentences)} if sentences else {}
    return Corpus(sentences=tuple(sentences), labels=labels, provenance=provenance)
