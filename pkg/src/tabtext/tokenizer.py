"""Word-level vocabulary with reserved specials and fixed-length encoding.

Splitting rules: whitespace separates; ``:`` and the bracketed specials are
atomic; a chunk that is a numeric literal splits into per-character tokens
(sign, digits, decimal point). Normalization lowercases everything except
the special literals.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import ContractError, FormatError

if TYPE_CHECKING:
    from .textualize import Corpus, Sentence

PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
_SPECIAL_IDS = dict(zip(SPECIAL_TOKENS, range(5)))

_TOKEN_RE = re.compile(
    r"\[(?:PAD|UNK|CLS|SEP|MASK)\]"  # special literals are atomic
    r"|:"
    r"|[^\s:\[\]]+"
    r"|[\[\]]"
)
_NUMERIC_RE = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)\Z")


@dataclass(frozen=True)
class Lexeme:
    """One raw token with its [start, end) character span in the source."""

    text: str
    start: int
    end: int


def split_raw(text: str) -> list[Lexeme]:
    """Case-preserving split of ``text`` into lexemes with character spans."""
    out: list[Lexeme] = []
    for m in _TOKEN_RE.finditer(text):
        chunk = m.group()
        start = m.start()
        if chunk not in _SPECIAL_IDS and _NUMERIC_RE.fullmatch(chunk):
            out.extend(
                Lexeme(ch, start + i, start + i + 1) for i, ch in enumerate(chunk)
            )
        else:
            out.append(Lexeme(chunk, start, m.end()))
    return out


def normalize_token(raw: str) -> str:
    return raw if raw in _SPECIAL_IDS else raw.lower()


def split_tokens(text: str) -> list[str]:
    """Normalized token strings of ``text`` (lowercased, specials intact)."""
    return [normalize_token(lex.text) for lex in split_raw(text)]


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token<->id map; the five specials sit at fixed ids 0..4."""

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(
        default=None, compare=False, repr=False  # type: ignore[assignment]
    )

    def __post_init__(self):
        if self.id_to_token[:5] != SPECIAL_TOKENS:
            raise ContractError("vocabulary must start with the reserved specials")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ContractError("vocabulary tokens must be unique")
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < self.size:
            raise ContractError(f"token id {token_id} out of range [0, {self.size})")
        return self.id_to_token[token_id]


def build_vocab(
    corpora: Iterable["Corpus"],
    min_freq: int = 1,
    max_size: int | None = None,
) -> Vocabulary:
    """Frequency-sorted vocabulary over the corpora's normalized tokens.

    Ties break lexicographically; ``max_size`` bounds the total size
    including the specials. Special literals occurring in text are never
    re-added (they keep their reserved ids).
    """
    if min_freq < 1:
        raise ContractError(f"min_freq must be >= 1, got {min_freq}")
    if max_size is not None and max_size <= 5:
        raise ContractError(f"max_size must exceed the 5 specials, got {max_size}")
    counts: Counter[str] = Counter()
    for corpus in corpora:
        for sentence in corpus.sentences:
            for tok in split_tokens(sentence.rendered):
                if tok not in _SPECIAL_IDS:
                    counts[tok] += 1
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    if max_size is not None:
        kept = kept[: max_size - 5]
    return Vocabulary(id_to_token=SPECIAL_TOKENS + tuple(kept))


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    """Write JSON {tokens, specials}; token order defines the ids."""
    payload = {
        "tokens": list(vocab.id_to_token[5:]),
        "specials": dict(_SPECIAL_IDS),
    }
    Path(path).write_text(json.dumps(payload, indent=0) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        tokens = raw["tokens"]
        specials = raw["specials"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"vocabulary file {path} is malformed: {exc}") from exc
    if specials != dict(_SPECIAL_IDS):
        raise FormatError(f"vocabulary file {path} has nonstandard special ids")
    return Vocabulary(id_to_token=SPECIAL_TOKENS + tuple(tokens))


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Fixed-length encoded sentence: [CLS] + tokens + [PAD] tail.

    ``token_spans`` gives the [start, end) id positions of each source
    field; ``pad_mask`` is True at real (non-pad) positions.
    """

    ids: np.ndarray
    pad_mask: np.ndarray
    token_spans: tuple[tuple[int, int], ...]
    n_real: int
    truncated: bool = False

    @property
    def max_len(self) -> int:
        return len(self.ids)


def _phrase_join_mode(sentence: "Sentence") -> bool:
    """True when the sentence joins phrases with [SEP], False for spaces."""
    rendered = [p.rendered for p in sentence.phrases]
    if len(rendered) > 1 and "[SEP]".join(rendered) == sentence.rendered:
        return True
    if " ".join(rendered) == sentence.rendered:
        return False
    raise ContractError("sentence rendered text does not match its phrase join")


def encode(sentence: "Sentence", vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Encode a sentence to ids: [CLS] first, truncate, then pad to max_len."""
    if max_len < 4:
        raise ContractError(f"max_len must be >= 4, got {max_len}")
    with_sep = _phrase_join_mode(sentence)

    # (field index | None, normalized token) stream in sentence order
    stream: list[tuple[int | None, str]] = []
    for i, phrase in enumerate(sentence.phrases):
        if i > 0 and with_sep:
            stream.append((None, "[SEP]"))
        stream.extend((i, tok) for tok in split_tokens(phrase.rendered))

    limit = max_len - 1
    truncated = len(stream) > limit
    kept = stream[:limit]

    ids = np.zeros(max_len, dtype=np.int64)
    ids[0] = CLS_ID
    for pos, (_, tok) in enumerate(kept, start=1):
        ids[pos] = _SPECIAL_IDS.get(tok, vocab.lookup(tok))
    n_real = 1 + len(kept)
    pad_mask = np.arange(max_len) < n_real

    spans: list[tuple[int, int]] = []
    cursor = 1
    for i, phrase in enumerate(sentence.phrases):
        if i > 0 and with_sep:
            cursor += 1
        width = len(split_tokens(phrase.rendered))
        start = min(cursor, n_real)
        end = min(cursor + width, n_real)
        spans.append((start, max(start, end)))
        cursor += width

    return TokenSequence(
        ids=ids,
        pad_mask=pad_mask,
        token_spans=tuple(spans),
        n_real=n_real,
        truncated=truncated,
    )


def decode(ids: Sequence[int] | np.ndarray, vocab: Vocabulary) -> str:
    """Render ids back to text, skipping [PAD] and [CLS], spaces between."""
    out = []
    for token_id in np.asarray(ids).tolist():
        if token_id in (PAD_ID, CLS_ID):
            continue
        out.append(vocab.token(token_id))
    return " ".join(out)
