"""Absolute-time tokens.

Every timestamp is written as exactly six tokens, ``DDDD.D``: four zero-padded
integer digits, a decimal point and one decimal digit.  The eleven time tokens
(``<t_0>`` .. ``<t_9>``, ``<t_dot>``) sit contiguously after the base vocabulary,
and their embedding / prediction-head rows start as copies of the matching
digit rows.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

TIME_CHARS = "0123456789."
TIME_TOKENS = tuple(f"<t_{c}>" for c in "0123456789") + ("<t_dot>",)
MAX_TIME = 9999.9
N_TIME_TOKENS = 6

_TIME_RUN = re.compile(r"(?:<t_(?:\d|dot)>){6}")


class TimeTokenError(ValueError):
    """Malformed time-token sequence."""


def round_time(t: float) -> Decimal:
    """Round to 0.1 s, half-to-even on the decimal representation of ``t``."""
    return Decimal(repr(float(t))).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN)


def clamp_timestamp(t: float) -> float:
    return min(max(float(t), 0.0), MAX_TIME)


def format_timestamp(t: float) -> str:
    """``120.5 -> '0120.5'``; raises for negative times or times above 9999.9."""
    if not np.isfinite(t):
        raise ValueError(f"timestamp {t!r} is not finite")
    if t < 0:
        raise ValueError(f"timestamp {t} is negative")
    r = round_time(t)
    if r > Decimal("9999.9"):
        raise ValueError(f"timestamp {t} exceeds the encodable maximum {MAX_TIME}")
    return f"{r:06.1f}"


def timestamp_markup(t: float) -> str:
    """Time-token rendering as text, e.g. ``<t_0><t_1><t_2><t_0><t_dot><t_5>``."""
    return "".join(TIME_TOKENS[TIME_CHARS.index(c)] for c in format_timestamp(t))


def decode_markup(run: str) -> float:
    """Inverse of :func:`timestamp_markup` for one six-token run."""
    toks = re.findall(r"<t_(?:\d|dot)>", run)
    if "".join(toks) != run:
        raise TimeTokenError(f"not a pure time-token run: {run!r}")
    return _decode_chars([TIME_CHARS[TIME_TOKENS.index(tok)] for tok in toks])


def replace_time_runs(text: str) -> str:
    """Rewrite every six-token time run in ``text`` to plain ``DDDD.D`` digits."""
    return _TIME_RUN.sub(lambda m: format_timestamp(decode_markup(m.group(0))), text)


def _decode_chars(chars: Sequence[str]) -> float:
    if len(chars) != N_TIME_TOKENS:
        raise TimeTokenError(f"expected {N_TIME_TOKENS} time tokens, got {len(chars)}")
    for pos, c in enumerate(chars):
        if pos == 4:
            if c != ".":
                raise TimeTokenError(f"position 4 must be <t_dot>, got {c!r}")
        elif not c.isdigit():
            raise TimeTokenError(f"position {pos} must be a digit token, got {c!r}")
    return float("".join(chars))


@dataclass(frozen=True)
class TimeVocab:
    """Ids of the eleven time tokens plus the base-vocabulary ids of '0'-'9' and '.'."""

    base_vocab_size: int
    digit_token_ids: dict = field(default_factory=dict)

    def __post_init__(self):
        missing = [c for c in TIME_CHARS if c not in self.digit_token_ids]
        if missing:
            raise ValueError(f"base vocabulary lacks digit tokens for {missing}")
        for c, i in self.digit_token_ids.items():
            if not 0 <= i < self.base_vocab_size:
                raise ValueError(f"digit token {c!r} id {i} outside the base vocabulary")

    @property
    def time_token_ids(self) -> tuple[int, ...]:
        return tuple(range(self.base_vocab_size, self.base_vocab_size + len(TIME_TOKENS)))

    @property
    def size(self) -> int:
        return self.base_vocab_size + len(TIME_TOKENS)

    def id_of(self, char: str) -> int:
        return self.base_vocab_size + TIME_CHARS.index(char)

    def is_time_token(self, token_id: int) -> bool:
        return self.base_vocab_size <= token_id < self.size

    def to_dict(self) -> dict:
        return {
            "base_vocab_size": self.base_vocab_size,
            "time_tokens": {tok: i for tok, i in zip(TIME_TOKENS, self.time_token_ids)},
            "digit_token_ids": dict(self.digit_token_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimeVocab":
        vocab = cls(int(d["base_vocab_size"]), {k: int(v) for k, v in d["digit_token_ids"].items()})
        if "time_tokens" in d:
            expected = dict(zip(TIME_TOKENS, vocab.time_token_ids))
            if {k: int(v) for k, v in d["time_tokens"].items()} != expected:
                raise ValueError("time-token ids in manifest are not contiguous after the base vocabulary")
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TimeVocab":
        return cls.from_dict(json.loads(Path(path).read_text()))


def encode_timestamp(t: float, vocab: TimeVocab) -> tuple[int, ...]:
    return tuple(vocab.id_of(c) for c in format_timestamp(t))


def decode_timestamp(ids: Sequence[int], vocab: TimeVocab) -> float:
    if len(ids) != N_TIME_TOKENS:
        raise TimeTokenError(f"expected {N_TIME_TOKENS} time tokens, got {len(ids)}")
    chars = []
    for pos, i in enumerate(ids):
        if not vocab.is_time_token(i):
            raise TimeTokenError(f"position {pos}: id {i} is not a time token")
        chars.append(TIME_CHARS[i - vocab.base_vocab_size])
    return _decode_chars(chars)


@dataclass
class EmbeddingPair:
    token_embedding: np.ndarray  # vocab x d
    lm_head: np.ndarray  # vocab x d

    def __post_init__(self):
        if self.token_embedding.shape != self.lm_head.shape:
            raise ValueError(
                f"embedding {self.token_embedding.shape} and head {self.lm_head.shape} differ in shape"
            )


def extend_and_transfer(emb: EmbeddingPair, vocab: TimeVocab) -> EmbeddingPair:
    """Append the 11 time-token rows, each a copy of its digit (or '.') row."""
    if emb.token_embedding.shape[0] != vocab.base_vocab_size:
        raise ValueError(
            f"embedding has {emb.token_embedding.shape[0]} rows, vocabulary base size is {vocab.base_vocab_size}"
        )
    src = [vocab.digit_token_ids[c] for c in TIME_CHARS]
    return EmbeddingPair(
        np.concatenate([emb.token_embedding, emb.token_embedding[src]], axis=0),
        np.concatenate([emb.lm_head, emb.lm_head[src]], axis=0),
    )


# --- toy text tokenizer -------------------------------------------------------

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<ans>")
PUNCT_TOKENS = ("\n", ".", ",", ":", "-", "?", "'", '"')
_TOKEN_RE = re.compile(r"<t_(?:\d|dot)>|<[a-z]+>|[A-Za-z]+|\d|\n|[^\sA-Za-z\d]")
_NO_SPACE_BEFORE = {",", ":", "?", "\n"}


class ToyTokenizer:
    """Regex word/character tokenizer over a closed vocabulary.

    Words are lower-cased, digits and punctuation are single tokens, and the
    time tokens are appended after the base vocabulary.
    """

    def __init__(self, words: Iterable[str]):
        base = list(SPECIAL_TOKENS) + list(PUNCT_TOKENS) + list("0123456789")
        seen = set(base)
        for w in sorted(set(words)):
            if w not in seen:
                base.append(w)
                seen.add(w)
        self.tokens = base + list(TIME_TOKENS)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.vocab = TimeVocab(len(base), {c: self.index[c] for c in TIME_CHARS})
        self.pad_id, self.bos_id, self.eos_id, self.unk_id, self.ans_id = (
            self.index[t] for t in SPECIAL_TOKENS
        )

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "ToyTokenizer":
        words = set()
        for text in texts:
            words.update(t.lower() for t in _TOKEN_RE.findall(text) if t.isalpha())
        return cls(words)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def words(self) -> list[str]:
        skip = set(SPECIAL_TOKENS) | set(PUNCT_TOKENS) | set("0123456789") | set(TIME_TOKENS)
        return [t for t in self.tokens if t not in skip]

    def encode(self, text: str) -> list[int]:
        unk = self.index["<unk>"]
        out = []
        for tok in _TOKEN_RE.findall(text):
            if tok.isalpha():
                tok = tok.lower()
            out.append(self.index.get(tok, unk))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        parts: list[str] = []
        prev = None
        for i in ids:
            tok = self.tokens[int(i)]
            if tok in ("<pad>", "<bos>", "<eos>", "<ans>"):
                continue
            if prev is not None and not _glued(prev, tok):
                parts.append(" ")
            parts.append(tok)
            prev = tok
        return "".join(parts)


def _glued(prev: str, tok: str) -> bool:
    numeric = set("0123456789.")
    if prev in numeric and tok in numeric:
        return True
    if prev.startswith("<t_") and tok.startswith("<t_"):
        return True
    return tok in _NO_SPACE_BEFORE or prev == "\n"


def span_text(start: float, end: float, use_time_tokens: bool) -> str:
    """``'0090.0 - 0102.0'`` or the same with time-token runs."""
    if start < 0 or end < start:
        raise ValueError(f"invalid span ({start}, {end})")
    if round_time(end) < round_time(start):
        raise ValueError(f"span ({start}, {end}) inverts after rounding")
    render = timestamp_markup if use_time_tokens else format_timestamp
    return f"{render(start)} - {render(end)}"


def render_span(start: float, end: float, use_time_tokens: bool, tokenizer: ToyTokenizer) -> list[int]:
    return tokenizer.encode(span_text(start, end, use_time_tokens))
