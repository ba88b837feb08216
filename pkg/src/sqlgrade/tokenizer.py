"""SQL lexing and fixed-length id encoding.

The lexer is deliberately shallow: it does not parse SQL, it only splits text
into identifier/keyword runs, folded literals and punctuation so that the
embedding layer sees the *shape* of a statement.
"""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SEQ_LEN = 172
PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
STR_TOKEN, NUM_TOKEN = "<str>", "<num>"
VOCAB_FORMAT_VERSION = 1

TWO_CHAR_OPS = frozenset({">=", "<=", "<>", "!=", "||"})
_WORD_CHARS = frozenset("abcdefghijklmnopqrstuvwxyz0123456789_$#")
_NUMBER = re.compile(r"[0-9]+(?:\.[0-9]*)?(?:[eE][+-]?[0-9]+)?")


class LexError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def _is_word_char(ch: str) -> bool:
    return ch.isascii() and ch.lower() in _WORD_CHARS


def _byte_offset(text: str, index: int) -> int:
    return len(text[:index].encode("utf-8"))


def lex(sql: str, fold_literals: bool = True) -> list[str]:
    """Split ``sql`` into lowercase tokens.

    Single-quoted strings become ``<str>`` and numbers ``<num>`` unless
    ``fold_literals`` is off, in which case the literal text is kept
    (strings keep their original case). Double-quoted and backtick
    identifiers are emitted as their lowercased inner text.
    """
    tokens: list[str] = []
    i, n = 0, len(sql)
    while i < n:
        ch = sql[i]
        if ch.isspace():
            i += 1
        elif sql.startswith("--", i):
            nl = sql.find("\n", i)
            i = n if nl < 0 else nl + 1
        elif sql.startswith("/*", i):
            end = sql.find("*/", i + 2)
            i = n if end < 0 else end + 2
        elif ch == "'":
            j = i + 1
            while True:
                j = sql.find("'", j)
                if j < 0:
                    raise LexError("unterminated string literal", _byte_offset(sql, i))
                if sql.startswith("''", j):
                    j += 2
                    continue
                break
            tokens.append(STR_TOKEN if fold_literals else sql[i : j + 1])
            i = j + 1
        elif ch in "\"`":
            j = sql.find(ch, i + 1)
            if j < 0:
                raise LexError("unterminated quoted identifier", _byte_offset(sql, i))
            tokens.append(sql[i + 1 : j].lower())
            i = j + 1
        elif ch.isascii() and ch.isdigit():
            m = _NUMBER.match(sql, i)
            end = m.end()
            if end < n and _is_word_char(sql[end]) and "." not in m.group():
                # digits glued to letters (e.g. "2nd") form an identifier run
                j = i
                while j < n and _is_word_char(sql[j]):
                    j += 1
                tokens.append(sql[i:j].lower())
                i = j
            else:
                tokens.append(NUM_TOKEN if fold_literals else m.group().lower())
                i = end
        elif _is_word_char(ch):
            j = i
            while j < n and _is_word_char(sql[j]):
                j += 1
            tokens.append(sql[i:j].lower())
            i = j
        elif sql[i : i + 2] in TWO_CHAR_OPS:
            tokens.append(sql[i : i + 2])
            i += 2
        else:
            tokens.append(ch.lower())
            i += 1
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.id_to_token[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ValueError("vocabulary must start with PAD and UNK")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @classmethod
    def from_tokens(cls, tokens) -> "Vocabulary":
        return cls((PAD_TOKEN, UNK_TOKEN, *tokens))

    def to_json(self) -> dict:
        return {"format_version": VOCAB_FORMAT_VERSION, "tokens": list(self.id_to_token[2:])}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if obj.get("format_version") != VOCAB_FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary format_version {obj.get('format_version')!r}")
        return cls.from_tokens(obj["tokens"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(corpus, min_count: int = 1) -> Vocabulary:
    """Ids 2.. in descending frequency, ties broken lexicographically."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if min_count < 1:
        raise ValueError("min_count must be positive")
    counts = Counter(tok for tokens in corpus for tok in tokens)
    counts.pop(PAD_TOKEN, None)
    counts.pop(UNK_TOKEN, None)
    kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary.from_tokens(kept)


def encode(tokens, vocab: Vocabulary, seq_len: int = SEQ_LEN) -> np.ndarray:
    ids = np.full(seq_len, PAD, dtype=np.int64)
    lookup = vocab.token_to_id
    for t, tok in enumerate(tokens[:seq_len]):
        ids[t] = lookup.get(tok, UNK)
    return ids


def decode(ids, vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_token[i] for i in ids if i != PAD]
