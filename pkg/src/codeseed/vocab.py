from __future__ import annotations

import os
from collections import Counter
from typing import Iterable, Sequence

from .corpus import TokenSequence

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1


class Vocabulary:
    """Token/id bijection with ``<pad>`` at 0 and ``<unk>`` at 1.

    Immutable after construction.
    """

    pad_id = PAD_ID
    unk_id = UNK_ID

    def __init__(self, tokens: Sequence[str], min_count: int = 1):
        tokens = list(tokens)
        if tokens[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with <pad>, <unk>")
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self.min_count = min_count

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def __repr__(self):
        return f"Vocabulary(V={len(self)}, min_count={self.min_count})"

    def encode(self, tokens: Iterable[str]) -> list[int]:
        get = self.token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        n = len(self.id_to_token)
        for i in ids:
            if not 0 <= i < n:
                raise IndexError(f"id {i} out of range for vocabulary of size {n}")
            out.append(self.id_to_token[i])
        return out

    def dumps(self) -> str:
        return "".join(t + "\n" for t in self.id_to_token)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path: str | os.PathLike, min_count: int = 1) -> "Vocabulary":
        with open(path, encoding="utf-8", newline="\n") as fh:
            text = fh.read()
        if not text.endswith("\n"):
            raise ValueError(f"{path}: vocabulary file must end with a newline")
        return cls(text[:-1].split("\n"), min_count)


def count_tokens(streams: Iterable[TokenSequence | Sequence[str]]) -> Counter:
    counts: Counter = Counter()
    for s in streams:
        counts.update(s.tokens if isinstance(s, TokenSequence) else s)
    return counts


def build_vocabulary(
    streams: Iterable[TokenSequence | Sequence[str]], min_count: int = 3
) -> Vocabulary:
    """Keep tokens seen at least ``min_count`` times, most frequent first, ties lexicographic."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = count_tokens(streams)
    for reserved in (PAD, UNK):
        counts.pop(reserved, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary([PAD, UNK, *kept], min_count)


def encode(v: Vocabulary, tokens: Iterable[str]) -> list[int]:
    return v.encode(tokens)


def decode(v: Vocabulary, ids: Iterable[int]) -> list[str]:
    return v.decode(ids)
