"""Java source ingestion: normalization, lexing, context windows and folds.

The scanner is a hand-rolled longest-match lexer over the Java token
alphabet.  It does not parse; it only needs to know where comments, literals,
identifiers and operators begin and end.
"""

from __future__ import annotations

import os
import random
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

INT_TOKEN = "IntVal"
FLOAT_TOKEN = "FloatVal"
STRING_TOKEN = "StringVal"

# Longest first so that a prefix scan picks the longest operator.
OPERATORS = sorted(
    [
        ">>>=", "<<=", ">>=", ">>>", "...", "->", "::", "++", "--", "&&", "||",
        "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=",
        "<<", ">>", "{", "}", "(", ")", "[", "]", ";", ",", ".", "=", "<", ">",
        "!", "~", "?", ":", "+", "-", "*", "/", "&", "|", "^", "%", "@",
    ],
    key=len,
    reverse=True,
)
_OP_FIRST = frozenset(op[0] for op in OPERATORS)

_DIGITS = r"[0-9](?:[0-9_]*[0-9])?"
_HEX = r"[0-9a-fA-F](?:[0-9a-fA-F_]*[0-9a-fA-F])?"
_EXP = r"[eE][+-]?" + _DIGITS

_FLOAT_RE = re.compile(
    "|".join(
        [
            rf"0[xX](?:{_HEX})?(?:\.(?:{_HEX})?)?[pP][+-]?{_DIGITS}[fFdD]?",
            rf"{_DIGITS}\.(?:{_DIGITS})?(?:{_EXP})?[fFdD]?",
            rf"\.{_DIGITS}(?:{_EXP})?[fFdD]?",
            rf"{_DIGITS}{_EXP}[fFdD]?",
            rf"{_DIGITS}[fFdD]",
        ]
    )
)
_INT_RE = re.compile(
    rf"0[xX]{_HEX}[lL]?|0[bB][01](?:[01_]*[01])?[lL]?|{_DIGITS}[lL]?"
)

_WHITESPACE = " \t\f\r\n"


class LexError(ValueError):
    """A character or construct the scanner cannot turn into a token."""

    def __init__(self, message: str, path: str = "<string>", line: int = 0, col: int = 0):
        self.path = path
        self.line = line
        self.col = col
        super().__init__(f"{path}:{line}:{col}: {message}")


@dataclass(frozen=True)
class SourceFile:
    path: str
    text: str

    @classmethod
    def read(cls, path: str | os.PathLike) -> "SourceFile":
        with open(path, encoding="utf-8") as fh:
            return cls(str(path), fh.read())


@dataclass
class TokenSequence:
    """Lexed token stream of one normalized file.

    ``lines`` holds the 0-based normalized line index of every token; fold
    assignment needs it to route a prediction target to its fold.
    """

    origin: str
    tokens: list[str]
    loc: int
    lines: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.lines:
            self.lines = [0] * len(self.tokens)
        if len(self.lines) != len(self.tokens):
            raise ValueError("lines and tokens differ in length")

    def __len__(self):
        return len(self.tokens)


class ContextWindow(NamedTuple):
    context: tuple[int, ...]
    target: int


class _Tok(NamedTuple):
    kind: str  # ident | int | float | string | char | op
    text: str
    line: int  # 1-based
    col: int  # 1-based


def _scan(text: str, path: str = "<string>") -> Iterator[_Tok]:
    """Yield raw tokens, skipping whitespace and comments."""
    i, n = 0, len(text)
    line, line_start = 1, 0
    while i < n:
        c = text[i]
        col = i - line_start + 1
        if c in _WHITESPACE:
            if c == "\n":
                line += 1
                line_start = i + 1
            i += 1
            continue
        if c == "/" and text.startswith("//", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        if c == "/" and text.startswith("/*", i):
            j = text.find("*/", i + 2)
            if j < 0:
                raise LexError("unterminated block comment", path, line, col)
            body = text[i:j]
            nl = body.count("\n")
            if nl:
                line += nl
                line_start = i + body.rfind("\n") + 1
            i = j + 2
            continue
        if c == '"' and text.startswith('"""', i):
            # Text block: one StringVal token reported on its opening line.
            j = i + 3
            while True:
                if j >= n:
                    raise LexError("unterminated text block", path, line, col)
                if text[j] == "\\":
                    j += 2
                    continue
                if text.startswith('"""', j):
                    break
                j += 1
            body = text[i : j + 3]
            yield _Tok("string", body, line, col)
            nl = body.count("\n")
            if nl:
                line += nl
                line_start = i + body.rfind("\n") + 1
            i = j + 3
            continue
        if c == '"' or c == "'":
            j = i + 1
            while True:
                if j >= n or text[j] == "\n":
                    what = "string" if c == '"' else "character"
                    raise LexError(f"unterminated {what} literal", path, line, col)
                if text[j] == "\\":
                    j += 2
                    continue
                if text[j] == c:
                    break
                j += 1
            yield _Tok("string" if c == '"' else "char", text[i : j + 1], line, col)
            i = j + 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            m = _FLOAT_RE.match(text, i)
            kind = "float"
            mi = _INT_RE.match(text, i)
            if m is None or (mi is not None and mi.end() > m.end()):
                m, kind = mi, "int"
            if m is None:
                raise LexError(f"malformed numeric literal {c!r}", path, line, col)
            end = m.end()
            # A numeric literal glued to identifier characters (``1abc``) is not a literal.
            if end < n and (text[end].isalnum() or text[end] in "_$"):
                raise LexError(
                    f"malformed numeric literal {text[i:end + 1]!r}", path, line, col
                )
            yield _Tok(kind, text[i:end], line, col)
            i = end
            continue
        if c.isalpha() or c in "_$":
            j = i + 1
            while j < n and (text[j].isalnum() or text[j] in "_$"):
                j += 1
            yield _Tok("ident", text[i:j], line, col)
            i = j
            continue
        if c in _OP_FIRST:
            for op in OPERATORS:
                if text.startswith(op, i):
                    yield _Tok("op", op, line, col)
                    i += len(op)
                    break
            continue
        raise LexError(f"unexpected character {c!r}", path, line, col)


def _escape_ws(literal: str) -> str:
    # Keeps a raw literal a single whitespace-free token while denoting the same value.
    return (
        literal.replace(" ", "\\u0020")
        .replace("\t", "\\t")
        .replace("\f", "\\f")
        .replace("\r", "\\r")
        .replace("\n", "\\n")
    )


def normalize_source(source: SourceFile | str, *, literals: bool = True) -> str:
    """Strip comments and blank lines and re-emit each line as space-separated tokens.

    With ``literals=True`` (the default) numeric and string/char literals are
    replaced by ``IntVal``, ``FloatVal`` and ``StringVal``.  With
    ``literals=False`` only comments are removed, the form used for the
    normalization ablation.
    """
    if isinstance(source, SourceFile):
        text, path = source.text, source.path
    else:
        text, path = source, "<string>"
    rows: dict[int, list[str]] = {}
    for tok in _scan(text, path):
        if literals and tok.kind == "int":
            out = INT_TOKEN
        elif literals and tok.kind == "float":
            out = FLOAT_TOKEN
        elif literals and tok.kind in ("string", "char"):
            out = STRING_TOKEN
        elif tok.kind in ("string", "char"):
            out = _escape_ws(tok.text)
        else:
            out = tok.text
        rows.setdefault(tok.line, []).append(out)
    return "\n".join(" ".join(rows[k]) for k in sorted(rows))


def strip_comments(source: SourceFile | str) -> str:
    return normalize_source(source, literals=False)


def lex(normalized: str, origin: str = "<string>") -> TokenSequence:
    tokens: list[str] = []
    lines: list[int] = []
    for tok in _scan(normalized, origin):
        tokens.append(tok.text)
        lines.append(tok.line - 1)
    loc = 0 if not normalized else normalized.count("\n") + 1
    return TokenSequence(origin, tokens, loc, lines)


def preprocess(source: SourceFile, *, literals: bool = True) -> TokenSequence:
    return lex(normalize_source(source, literals=literals), source.path)


def iter_java_files(root: str | os.PathLike) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    if not root.is_dir():
        raise FileNotFoundError(f"no such corpus directory: {root}")
    return sorted(p for p in root.rglob("*.java") if p.is_file())


def load_corpus(root: str | os.PathLike, *, literals: bool = True) -> list[TokenSequence]:
    """Read and preprocess every ``.java`` file under ``root`` in path order."""
    root = Path(root)
    seqs = []
    for p in iter_java_files(root):
        src = SourceFile.read(p)
        rel = p.relative_to(root).as_posix() if root.is_dir() else p.name
        seq = preprocess(SourceFile(rel, src.text), literals=literals)
        if seq.loc:
            seqs.append(seq)
    return seqs


def write_token_file(seq: TokenSequence, path: str | os.PathLike) -> None:
    """Persist a stream as ``.toks``: one normalized line per text line."""
    rows: dict[int, list[str]] = {}
    for tok, ln in zip(seq.tokens, seq.lines):
        rows.setdefault(ln, []).append(tok)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(rows):
            fh.write(" ".join(rows[k]) + "\n")


def read_token_file(path: str | os.PathLike, origin: str | None = None) -> TokenSequence:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return lex(text.rstrip("\n"), origin or str(path))


def windowize(ids: Sequence[int], tau: int, pad_id: int = 0) -> list[ContextWindow]:
    """Stride-1 windows: the ``tau`` ids preceding each position, left-padded."""
    if tau < 1:
        raise ValueError("tau must be positive")
    ids = list(ids)
    padded = [pad_id] * tau + ids
    return [
        ContextWindow(tuple(padded[t : t + tau]), ids[t]) for t in range(1, len(ids))
    ]


def window_arrays(ids: Sequence[int], tau: int, pad_id: int = 0):
    """Array form of :func:`windowize`: contexts ``(N, tau)`` and targets ``(N,)``."""
    if tau < 1:
        raise ValueError("tau must be positive")
    ids = np.asarray(ids, dtype=np.int64)
    n = max(0, ids.size - 1)
    padded = np.concatenate([np.full(tau, pad_id, dtype=np.int64), ids])
    if n == 0:
        return np.zeros((0, tau), dtype=np.int64), np.zeros(0, dtype=np.int64)
    X = np.lib.stride_tricks.sliding_window_view(padded, tau)[1 : n + 1].copy()
    return X, ids[1:].copy()


@dataclass
class FoldAssignment:
    """Maps ``(origin, first_line, last_line)`` line ranges to folds.

    Fold 0 is the test fold, fold 1 validation, the rest training.
    """

    fold_of_line: dict[tuple[str, int, int], int]
    k: int

    TEST = 0
    VALID = 1

    def sizes(self) -> list[int]:
        out = [0] * self.k
        for (_, lo, hi), f in self.fold_of_line.items():
            out[f] += hi - lo + 1
        return out

    def line_folds(self) -> dict[str, dict[int, int]]:
        out: dict[str, dict[int, int]] = {}
        for (origin, lo, hi), f in self.fold_of_line.items():
            per = out.setdefault(origin, {})
            for ln in range(lo, hi + 1):
                per[ln] = f
        return out

    def train_folds(self) -> list[int]:
        return list(range(2, self.k))


def split_folds(
    corpus: Sequence[TokenSequence], k: int = 10, seed: int = 0, granule: int = 1
) -> FoldAssignment:
    """Shuffle line ranges with ``seed`` and deal them greedily into ``k`` LOC-balanced folds."""
    if k < 3:
        raise ValueError("need at least 3 folds (test, validation, training)")
    if granule < 1:
        raise ValueError("granule must be positive")
    ranges = []
    for seq in corpus:
        for lo in range(0, seq.loc, granule):
            ranges.append((seq.origin, lo, min(lo + granule, seq.loc) - 1))
    total = sum(hi - lo + 1 for _, lo, hi in ranges)
    if total == 0:
        raise ValueError("corpus has no lines of code")
    if total < k:
        raise ValueError(f"corpus has {total} lines, fewer than {k} folds")
    random.Random(seed).shuffle(ranges)
    sizes = [0] * k
    assignment = {}
    for r in ranges:
        f = min(range(k), key=lambda i: (sizes[i], i))
        assignment[r] = f
        sizes[f] += r[2] - r[1] + 1
    return FoldAssignment(assignment, k)


def target_folds(seq: TokenSequence, line_folds: dict[str, dict[int, int]]) -> np.ndarray:
    """Fold of each window of ``seq`` (one per target position 1..len-1).

    ``line_folds`` is :meth:`FoldAssignment.line_folds`, computed once per corpus.
    """
    per = line_folds[seq.origin]
    return np.array([per[ln] for ln in seq.lines[1:]], dtype=np.int64)


def join_streams(streams: Iterable[TokenSequence]) -> list[str]:
    return [tok for s in streams for tok in s.tokens]
