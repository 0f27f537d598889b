"""Token vocabulary and error-rate metrics."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError

BLANK = "<blank>"
UNK = "<unk>"
EOS = "<eos>"


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token inventory shared by the CTC head and the LM embeddings.

    Index 0 is blank, index 1 is unk and the last index is eos (used only in
    its end-of-sentence role). Everything in between is a real token.
    """

    tokens: tuple[str, ...]

    def __post_init__(self):
        toks = tuple(self.tokens)
        object.__setattr__(self, "tokens", toks)
        if len(toks) < 4:
            raise FormatError(f"vocabulary needs at least 4 entries, got {len(toks)}")
        seen = set()
        for t in toks:
            if t in seen:
                raise FormatError(f"duplicate token {t!r} in vocabulary")
            seen.add(t)
        if toks[0] != BLANK:
            raise FormatError(f"line 0 must be {BLANK!r}, found {toks[0]!r}")
        if toks[1] != UNK:
            raise FormatError(f"line 1 must be {UNK!r}, found {toks[1]!r}")
        if toks[-1] != EOS:
            raise FormatError(f"last line must be {EOS!r}, found {toks[-1]!r}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(toks)})

    @property
    def V(self) -> int:
        return len(self.tokens)

    @property
    def blank_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return len(self.tokens) - 1

    @property
    def real_ids(self) -> list[int]:
        """Ids of the non-special tokens (the search vocabulary)."""
        return list(range(2, len(self.tokens) - 1))

    @property
    def num_real(self) -> int:
        return len(self.tokens) - 3

    def __len__(self):
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self._index.get(w, 1) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def digest(self) -> str:
        """sha256 over the newline-joined tokens; identifies the inventory."""
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    @classmethod
    def synthetic(cls, num_real: int) -> Vocabulary:
        """Vocabulary with ``num_real`` single-letter-ish tokens."""
        alphabet = "abcdefghijklmnopqrstuvwxyz"
        names = [alphabet[i] if i < 26 else f"t{i}" for i in range(num_real)]
        return cls((BLANK, UNK, *names, EOS))


def load_vocab(path) -> Vocabulary:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: not valid UTF-8") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocabulary(tuple(lines))


def save_vocab(vocab: Vocabulary, path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8", newline="\n")


@dataclass(frozen=True)
class ErrorCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.reference_length <= 0:
            raise ValueError("error rate undefined for an empty reference")
        return self.errors / self.reference_length

    def __add__(self, other: ErrorCounts) -> ErrorCounts:
        return ErrorCounts(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.reference_length + other.reference_length,
        )


def edit_distance(ref: Sequence, hyp: Sequence) -> ErrorCounts:
    """Levenshtein alignment with unit costs.

    On the backtrace, equally cheap moves are resolved as substitution (or
    match) first, then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        row, prev = D[i], D[i - 1]
        r = ref[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)

    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and D[i][j] == D[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and D[i][j] == D[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return ErrorCounts(s, ins, dels, n)


def corpus_error_rate(pairs: Iterable[tuple[Sequence, Sequence]]) -> float:
    """Total edits over total reference length for (ref, hyp) pairs."""
    total = ErrorCounts()
    count = 0
    for ref, hyp in pairs:
        total = total + edit_distance(ref, hyp)
        count += 1
    if count == 0:
        raise ValueError("corpus is empty")
    return total.rate
