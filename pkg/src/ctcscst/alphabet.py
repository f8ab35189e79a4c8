"""Label alphabet, blank convention and the CTC collapse mapping."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BudgetExceededError, InvalidInputError

BLANK = 0
BLANK_MARKER = "<blank>"

# log(|Omega|^T) above this refuses to enumerate (about 4.2M paths)
ENUMERATION_BUDGET = math.log(2**22)


@dataclass(frozen=True)
class Alphabet:
    """Ordered label symbols. Omega index 0 is blank, label i lives at index i + 1."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        symbols = tuple(str(s) for s in self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(set(symbols)) != len(symbols):
            raise InvalidInputError(f"duplicate symbols in alphabet: {symbols}")
        if BLANK_MARKER in symbols:
            raise InvalidInputError(f"{BLANK_MARKER!r} is reserved for blank")
        if not symbols:
            raise InvalidInputError("alphabet needs at least one label symbol")

    @property
    def blank_index(self) -> int:
        return BLANK

    @property
    def size(self) -> int:
        """|Omega|, i.e. the number of logit columns."""
        return len(self.symbols) + 1

    def __len__(self) -> int:
        return self.size

    def index(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol) + 1
        except ValueError:
            raise InvalidInputError(f"unknown symbol {symbol!r}") from None

    def encode(self, symbols: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.index(s) for s in symbols)

    def decode(self, indices: Sequence[int]) -> list[str]:
        out = []
        for i in indices:
            i = int(i)
            if i == BLANK:
                out.append(BLANK_MARKER)
            elif 0 < i < self.size:
                out.append(self.symbols[i - 1])
            else:
                raise InvalidInputError(f"index {i} outside alphabet of size {self.size}")
        return out

    def to_json(self) -> str:
        return json.dumps(list(self.symbols))

    @classmethod
    def from_json(cls, text: str) -> "Alphabet":
        data = json.loads(text)
        if not isinstance(data, list):
            raise InvalidInputError("alphabet JSON must be a list of symbol strings")
        return cls(tuple(data))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Alphabet":
        return cls.from_json(Path(path).read_text())


def check_path(path: Sequence[int], alphabet: Alphabet) -> tuple[int, ...]:
    out = tuple(int(p) for p in path)
    for p in out:
        if not 0 <= p < alphabet.size:
            raise InvalidInputError(f"path element {p} outside [0, {alphabet.size})")
    return out


def check_transcription(labels: Sequence[int], alphabet: Alphabet) -> tuple[int, ...]:
    out = tuple(int(p) for p in labels)
    for p in out:
        if not 0 < p < alphabet.size:
            raise InvalidInputError(f"transcription element {p} outside [1, {alphabet.size})")
    return out


def collapse(path: Sequence[int], alphabet: Alphabet | None = None) -> tuple[int, ...]:
    """Merge consecutive repeats, then drop blanks."""
    if alphabet is not None:
        path = check_path(path, alphabet)
    out = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != BLANK:
            out.append(p)
        prev = p
    return tuple(out)


def num_repeats(labels: Sequence[int]) -> int:
    """Number of adjacent equal pairs; each one forces an extra blank frame."""
    return sum(1 for a, b in zip(labels, labels[1:]) if a == b)


def min_frames(labels: Sequence[int]) -> int:
    """Shortest path length that can collapse to ``labels``."""
    return len(labels) + num_repeats(labels)


def is_feasible(labels: Sequence[int], T: int) -> bool:
    return min_frames(labels) <= T


def check_budget(T: int, K: int, budget: float = ENUMERATION_BUDGET) -> None:
    if T * math.log(max(K, 1)) > budget:
        raise BudgetExceededError(f"enumerating {K}^{T} paths exceeds the budget")


@lru_cache(maxsize=64)
def all_paths(T: int, K: int) -> np.ndarray:
    """Every length-T path over K symbols, as a (K**T, T) array in lexicographic order."""
    check_budget(T, K)
    return np.array(list(itertools.product(range(K), repeat=T)), dtype=np.int64).reshape(-1, T)


@lru_cache(maxsize=64)
def collapsed_paths(T: int, K: int) -> tuple[tuple[int, ...], ...]:
    return tuple(collapse(p) for p in all_paths(T, K))


def inverse_image_size(transcription: Sequence[int], T: int, alphabet: Alphabet) -> int:
    """Count length-T paths collapsing to ``transcription`` by brute-force enumeration.

    Only meant for tiny problems; raises BudgetExceededError otherwise.
    """
    if T < 1:
        raise InvalidInputError("T must be at least 1")
    target = check_transcription(transcription, alphabet)
    if len(target) > T:
        raise InvalidInputError("transcription longer than T")
    check_budget(T, alphabet.size)
    return sum(1 for c in collapsed_paths(T, alphabet.size) if c == target)
