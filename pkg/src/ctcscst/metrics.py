"""Edit distance, error rates and the reward used by the policy objective."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence


@dataclass(frozen=True)
class EditStats:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    def __add__(self, other: "EditStats") -> "EditStats":
        return EditStats(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )

    @property
    def rate(self) -> float:
        return _rate(self.distance, self.ref_len)


def _rate(distance: int, ref_len: int) -> float:
    # empty reference: every hypothesis token counts as one full error
    return distance / ref_len if ref_len > 0 else float(distance)


def edit_distance(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> EditStats:
    """Unit-cost Levenshtein alignment of ``hyp`` against ``ref``.

    Insertions are extra hypothesis tokens, deletions are reference tokens
    missing from the hypothesis. The backtrace prefers substitution/match,
    then deletion, then insertion, so the decomposition is reproducible.
    """
    hyp = list(hyp)
    ref = list(ref)
    n, m = len(hyp), len(ref)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    d[0] = list(range(m + 1))
    for i in range(1, n + 1):
        hi = hyp[i - 1]
        row, up = d[i], d[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j - 1] + (hi != ref[j - 1]), up[j] + 1, row[j - 1] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]):
            subs += hyp[i - 1] != ref[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i][j] == d[i][j - 1] + 1:
            dels += 1
            j -= 1
        else:
            ins += 1
            i -= 1
    return EditStats(int(subs), ins, dels, m)


def error_rate(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> float:
    """Edit distance over reference length. May exceed 1."""
    return edit_distance(hyp, ref).rate


def reward(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> float:
    """1 - min(1, error rate): 1 for an exact match, 0 once the error rate reaches 1."""
    return 1.0 - min(1.0, error_rate(hyp, ref))


def corpus_stats(pairs) -> EditStats:
    """Sum EditStats over (hyp, ref) pairs; ``.rate`` is total edits over total reference length."""
    total = EditStats(0, 0, 0, 0)
    for hyp, ref in pairs:
        total = total + edit_distance(hyp, ref)
    return total


def split_words(symbols: Sequence[str], separator: str | None) -> list[str]:
    """Word tokens of a symbol sequence. Without a separator every symbol is a word."""
    if separator is None:
        return list(symbols)
    return [w for w in "".join(symbols).split(separator) if w]
