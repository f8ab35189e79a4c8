"""Best-path, prefix beam search and exhaustive CTC decoding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .alphabet import BLANK, Alphabet, all_paths, check_budget, collapsed_paths
from .ctc import NEG_INF, as_logits, log_softmax, sequence_log_prob
from .errors import BudgetExceededError
from .sampler import greedy_decode

__all__ = ["BeamHypothesis", "beam_search", "exhaustive_decode", "greedy_decode", "no_lm"]

MAX_EXHAUSTIVE_T = 6
MAX_EXHAUSTIVE_K = 4

# (prefix, next label) -> log score added when the prefix is extended by that label
PrefixScorer = Callable[[tuple, int], float]


def no_lm(prefix: tuple, label: int) -> float:
    return 0.0


@dataclass
class BeamHypothesis:
    prefix: tuple
    log_p_blank: float = NEG_INF
    log_p_nonblank: float = NEG_INF
    # accumulated scorer contribution; zero with the default scorer
    lm_score: float = 0.0

    @property
    def total(self) -> float:
        return float(np.logaddexp(self.log_p_blank, self.log_p_nonblank))

    @property
    def score(self) -> float:
        return self.total + self.lm_score


def _rank_key(h: BeamHypothesis):
    return (-h.score, h.prefix)


def beam_search(
    logits,
    width: int,
    alphabet: Alphabet | None = None,
    *,
    scorer: PrefixScorer = no_lm,
) -> list[tuple[tuple, float]]:
    """CTC prefix beam search.

    Tracks the blank-ending and label-ending probability of every prefix and
    keeps the ``width`` best after each frame (ties broken by prefix order).
    Pruning discards path mass, so surviving prefixes are rescored with the
    exact forward score before the final ranking. Returns (transcription,
    score) pairs, best first; with the default scorer the score is log P(y|x).
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    lp = log_softmax(as_logits(logits, alphabet))
    T, K = lp.shape
    beams = {(): BeamHypothesis((), 0.0, NEG_INF)}
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple, BeamHypothesis] = {}

        def get(prefix, parent: BeamHypothesis, label=None):
            h = nxt.get(prefix)
            if h is None:
                lm = parent.lm_score if label is None else parent.lm_score + scorer(parent.prefix, label)
                h = nxt[prefix] = BeamHypothesis(prefix, lm_score=lm)
            return h

        for prefix, h in beams.items():
            total = np.logaddexp(h.log_p_blank, h.log_p_nonblank)
            # stay on the same prefix by emitting blank
            same = get(prefix, h)
            same.log_p_blank = np.logaddexp(same.log_p_blank, total + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                # repeated last label without a blank in between merges
                same.log_p_nonblank = np.logaddexp(same.log_p_nonblank, h.log_p_nonblank + row[last])
            for k in range(1, K):
                ext = get(prefix + (k,), h, k)
                src = h.log_p_blank if k == last else total
                ext.log_p_nonblank = np.logaddexp(ext.log_p_nonblank, src + row[k])
        # zero-probability prefixes (e.g. a repeat with no room for a blank) never come back
        ranked = sorted((h for h in nxt.values() if h.total > NEG_INF), key=_rank_key)[:width]
        beams = {h.prefix: h for h in ranked}
    for h in beams.values():
        h.log_p_blank, h.log_p_nonblank = sequence_log_prob(lp, h.prefix), NEG_INF
    ranked = sorted(beams.values(), key=_rank_key)
    return [(h.prefix, h.score) for h in ranked]


def transcription_marginals(logits, alphabet: Alphabet | None = None) -> dict[tuple, float]:
    """log P(y | x) for every transcription reachable in T frames, by enumerating all paths."""
    lp = log_softmax(as_logits(logits, alphabet))
    T, K = lp.shape
    if T > MAX_EXHAUSTIVE_T or K > MAX_EXHAUSTIVE_K:
        raise BudgetExceededError(f"exhaustive decoding limited to T <= {MAX_EXHAUSTIVE_T}, K <= {MAX_EXHAUSTIVE_K}")
    check_budget(T, K)
    path_lp = lp[np.arange(T), all_paths(T, K)].sum(axis=1)
    groups: dict[tuple, list[float]] = {}
    for y, v in zip(collapsed_paths(T, K), path_lp):
        groups.setdefault(y, []).append(v)
    out = {}
    for y, vals in groups.items():
        v = np.asarray(vals)
        m = v.max()
        out[y] = float(m + np.log(np.exp(v - m).sum()))
    return out


def exhaustive_decode(logits, alphabet: Alphabet | None = None) -> tuple[tuple, float]:
    """Most probable transcription by brute force; ties go to the lexicographically smallest."""
    marg = transcription_marginals(logits, alphabet)
    best = min(marg.items(), key=lambda kv: (-kv[1], kv[0]))
    return best
