"""Exact CTC log-likelihood and its gradient with respect to the logits.

Everything runs in float64 and in log space. A target that no alignment
can produce scores ``-inf``; asking for its gradient raises.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .alphabet import (
    BLANK,
    Alphabet,
    all_paths,
    check_budget,
    check_transcription,
    collapsed_paths,
    is_feasible,
    min_frames,
)
from .errors import BudgetExceededError, InfeasibleTargetError, InvalidInputError

NEG_INF = -np.inf

# brute-force oracle limits
MAX_BRUTE_T = 8
MAX_BRUTE_K = 4


@dataclass
class LossGrad:
    """Scalar loss (nats) and its gradient with respect to a T x K logit matrix."""

    loss: float
    grad: np.ndarray
    parts: dict = field(default_factory=dict)


def as_logits(logits, alphabet: Alphabet | None = None) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 2:
        raise InvalidInputError(f"logits must be T x K with T >= 1, K >= 2; got shape {x.shape}")
    if alphabet is not None and x.shape[1] != alphabet.size:
        raise InvalidInputError(f"logits have {x.shape[1]} columns, alphabet needs {alphabet.size}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("logits contain non-finite values")
    return x


def log_softmax(logits) -> np.ndarray:
    x = as_logits(logits)
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _expand(target: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Blank-interleaved label sequence and the mask of states allowed to skip back two."""
    S = 2 * len(target) + 1
    ext = np.full(S, BLANK, dtype=np.int64)
    ext[1::2] = target
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return ext, skip


def _alpha(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    T = lp.shape[0]
    S = ext.shape[0]
    emit = lp[:, ext]
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    shift1 = np.full(S, NEG_INF)
    shift2 = np.full(S, NEG_INF)
    for t in range(1, T):
        prev = alpha[t - 1]
        shift1[1:] = prev[:-1]
        shift2[2:] = np.where(skip[2:], prev[:-2], NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, shift1), shift2) + emit[t]
    return alpha


def _beta(lp: np.ndarray, ext: np.ndarray, skip: np.ndarray) -> np.ndarray:
    """Log-probability of finishing the target from state s at frame t, excluding frame t's emission."""
    T = lp.shape[0]
    S = ext.shape[0]
    emit = lp[:, ext]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    # a state at s can be entered from s - 2 iff skip[s]
    skip_from = np.zeros(S, dtype=bool)
    skip_from[:-2] = skip[2:]
    nxt1 = np.full(S, NEG_INF)
    nxt2 = np.full(S, NEG_INF)
    for t in range(T - 2, -1, -1):
        e = beta[t + 1] + emit[t + 1]
        nxt1[:-1] = e[1:]
        nxt2[:-2] = np.where(skip_from[:-2], e[2:], NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(e, nxt1), nxt2)
    return beta


def _final(alpha: np.ndarray) -> float:
    last = alpha[-1]
    if last.shape[0] == 1:
        return float(last[0])
    return float(np.logaddexp(last[-1], last[-2]))


def ctc_forward(logits, target: Sequence[int], alphabet: Alphabet) -> float:
    """log P(target | logits), marginalized over all alignments; ``-inf`` when infeasible."""
    x = as_logits(logits, alphabet)
    labels = check_transcription(target, alphabet)
    if not is_feasible(labels, x.shape[0]):
        return NEG_INF
    ext, skip = _expand(labels)
    with np.errstate(invalid="ignore"):
        return _final(_alpha(log_softmax(x), ext, skip))


def sequence_log_prob(log_probs: np.ndarray, labels: tuple[int, ...]) -> float:
    """Forward score from already-normalized log-probabilities; no validation."""
    if not is_feasible(labels, log_probs.shape[0]):
        return NEG_INF
    ext, skip = _expand(labels)
    with np.errstate(invalid="ignore"):
        return _final(_alpha(log_probs, ext, skip))


def ctc_grad(logits, target: Sequence[int], alphabet: Alphabet) -> LossGrad:
    """Negative log-likelihood and its gradient from the forward-backward occupancies."""
    x = as_logits(logits, alphabet)
    labels = check_transcription(target, alphabet)
    if not is_feasible(labels, x.shape[0]):
        raise InfeasibleTargetError(
            f"target of length {len(labels)} needs at least {min_frames(labels)} frames, got {x.shape[0]}"
        )
    lp = log_softmax(x)
    ext, skip = _expand(labels)
    with np.errstate(invalid="ignore"):
        alpha = _alpha(lp, ext, skip)
        beta = _beta(lp, ext, skip)
    log_p = _final(alpha)
    occupancy = np.exp(alpha + beta - log_p)  # posterior of being in state s at frame t
    grad = np.exp(lp)
    np.subtract.at(grad, (slice(None), ext), occupancy)
    return LossGrad(loss=-log_p, grad=grad)


def ctc_brute_force(logits, target: Sequence[int], alphabet: Alphabet) -> float:
    """Literal sum of path probabilities over every path that collapses to ``target``."""
    x = as_logits(logits, alphabet)
    labels = check_transcription(target, alphabet)
    T, K = x.shape
    if T > MAX_BRUTE_T or K > MAX_BRUTE_K:
        raise BudgetExceededError(f"brute force limited to T <= {MAX_BRUTE_T}, K <= {MAX_BRUTE_K}")
    check_budget(T, K)
    lp = log_softmax(x)
    paths = all_paths(T, K)
    hits = np.fromiter((c == labels for c in collapsed_paths(T, K)), dtype=bool, count=len(paths))
    if not hits.any():
        return NEG_INF
    path_lp = lp[np.arange(T), paths[hits]].sum(axis=1)
    m = path_lp.max()
    return float(m + np.log(np.exp(path_lp - m).sum()))


def _batch_tables(lps: list[np.ndarray], targets: list[tuple[int, ...]]):
    B = len(lps)
    K = lps[0].shape[1]
    T = np.array([lp.shape[0] for lp in lps])
    S = np.array([2 * len(y) + 1 for y in targets])
    Tm, Sm = T.max(), S.max()
    lp_pad = np.zeros((B, Tm, K))
    ext = np.full((B, Sm), BLANK, dtype=np.int64)
    skip = np.zeros((B, Sm), dtype=bool)
    for b, (lp, y) in enumerate(zip(lps, targets)):
        lp_pad[b, : T[b]] = lp
        e, s = _expand(y)
        ext[b, : S[b]] = e
        skip[b, : S[b]] = s
    emit = np.take_along_axis(lp_pad, np.broadcast_to(ext[:, None, :], (B, Tm, Sm)), axis=2)
    emit = np.where(np.arange(Sm)[None, None, :] >= S[:, None, None], NEG_INF, emit)
    return lp_pad, ext, skip, emit, T, S


def ctc_grad_batch(logits_list, targets, alphabet: Alphabet) -> list[LossGrad]:
    """ctc_grad over several utterances at once (padded and masked); same results, fewer Python loops."""
    xs = [as_logits(x, alphabet) for x in logits_list]
    ys = [check_transcription(y, alphabet) for y in targets]
    if len(xs) != len(ys):
        raise InvalidInputError("need one target per logit matrix")
    if not xs:
        return []
    for x, y in zip(xs, ys):
        if not is_feasible(y, x.shape[0]):
            raise InfeasibleTargetError(f"target of length {len(y)} needs at least {min_frames(y)} frames, got {x.shape[0]}")
    lps = [log_softmax(x) for x in xs]
    lp_pad, ext, skip, emit, T, S = _batch_tables(lps, ys)
    B, Tm, Sm = emit.shape
    rows = np.arange(B)
    with np.errstate(invalid="ignore"):
        alpha = np.full((B, Tm, Sm), NEG_INF)
        alpha[:, 0, 0] = emit[:, 0, 0]
        if Sm > 1:
            alpha[:, 0, 1] = emit[:, 0, 1]
        sh1 = np.full((B, Sm), NEG_INF)
        sh2 = np.full((B, Sm), NEG_INF)
        for t in range(1, Tm):
            prev = alpha[:, t - 1]
            sh1[:, 1:] = prev[:, :-1]
            sh2[:, 2:] = np.where(skip[:, 2:], prev[:, :-2], NEG_INF)
            alpha[:, t] = np.logaddexp(np.logaddexp(prev, sh1), sh2) + emit[:, t]
        last = alpha[rows, T - 1]
        log_p = np.logaddexp(last[rows, S - 1], np.where(S > 1, last[rows, np.maximum(S - 2, 0)], NEG_INF))

        terminal = np.full((B, Sm), NEG_INF)
        terminal[rows, S - 1] = 0.0
        terminal[rows[S > 1], (S - 2)[S > 1]] = 0.0
        skip_from = np.zeros((B, Sm), dtype=bool)
        skip_from[:, :-2] = skip[:, 2:]
        beta = np.full((B, Tm, Sm), NEG_INF)
        n1 = np.full((B, Sm), NEG_INF)
        n2 = np.full((B, Sm), NEG_INF)
        for t in range(Tm - 1, -1, -1):
            if t == Tm - 1:
                rec = np.full((B, Sm), NEG_INF)
            else:
                e = beta[:, t + 1] + emit[:, t + 1]
                n1[:, :-1] = e[:, 1:]
                n2[:, :-2] = np.where(skip_from[:, :-2], e[:, 2:], NEG_INF)
                rec = np.logaddexp(np.logaddexp(e, n1), n2)
            at_end = (T - 1 == t)[:, None]
            beta[:, t] = np.where(at_end, terminal, np.where((t < T - 1)[:, None], rec, NEG_INF))
        occupancy = np.exp(alpha + beta - log_p[:, None, None])
    onehot = np.zeros((B, Sm, lp_pad.shape[2]))
    onehot[rows[:, None], np.arange(Sm)[None, :], ext] = 1.0
    onehot[np.arange(Sm)[None, :] >= S[:, None]] = 0.0
    post = occupancy @ onehot
    out = []
    for b in range(B):
        grad = np.exp(lps[b]) - post[b, : T[b]]
        out.append(LossGrad(loss=-float(log_p[b]), grad=grad))
    return out
