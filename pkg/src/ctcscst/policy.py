"""REINFORCE / self-critical gradient estimators and the mixed CTC + policy objective.

All gradients are with respect to the logits; the model turns them into
parameter gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .alphabet import Alphabet, check_transcription
from .ctc import LossGrad, as_logits, ctc_grad, ctc_grad_batch
from .metrics import reward
from .sampler import SampleDraw, Seed, greedy_decode, sample_path, seed_sequence


@dataclass
class PolicyEstimate:
    """One Monte Carlo policy-gradient estimate.

    ``loss_estimate`` is the surrogate -weight * log P(y_s | x). Its gradient
    is the estimator, but its value is not the expected negative reward.
    """

    loss_estimate: float
    grad: np.ndarray
    reward_sample: float
    reward_baseline: float
    samples: tuple[SampleDraw, ...]

    @property
    def sample(self) -> SampleDraw:
        return self.samples[0]

    @property
    def weight(self) -> float:
        return self.reward_sample - self.reward_baseline


@dataclass(frozen=True)
class MixedLossConfig:
    lam: float = 0.1
    use_scst: bool = True
    num_samples: int = 1

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")


def _draws(x: np.ndarray, seed: Seed | None, draws, num_samples: int) -> tuple[SampleDraw, ...]:
    if draws is not None:
        if isinstance(draws, SampleDraw):
            return (draws,)
        return tuple(draws)
    if seed is None:
        raise ValueError("either a seed or explicit draws are required")
    ss = seed_sequence(seed)
    if num_samples == 1:
        return (sample_path(x, ss),)
    return tuple(sample_path(x, child) for child in ss.spawn(num_samples))


def _estimate(x, ref, alphabet, baseline, draws_) -> PolicyEstimate:
    grad = np.zeros_like(x)
    loss = 0.0
    rewards = []
    for draw in draws_:
        r = reward(draw.transcription, ref)
        rewards.append(r)
        weight = r - baseline
        if weight == 0.0:
            continue
        # a collapsed sample is always feasible for the frames it was drawn from
        lg = ctc_grad(x, draw.transcription, alphabet)
        grad += weight * lg.grad
        loss += weight * lg.loss
    n = len(draws_)
    if n > 1:
        grad /= n
        loss /= n
    return PolicyEstimate(
        loss_estimate=loss,
        grad=grad,
        reward_sample=float(np.mean(rewards)),
        reward_baseline=baseline,
        samples=draws_,
    )


def reinforce_grad(
    logits,
    ref: Sequence[int],
    alphabet: Alphabet,
    seed: Seed | None = None,
    *,
    num_samples: int = 1,
    draws=None,
) -> PolicyEstimate:
    """-r(y_s) * grad log P(y_s | x) with y_s drawn from the model.

    ``draws`` bypasses sampling; used to freeze the sample or to enumerate them.
    """
    x = as_logits(logits, alphabet)
    ref = check_transcription(ref, alphabet)
    return _estimate(x, ref, alphabet, 0.0, _draws(x, seed, draws, num_samples))


def scst_grad(
    logits,
    ref: Sequence[int],
    alphabet: Alphabet,
    seed: Seed | None = None,
    *,
    num_samples: int = 1,
    draws=None,
) -> PolicyEstimate:
    """Self-critical estimator: the reward of the greedy decode is the baseline."""
    x = as_logits(logits, alphabet)
    ref = check_transcription(ref, alphabet)
    baseline = reward(greedy_decode(x), ref)
    return _estimate(x, ref, alphabet, baseline, _draws(x, seed, draws, num_samples))


def mixed_loss(
    logits,
    ref: Sequence[int],
    alphabet: Alphabet,
    cfg: MixedLossConfig,
    seed: Seed | None = None,
    *,
    draws=None,
) -> LossGrad:
    """-log P(ref | x) + lambda * policy surrogate, with the matching logit gradient.

    Raises InfeasibleTargetError when ``ref`` cannot fit in the available frames.
    """
    x = as_logits(logits, alphabet)
    ml = ctc_grad(x, ref, alphabet)
    parts = {"ctc_loss": ml.loss}
    if cfg.lam == 0.0:
        return LossGrad(ml.loss, ml.grad, parts)
    estimator = scst_grad if cfg.use_scst else reinforce_grad
    est = estimator(x, ref, alphabet, seed, num_samples=cfg.num_samples, draws=draws)
    parts.update(
        policy_loss=est.loss_estimate,
        reward_sample=est.reward_sample,
        reward_baseline=est.reward_baseline,
    )
    return LossGrad(ml.loss + cfg.lam * est.loss_estimate, ml.grad + cfg.lam * est.grad, parts)


def mixed_loss_batch(logits_list, refs, alphabet: Alphabet, cfg: MixedLossConfig, seeds) -> list[LossGrad]:
    """mixed_loss for a whole mini-batch, sharing one batched CTC pass for references and samples."""
    xs = [as_logits(x, alphabet) for x in logits_list]
    refs = [check_transcription(r, alphabet) for r in refs]
    ml = ctc_grad_batch(xs, refs, alphabet)
    if cfg.lam == 0.0:
        return [LossGrad(m.loss, m.grad, {"ctc_loss": m.loss}) for m in ml]
    jobs = []  # (utterance, weight, sample transcription)
    info = []
    for i, (x, ref, seed) in enumerate(zip(xs, refs, seeds)):
        baseline = reward(greedy_decode(x), ref) if cfg.use_scst else 0.0
        draws_ = _draws(x, seed, None, cfg.num_samples)
        rewards = [reward(d.transcription, ref) for d in draws_]
        for d, r in zip(draws_, rewards):
            if r - baseline != 0.0:
                jobs.append((i, r - baseline, d.transcription))
        info.append((float(np.mean(rewards)), baseline))
    scored = ctc_grad_batch([xs[i] for i, _, _ in jobs], [y for _, _, y in jobs], alphabet)
    pol_grad = [np.zeros_like(x) for x in xs]
    pol_loss = [0.0] * len(xs)
    for (i, w, _), lg in zip(jobs, scored):
        pol_grad[i] += w * lg.grad
        pol_loss[i] += w * lg.loss
    out = []
    n = cfg.num_samples
    for i, m in enumerate(ml):
        g, pl = pol_grad[i], pol_loss[i]
        if n > 1:
            g /= n
            pl /= n
        parts = {"ctc_loss": m.loss, "policy_loss": pl, "reward_sample": info[i][0], "reward_baseline": info[i][1]}
        out.append(LossGrad(m.loss + cfg.lam * pl, m.grad + cfg.lam * g, parts))
    return out
