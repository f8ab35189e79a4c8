"""Frame-wise path sampling from the CTC posterior and best-path decoding."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .alphabet import collapse
from .ctc import as_logits, log_softmax

RNG_ALGORITHM = "numpy.PCG64"

Seed = Union[int, Sequence[int], np.random.SeedSequence]


def seed_sequence(seed: Seed) -> np.random.SeedSequence:
    """Accepts an int, a sequence of ints (hashed together) or a SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (list, tuple)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


def seed_tag(ss: np.random.SeedSequence) -> str:
    spawn = ".".join(str(k) for k in ss.spawn_key)
    return f"{RNG_ALGORITHM}:{ss.entropy}:{spawn}"


def make_rng(seed: Seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed)))


@dataclass(frozen=True)
class SampleDraw:
    path: tuple[int, ...]
    transcription: tuple[int, ...]
    rng_state_tag: str = ""


def sample_path(logits, seed: Seed) -> SampleDraw:
    """Draw every frame independently from its softmax and collapse the result.

    Because path probabilities partition over transcriptions, the collapsed
    draw is an exact sample of the transcription posterior.
    """
    x = as_logits(logits)
    ss = seed_sequence(seed)
    u = make_rng(ss).random(x.shape[0])
    cdf = np.cumsum(np.exp(log_softmax(x)), axis=1)
    idx = (u[:, None] >= cdf[:, :-1]).sum(axis=1)
    path = tuple(int(i) for i in idx)
    return SampleDraw(path=path, transcription=collapse(path), rng_state_tag=seed_tag(ss))


def best_path(logits) -> tuple[int, ...]:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return tuple(int(i) for i in np.argmax(as_logits(logits), axis=1))


def greedy_decode(logits) -> tuple[int, ...]:
    return collapse(best_path(logits))
