"""Synthetic sequence-transduction corpora.

Every label symbol gets a fixed feature template. An utterance is a random
label sequence rendered frame by frame (each symbol held for a random
duration, with silent gaps), plus Gaussian noise. Noise level controls how
confusable the symbols are.
"""
from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .alphabet import Alphabet
from .data import SPLITS, Record, write_split

SPLIT_IDS = {name: i for i, name in enumerate(SPLITS)}


@dataclass(frozen=True)
class SynthSpec:
    num_symbols: int = 6
    label_len: tuple = (3, 8)
    frames_per_label: tuple = (2, 4)
    # silent frames between consecutive labels; a repeat always gets at least one
    gap_frames: tuple = (0, 1)
    edge_frames: tuple = (1, 3)
    n_features: int = 8
    n_channels: int = 1
    sigma: float = 1.0
    n_train: int = 400
    n_val: int = 100
    n_test: int = 200
    seed: int = 0
    per_utterance_norm: bool = False

    def __post_init__(self):
        for name in ("label_len", "frames_per_label", "gap_frames", "edge_frames"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (int(lo), int(hi)))
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: bad range {(lo, hi)}")
        if self.frames_per_label[0] < 1:
            raise ValueError("frames_per_label must be at least 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if not 1 <= self.num_symbols <= len(string.ascii_lowercase):
            raise ValueError("num_symbols must be in [1, 26]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def sizes(self) -> dict:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


def make_alphabet(spec: SynthSpec) -> Alphabet:
    return Alphabet(tuple(string.ascii_lowercase[: spec.num_symbols]))


def templates(spec: SynthSpec) -> np.ndarray:
    """(num_symbols, F, D) templates with unit RMS per entry, orthogonal when dimensions allow."""
    dim = spec.n_features * spec.n_channels
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(100,)))
    g = rng.standard_normal((dim, spec.num_symbols))
    if spec.num_symbols <= dim:
        q, _ = np.linalg.qr(g)
    else:
        q = g / np.linalg.norm(g, axis=0, keepdims=True)
    t = q.T * np.sqrt(dim)
    return t.reshape(spec.num_symbols, spec.n_features, spec.n_channels)


def _render(spec: SynthSpec, tmpl: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, ...]]:
    L = int(rng.integers(spec.label_len[0], spec.label_len[1] + 1))
    labels = rng.integers(0, spec.num_symbols, size=L)
    frames = []
    silence = np.zeros((spec.n_features, spec.n_channels))

    def hold(frame, n):
        frames.extend([frame] * n)

    hold(silence, int(rng.integers(spec.edge_frames[0], spec.edge_frames[1] + 1)))
    for i, sym in enumerate(labels):
        if i > 0:
            gap = int(rng.integers(spec.gap_frames[0], spec.gap_frames[1] + 1))
            if sym == labels[i - 1]:
                gap = max(gap, 1)
            hold(silence, gap)
        hold(tmpl[sym], int(rng.integers(spec.frames_per_label[0], spec.frames_per_label[1] + 1)))
    hold(silence, int(rng.integers(spec.edge_frames[0], spec.edge_frames[1] + 1)))
    if not frames:
        frames.append(silence)
    clean = np.stack(frames, axis=1)  # F x T x D
    noisy = clean + spec.sigma * rng.standard_normal(clean.shape)
    return noisy, tuple(int(s) + 1 for s in labels)


def _utterance_norm(x: np.ndarray) -> np.ndarray:
    std = x.std()
    return (x - x.mean()) / (std if std > 0 else 1.0)


def generate_corpus(spec: SynthSpec) -> tuple[dict[str, list[Record]], dict]:
    """Render all splits in memory; returns (splits, normalization stats)."""
    tmpl = templates(spec)
    raw: dict[str, list[Record]] = {}
    for split, n in spec.sizes().items():
        recs = []
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(SPLIT_IDS[split], i)))
            x, labels = _render(spec, tmpl, rng)
            if spec.per_utterance_norm:
                x = _utterance_norm(x)
            recs.append(Record(x, labels, f"{split}/{i:06d}"))
        raw[split] = recs
    if raw["train"]:
        frames = np.concatenate([r.features for r in raw["train"]], axis=1)
        mean = frames.mean(axis=1, keepdims=True)
        std = frames.std(axis=1, keepdims=True)
    else:
        mean = np.zeros((spec.n_features, 1, spec.n_channels))
        std = np.ones((spec.n_features, 1, spec.n_channels))
    std = np.where(std > 0, std, 1.0)
    for recs in raw.values():
        for r in recs:
            r.features = (r.features - mean) / std
    stats = {"mean": mean[:, 0, :].tolist(), "std": std[:, 0, :].tolist()}
    return raw, stats


def destandardize(features: np.ndarray, stats: dict) -> np.ndarray:
    mean = np.asarray(stats["mean"])[:, None, :]
    std = np.asarray(stats["std"])[:, None, :]
    return features * std + mean


def generate(spec: SynthSpec, out: str | Path) -> Path:
    """Write a full corpus (all splits, alphabet, spec and normalization stats) under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    splits, stats = generate_corpus(spec)
    make_alphabet(spec).save(out / "alphabet.json")
    for split, recs in splits.items():
        write_split(out, split, recs)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n")
    (out / "norm_stats.json").write_text(json.dumps(stats) + "\n")
    return out
