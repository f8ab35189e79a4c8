"""On-disk dataset format.

A dataset directory looks like::

    <root>/alphabet.json        JSON list of label symbols (blank is implicit)
    <root>/<split>/NNNNNN.rec   one record per utterance, split in {train, val, test}

Each ``.rec`` file is little-endian:

    offset  size        field
    0       4           magic b"CTR1"
    4       4           uint32 F  (frequency bins)
    8       4           uint32 T  (frames)
    12      4           uint32 D  (channels)
    16      4           uint32 L  (reference length)
    20      8*F*T*D     float64 features, C order over (F, T, D)
    ...     4*L         uint32 reference labels, indices into the blank-augmented alphabet (1..K-1)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .alphabet import Alphabet, check_transcription, is_feasible
from .errors import InfeasibleTargetError, InvalidInputError

MAGIC = b"CTR1"
HEADER = struct.Struct("<4sIIII")
SPLITS = ("train", "val", "test")


@dataclass
class Record:
    features: np.ndarray  # F x T x D
    labels: tuple[int, ...]
    name: str = ""

    @property
    def frames(self) -> int:
        return self.features.shape[1]


def encode_record(rec: Record) -> bytes:
    x = np.ascontiguousarray(rec.features, dtype="<f8")
    if x.ndim != 3:
        raise InvalidInputError("features must be F x T x D")
    F, T, D = x.shape
    labels = np.asarray(rec.labels, dtype="<u4")
    return HEADER.pack(MAGIC, F, T, D, len(labels)) + x.tobytes() + labels.tobytes()


def decode_record(buf: bytes, name: str = "") -> Record:
    if len(buf) < HEADER.size:
        raise InvalidInputError(f"{name}: truncated header")
    magic, F, T, D, L = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise InvalidInputError(f"{name}: bad magic {magic!r}")
    n = F * T * D
    expected = HEADER.size + 8 * n + 4 * L
    if len(buf) != expected:
        raise InvalidInputError(f"{name}: expected {expected} bytes, found {len(buf)}")
    x = np.frombuffer(buf, dtype="<f8", count=n, offset=HEADER.size).reshape(F, T, D).astype(np.float64)
    labels = np.frombuffer(buf, dtype="<u4", count=L, offset=HEADER.size + 8 * n)
    return Record(x, tuple(int(v) for v in labels), name)


def write_split(root: str | Path, split: str, records: Sequence[Record]) -> None:
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        (d / f"{i:06d}.rec").write_bytes(encode_record(rec))


def read_split(root: str | Path, split: str) -> list[Record]:
    d = Path(root) / split
    if not d.is_dir():
        raise FileNotFoundError(f"no split directory {d}")
    return [decode_record(p.read_bytes(), f"{split}/{p.name}") for p in sorted(d.glob("*.rec"))]


def load_alphabet(root: str | Path) -> Alphabet:
    return Alphabet.load(Path(root) / "alphabet.json")


def validate_records(records: Sequence[Record], alphabet: Alphabet, frames_of=lambda T: T) -> None:
    """Reject records whose reference cannot be aligned to the model's output frames.

    ``frames_of`` maps input frames to output frames (time striding).
    """
    bad = []
    for rec in records:
        labels = check_transcription(rec.labels, alphabet)
        if not is_feasible(labels, frames_of(rec.frames)):
            bad.append(rec.name or "<unnamed>")
    if bad:
        raise InfeasibleTargetError(f"references too long for their inputs: {', '.join(bad)}")
