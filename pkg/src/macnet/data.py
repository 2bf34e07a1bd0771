"""Vocabulary, JSONL datasets, batching and binary checkpoints."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .gridworld import QAInstance, Scene, answer_vocabulary, word_vocabulary

PAD = "<pad>"


class DatasetParseError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class Vocab:
    """Word and answer id maps; word id 0 is padding."""

    def __init__(self, words: Sequence[str], answers: Sequence[str]):
        words = [w for w in words if w != PAD]
        self.words = [PAD, *words]
        self.answers = list(answers)
        self.word_to_id = {w: i for i, w in enumerate(self.words)}
        self.answer_to_id = {a: i for i, a in enumerate(self.answers)}
        if len(self.word_to_id) != len(self.words) or len(self.answer_to_id) != len(self.answers):
            raise ValueError("duplicate vocabulary entries")

    @classmethod
    def default(cls, grid_size: int = 5) -> "Vocab":
        return cls(word_vocabulary(), answer_vocabulary(grid_size))

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.word_to_id[w] for w in tokens]
        except KeyError as e:
            raise KeyError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids if i != 0]

    def answer_id(self, answer: str) -> int:
        return self.answer_to_id[answer]

    def to_dict(self) -> dict:
        return {"words": self.words, "answers": self.answers}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["words"], d["answers"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- datasets

def dumps_instance(inst: QAInstance) -> str:
    return json.dumps(inst.to_dict(), sort_keys=True, separators=(",", ":"))


def write_dataset(instances: Sequence[QAInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(dumps_instance(inst) + "\n")


def read_dataset(path) -> list[QAInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(QAInstance.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetParseError(f"{path}:{lineno}: {e}") from e
    return out


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    tokens: np.ndarray  # [B x S_max], 0 = padding
    lengths: np.ndarray
    scenes: list[Scene]
    answers: np.ndarray
    indices: np.ndarray  # positions in the source dataset

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]


def encode_batch(instances: Sequence[QAInstance], vocab: Vocab, indices=None) -> Batch:
    lengths = np.array([len(inst.tokens) for inst in instances], dtype=np.int64)
    if lengths.size and lengths.min() < 1:
        raise ValueError("question with no tokens")
    tokens = np.zeros((len(instances), int(lengths.max(initial=1))), dtype=np.int64)
    for row, inst in enumerate(instances):
        tokens[row, :len(inst.tokens)] = vocab.encode(inst.tokens)
    answers = np.array([vocab.answer_id(inst.answer) for inst in instances], dtype=np.int64)
    idx = np.arange(len(instances)) if indices is None else np.asarray(indices)
    return Batch(tokens, lengths, [inst.scene for inst in instances], answers, idx)


def make_batches(instances: Sequence[QAInstance], vocab: Vocab, batch_size: int, seed: int = 0,
                 shuffle: bool = True) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(instances))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(instances))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield encode_batch([instances[i] for i in idx], vocab, idx)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MACCKPT1"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write ``MAGIC``, a u64 manifest length, the JSON manifest, then raw little-endian float64s."""
    names = list(arrays)
    manifest = {
        "config_hash": config_hash(config),
        "config": config,
        "params": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path, expected_config: dict | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    if expected_config is not None and manifest["config_hash"] != config_hash(expected_config):
        raise CheckpointError(f"{path}: config hash mismatch")
    arrays, offset = {}, 16 + n
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return manifest, arrays
