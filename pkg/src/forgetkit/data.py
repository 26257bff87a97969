"""Corpus ingestion, document-level splits, MLM masking and experience replay."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import BOS_ID, MASK_ID, NUM_SPECIAL, PAD_ID

MIN_TAIL = 8


class NoTargetsError(ValueError):
    """Masking selected no positions, even after one resample."""


def tokenize(text: str) -> np.ndarray:
    """Byte-level ids, shifted past the special tokens."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64) + NUM_SPECIAL


def detokenize(ids) -> str:
    raw = bytes(int(i) - NUM_SPECIAL for i in ids if int(i) >= NUM_SPECIAL)
    return raw.decode("utf-8", errors="replace")


@dataclass
class Corpus:
    domain: str
    documents: list[np.ndarray]
    path: str = ""
    doc_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.doc_ids:
            self.doc_ids = list(range(len(self.documents)))

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def num_tokens(self) -> int:
        return int(sum(len(d) for d in self.documents))


@dataclass(frozen=True)
class Segment:
    """``<s>`` followed by one contiguous window of a document."""
    ids: np.ndarray
    domain: str
    doc_id: int
    offset: int

    def __len__(self) -> int:
        return len(self.ids)


def split_documents(text: str) -> list[str]:
    return [d.strip() for d in re.split(r"\n\s*\n", text) if d.strip()]


def read_documents(path) -> list[tuple[str, int, str]]:
    """(source, offset, document) triples in canonical order: sorted by path, then offset."""
    path = Path(path)
    files = sorted(p for p in path.rglob("*.txt")) if path.is_dir() else [path]
    out = []
    for f in files:
        try:
            text = f.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise OSError(f"cannot read corpus file {f}: {exc}") from exc
        out.extend((str(f), i, doc) for i, doc in enumerate(split_documents(text)))
    return out


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = int(round(0.8 * n))
    n_valid = max(1, int(round(0.1 * n)))
    n_test = n - n_train - n_valid
    if n_test < 1:
        n_train -= 1 - n_test
        n_test = 1
    return n_train, n_valid, n_test


def ingest(path, domain: str, seed: int, vocab_size: int | None = None) -> tuple[Corpus, Corpus, Corpus]:
    """Read blank-line separated documents and split them 8:1:1 at the document level."""
    docs = read_documents(path)
    if len(docs) < 10:
        raise ValueError(f"{path}: need at least 10 documents, found {len(docs)}")
    ids = [tokenize(d) for _, _, d in docs]
    if vocab_size is not None:
        for i, d in enumerate(ids):
            if d.max() >= vocab_size:
                raise ValueError(f"document {i} has a byte outside vocab_size={vocab_size}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train, n_valid, _ = split_counts(len(ids))
    parts = (order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:])
    return tuple(
        Corpus(domain, [ids[i] for i in part], str(path), [int(i) for i in part]) for part in parts
    )


def segment(corpus: Corpus, length: int, max_len: int | None = None) -> list[Segment]:
    if length < 2:
        raise ValueError("segment length must be at least 2")
    if max_len is not None and length > max_len - 1:
        raise ValueError(f"segment length {length} leaves no room for <s> within max_len {max_len}")
    out = []
    for doc_id, doc in zip(corpus.doc_ids, corpus.documents):
        for off in range(0, len(doc), length):
            window = doc[off:off + length]
            if len(window) < length and len(window) < MIN_TAIL:
                continue
            out.append(Segment(np.concatenate([[BOS_ID], window]).astype(np.int64),
                               corpus.domain, doc_id, off))
    return out


def pad_segments(segments: Sequence) -> np.ndarray:
    arrays = [np.asarray(s.ids if isinstance(s, Segment) else s) for s in segments]
    T = max(len(a) for a in arrays)
    out = np.full((len(arrays), T), PAD_ID, dtype=np.int64)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = a
    return out


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    seed: int
    corruption: np.ndarray | None = None  # 0 none, 1 mask, 2 random, 3 keep

    @property
    def num_targets(self) -> int:
        return int(self.target_mask.sum())


def mask_batch(segments: Sequence, rate: float, seed: int, vocab_size: int = 512) -> MaskedBatch:
    """Select each ordinary position with probability ``rate``; corrupt 80/10/10."""
    if not 0.0 < rate < 1.0:
        raise ValueError("mask rate must lie in (0, 1)")
    ids = pad_segments(segments)
    eligible = ids >= NUM_SPECIAL
    rng = np.random.default_rng(seed)
    for _ in range(2):
        selected = (rng.random(ids.shape) < rate) & eligible
        if selected.any():
            break
    else:
        raise NoTargetsError("masking produced no targets after one resample")
    u = rng.random(ids.shape)
    rand_hi = min(vocab_size, 256 + NUM_SPECIAL)
    random_tok = rng.integers(NUM_SPECIAL, rand_hi, size=ids.shape)
    corruption = np.zeros(ids.shape, dtype=np.int8)
    corruption[selected & (u < 0.8)] = 1
    corruption[selected & (u >= 0.8) & (u < 0.9)] = 2
    corruption[selected & (u >= 0.9)] = 3
    inputs = ids.copy()
    inputs[corruption == 1] = MASK_ID
    inputs[corruption == 2] = random_tok[corruption == 2]
    targets = np.where(selected, ids, PAD_ID)
    return MaskedBatch(inputs, targets, selected, int(seed), corruption)


# experience replay -----------------------------------------------------------

@dataclass(frozen=True)
class ReplayBuffer:
    capacity: int
    segments: tuple
    ratio: float
    indices: tuple
    strategy: str = "random"

    def __len__(self) -> int:
        return len(self.segments)

    def manifest(self) -> dict:
        return {
            "capacity": self.capacity,
            "ratio": self.ratio,
            "strategy": self.strategy,
            "segments": [
                {"index": int(i), "domain": s.domain, "doc_id": int(s.doc_id), "offset": int(s.offset),
                 "strategy": self.strategy}
                for i, s in zip(self.indices, self.segments)
            ],
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))


def build_replay_buffer(segments: Sequence[Segment], selected_indices, capacity: int, ratio: float,
                        strategy: str = "random") -> ReplayBuffer:
    idx = [int(i) for i in selected_indices]
    if not idx:
        raise ValueError("replay buffer needs at least one segment")
    if len(idx) > capacity:
        raise ValueError(f"{len(idx)} selected segments exceed capacity {capacity}")
    if len(set(idx)) != len(idx):
        raise ValueError("duplicate indices in replay selection")
    if min(idx) < 0 or max(idx) >= len(segments):
        raise IndexError("replay index out of range")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("replay ratio must lie in [0, 1]")
    return ReplayBuffer(capacity, tuple(segments[i] for i in idx), float(ratio), tuple(idx), strategy)


def proportional_ratio(source_tokens: int, current_tokens: int, cap: float = 0.5) -> float:
    """Replay share proportional to corpus sizes, capped."""
    return min(cap, source_tokens / (source_tokens + current_tokens))


@dataclass
class MixedBatch:
    segments: list
    from_replay: np.ndarray

    @property
    def replay_fraction(self) -> float:
        return float(self.from_replay.mean())


def replay_count(ratio: float, batch_size: int, rng: np.random.Generator) -> int:
    # stochastic rounding keeps the expected share exactly at ratio
    x = ratio * batch_size
    base = math.floor(x)
    frac = x - base
    return int(base + (frac > 0 and rng.random() < frac))


def mix_batch(current_segments: Sequence, buffer: ReplayBuffer | None, batch_size: int,
              rng: np.random.Generator, ratio: float | None = None) -> MixedBatch:
    """Replace a ``ratio`` share of a current-domain batch with replay draws, then shuffle.

    ``current_segments`` supplies the next items of the current-domain stream; only the
    first ``batch_size - n_replay`` are consumed.
    """
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    ratio = (buffer.ratio if buffer is not None else 0.0) if ratio is None else ratio
    n_replay = replay_count(ratio, batch_size, rng) if ratio > 0 else 0
    if n_replay and (buffer is None or len(buffer) == 0):
        raise ValueError("replay requested from an empty buffer")
    n_cur = batch_size - n_replay
    if len(current_segments) < n_cur:
        raise ValueError("not enough current-domain segments for the batch")
    items = list(current_segments[:n_cur])
    if n_replay:
        picks = rng.integers(0, len(buffer), size=n_replay)
        items += [buffer.segments[i] for i in picks]
    flags = np.array([False] * n_cur + [True] * n_replay)
    perm = rng.permutation(batch_size)
    return MixedBatch([items[i] for i in perm], flags[perm])
