"""Interaction-log ingestion, filtering, sequence building and batching."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import container

FORMATS = ("movielens_dat", "csv", "tsv", "yelp_json")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user_id: str
    item_id: str
    rating: Optional[float]
    timestamp: int


@dataclass
class UserSequence:
    user_index: int
    items: List[int]
    split_point: int

    @property
    def train(self) -> List[int]:
        return self.items[:self.split_point]

    @property
    def test(self) -> List[int]:
        return self.items[self.split_point:]

    @property
    def train_length(self) -> int:
        return self.split_point


@dataclass
class Vocab:
    item_ids: List[str] = field(default_factory=list)  # position i holds item index i + 1
    user_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.item_index = {k: i + 1 for i, k in enumerate(self.item_ids)}
        self.user_index = {k: i for i, k in enumerate(self.user_ids)}

    @property
    def n_items(self) -> int:
        """Vocabulary size including the padding index 0."""
        return len(self.item_ids) + 1

    @classmethod
    def build(cls, records: Sequence[RawInteraction]) -> "Vocab":
        items = dict.fromkeys(r.item_id for r in records)
        users = dict.fromkeys(r.user_id for r in records)
        return cls(list(items), list(users))


@dataclass
class PaddedBatch:
    inputs: np.ndarray   # [b, M] item indices, 0 = padding
    targets: np.ndarray  # [b, M] next-item indices
    mask: np.ndarray     # [b, M] 1 where targets holds a real next item
    user_indices: np.ndarray
    lengths: np.ndarray  # real items per row

    def trimmed(self) -> "PaddedBatch":
        """Drop trailing columns that are padding for every row.

        Padding sits at the end and the encoder is causal, so trimming
        never changes any real position's output.
        """
        T = max(int(self.lengths.max()), 1)
        return PaddedBatch(self.inputs[:, :T], self.targets[:, :T], self.mask[:, :T],
                           self.user_indices, self.lengths)


# -- loading ----------------------------------------------------------------

def _parse_fields(user, item, rating, ts, lineno, path):
    try:
        r = None if rating in ("", None) else float(rating)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column 3 (rating) is not numeric: {rating!r}") from None
    try:
        t = int(float(ts))
    except (TypeError, ValueError):
        raise DataError(f"{path}:{lineno}: column 4 (timestamp) is not numeric: {ts!r}") from None
    if t < 0:
        raise DataError(f"{path}:{lineno}: column 4 (timestamp) is negative")
    if not user:
        raise DataError(f"{path}:{lineno}: column 1 (user) is empty")
    if not item:
        raise DataError(f"{path}:{lineno}: column 2 (item) is empty")
    return RawInteraction(user, item, r, t)


def _yelp_epoch(date: str) -> int:
    dt = _dt.datetime.fromisoformat(date)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=_dt.timezone.utc)
    return int(dt.timestamp())


def load_interactions(path, format: str) -> List[RawInteraction]:
    """Parse a ratings log. Every row parses or a :class:`DataError` names the line."""
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {', '.join(FORMATS)}")
    path = Path(path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        if format == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) < 4:
                    raise DataError(f"{path}:{lineno}: expected 4 columns, got {len(row)}")
                records.append(_parse_fields(*row[:4], lineno, path))
        elif format == "yelp_json":
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    rec = RawInteraction(str(obj["user_id"]), str(obj["business_id"]),
                                         float(obj["stars"]), _yelp_epoch(obj["date"]))
                except (ValueError, KeyError, TypeError) as exc:
                    raise DataError(f"{path}:{lineno}: bad review record ({exc})") from None
                records.append(rec)
        else:
            sep = "::" if format == "movielens_dat" else "\t"
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\r\n")
                if not line:
                    continue
                row = line.split(sep)
                if len(row) != 4:
                    raise DataError(f"{path}:{lineno}: expected 4 '{sep}'-separated columns, got {len(row)}")
                records.append(_parse_fields(*row, lineno, path))
    return records


# -- preprocessing ----------------------------------------------------------

def binarize(records: Sequence[RawInteraction], threshold: float = 3) -> List[RawInteraction]:
    """Keep ratings strictly above ``threshold``; rating-free records pass through."""
    return [RawInteraction(r.user_id, r.item_id, 1.0, r.timestamp)
            for r in records if r.rating is None or r.rating > threshold]


def k_core_filter(records: Sequence[RawInteraction], min_user: int = 5,
                  min_item: int = 5) -> List[RawInteraction]:
    records = list(records)
    while True:
        users = Counter(r.user_id for r in records)
        items = Counter(r.item_id for r in records)
        kept = [r for r in records if users[r.user_id] >= min_user and items[r.item_id] >= min_item]
        if len(kept) == len(records):
            break
        records = kept
    if not records:
        raise DataError("dataset emptied by filtering")
    return records


def split_point(n: int) -> int:
    """ceil(0.8 n) in integer arithmetic."""
    return (4 * n + 4) // 5


def build_sequences(records: Sequence[RawInteraction], vocab: Vocab) -> List[UserSequence]:
    per_user: Dict[str, list] = defaultdict(list)
    for r in records:
        per_user[r.user_id].append(r)
    out = []
    for uid in vocab.user_ids:
        rows = sorted(per_user[uid], key=lambda r: r.timestamp)  # stable: ties keep file order
        items = [vocab.item_index[r.item_id] for r in rows]
        out.append(UserSequence(vocab.user_index[uid], items, split_point(len(items))))
    return out


def pad_prefix(prefix: Sequence[int], M: int):
    """Inputs, targets and mask for one train prefix cut to its last ``M`` items."""
    kept = list(prefix[-M:])
    L = len(kept)
    inputs = np.zeros(M, dtype=np.int64)
    targets = np.zeros(M, dtype=np.int64)
    mask = np.zeros(M, dtype=np.int64)
    inputs[:L] = kept
    if L > 1:
        targets[:L - 1] = kept[1:]
        mask[:L - 1] = 1
    return inputs, targets, mask, L


def make_batches(sequences: Sequence[UserSequence], M: int, batch_size: int,
                 shuffle_seed: Optional[int] = None) -> List[PaddedBatch]:
    if M < 2:
        raise ValueError("M must be at least 2")
    order = np.arange(len(sequences))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(sequences))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [sequences[i] for i in order[start:start + batch_size]]
        rows = [pad_prefix(s.train, M) for s in chunk]
        batches.append(PaddedBatch(
            inputs=np.stack([r[0] for r in rows]),
            targets=np.stack([r[1] for r in rows]),
            mask=np.stack([r[2] for r in rows]),
            user_indices=np.array([s.user_index for s in chunk], dtype=np.int64),
            lengths=np.array([r[3] for r in rows], dtype=np.int64),
        ))
    return batches


def dataset_stats(sequences: Sequence[UserSequence]) -> dict:
    users = len(sequences)
    records = sum(len(s.items) for s in sequences)
    items = len({i for s in sequences for i in s.items})
    return {
        "users": users,
        "items": items,
        "records": records,
        "avg_length": records / users if users else 0.0,
        "sparsity": 1 - records / (users * items) if users and items else 0.0,
    }


# -- the preprocessed dataset and its cache ----------------------------------

@dataclass
class SequenceDataset:
    sequences: List[UserSequence]
    vocab: Vocab

    @property
    def n_items(self) -> int:
        return self.vocab.n_items

    def stats(self) -> dict:
        return dataset_stats(self.sequences)

    def to_bytes(self) -> bytes:
        lengths = np.array([len(s.items) for s in self.sequences], dtype=np.int64)
        arrays = {
            "items": np.array([i for s in self.sequences for i in s.items], dtype=np.int64),
            "lengths": lengths,
            "split_points": np.array([s.split_point for s in self.sequences], dtype=np.int64),
            "user_indices": np.array([s.user_index for s in self.sequences], dtype=np.int64),
        }
        meta = {"kind": "dataset", "item_ids": self.vocab.item_ids, "user_ids": self.vocab.user_ids}
        return container.dumps(arrays, meta)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())
        Path(str(path) + ".stats.json").write_text(json.dumps(self.stats(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        arrays, meta = container.load(path)
        if meta.get("kind") != "dataset":
            raise container.ContainerError(f"{path} is not a dataset cache")
        vocab = Vocab(meta["item_ids"], meta["user_ids"])
        seqs, off = [], 0
        for n, sp, u in zip(arrays["lengths"], arrays["split_points"], arrays["user_indices"]):
            seqs.append(UserSequence(int(u), arrays["items"][off:off + n].tolist(), int(sp)))
            off += n
        return cls(seqs, vocab)


def preprocess(records: Sequence[RawInteraction], threshold: float = 3,
               min_core: int = 5) -> SequenceDataset:
    kept = k_core_filter(binarize(records, threshold), min_core, min_core)
    vocab = Vocab.build(kept)
    return SequenceDataset(build_sequences(kept, vocab), vocab)
