"""Interaction-sequence ingestion, leave-one-out splitting and batching.

Dataset files hold one user per line: ``user_id item item item ...`` with
items in chronological order.  Item ids are remapped densely to 1..V and id 0
is reserved for padding.
"""

from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class UserSequence:
    user_id: int
    items: list[int]


@dataclass
class SplitDataset:
    users: list[int]
    train: list[list[int]]
    valid: list[int]
    test: list[int]
    num_items: int
    vocab: dict[int, int] = field(default_factory=dict)

    @property
    def num_users(self) -> int:
        return len(self.users)

    def context(self, which: str, idx: int) -> list[int]:
        """Model input used to predict the held-out item of user ``idx``."""
        if which == "valid":
            return self.train[idx]
        if which == "test":
            return self.train[idx] + [self.valid[idx]]
        raise ValueError(f"unknown split {which!r}")

    def target(self, which: str, idx: int) -> int:
        return self.valid[idx] if which == "valid" else self.test[idx]


@dataclass
class PaddedBatch:
    input_ids: np.ndarray  # [B, T] int64
    target_ids: np.ndarray  # [B, T] int64; target at t is the item after input t
    validity: np.ndarray  # [B, T] bool
    rows: np.ndarray  # user indices into the split


def parse_dataset(path: str | os.PathLike) -> list[UserSequence]:
    """Read the raw file without filtering or remapping."""
    seqs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                nums = [int(p) for p in parts]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer token in {line.strip()!r}") from None
            if any(n <= 0 for n in nums):
                raise DatasetError(f"{path}:{lineno}: ids must be positive integers")
            seqs.append(UserSequence(nums[0], nums[1:]))
    if not seqs:
        raise DatasetError(f"{path}: dataset is empty")
    return seqs


def kcore_filter(seqs: list[UserSequence], min_count: int = 5, iterative: bool = True) -> list[UserSequence]:
    """Drop users and items with fewer than ``min_count`` interactions.

    With ``iterative`` the two passes repeat until nothing changes.
    """
    seqs = [UserSequence(s.user_id, list(s.items)) for s in seqs]
    while True:
        item_counts = Counter(i for s in seqs for i in s.items)
        kept = []
        changed = False
        for s in seqs:
            items = [i for i in s.items if item_counts[i] >= min_count]
            if len(items) != len(s.items):
                changed = True
            if len(items) >= min_count:
                kept.append(UserSequence(s.user_id, items))
            else:
                changed = True
        seqs = kept
        if not changed or not iterative:
            return seqs


def remap_items(seqs: list[UserSequence]) -> tuple[list[UserSequence], dict[int, int]]:
    """Assign dense ids 1..V in ascending order of the original id."""
    vocab = {orig: new for new, orig in enumerate(sorted({i for s in seqs for i in s.items}), 1)}
    return [UserSequence(s.user_id, [vocab[i] for i in s.items]) for s in seqs], vocab


def load_dataset(
    path: str | os.PathLike, min_count: int = 5, iterative: bool = True
) -> tuple[list[UserSequence], dict[int, int]]:
    seqs = parse_dataset(path)
    filtered = kcore_filter(seqs, min_count, iterative)
    log.info("k-core filter kept %d of %d users", len(filtered), len(seqs))
    if not filtered:
        raise DatasetError(f"{path}: no user survives {min_count}-core filtering")
    return remap_items(filtered)


def write_vocab(vocab: dict[int, int], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for orig, new in sorted(vocab.items(), key=lambda kv: kv[1]):
            fh.write(f"{orig} {new}\n")


def read_vocab(path: str | os.PathLike) -> dict[int, int]:
    vocab = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 'original_id mapped_id'")
            vocab[int(parts[0])] = int(parts[1])
    return vocab


def write_dataset(seqs: list[UserSequence], path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(" ".join(map(str, [s.user_id, *s.items])) + "\n")


def leave_one_out_split(seqs: list[UserSequence], num_items: int | None = None) -> SplitDataset:
    users, train, valid, test = [], [], [], []
    for s in seqs:
        if len(s.items) < 3:
            raise SplitError(f"user {s.user_id} has {len(s.items)} items; leave-one-out needs at least 3")
        users.append(s.user_id)
        train.append(list(s.items[:-2]))
        valid.append(s.items[-2])
        test.append(s.items[-1])
    if num_items is None:
        num_items = max((max(s.items) for s in seqs), default=0)
    return SplitDataset(users, train, valid, test, num_items)


def save_split(split: SplitDataset, out_dir: str | os.PathLike) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "train.txt"), "w") as fh:
        for u, items in zip(split.users, split.train):
            fh.write(" ".join(map(str, [u, *items])) + "\n")
    for name, col in (("valid", split.valid), ("test", split.test)):
        with open(os.path.join(out_dir, f"{name}.txt"), "w") as fh:
            for u, item in zip(split.users, col):
                fh.write(f"{u} {item}\n")
    write_vocab(split.vocab, os.path.join(out_dir, "vocab.txt"))


def load_split(data_dir: str | os.PathLike) -> SplitDataset:
    train = parse_dataset(os.path.join(data_dir, "train.txt"))
    held = {}
    for name in ("valid", "test"):
        held[name] = {s.user_id: s.items for s in parse_dataset(os.path.join(data_dir, f"{name}.txt"))}
    vocab = read_vocab(os.path.join(data_dir, "vocab.txt"))
    users = [s.user_id for s in train]
    for name, rows in held.items():
        if set(rows) != set(users) or any(len(v) != 1 for v in rows.values()):
            raise DatasetError(f"{data_dir}/{name}.txt must hold exactly one item per training user")
    return SplitDataset(
        users,
        [s.items for s in train],
        [held["valid"][u][0] for u in users],
        [held["test"][u][0] for u in users],
        num_items=len(vocab),
        vocab=vocab,
    )


def pad_left(items: list[int], max_len: int) -> np.ndarray:
    """Keep the most recent ``max_len`` items, zero-padding on the left."""
    row = np.zeros(max_len, dtype=np.int64)
    tail = items[-max_len:]
    if tail:
        row[max_len - len(tail):] = tail
    return row


def make_batch(split: SplitDataset, rows: np.ndarray, max_len: int) -> PaddedBatch:
    B = len(rows)
    inp = np.zeros((B, max_len), dtype=np.int64)
    tgt = np.zeros((B, max_len), dtype=np.int64)
    for b, r in enumerate(rows):
        seq = split.train[r]
        inp[b] = pad_left(seq[:-1], max_len)
        tgt[b] = pad_left(seq[1:], max_len)
    return PaddedBatch(inp, tgt, (inp != 0) & (tgt != 0), np.asarray(rows))


def trainable_rows(split: SplitDataset) -> np.ndarray:
    return np.array([i for i, s in enumerate(split.train) if len(s) >= 2], dtype=np.int64)


def pad_and_batch(
    split: SplitDataset, max_len: int = 50, batch_size: int = 256, shuffle_seed: int = 0, epoch: int = 0
) -> Iterator[PaddedBatch]:
    """Yield one epoch of training batches in a seeded shuffled order.

    Users whose training prefix has fewer than two items have no
    (input, target) pair and are skipped.
    """
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    rows = trainable_rows(split)
    order = np.random.default_rng([shuffle_seed, epoch]).permutation(rows)
    for start in range(0, len(order), batch_size):
        yield make_batch(split, order[start:start + batch_size], max_len)


def popularity_counts(split: SplitDataset) -> np.ndarray:
    """Training-interaction count per item id; index 0 (padding) stays 0."""
    counts = np.zeros(split.num_items + 1, dtype=np.int64)
    for items in split.train:
        np.add.at(counts, np.asarray(items, dtype=np.int64), 1)
    counts[0] = 0
    return counts


@dataclass
class MarkovTable:
    successors: np.ndarray  # [V+1, 3] item ids; row 0 unused
    probs: np.ndarray  # [V+1, 3]


def make_transition_table(items: int, seed: int, fanout: int = 3) -> MarkovTable:
    rng = np.random.default_rng(seed)
    succ = np.zeros((items + 1, fanout), dtype=np.int64)
    probs = np.zeros((items + 1, fanout))
    for i in range(1, items + 1):
        succ[i] = rng.choice(np.arange(1, items + 1), size=fanout, replace=False)
        probs[i] = rng.dirichlet(np.ones(fanout))
    return MarkovTable(succ, probs)


def synth_generate(
    users: int,
    items: int,
    seed: int,
    noise_rate: float = 0.1,
    min_len: int = 10,
    max_len: int = 40,
    sample_seed: int | None = None,
) -> list[UserSequence]:
    """Sample user sequences from a sparse order-1 Markov chain.

    Each item has three successors with Dirichlet-drawn probabilities.  With
    probability ``noise_rate`` a step jumps to a uniformly drawn item instead.
    """
    if items < 10 or users < 10:
        raise ValueError("synth_generate needs at least 10 users and 10 items")
    if not 0.0 <= noise_rate < 1.0:
        raise ValueError(f"noise_rate {noise_rate} outside [0, 1)")
    table = make_transition_table(items, seed)
    rng = np.random.default_rng([seed, 1] if sample_seed is None else sample_seed)
    out = []
    for u in range(1, users + 1):
        n = int(rng.integers(min_len, max_len + 1))
        seq = [int(rng.integers(1, items + 1))]
        for _ in range(n - 1):
            prev = seq[-1]
            if rng.random() < noise_rate:
                seq.append(int(rng.integers(1, items + 1)))
            else:
                k = rng.choice(table.successors.shape[1], p=table.probs[prev])
                seq.append(int(table.successors[prev, k]))
        out.append(UserSequence(u, seq))
    return out
