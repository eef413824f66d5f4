"""Synthetic majority-vote classification task and TSV dataset I/O."""
from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, TaskError
from .vocab import RESERVED_TOKENS, Vocabulary


@dataclass(frozen=True)
class SyntheticTask:
    """Sequences over ``vocab_size`` ids (4 reserved) labelled by the class whose
    tokens occur most often; ties go to the lowest class id.

    Each class owns ``tokens_per_class`` ids; the rest are distractors.  Token
    frequencies inside every group follow a Zipf law so that importance scores
    spread out.
    """

    vocab_size: int = 2000
    num_classes: int = 4
    tokens_per_class: int = 150
    min_len: int = 9
    max_len: int = 16
    max_class_count: int = 3
    zipf: float = 1.0
    seed: int = 0

    def __post_init__(self):
        n_reserved = len(RESERVED_TOKENS)
        if self.vocab_size < self.num_classes + n_reserved:
            raise TaskError(f"vocab_size {self.vocab_size} < classes + {n_reserved} reserved")
        if self.num_classes < 1 or self.tokens_per_class < 1:
            raise TaskError("need at least one class and one token per class")
        if self.num_classes * self.tokens_per_class > self.vocab_size - n_reserved:
            raise TaskError("class token groups do not fit in the vocabulary")
        if not 1 <= self.min_len <= self.max_len:
            raise TaskError("need 1 <= min_len <= max_len")
        if self.max_class_count < 1:
            raise TaskError("max_class_count must be >= 1")
        # worst case: winner count + (C-1) runners-up of count-1
        if self.max_class_count + (self.num_classes - 1) * (self.max_class_count - 1) > self.min_len:
            raise TaskError("min_len too short for max_class_count")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTask":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown task keys: {sorted(unknown)}")
        return cls(**d)

    # -- vocabulary layout ----------------------------------------------
    def groups(self) -> tuple[list[np.ndarray], np.ndarray]:
        """Class token id groups and the distractor ids, fixed by ``seed``."""
        n_reserved = len(RESERVED_TOKENS)
        ids = np.arange(n_reserved, self.vocab_size)
        perm = np.random.default_rng([self.seed, 7]).permutation(ids)
        m = self.tokens_per_class
        classes = [np.sort(perm[c * m:(c + 1) * m]) for c in range(self.num_classes)]
        distractors = np.sort(perm[self.num_classes * m:])
        return classes, distractors

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(list(RESERVED_TOKENS) + [f"t{i}" for i in range(len(RESERVED_TOKENS), self.vocab_size)])

    def label_of(self, ids) -> int:
        classes, _ = self.groups()
        return _majority(ids, classes)

    # -- sampling --------------------------------------------------------
    def sample(self, n: int, rng: np.random.Generator) -> tuple[list[list[int]], np.ndarray]:
        classes, distractors = self.groups()
        class_p = [_zipf(len(g), self.zipf) for g in classes]
        distract_p = _zipf(len(distractors), self.zipf)
        seqs, labels = [], np.empty(n, dtype=np.int64)
        # stratified: each class gets floor or ceil of n / C draws
        targets = rng.permutation(np.arange(n) % self.num_classes)
        for k in range(n):
            y = int(targets[k])
            length = int(rng.integers(self.min_len, self.max_len + 1))
            top = int(rng.integers(1, self.max_class_count + 1))
            counts = np.zeros(self.num_classes, dtype=int)
            counts[y] = top
            for c in range(self.num_classes):
                if c != y and top > 1:
                    counts[c] = int(rng.integers(0, top))
            tokens = []
            for c in range(self.num_classes):
                if counts[c]:
                    tokens.extend(rng.choice(classes[c], size=counts[c], p=class_p[c]).tolist())
            n_fill = length - len(tokens)
            if n_fill > 0:
                tokens.extend(rng.choice(distractors, size=n_fill, p=distract_p).tolist())
            tokens = [int(t) for t in rng.permutation(tokens)]
            label = _majority(tokens, classes)
            assert label == y
            seqs.append(tokens)
            labels[k] = label
        return seqs, labels


def _zipf(n: int, a: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** a
    return w / w.sum()


def _majority(ids, classes) -> int:
    ids = np.asarray(ids)
    counts = [int(np.isin(ids, g).sum()) for g in classes]
    if max(counts) == 0:
        raise TaskError("sequence contains no class token")
    return int(np.argmax(counts))  # argmax returns the lowest index on ties


@dataclass
class Dataset:
    """Token-id sequences (without [CLS]) and integer labels."""

    sequences: list[list[int]]
    labels: np.ndarray

    def __len__(self):
        return len(self.sequences)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset([self.sequences[i] for i in idx], self.labels[idx])


def generate_splits(task: SyntheticTask, n_train: int, n_dev: int, n_test: int) -> dict[str, Dataset]:
    """Independent seed-derived streams per split; dev/test exclude train duplicates."""
    if min(n_train, n_dev, n_test) <= 0:
        raise TaskError("split sizes must be positive")
    streams = np.random.SeedSequence(task.seed).spawn(3)
    out: dict[str, Dataset] = {}
    seen: set[tuple[int, ...]] = set()
    for name, n, ss in zip(("train", "dev", "test"), (n_train, n_dev, n_test), streams):
        rng = np.random.default_rng(ss)
        seqs, labels = [], []
        while len(seqs) < n:
            batch, ys = task.sample(n - len(seqs), rng)
            for s, y in zip(batch, ys):
                key = tuple(s)
                if name != "train" and key in seen:
                    continue
                seqs.append(s)
                labels.append(int(y))
        if name == "train":
            seen.update(tuple(s) for s in seqs)
        out[name] = Dataset(seqs, np.asarray(labels, dtype=np.int64))
    return out


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tsv(path, dataset: Dataset, vocab: Vocabulary) -> None:
    lines = [f"{int(y)}\t{' '.join(vocab.tokens[t] for t in s)}" for s, y in zip(dataset.sequences, dataset.labels)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_tsv(path, vocab: Vocabulary) -> Dataset:
    seqs, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                label, text = line.split("\t", 1)
                labels.append(int(label))
            except ValueError as exc:
                raise TaskError(f"{path}:{lineno}: expected 'label<TAB>tokens'") from exc
            seqs.append(vocab.encode(text))
    return Dataset(seqs, np.asarray(labels, dtype=np.int64))


def gen_data(task: SyntheticTask, n_train: int, n_dev: int, n_test: int, out_dir) -> dict[str, Path]:
    """Write train/dev/test TSVs plus ``vocab.txt`` into ``out_dir``."""
    out_dir = Path(out_dir)
    splits = generate_splits(task, n_train, n_dev, n_test)
    vocab = task.vocabulary()
    paths = {"vocab": out_dir / "vocab.txt"}
    vocab.save(paths["vocab"])
    for name, ds in splits.items():
        paths[name] = out_dir / f"{name}.tsv"
        write_tsv(paths[name], ds, vocab)
    return paths


def to_batch_tensors(sequences, max_len: int, add_cls: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad sequences (prefixed with [CLS]) into id and mask matrices.

    Sequences longer than ``max_len`` are truncated.
    """
    from .vocab import CLS_ID, PAD_ID

    rows = [([CLS_ID] + list(s) if add_cls else list(s))[:max_len] for s in sequences]
    width = max((len(r) for r in rows), default=1)
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.long)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.as_tensor(r, dtype=torch.long)
        mask[i, : len(r)] = 1
    return ids, mask
