"""Vocabulary handling and attention-based hard token pruning.

Token importance accumulates, over every occurrence of a token in a scoring
corpus, the last-layer attention that the occurrence *receives*::

    I(w) += (1 / n_k) * sum_h sum_j A_h[j, pos(w)]

for a sentence of length ``n_k``.  The attention a token *sends* (its own
softmax row) always sums to one per head, so that reading would give every
occurrence the same score; it is kept as ``convention="sent"`` for comparison.
"""
from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import CorpusError, SurgeryError

PAD_ID, UNK_ID, CLS_ID, MASK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[MASK]")
N_RESERVED = len(RESERVED_TOKENS)


def tokenize(text: str, mode: str = "whitespace") -> list[str]:
    if mode == "whitespace":
        return text.split()
    if mode == "char":
        return [ch for ch in text if not ch.isspace()]
    raise ValueError(f"unknown tokenizer mode {mode!r}")


class Vocabulary:
    """Contiguous token ids; ids 0-3 are [PAD], [UNK], [CLS], [MASK]."""

    def __init__(self, tokens: Sequence[str], mode: str = "whitespace"):
        tokens = list(tokens)
        if tuple(tokens[:N_RESERVED]) != RESERVED_TOKENS:
            raise CorpusError("vocabulary must start with the reserved tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.mode = mode

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in tokenize(text, self.mode)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path) -> None:
        from .data import atomic_write_text

        atomic_write_text(path, "\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path, mode: str = "whitespace") -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")], mode)

    def prune(self, remap: "PruneRemap") -> "Vocabulary":
        return Vocabulary([self.tokens[i] for i in remap.retained], self.mode)


def build_vocab(lines: Iterable[str], mode: str = "whitespace") -> Vocabulary:
    """Ids assigned by first occurrence, after the reserved ids."""
    tokens = list(RESERVED_TOKENS)
    seen = set(tokens)
    for line in lines:
        for tok in tokenize(line, mode):
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    if len(tokens) == N_RESERVED:
        raise CorpusError("corpus contains no tokens")
    return Vocabulary(tokens, mode)


@dataclass
class ImportanceTable:
    importance: np.ndarray
    counts: np.ndarray
    sentences: int = 0
    heads: int = 0
    convention: str = "received"
    layer: str = "last"
    truncated: int = 0

    @classmethod
    def empty(cls, vocab_size: int, heads: int = 0, convention: str = "received") -> "ImportanceTable":
        return cls(np.zeros(vocab_size), np.zeros(vocab_size, dtype=np.int64), heads=heads, convention=convention)

    @property
    def vocab_size(self) -> int:
        return len(self.importance)

    def covered(self) -> np.ndarray:
        """Ids that occurred in the corpus, plus the reserved ids."""
        ids = set(np.flatnonzero(self.counts).tolist()) | set(range(N_RESERVED))
        return np.array(sorted(ids), dtype=np.int64)

    def merge(self, other: "ImportanceTable") -> "ImportanceTable":
        if other.vocab_size != self.vocab_size or other.convention != self.convention:
            raise ValueError("cannot merge tables with different vocabularies or conventions")
        return ImportanceTable(
            self.importance + other.importance,
            self.counts + other.counts,
            self.sentences + other.sentences,
            max(self.heads, other.heads),
            self.convention,
            self.layer,
            self.truncated + other.truncated,
        )

    def ranking(self) -> np.ndarray:
        """Ids sorted by importance descending, then id ascending."""
        ids = np.arange(self.vocab_size)
        return np.lexsort((ids, -self.importance))

    def to_tsv(self, vocab: Vocabulary | None = None) -> str:
        keep = set(self.covered().tolist())
        lines = []
        for i in self.ranking():
            if i not in keep:
                continue
            token = vocab.tokens[i] if vocab is not None else str(i)
            lines.append(f"{token}\t{i}\t{self.importance[i]:.17g}\t{self.counts[i]}")
        return "\n".join(lines) + "\n"

    def save_tsv(self, path, vocab: Vocabulary | None = None) -> None:
        from .data import atomic_write_text

        atomic_write_text(path, self.to_tsv(vocab))


def score_importance(model, sentences: Sequence[Sequence[int]], convention: str = "received",
                     batch_size: int = 64) -> ImportanceTable:
    """Accumulate last-layer attention importance over ``sentences``.

    Each sentence is scored with a leading [CLS]; sentences longer than the
    model's ``max_seq_len`` are truncated and counted in ``table.truncated``.
    """
    from .data import to_batch_tensors
    from .model import run_forward

    if convention not in ("received", "sent"):
        raise ValueError("convention must be 'received' or 'sent'")
    spec = model.spec
    table = ImportanceTable.empty(spec.vocab_size, spec.num_heads, convention)
    sentences = list(sentences)
    if any(len(s) == 0 for s in sentences):
        raise CorpusError("empty sentence in scoring corpus")
    max_len = spec.max_seq_len
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start:start + batch_size]
        table.truncated += sum(len(s) + 1 > max_len for s in chunk)
        ids, mask = to_batch_tensors(chunk, max_len)
        with torch.no_grad():
            trace = run_forward(model, ids, mask, capture_attention=True)
        accumulate_importance(table, trace.attentions[-1].double().numpy(), ids.numpy(), mask.numpy())
    return table


def accumulate_importance(table: ImportanceTable, att: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> None:
    """Add one batch of attention maps ``att`` [batch, heads, query, key] to ``table`` in place."""
    m = np.asarray(mask, dtype=np.float64)
    lengths = m.sum(1)
    if table.convention == "received":
        per_pos = (att * m[:, None, :, None]).sum(axis=(1, 2))
    else:
        per_pos = (att * m[:, None, None, :]).sum(axis=(1, 3))
    per_pos = per_pos / lengths[:, None]
    valid = m.astype(bool)
    np.add.at(table.importance, np.asarray(ids)[valid], per_pos[valid])
    np.add.at(table.counts, np.asarray(ids)[valid], 1)
    table.sentences += len(m)


@dataclass
class PruneRemap:
    """Old id -> new id for retained tokens (-1 for dropped ones)."""

    old_to_new: np.ndarray
    retained: np.ndarray
    unk_id: int = UNK_ID
    policy: str = "dropped->UNK"

    @property
    def k(self) -> int:
        return len(self.retained)

    @property
    def old_vocab_size(self) -> int:
        return len(self.old_to_new)

    def is_identity(self) -> bool:
        return self.k == self.old_vocab_size

    def transform_ids(self, ids: Sequence[int]) -> list[int]:
        mapped = self.old_to_new[np.asarray(ids, dtype=np.int64)]
        return np.where(mapped < 0, self.unk_id, mapped).tolist()

    def transform(self, sequences: Iterable[Sequence[int]]) -> list[list[int]]:
        return [self.transform_ids(s) if len(s) else [] for s in sequences]

    def to_meta(self) -> dict:
        return {"retained": self.retained.tolist(), "old_vocab_size": self.old_vocab_size}

    @classmethod
    def from_meta(cls, meta: dict) -> "PruneRemap | None":
        """Inverse of :meth:`to_meta`; ``None`` when ``meta`` describes no pruning."""
        if "retained" not in meta:
            return None
        retained = np.asarray(meta["retained"], dtype=np.int64)
        old_to_new = np.full(meta["old_vocab_size"], -1, dtype=np.int64)
        old_to_new[retained] = np.arange(len(retained))
        return cls(old_to_new, retained)

    def id_map(self) -> torch.Tensor:
        """Lookup tensor usable as ``id_map[old_ids]`` on batched ids."""
        return torch.as_tensor(np.where(self.old_to_new < 0, self.unk_id, self.old_to_new), dtype=torch.long)


def select_topk(table: ImportanceTable, k: int) -> PruneRemap:
    """Keep the ``k`` most important ids; reserved ids are always kept and count
    toward ``k``.  Ties go to the lower id; new ids preserve old order."""
    v = table.vocab_size
    if k < N_RESERVED:
        raise ValueError(f"k must be at least {N_RESERVED} (the reserved ids)")
    if k > v:
        warnings.warn(f"k={k} exceeds vocabulary size {v}; clamping", stacklevel=2)
        k = v
    order = [i for i in table.ranking() if i >= N_RESERVED]
    retained = np.array(sorted(list(range(N_RESERVED)) + order[: k - N_RESERVED]), dtype=np.int64)
    old_to_new = np.full(v, -1, dtype=np.int64)
    old_to_new[retained] = np.arange(k)
    return PruneRemap(old_to_new, retained)


def apply_prune(model, remap: PruneRemap):
    """Copy of ``model`` whose token embedding keeps only the retained rows."""
    if remap.old_vocab_size != model.spec.vocab_size:
        raise SurgeryError(
            f"remap built for {remap.old_vocab_size} ids, model has {model.spec.vocab_size}"
        )
    out = copy.deepcopy(model)
    if remap.is_identity():
        return out
    rows = torch.as_tensor(remap.retained)
    out.token_embeddings = nn.Parameter(model.token_embeddings.detach()[rows].clone())
    out.spec = model.spec.replace(vocab_size=remap.k)
    return out
