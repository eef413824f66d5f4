"""scikit-learn style wrappers around the training, pruning and quantization code.

Inputs ``X`` are token-id sequences (a list of int lists, or a 2-D integer
array whose zeros are padding) without the leading [CLS].
"""
from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset, to_batch_tensors
from .distill import (DistillPlan, finetune_teacher, predict_logits, prepare_student,
                      run_distillation)
from .model import ModelSpec, TransformerModel, build_model
from .numerics import softmax_rows
from .quant import QuantConfig, quantize_model
from .vocab import N_RESERVED, PAD_ID, apply_prune, score_importance, select_topk


# -- validation helpers ------------------------------------------------------

def check_sequences(X, vocab_size: int | None = None, allow_empty: bool = False) -> list[list[int]]:
    """Normalise ``X`` to a list of int lists.

    A 2-D array has its padding (id 0) stripped from each row.
    """
    if isinstance(X, np.ndarray) or isinstance(X, torch.Tensor):
        arr = np.asarray(X)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D id array, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise TypeError(f"token ids must be integers, got dtype {arr.dtype}")
        seqs = [[int(t) for t in row if t != PAD_ID] for row in arr]
    else:
        try:
            seqs = [[int(t) for t in row] for row in X]
        except TypeError as exc:
            raise TypeError("X must be a sequence of token-id sequences") from exc
    if not seqs:
        raise ValueError("X holds no sequences")
    for i, s in enumerate(seqs):
        if not s and not allow_empty:
            raise ValueError(f"sequence {i} is empty")
        if s and min(s) < 0:
            raise ValueError(f"sequence {i} has a negative id")
        if vocab_size is not None and s and max(s) >= vocab_size:
            raise ValueError(f"sequence {i} has id {max(s)} outside the vocabulary of {vocab_size}")
    return seqs


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    if len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} sequences")
    return y


def _as_model(obj) -> TransformerModel:
    if isinstance(obj, TransformerModel):
        return obj
    check_is_fitted(obj, "model_")
    return obj.model_


def _predict_proba(model: TransformerModel, seqs, id_map=None) -> np.ndarray:
    ds = Dataset(seqs, np.zeros(len(seqs), dtype=np.int64))
    logits = predict_logits(model, ds, id_map=id_map)
    return softmax_rows(logits).detach().double().numpy()


class _ClassifierBase(ClassifierMixin, BaseEstimator):
    """Shared predict surface; subclasses set ``model_`` and ``classes_``."""

    def _encode_labels(self, y) -> np.ndarray:
        self.classes_, encoded = np.unique(y, return_inverse=True)
        return encoded.astype(np.int64)

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        seqs = check_sequences(X, self.model_.spec.vocab_size)
        return _predict_proba(self.model_, seqs)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        seqs = check_sequences(X, self.model_.spec.vocab_size)
        ds = Dataset(seqs, np.zeros(len(seqs), dtype=np.int64))
        return predict_logits(self.model_, ds).detach().double().numpy()

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(1)]


class TransformerClassifier(_ClassifierBase):
    """Encoder classifier trained from scratch with Adam on cross-entropy."""

    def __init__(self, vocab_size=None, max_seq_len=64, embed_dim=128, hidden_dim=128,
                 intermediate_dim=512, num_layers=2, num_heads=4, share_layers=False,
                 factorized_embedding=False, steps=1000, lr=1e-3, batch_size=32, seed=0):
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.intermediate_dim = intermediate_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.share_layers = share_layers
        self.factorized_embedding = factorized_embedding
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _spec(self, vocab_size: int, num_classes: int) -> ModelSpec:
        return ModelSpec(vocab_size=vocab_size, max_seq_len=self.max_seq_len, embed_dim=self.embed_dim,
                         hidden_dim=self.hidden_dim, intermediate_dim=self.intermediate_dim,
                         num_layers=self.num_layers, num_heads=self.num_heads,
                         share_layers=self.share_layers, factorized_embedding=self.factorized_embedding,
                         num_classes=num_classes, seed=self.seed)

    def fit(self, X, y):
        seqs = check_sequences(X, self.vocab_size)
        labels = self._encode_labels(check_labels(y, len(seqs)))
        vocab = self.vocab_size or max(max(s) for s in seqs) + 1
        self.model_ = build_model(self._spec(vocab, len(self.classes_)))
        _, self.history_ = finetune_teacher(self.model_, Dataset(seqs, labels), self.steps, self.lr,
                                            seed=self.seed, batch_size=self.batch_size)
        return self

    @classmethod
    def from_model(cls, model: TransformerModel, classes=None) -> "TransformerClassifier":
        """Wrap an already-trained model."""
        s = model.spec
        est = cls(vocab_size=s.vocab_size, max_seq_len=s.max_seq_len, embed_dim=s.embed_dim,
                  hidden_dim=s.hidden_dim, intermediate_dim=s.intermediate_dim, num_layers=s.num_layers,
                  num_heads=s.num_heads, share_layers=s.share_layers,
                  factorized_embedding=s.factorized_embedding, seed=s.seed)
        est.model_ = model
        est.classes_ = np.arange(s.num_classes) if classes is None else np.asarray(classes)
        return est


class CrossDistillationClassifier(_ClassifierBase):
    """Student trained against ``teacher`` by KD, PI-KD or cross-distillation.

    ``teacher`` is a fitted :class:`TransformerClassifier` or a model.  The
    teacher is copied; with ``mode="cross-kd"`` the copy (``teacher_``) is
    updated alongside the student.
    """

    def __init__(self, teacher=None, mode="cross-kd", embed_dim=64, hidden_dim=64, intermediate_dim=256,
                 num_layers=2, num_heads=4, share_layers=True, factorized_embedding=True, teacher_lr=1e-5, student_lr=1e-3,
                 beta_mse=1.0, beta_kl=1.0, temperature=1.0, steps=1000, batch_size=32, seed=0):
        self.teacher = teacher
        self.mode = mode
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.intermediate_dim = intermediate_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.share_layers = share_layers
        self.factorized_embedding = factorized_embedding
        self.teacher_lr = teacher_lr
        self.student_lr = student_lr
        self.beta_mse = beta_mse
        self.beta_kl = beta_kl
        self.temperature = temperature
        self.steps = steps
        self.batch_size = batch_size
        self.seed = seed

    def plan(self) -> DistillPlan:
        return DistillPlan(mode=self.mode, teacher_lr=self.teacher_lr, student_lr=self.student_lr,
                           beta_mse=self.beta_mse, beta_kl=self.beta_kl, temperature=self.temperature,
                           steps=self.steps, batch_size=self.batch_size, seed=self.seed)

    def fit(self, X, y):
        if self.teacher is None:
            raise ValueError("a fitted teacher is required")
        teacher = copy.deepcopy(_as_model(self.teacher))
        t_spec = teacher.spec
        seqs = check_sequences(X, t_spec.vocab_size)
        labels = check_labels(y, len(seqs))
        known = getattr(self.teacher, "classes_", None)
        if known is not None:
            self.classes_ = np.asarray(known)
            lookup = {c: i for i, c in enumerate(self.classes_.tolist())}
            try:
                labels = np.array([lookup[v] for v in labels.tolist()], dtype=np.int64)
            except KeyError as exc:
                raise ValueError(f"label {exc.args[0]!r} unknown to the teacher") from exc
        else:
            labels = self._encode_labels(labels)
        spec = ModelSpec(vocab_size=t_spec.vocab_size, max_seq_len=t_spec.max_seq_len,
                         embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
                         intermediate_dim=self.intermediate_dim, num_layers=self.num_layers,
                         num_heads=self.num_heads, share_layers=self.share_layers,
                         factorized_embedding=self.factorized_embedding,
                         num_classes=t_spec.num_classes, seed=self.seed)
        student = prepare_student(teacher, build_model(spec), self.mode)
        result = run_distillation(teacher, student, Dataset(seqs, labels), self.plan())
        self.model_, self.teacher_, self.history_ = result.student, result.teacher, result.history
        return self


class TokenImportancePruner(TransformerMixin, BaseEstimator):
    """Scores tokens by the last-layer attention they receive and keeps the top ``k``.

    ``k`` may be an int (ids kept, reserved ids included) or a float fraction
    of the vocabulary.  ``transform`` rewrites sequences into the pruned id
    space, mapping dropped tokens to [UNK].
    """

    def __init__(self, model=None, k=0.5, convention="received", batch_size=64):
        self.model = model
        self.k = k
        self.convention = convention
        self.batch_size = batch_size

    def _resolve_k(self, vocab_size: int) -> int:
        if isinstance(self.k, float):
            if not 0 < self.k <= 1:
                raise ValueError("a fractional k must lie in (0, 1]")
            return max(N_RESERVED, int(round(self.k * vocab_size)))
        return int(self.k)

    def fit(self, X, y=None):
        model = _as_model(self.model)
        seqs = check_sequences(X, model.spec.vocab_size)
        self.importance_ = score_importance(model, seqs, self.convention, self.batch_size)
        self.remap_ = select_topk(self.importance_, self._resolve_k(model.spec.vocab_size))
        return self

    def transform(self, X):
        check_is_fitted(self, "remap_")
        seqs = check_sequences(X, self.remap_.old_vocab_size, allow_empty=True)
        return self.remap_.transform(seqs)

    def prune_model(self, model=None) -> TransformerModel:
        """Copy of the (fitted or given) model with only the retained embedding rows."""
        check_is_fitted(self, "remap_")
        return apply_prune(_as_model(model if model is not None else self.model), self.remap_)


class ModuleWiseQuantizer(BaseEstimator):
    """Post-training int8 quantization calibrated on the sequences passed to ``fit``."""

    def __init__(self, model=None, group_size=1, iters=200, lr=1e-4, calibration_size=256,
                 compensate=True, quantize_activations=True):
        self.model = model
        self.group_size = group_size
        self.iters = iters
        self.lr = lr
        self.calibration_size = calibration_size
        self.compensate = compensate
        self.quantize_activations = quantize_activations

    def config(self) -> QuantConfig:
        return QuantConfig(group_size=self.group_size, iters=self.iters, lr=self.lr,
                           calibration_size=self.calibration_size, compensate=self.compensate,
                           quantize_activations=self.quantize_activations)

    def fit(self, X, y=None):
        model = _as_model(self.model)
        seqs = check_sequences(X, model.spec.vocab_size)[: self.calibration_size]
        ids, mask = to_batch_tensors(seqs, model.spec.max_seq_len)
        self.quantized_model_, self.report_ = quantize_model(model, ids, mask, self.config())
        self.classes_ = getattr(self.model, "classes_", np.arange(model.spec.num_classes))
        return self

    def decision_function(self, X) -> np.ndarray:
        """Logits from the integer inference path."""
        check_is_fitted(self, "quantized_model_")
        q = self.quantized_model_
        seqs = check_sequences(X, q.spec.vocab_size)
        out = []
        for start in range(0, len(seqs), 256):
            ids, mask = to_batch_tensors(seqs[start:start + 256], q.spec.max_seq_len)
            out.append(q.quantized_forward(ids.numpy(), mask.numpy()))
        return np.concatenate(out).astype(np.float64)

    def predict(self, X) -> np.ndarray:
        return np.asarray(self.classes_)[self.decision_function(X).argmax(1)]
